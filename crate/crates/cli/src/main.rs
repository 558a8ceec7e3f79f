//! `ecbf`: simulations, gain searches and gain prediction for the ECBF safety filter.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod output;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ecbf_core::predictor::{
    predict_and_filter, train, MlpFile, MlpModel, Sample, TrainConfig, TrainingMeta,
};
use ecbf_core::score::ScoreBoard;
use ecbf_core::search::{
    dataset_from_csv, dataset_to_csv, evaluate_settings, export_dataset, guided_search,
    BoardEvaluator, GridSpec, Setting, SimEvaluator,
};
use ecbf_core::sim::{simulate, RunResult, Scenario, SimError};
use ecbf_core::{CbfParams, ScenarioFile};
use serde_json::json;

const WORKERS_ENV: &str = "ECBF_WORKERS";

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, unreadable or invalid files.
    Usage(String),
    /// Domain precondition violated, e.g. an unsafe initial state.
    Domain(String),
    /// Runtime fault: QP failure, non-finite state, training divergence.
    Fault(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 3,
            CliError::Fault(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Domain(m) | CliError::Fault(m) => m,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::UnsafeInitialState { .. } => CliError::Domain(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "ecbf",
    version,
    about = "ECBF safety filter simulations and CBF gain search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write its trajectory.
    Simulate(SimulateArgs),
    /// Exhaustive search over the scenario's grid block.
    Grid(GridArgs),
    /// Guided search over the scenario's guided block.
    Guided(GuidedArgs),
    /// Train the gain predictor on a dataset CSV.
    Train(TrainArgs),
    /// Predict gains for an obstacle radius, optionally running the filtered simulation.
    Predict(PredictArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON file.
    scenario: PathBuf,
    #[command(flatten)]
    out: OutArgs,
    /// Override the obstacle radius.
    #[arg(long)]
    r_o: Option<f64>,
    #[arg(long)]
    kappa1: Option<f64>,
    #[arg(long)]
    kappa2: Option<f64>,
    /// Also write trajectory.svg.
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct GridArgs {
    /// Scenario JSON with a `grid` block.
    config: PathBuf,
    #[command(flatten)]
    out: OutArgs,
    /// Worker threads; defaults to $ECBF_WORKERS or the available cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Continue from `board.json` in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct GuidedArgs {
    /// Scenario JSON with a `guided` block.
    config: PathBuf,
    #[command(flatten)]
    out: OutArgs,
    /// Take runs from an existing board (e.g. a grid search) instead of simulating them.
    #[arg(long)]
    replay: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset CSV (`r_o,kappa1,kappa2,rank[,score]`).
    dataset: PathBuf,
    #[command(flatten)]
    out: OutArgs,
    /// Training config JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct PredictArgs {
    /// Model JSON written by `train`.
    model: PathBuf,
    #[arg(long)]
    r_o: f64,
    /// Simulate the scenario with the predicted gains.
    #[arg(long)]
    run: bool,
    /// Scenario for `--run`; defaults to the bundled scenario.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    plot: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Guided(a) => cmd_guided(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_scenario(path: &Path) -> Result<(ScenarioFile, Scenario<f64>), CliError> {
    let file = ScenarioFile::load(path).map_err(usage)?;
    let scenario = file.to_scenario().map_err(usage)?;
    Ok((file, scenario))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

/// Writes trajectory, summary and optional plot for one run; a faulted run is an error.
fn write_run(
    dir: &Path,
    scenario: &Scenario<f64>,
    result: &RunResult<f64>,
    plot: bool,
) -> Result<(), CliError> {
    output::ensure_dir(dir)?;
    let n = scenario.robot.n_joints();
    let r_o = scenario.obstacle.as_ref().map(|o| o.radius);
    output::write(
        dir,
        "trajectory.csv",
        &output::trajectory_csv(result, n, scenario.obstacle.is_some()),
    )?;
    output::write(
        dir,
        "summary.json",
        &output::summary_json(r_o, (scenario.cbf.kappa1, scenario.cbf.kappa2), result),
    )?;
    if plot {
        let ob = scenario.obstacle.as_ref().map(|o| {
            (
                o,
                o.radius + scenario.clearance.r_ee + scenario.clearance.r_pad,
            )
        });
        output::write(
            dir,
            "trajectory.svg",
            &plot::trajectory_svg(&result.log, ob),
        )?;
    }
    let min_h = if r_o.is_some() {
        result.min_h
    } else {
        f64::INFINITY
    };
    println!(
        "good_run={} min_h={min_h} final_err={} run_ctrl={} run_tsep={}",
        result.good_run, result.final_err, result.run_ctrl, result.run_tsep
    );
    match result.fault {
        Some(f) => Err(CliError::Fault(format!(
            "run faulted at t = {}: {f}",
            result.log.last().map_or(0.0, |r| r.t)
        ))),
        None => Ok(()),
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let (_, mut scenario) = load_scenario(&a.scenario)?;
    let r_o = a
        .r_o
        .or(scenario.obstacle.as_ref().map(|o| o.radius))
        .unwrap_or(0.0);
    let params = CbfParams::new(
        a.kappa1.unwrap_or(scenario.cbf.kappa1),
        a.kappa2.unwrap_or(scenario.cbf.kappa2),
    )
    .ok_or_else(|| usage("CBF gains must be positive"))?;
    if a.r_o.is_some_and(|r| !(r > 0.0)) {
        return Err(usage("--r-o must be positive"));
    }
    scenario = scenario.with_setting(r_o, params);
    let result = simulate(&scenario)?;
    output::ensure_dir(&a.out.out)?;
    output::write_meta(
        &a.out.out,
        "simulate",
        json!({"scenario": a.scenario, "r_o": a.r_o, "kappa1": a.kappa1, "kappa2": a.kappa2}),
    )?;
    write_run(&a.out.out, &scenario, &result, a.plot)
}

fn worker_count(flag: Option<usize>) -> Result<usize, CliError> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| {
                CliError::Usage(format!("{WORKERS_ENV} must be an integer, got {v:?}"))
            })?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err(usage("worker count must be at least 1"));
    }
    Ok(n)
}

/// Board restricted to the grid, in grid order, so output files do not depend on run order.
fn canonical_board(grid: &GridSpec, board: &ScoreBoard) -> ScoreBoard {
    let mut out = ScoreBoard::new();
    for s in grid.settings() {
        if let Some(i) = board.find(s.r_o, s.kappa1, s.kappa2) {
            out.push(board.runs()[i].clone());
        }
    }
    out.rescore();
    out
}

fn print_bests(board: &ScoreBoard) {
    for r_o in board.radii() {
        match board.best_for(r_o) {
            Some(i) => {
                let run = &board.runs()[i];
                println!(
                    "r_o={r_o} best kappa1={} kappa2={} score={:.6}",
                    run.kappa1,
                    run.kappa2,
                    board.score(i)
                );
            }
            None => println!("r_o={r_o} no good run"),
        }
    }
}

fn write_board_outputs(
    dir: &Path,
    board: &ScoreBoard,
    k: usize,
    prefix: &str,
) -> Result<(), CliError> {
    output::write(dir, "board.json", &board.to_json())?;
    output::write(
        dir,
        &format!("{prefix}results.csv"),
        &board.to_results_csv(),
    )?;
    output::write(
        dir,
        "dataset.csv",
        &dataset_to_csv(&export_dataset(board, k)),
    )
}

fn cmd_grid(a: GridArgs) -> Result<(), CliError> {
    let (file, base) = load_scenario(&a.config)?;
    base.validate()?;
    let grid = file
        .grid
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{} has no grid block", a.config.display())))?;
    grid.validate().map_err(usage)?;
    let workers = worker_count(a.workers)?;
    let dir = &a.out.out;
    output::ensure_dir(dir)?;
    let board_path = dir.join("board.json");
    let mut board = if a.resume && board_path.exists() {
        ScoreBoard::from_json(&read_text(&board_path)?)
            .map_err(|e| CliError::Usage(format!("cannot parse {}: {e}", board_path.display())))?
    } else {
        ScoreBoard::new()
    };
    let done = grid
        .settings()
        .iter()
        .filter(|s| board.find(s.r_o, s.kappa1, s.kappa2).is_some())
        .count();
    log::info!(
        "grid: {} settings, {done} already done, {workers} workers",
        grid.len()
    );

    // one radius at a time so an interrupted search loses at most one radius
    for &r_o in &grid.r_o_values {
        let pending: Vec<Setting> = grid
            .settings()
            .into_iter()
            .filter(|s| s.r_o == r_o && board.find(s.r_o, s.kappa1, s.kappa2).is_none())
            .collect();
        if pending.is_empty() {
            continue;
        }
        for record in evaluate_settings(&pending, &base, workers).map_err(usage)? {
            board.push(record);
        }
        board.rescore();
        output::write(dir, "board.json", &board.to_json())?;
    }

    let board = canonical_board(&grid, &board);
    write_board_outputs(dir, &board, file.dataset.k, "")?;
    println!("runs={} of {}", board.len(), grid.len());
    print_bests(&board);
    output::write_meta(
        dir,
        "grid",
        json!({"config": a.config, "workers": workers, "resume": a.resume}),
    )
}

fn cmd_guided(a: GuidedArgs) -> Result<(), CliError> {
    let (file, base) = load_scenario(&a.config)?;
    base.validate()?;
    let cfg = file
        .guided
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{} has no guided block", a.config.display())))?;
    cfg.validate().map_err(usage)?;
    let replay = match &a.replay {
        None => None,
        Some(p) => Some(
            ScoreBoard::from_json(&read_text(p)?)
                .map_err(|e| CliError::Usage(format!("cannot parse {}: {e}", p.display())))?,
        ),
    };
    let lattice_size = cfg
        .lattice
        .as_ref()
        .map(|l| l.len() * l.len())
        .or(file.grid.as_ref().map(|g| g.kappa_values.len().pow(2)));

    let dir = &a.out.out;
    output::ensure_dir(dir)?;
    let mut board = ScoreBoard::new();
    let mut trace = String::from("r_o,step,kappa1,kappa2,score,action\n");
    let mut total = 0usize;
    for &r_o in &cfg.r_o_values {
        let mut sim = SimEvaluator { base: &base };
        let outcome = match &replay {
            Some(stored) => {
                let mut ev = BoardEvaluator {
                    board: stored,
                    fallback: sim,
                };
                guided_search(&cfg, r_o, &mut ev)
            }
            None => guided_search(&cfg, r_o, &mut sim),
        }
        .map_err(usage)?;
        for (i, step) in outcome.trace.iter().enumerate() {
            trace.push_str(&format!(
                "{r_o},{i},{},{},{},{:?}\n",
                step.kappa1, step.kappa2, step.score, step.action
            ));
        }
        for run in outcome.board.runs() {
            board.push(run.clone());
        }
        total += outcome.evals;
        let share = lattice_size.map_or(String::new(), |n| {
            format!(" of {n} ({:.1}%)", 100.0 * outcome.evals as f64 / n as f64)
        });
        match outcome.best {
            Some(best) => println!(
                "r_o={r_o} best kappa1={} kappa2={} score={:.6} evals={}{share}{}",
                best.kappa1,
                best.kappa2,
                outcome.best_score,
                outcome.evals,
                if outcome.truncated {
                    " (budget reached)"
                } else {
                    ""
                }
            ),
            None => println!("r_o={r_o} no good run evals={}{share}", outcome.evals),
        }
    }
    board.rescore();
    write_board_outputs(dir, &board, file.dataset.k, "guided_")?;
    output::write(dir, "guided_trace.csv", &trace)?;
    println!("total_evals={total}");
    output::write_meta(
        dir,
        "guided",
        json!({"config": a.config, "replay": a.replay}),
    )
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str::<TrainConfig>(&read_text(p)?)
            .map_err(|e| CliError::Usage(format!("cannot parse {}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    let rows = dataset_from_csv(&read_text(&a.dataset)?).map_err(usage)?;
    let data: Vec<Sample<f64>> = rows.iter().map(Sample::from).collect();
    let outcome = train(&data, &cfg).map_err(|e| match e {
        ecbf_core::predictor::PredictorError::Diverged { .. } => CliError::Fault(e.to_string()),
        _ => usage(e),
    })?;

    let dir = &a.out.out;
    output::ensure_dir(dir)?;
    let meta = TrainingMeta {
        seed: cfg.seed,
        epochs: outcome.loss_curve.len() - 1,
        final_loss: outcome.best_loss,
        learning_rate: cfg.learning_rate,
    };
    let file = MlpFile::from_model(&outcome.model, meta);
    output::write(dir, "model.json", &(file.to_json() + "\n"))?;
    let mut curve = String::from("epoch,loss\n");
    for (i, l) in outcome.loss_curve.iter().enumerate() {
        curve.push_str(&format!("{i},{l}\n"));
    }
    output::write(dir, "loss_curve.csv", &curve)?;
    println!(
        "rows={} final_loss={} best_epoch={} entropy_floor={}",
        data.len(),
        outcome.best_loss,
        outcome.best_epoch,
        outcome.model.entropy_floor(&data)
    );
    output::write_meta(dir, "train", json!({"dataset": a.dataset, "config": cfg}))
}

fn load_model(path: &Path) -> Result<MlpModel<f64>, CliError> {
    let file = MlpFile::from_json(&read_text(path)?)
        .map_err(|e| CliError::Usage(format!("cannot parse {}: {e}", path.display())))?;
    file.to_model().map_err(usage)
}

fn cmd_predict(a: PredictArgs) -> Result<(), CliError> {
    if !(a.r_o > 0.0) {
        return Err(usage("--r-o must be positive"));
    }
    let model = load_model(&a.model)?;
    if !a.run {
        let p = model.forward(a.r_o);
        println!("kappa1={} kappa2={}", p.kappa1, p.kappa2);
        return Ok(());
    }
    let base = match &a.scenario {
        Some(p) => load_scenario(p)?.1,
        None => ecbf_core::default_scenario(),
    };
    if base.obstacle.is_none() {
        return Err(usage("--run needs a scenario with an obstacle"));
    }
    let (p, result) = predict_and_filter(&model, a.r_o, &base)?;
    println!("kappa1={} kappa2={}", p.kappa1, p.kappa2);
    let scenario = base.with_setting(a.r_o, p.params());
    output::ensure_dir(&a.out.out)?;
    output::write_meta(
        &a.out.out,
        "predict",
        json!({"model": a.model, "r_o": a.r_o, "scenario": a.scenario}),
    )?;
    write_run(&a.out.out, &scenario, &result, a.plot)
}
