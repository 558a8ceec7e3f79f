//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ecbf_core::predictor::{predict_and_filter, train, MlpModel, Sample, TrainConfig};
use ecbf_core::qp::{kkt_residuals, ActiveSetSolver, QpStatus};
use ecbf_core::robot::{ur10, JointState};
use ecbf_core::score::{RunRecord, ScoreBoard};
use ecbf_core::search::{export_dataset, grid_search, guided_search, BoardEvaluator, GridSpec};
use ecbf_core::sim::{simulate, Scenario};
use ecbf_core::{CbfParams, Obstacle, ScenarioFile};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ScenarioFile {
    ScenarioFile::load(&configs().join(name)).expect("bundled config loads")
}

fn workers() -> usize {
    std::env::var("ECBF_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

fn dynamics_oracle() -> Verdict {
    let start = Instant::now();
    let two = support::two_link();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut closed: f64 = 0.0;
    for _ in 0..200 {
        let q = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let qv = DVector::from_row_slice(&q);
        let m = two.mass_matrix(&qv).unwrap();
        closed = closed.max((m - support::two_link_mass(q[1])).amax());
        let g = two.bias_forces(&JointState::at_rest(qv.clone())).unwrap();
        closed = closed.max((g - support::two_link_gravity(q[0], q[1])).amax());
        let j = two.jacobian(&qv).unwrap();
        let want = support::two_link_jacobian(q[0], q[1]);
        for (r, row) in want.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                closed = closed.max((j[(r, c)] - v).abs());
            }
        }
    }

    let arm = ur10::<f64>();
    let eps = 1e-6;
    let mut fd: f64 = 0.0;
    for _ in 0..1000 {
        let q = support::random_vec(&mut rng, 6, 3.1);
        let j = arm.jacobian(&q).unwrap();
        for c in 0..6 {
            let (mut qp, mut qm) = (q.clone(), q.clone());
            qp[c] += eps;
            qm[c] -= eps;
            let col = (arm.forward_kinematics(&qp).unwrap() - arm.forward_kinematics(&qm).unwrap())
                / (2.0 * eps);
            fd = fd.max((col - j.column(c)).amax());
        }
    }

    // gravity compensated inside every RK4 stage, so the motion is torque-free
    let dt = 1e-3;
    let accel = |s: &JointState<f64>| {
        let g = arm.bias_forces(&JointState::at_rest(s.q.clone())).unwrap();
        arm.forward_dynamics(s, &g).unwrap()
    };
    let mut s = JointState::new(
        DVector::from_row_slice(&[0.0, -0.2, 0.4, -1.77, -1.6, 0.0]),
        DVector::from_row_slice(&[0.5, -0.3, 0.4, 0.6, -0.5, 0.8]),
    );
    let e0 = arm.kinetic_energy(&s).unwrap();
    for _ in 0..1000 {
        let shift = |s: &JointState<f64>, dq: &DVector<f64>, ddq: &DVector<f64>, h: f64| {
            JointState::new(&s.q + dq * h, &s.dq + ddq * h)
        };
        let a1 = accel(&s);
        let s2 = shift(&s, &s.dq, &a1, dt / 2.0);
        let a2 = accel(&s2);
        let s3 = shift(&s, &s2.dq, &a2, dt / 2.0);
        let a3 = accel(&s3);
        let s4 = shift(&s, &s3.dq, &a3, dt);
        let a4 = accel(&s4);
        let q = &s.q + (&s.dq + &s2.dq * 2.0 + &s3.dq * 2.0 + &s4.dq) * (dt / 6.0);
        let dq = &s.dq + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (dt / 6.0);
        s = JointState::new(q, dq);
    }
    let drift = (arm.kinetic_energy(&s).unwrap() - e0).abs() / e0;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        closed <= 1e-9 && fd <= 1e-6 && drift <= 1e-4 && secs < 10.0,
        format!(
            "closed-form err {closed:.1e}, Jacobian FD err {fd:.1e}, KE drift {drift:.1e}, {secs:.2}s"
        ),
    )
}

fn qp_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let solver = ActiveSetSolver::<f64>::default();
    let (mut dx, mut dobj, mut kkt, mut bad) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for _ in 0..1000 {
        let p = support::random_qp(&mut rng);
        let sol = solver.solve(&p).unwrap();
        let Some((x, obj)) = support::enumerate_qp(&p) else {
            bad += 1;
            continue;
        };
        if sol.status != QpStatus::Optimal {
            bad += 1;
            continue;
        }
        dx = dx.max((&sol.x - &x).amax());
        dobj = dobj.max((sol.objective - obj).abs());
        kkt = kkt.max(kkt_residuals(&p, &sol).max());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        bad == 0 && dx <= 1e-6 && dobj <= 1e-6 && kkt <= 1e-8 && secs < 30.0,
        format!("1000 QPs: max |dx| {dx:.1e}, |dobj| {dobj:.1e}, KKT {kkt:.1e}, {bad} non-optimal, {secs:.2}s"),
    )
}

fn filter_inactivity(base: &Scenario<f64>) -> Verdict {
    let mut far = base.clone();
    far.obstacle = Some(Obstacle::new(Vector3::new(50.0, 50.0, 50.0), 0.2).unwrap());
    let mut free = base.clone();
    free.obstacle = None;
    let a = simulate(&far).unwrap();
    let b = simulate(&free).unwrap();
    let zero = a.log.iter().all(|r| r.tau_qp.iter().all(|v| *v == 0.0));
    let same = a.log.len() == b.log.len()
        && a.log
            .iter()
            .zip(&b.log)
            .all(|(x, y)| x.q == y.q && x.dq == y.dq && x.tau_nom == y.tau_nom && x.ee == y.ee);
    verdict(
        zero && same && a.final_state == b.final_state,
        format!(
            "{} steps, tau_qp identically zero: {zero}, bitwise-equal trajectory: {same}",
            a.log.len()
        ),
    )
}

fn tracking_baseline() -> Verdict {
    let mut f = load("default_scenario.json");
    f.obstacle = None;
    let s = f.to_scenario().unwrap();
    let r = simulate(&s).unwrap();

    // start 0.05 rad off the reference: e(t) = e0 (1 + 10 t) exp(-10 t) for Kp=100, Kd=20
    let mut g = f.clone();
    let q0 = s.trajectory.sample(0.0).q_d.add_scalar(0.05);
    g.initial_state = Some(ecbf_core::config::StateFile {
        q: q0.iter().copied().collect(),
        dq: None,
    });
    let off = simulate(&g.to_scenario().unwrap()).unwrap();
    let row = off.log.iter().find(|r| (r.t - 1.0).abs() < 1e-9).unwrap();
    let err_1s = (&row.q - s.trajectory.sample(1.0).q_d).amax();
    let oracle = 0.05 * 11.0 * (-10.0f64).exp();
    verdict(
        r.final_joint_err <= 1e-3 && off.final_joint_err <= 1e-3 && (err_1s - oracle).abs() <= 1e-4,
        format!(
            "final joint err {:.1e} (perturbed start {:.1e}); err(1 s) {err_1s:.3e} vs critically damped {oracle:.3e}",
            r.final_joint_err, off.final_joint_err
        ),
    )
}

fn grid_scale(board: &ScoreBoard, grid: &GridSpec, secs: f64, workers: usize) -> Verdict {
    let per_run = secs * workers as f64 / grid.len() as f64;
    verdict(
        board.len() == grid.len() && grid.len() == 1352 && secs < 900.0 && per_run <= 0.5,
        format!(
            "{} runs in {secs:.1}s on {workers} worker(s), {per_run:.3}s per run",
            board.len()
        ),
    )
}

fn runs_at(board: &ScoreBoard, r_o: f64) -> impl Iterator<Item = &RunRecord> {
    board.runs().iter().filter(move |r| r.r_o == r_o)
}

fn safety_classes(board: &ScoreBoard, end_tol: f64) -> Verdict {
    let good = runs_at(board, 0.2)
        .filter(|r| r.good_run && r.min_h >= -1e-6)
        .count();
    let conservative = runs_at(board, 0.2)
        .filter(|r| r.min_h > 0.0 && !(r.final_err <= end_tol))
        .count();
    let colliding = runs_at(board, 0.2).filter(|r| r.min_h < 0.0).count();
    let example = |f: &dyn Fn(&RunRecord) -> bool| {
        runs_at(board, 0.2)
            .find(|r| f(r))
            .map_or("none".to_string(), |r| {
                format!("({},{})", r.kappa1, r.kappa2)
            })
    };
    verdict(
        good > 0 && conservative > 0 && colliding > 0,
        format!(
            "r_o=0.2: {good} good e.g. {}, {conservative} conservative e.g. {}, {colliding} colliding e.g. {}",
            example(&|r| r.good_run),
            example(&|r| r.min_h > 0.0 && !(r.final_err <= end_tol)),
            example(&|r| r.min_h < 0.0)
        ),
    )
}

fn fixed_parameter_failure(board: &ScoreBoard) -> Verdict {
    let radii = board.radii();
    let mut found = None;
    'outer: for (i, &small) in radii.iter().enumerate() {
        for run in runs_at(board, small).filter(|r| r.good_run) {
            for &large in &radii[i + 1..] {
                if let Some(j) = board.find(large, run.kappa1, run.kappa2) {
                    if board.runs()[j].min_h < 0.0 {
                        found = Some((run.kappa1, run.kappa2, small, large));
                        break 'outer;
                    }
                }
            }
        }
    }
    match found {
        Some((k1, k2, s, l)) => verdict(
            true,
            format!("(kappa1,kappa2)=({k1},{k2}) good at r_o={s}, collides at r_o={l}"),
        ),
        None => verdict(
            false,
            "no pair is good at a small radius and collides at a larger one".into(),
        ),
    }
}

fn guided_vs_grid(board: &ScoreBoard) -> Verdict {
    let cfg = load("guided.json").guided.expect("guided block");
    let lattice = cfg.lattice.as_ref().map_or(0, |l| l.len() * l.len());
    let mut worst_ratio = f64::INFINITY;
    let mut worst_share: f64 = 0.0;
    let mut lines = Vec::new();
    for r_o in board.radii() {
        let mut ev = BoardEvaluator {
            board,
            fallback: |_: f64, _: CbfParams<f64>| -> RunRecord {
                panic!("setting outside the grid")
            },
        };
        let out = guided_search(&cfg, r_o, &mut ev).unwrap();
        // guided best judged inside the exhaustive population
        let ratio = match (out.best, board.best_for(r_o)) {
            (Some(b), Some(g)) => {
                board.score(board.find(r_o, b.kappa1, b.kappa2).unwrap()) / board.score(g)
            }
            (None, None) => 1.0,
            _ => 0.0,
        };
        let share = out.evals as f64 / lattice as f64;
        worst_ratio = worst_ratio.min(ratio);
        worst_share = worst_share.max(share);
        lines.push(format!("{r_o}:{ratio:.3}/{}", out.evals));
    }
    verdict(
        worst_ratio >= 0.9 && worst_share <= 0.3,
        format!(
            "worst score ratio {worst_ratio:.3}, worst eval share {:.1}% of {lattice} [r_o:ratio/evals {}]",
            100.0 * worst_share,
            lines.join(" ")
        ),
    )
}

fn gradient_error(model: &MlpModel<f64>, data: &[Sample<f64>]) -> f64 {
    let g = model.gradients(data);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for l in 0..g.weights.len() {
        let w = &g.weights[l];
        let fd = DMatrix::from_fn(w.nrows(), w.ncols(), |r, c| {
            let (mut p, mut m) = (model.clone(), model.clone());
            p.weights_mut()[l][(r, c)] += eps;
            m.weights_mut()[l][(r, c)] -= eps;
            (p.loss(data) - m.loss(data)) / (2.0 * eps)
        });
        worst = worst.max((fd - w).norm() / w.norm().max(1e-12));
        let b = &g.biases[l];
        let fdb = DVector::from_fn(b.len(), |r, _| {
            let (mut p, mut m) = (model.clone(), model.clone());
            p.biases_mut()[l][r] += eps;
            m.biases_mut()[l][r] -= eps;
            (p.loss(data) - m.loss(data)) / (2.0 * eps)
        });
        worst = worst.max((fdb - b).norm() / b.norm().max(1e-12));
    }
    worst
}

fn nn_pipeline(board: &ScoreBoard, base: &Scenario<f64>) -> Verdict {
    let rows = export_dataset(board, 5);
    let data: Vec<Sample<f64>> = rows.iter().map(Sample::from).collect();
    let cfg = TrainConfig::default();
    let probe = MlpModel::random(&cfg.layer_sizes, (0.05, 0.6), cfg.kappa_max, 5).unwrap();
    let grad = gradient_error(&probe, &data);
    let out = match train(&data, &cfg) {
        Ok(o) => o,
        Err(e) => return verdict(false, format!("training failed: {e}")),
    };
    let converged = out.best_loss.is_finite() && out.best_loss < out.loss_curve[0];
    let mut failed = Vec::new();
    for r_o in board.radii() {
        match predict_and_filter(&out.model, r_o, base) {
            Ok((_, res)) if res.good_run => {}
            Ok((p, res)) => failed.push(format!(
                "{r_o} ({:.2},{:.2}) min_h {:.2e} err {:.2e}",
                p.kappa1, p.kappa2, res.min_h, res.final_err
            )),
            Err(e) => failed.push(format!("{r_o}: {e}")),
        }
    }
    verdict(
        rows.len() == 40 && grad <= 1e-6 && converged && failed.is_empty(),
        format!(
            "{} rows, gradient rel err {grad:.1e}, loss {:.3} -> {:.3} (floor {:.3}), failed radii: {}",
            rows.len(),
            out.loss_curve[0],
            out.best_loss,
            out.model.entropy_floor(&data),
            if failed.is_empty() { "none".to_string() } else { failed.join("; ") }
        ),
    )
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_ecbf"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "ecbf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Vec<String> {
    names
        .iter()
        .filter(|n| std::fs::read(a.join(n)).unwrap() != std::fs::read(b.join(n)).unwrap())
        .map(|n| n.to_string())
        .collect()
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut small = load("default_scenario.json");
    small.grid = Some(GridSpec {
        r_o_values: vec![0.1, 0.2],
        kappa_values: vec![10.0, 60.0],
    });
    let grid_cfg = root.join("grid.json");
    std::fs::write(&grid_cfg, small.to_json()).unwrap();
    let scenario = configs().join("default_scenario.json");
    let (scenario, grid_cfg) = (scenario.to_str().unwrap(), grid_cfg.to_str().unwrap());

    let mut diffs = Vec::new();
    let dirs: Vec<PathBuf> = (0..2).map(|i| root.join(format!("run{i}"))).collect();
    for (i, d) in dirs.iter().enumerate() {
        let d = d.to_str().unwrap();
        let workers = (i + 1).to_string();
        run_cli(&[
            "simulate",
            scenario,
            "--out",
            &format!("{d}/sim"),
            "--kappa1",
            "60",
            "--kappa2",
            "15",
        ]);
        run_cli(&[
            "grid",
            grid_cfg,
            "--out",
            &format!("{d}/grid"),
            "--workers",
            &workers,
        ]);
        run_cli(&[
            "train",
            &format!("{d}/grid/dataset.csv"),
            "--out",
            &format!("{d}/train"),
            "--seed",
            "3",
            "--epochs",
            "500",
        ]);
        run_cli(&[
            "predict",
            &format!("{d}/train/model.json"),
            "--r-o",
            "0.2",
            "--run",
            "--out",
            &format!("{d}/predict"),
        ]);
    }
    for (sub, names) in [
        ("sim", &["trajectory.csv", "summary.json"][..]),
        ("grid", &["results.csv", "board.json", "dataset.csv"][..]),
        ("train", &["model.json", "loss_curve.csv"][..]),
        ("predict", &["trajectory.csv", "summary.json"][..]),
    ] {
        for n in same_files(&dirs[0].join(sub), &dirs[1].join(sub), names) {
            diffs.push(format!("{sub}/{n}"));
        }
    }
    verdict(
        diffs.is_empty(),
        format!(
            "simulate, grid (1 vs 2 workers), train, predict --run re-run: differing files: {}",
            if diffs.is_empty() {
                "none".to_string()
            } else {
                diffs.join(", ")
            }
        ),
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        }
    }
}

fn report(id: usize, name: &str, v: &Verdict) {
    println!(
        "[{}] {id:>2} {name}: {}",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail
    );
}

fn main() {
    let grid_file = load("full_grid.json");
    let grid = grid_file.grid.clone().expect("grid block");
    let base = grid_file.to_scenario().unwrap();
    let workers = workers();

    let mut results: Vec<(usize, &str, Verdict)> = vec![
        (1, "dynamics oracle", guarded(dynamics_oracle)),
        (2, "QP oracle", guarded(qp_oracle)),
        (3, "filter inactivity", guarded(|| filter_inactivity(&base))),
    ];

    let start = Instant::now();
    let board = grid_search(&grid, &base, workers).unwrap();
    let secs = start.elapsed().as_secs_f64();

    results.push((
        4,
        "safety classes at r_o=0.2",
        guarded(|| safety_classes(&board, base.end_tol)),
    ));
    results.push((
        5,
        "fixed-parameter failure",
        guarded(|| fixed_parameter_failure(&board)),
    ));
    results.push((
        6,
        "grid scale",
        guarded(|| grid_scale(&board, &grid, secs, workers)),
    ));
    results.push((
        7,
        "guided vs exhaustive",
        guarded(|| guided_vs_grid(&board)),
    ));
    results.push((8, "NN pipeline", guarded(|| nn_pipeline(&board, &base))));
    results.push((9, "tracking baseline", guarded(tracking_baseline)));
    results.push((10, "determinism", guarded(determinism)));

    for (id, name, v) in &results {
        report(*id, name, v);
    }
    let failed = results.iter().filter(|(_, _, v)| !v.pass).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
