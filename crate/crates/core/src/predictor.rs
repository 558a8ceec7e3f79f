//! Small MLP that maps obstacle radius to CBF gains, trained by full-batch backpropagation.
//!
//! Hidden layers use `tanh`; the output layer uses the logistic map
//! `σ(y) = (tanh(y / 2) + 1) / 2` so predictions live in `(0, 1)` and can be scored with
//! binary cross-entropy against gains normalised by `kappa_max`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbf::CbfParams;
use crate::scalar::Real;
use crate::search::DatasetRow;
use crate::sim::{simulate, RunResult, Scenario, SimError};

/// Bounds applied to normalised targets and predictions inside the loss.
pub const CLIP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("empty training set")]
    EmptyDataset,
    #[error("invalid layer sizes {0:?}: need input 1, output 2, at least one hidden layer")]
    LayerSizes(Vec<usize>),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss became non-finite at epoch {epoch}; lower the learning rate")]
    Diverged { epoch: usize },
    #[error("invalid model file: {0}")]
    ModelFile(String),
}

/// One training sample: radius and the two raw gains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample<T: Real> {
    pub r_o: T,
    pub kappa1: T,
    pub kappa2: T,
}

impl From<&DatasetRow> for Sample<f64> {
    fn from(row: &DatasetRow) -> Self {
        Self {
            r_o: row.r_o,
            kappa1: row.kappa1,
            kappa2: row.kappa2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T: Real> {
    layer_sizes: Vec<usize>,
    weights: Vec<DMatrix<T>>,
    biases: Vec<DVector<T>>,
    input_scale: (T, T),
    kappa_max: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction<T: Real> {
    pub kappa1: T,
    pub kappa2: T,
    /// The radius was outside the trained range and got clamped.
    pub clamped: bool,
}

impl<T: Real> Prediction<T> {
    pub fn params(&self) -> CbfParams<T> {
        CbfParams {
            kappa1: self.kappa1,
            kappa2: self.kappa2,
        }
    }
}

/// Parameter gradients with the same shapes as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Real> {
    pub weights: Vec<DMatrix<T>>,
    pub biases: Vec<DVector<T>>,
}

fn logistic<T: Real>(y: T) -> T {
    let half = T::lit(0.5);
    ((y * half).tanh() + T::one()) * half
}

fn clip<T: Real>(v: T) -> T {
    v.max(T::lit(CLIP)).min(T::one() - T::lit(CLIP))
}

fn validate_sizes(sizes: &[usize]) -> Result<(), PredictorError> {
    if sizes.len() < 3 || sizes[0] != 1 || sizes[sizes.len() - 1] != 2 || sizes.contains(&0) {
        return Err(PredictorError::LayerSizes(sizes.to_vec()));
    }
    Ok(())
}

impl<T: Real> MlpModel<T> {
    pub fn zeros(
        layer_sizes: &[usize],
        input_scale: (T, T),
        kappa_max: T,
    ) -> Result<Self, PredictorError> {
        validate_sizes(layer_sizes)?;
        if !(kappa_max > T::zero()) {
            return Err(PredictorError::Config("kappa_max must be positive".into()));
        }
        let weights = layer_sizes
            .windows(2)
            .map(|w| DMatrix::zeros(w[1], w[0]))
            .collect();
        let biases = layer_sizes[1..]
            .iter()
            .map(|&n| DVector::zeros(n))
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            input_scale,
            kappa_max,
        })
    }

    /// Uniform `±1/√fan_in` initialisation from a seeded generator.
    pub fn random(
        layer_sizes: &[usize],
        input_scale: (T, T),
        kappa_max: T,
        seed: u64,
    ) -> Result<Self, PredictorError> {
        let mut model = Self::zeros(layer_sizes, input_scale, kappa_max)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (w, b) in model.weights.iter_mut().zip(model.biases.iter_mut()) {
            let bound = 1.0 / (w.ncols() as f64).sqrt();
            for v in w.iter_mut() {
                *v = T::lit(rng.random_range(-bound..bound));
            }
            for v in b.iter_mut() {
                *v = T::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(model)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn weights(&self) -> &[DMatrix<T>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [DMatrix<T>] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[DVector<T>] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [DVector<T>] {
        &mut self.biases
    }

    pub fn input_scale(&self) -> (T, T) {
        self.input_scale
    }

    pub fn kappa_max(&self) -> T {
        self.kappa_max
    }

    /// Maps a radius onto `[-1, 1]`, clamping outside the trained range.
    fn encode(&self, r_o: T) -> (T, bool) {
        let (lo, hi) = self.input_scale;
        let clamped = r_o < lo || r_o > hi;
        let r = r_o.max(lo).min(hi);
        if hi > lo {
            (T::lit(2.0) * (r - lo) / (hi - lo) - T::one(), clamped)
        } else {
            (T::zero(), clamped)
        }
    }

    /// Activations of every layer (input first); the last entry is the logistic output.
    fn activations(&self, x: T) -> Vec<DVector<T>> {
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(DVector::from_element(1, x));
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let y = w * acts.last().expect("input pushed") + b;
            let a = if l == last {
                y.map(logistic)
            } else {
                y.map(|v| v.tanh())
            };
            acts.push(a);
        }
        acts
    }

    /// Normalised outputs in `(0, 1)` for a radius.
    pub fn forward_normalized(&self, r_o: T) -> (DVector<T>, bool) {
        let (x, clamped) = self.encode(r_o);
        let out = self.activations(x).pop().expect("at least one layer");
        (out, clamped)
    }

    pub fn forward(&self, r_o: T) -> Prediction<T> {
        let (out, clamped) = self.forward_normalized(r_o);
        if clamped {
            log::warn!(
                "r_o = {} outside trained range [{}, {}]; clamped",
                r_o,
                self.input_scale.0,
                self.input_scale.1
            );
        }
        // keep predictions strictly positive even if the logistic underflows
        let floor = T::lit(1e-12);
        Prediction {
            kappa1: out[0].max(floor) * self.kappa_max,
            kappa2: out[1].max(floor) * self.kappa_max,
            clamped,
        }
    }

    fn targets(&self, s: &Sample<T>) -> [T; 2] {
        [
            clip(s.kappa1 / self.kappa_max),
            clip(s.kappa2 / self.kappa_max),
        ]
    }

    /// Summed binary cross-entropy over samples and both outputs.
    pub fn loss(&self, data: &[Sample<T>]) -> T {
        let mut total = T::zero();
        for s in data {
            let (out, _) = self.forward_normalized(s.r_o);
            for (j, k) in self.targets(s).into_iter().enumerate() {
                let p = clip(out[j]);
                total -= k * p.ln() + (T::one() - k) * (T::one() - p).ln();
            }
        }
        total
    }

    /// Lowest reachable loss: entropy of the clipped normalised targets.
    pub fn entropy_floor(&self, data: &[Sample<T>]) -> T {
        let mut total = T::zero();
        for s in data {
            for k in self.targets(s) {
                total -= k * k.ln() + (T::one() - k) * (T::one() - k).ln();
            }
        }
        total
    }

    /// Backpropagated gradient of [`MlpModel::loss`].
    pub fn gradients(&self, data: &[Sample<T>]) -> Gradients<T> {
        let mut gw: Vec<DMatrix<T>> = self.weights.iter().map(|w| w.map(|_| T::zero())).collect();
        let mut gb: Vec<DVector<T>> = self.biases.iter().map(|b| b.map(|_| T::zero())).collect();
        let lo = T::lit(CLIP);
        let hi = T::one() - lo;
        for s in data {
            let (x, _) = self.encode(s.r_o);
            let acts = self.activations(x);
            let out = acts.last().expect("output layer");
            let targets = self.targets(s);
            // logistic + cross-entropy: dJ/dy = p - κ inside the clip band
            let mut delta = DVector::from_fn(out.len(), |j, _| {
                let p = out[j];
                if p > lo && p < hi {
                    p - targets[j]
                } else {
                    T::zero()
                }
            });
            for l in (0..self.weights.len()).rev() {
                gw[l] += &delta * acts[l].transpose();
                gb[l] += &delta;
                if l > 0 {
                    let back = self.weights[l].transpose() * &delta;
                    delta = back.zip_map(&acts[l], |g, a| g * (T::one() - a * a));
                }
            }
        }
        Gradients {
            weights: gw,
            biases: gb,
        }
    }

    fn step(&mut self, grads: &Gradients<T>, lr: T) {
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            *w -= g * lr;
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            *b -= g * lr;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_layers")]
    pub layer_sizes: Vec<usize>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Stop after this many epochs without a new lowest loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(default = "default_kappa_max")]
    pub kappa_max: f64,
}

fn default_layers() -> Vec<usize> {
    vec![1, 16, 16, 2]
}
fn default_lr() -> f64 {
    0.01
}
fn default_epochs() -> usize {
    20_000
}
fn default_kappa_max() -> f64 {
    100.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layer_sizes: default_layers(),
            learning_rate: default_lr(),
            epochs: default_epochs(),
            seed: 0,
            patience: None,
            kappa_max: default_kappa_max(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T: Real> {
    /// Parameters from the epoch with the lowest loss.
    pub model: MlpModel<T>,
    /// Loss before each update; the last entry is the loss after the final update.
    pub loss_curve: Vec<T>,
    pub best_loss: T,
    pub best_epoch: usize,
}

pub fn train<T: Real>(
    data: &[Sample<T>],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, PredictorError> {
    if data.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    if !(config.learning_rate > 0.0) || config.epochs == 0 {
        return Err(PredictorError::Config(
            "learning_rate must be positive and epochs at least 1".into(),
        ));
    }
    let lo = data
        .iter()
        .map(|s| s.r_o)
        .fold(data[0].r_o, |a, b| a.min(b));
    let hi = data
        .iter()
        .map(|s| s.r_o)
        .fold(data[0].r_o, |a, b| a.max(b));
    let mut model = MlpModel::random(
        &config.layer_sizes,
        (lo, hi),
        T::lit(config.kappa_max),
        config.seed,
    )?;
    let lr = T::lit(config.learning_rate);
    let mut curve = Vec::with_capacity(config.epochs + 1);
    let mut best = (model.clone(), model.loss(data), 0usize);
    for epoch in 0..=config.epochs {
        let loss = model.loss(data);
        if !loss.is_finite() {
            return Err(PredictorError::Diverged { epoch });
        }
        curve.push(loss);
        if loss < best.1 {
            best = (model.clone(), loss, epoch);
        }
        if epoch == config.epochs {
            break;
        }
        if let Some(p) = config.patience {
            if epoch - best.2 > p {
                break;
            }
        }
        let grads = model.gradients(data);
        model.step(&grads, lr);
    }
    Ok(TrainOutcome {
        model: best.0,
        loss_curve: curve,
        best_loss: best.1,
        best_epoch: best.2,
    })
}

/// Predicts gains for `r_o` and simulates the base scenario with them.
pub fn predict_and_filter(
    model: &MlpModel<f64>,
    r_o: f64,
    base: &Scenario<f64>,
) -> Result<(Prediction<f64>, RunResult<f64>), SimError> {
    let prediction = model.forward(r_o);
    let scenario = base.with_setting(r_o, prediction.params());
    Ok((prediction, simulate(&scenario)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
    #[serde(default)]
    pub learning_rate: f64,
}

/// JSON model file: row-major weights, biases, input and output scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpFile {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input_scale: [f64; 2],
    pub output_scale: f64,
    pub training: TrainingMeta,
}

impl MlpFile {
    pub fn from_model(model: &MlpModel<f64>, training: TrainingMeta) -> Self {
        Self {
            layer_sizes: model.layer_sizes.clone(),
            weights: model
                .weights
                .iter()
                .map(|w| {
                    let mut v = Vec::with_capacity(w.len());
                    for r in 0..w.nrows() {
                        v.extend(w.row(r).iter().copied());
                    }
                    v
                })
                .collect(),
            biases: model
                .biases
                .iter()
                .map(|b| b.iter().copied().collect())
                .collect(),
            input_scale: [model.input_scale.0, model.input_scale.1],
            output_scale: model.kappa_max,
            training,
        }
    }

    pub fn to_model(&self) -> Result<MlpModel<f64>, PredictorError> {
        let mut model = MlpModel::zeros(
            &self.layer_sizes,
            (self.input_scale[0], self.input_scale[1]),
            self.output_scale,
        )?;
        if self.weights.len() != model.weights.len() || self.biases.len() != model.biases.len() {
            return Err(PredictorError::ModelFile("layer count mismatch".into()));
        }
        for (l, w) in model.weights.iter_mut().enumerate() {
            if self.weights[l].len() != w.len() || self.biases[l].len() != model.biases[l].len() {
                return Err(PredictorError::ModelFile(format!(
                    "layer {l} shape mismatch"
                )));
            }
            *w = DMatrix::from_row_slice(w.nrows(), w.ncols(), &self.weights[l]);
            model.biases[l] = DVector::from_vec(self.biases[l].clone());
        }
        if self.input_scale[0] > self.input_scale[1] {
            return Err(PredictorError::ModelFile("input_scale is reversed".into()));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PredictorError> {
        serde_json::from_str(text).map_err(|e| PredictorError::ModelFile(e.to_string()))
    }
}
