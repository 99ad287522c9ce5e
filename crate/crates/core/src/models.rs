//! Homogeneous linear classifiers trained on split A, then fine-tuned on
//! split B, with end-of-epoch predictions recorded for tracked examples.
//!
//! Binary models hold a single weight row and use labels `{-1, +1}`
//! (class index 1 maps to +1). The exponential loss is summed over the batch,
//! so one full-batch GD step is exactly `w += eta * sum_j exp(-z_j) y_j x_j`.
//! Softmax cross-entropy is averaged over the batch.

use std::io;

use log::warn;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{feature_matrix, sample_splits, DatasetSpec, Example};
use crate::rng::{substream, tag};

#[derive(Debug, Error)]
pub enum ModelsError {
    #[error("training diverged at epoch {epoch}: loss rose for {window} consecutive full-batch epochs (learning rate {learning_rate} too large)")]
    Divergence {
        epoch: usize,
        window: usize,
        learning_rate: f64,
    },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ModelsError>;

/// Loss rises on this many consecutive full-batch epochs count as divergence.
pub const DIVERGENCE_WINDOW: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `exp(-y w.x)`, binary only.
    Exponential,
    SoftmaxCrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// One full-batch step per epoch.
    Gd,
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceRule {
    /// Stop once every training example has margin at least 1.
    Margin,
    /// Stop after this many consecutive epochs of 100% training accuracy.
    PerfectAccuracy { epochs: usize },
    /// Always run `max_epochs`.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: Loss,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub max_epochs: usize,
    pub convergence: ConvergenceRule,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub adam: AdamParams,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_batch() -> usize {
    10
}
fn default_init_std() -> f64 {
    0.01
}

impl TrainConfig {
    /// Minibatch SGD on softmax cross-entropy until 5 epochs of perfect
    /// training accuracy.
    pub fn multiclass_sgd(learning_rate: f64, max_epochs: usize) -> Self {
        TrainConfig {
            loss: Loss::SoftmaxCrossEntropy,
            optimizer: Optimizer::Sgd,
            learning_rate,
            batch_size: default_batch(),
            max_epochs,
            convergence: ConvergenceRule::PerfectAccuracy { epochs: 5 },
            weight_decay: 0.0,
            momentum: 0.0,
            adam: AdamParams::default(),
            init_std: default_init_std(),
            rng_seed: 0,
        }
    }

    /// Full-batch GD on the exponential loss until margin 1.
    pub fn binary_gd(learning_rate: f64, max_epochs: usize) -> Self {
        TrainConfig {
            loss: Loss::Exponential,
            optimizer: Optimizer::Gd,
            learning_rate,
            batch_size: default_batch(),
            max_epochs,
            convergence: ConvergenceRule::Margin,
            weight_decay: 0.0,
            momentum: 0.0,
            adam: AdamParams::default(),
            init_std: default_init_std(),
            rng_seed: 0,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let bad = |m: String| Err(ModelsError::InvalidConfig(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.optimizer != Optimizer::Gd && self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)".into());
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be non-negative".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.epsilon <= 0.0 {
            return bad("adam betas must lie in [0, 1) and epsilon be positive".into());
        }
        if let ConvergenceRule::PerfectAccuracy { epochs: 0 } = self.convergence {
            return bad("perfect_accuracy.epochs must be positive".into());
        }
        if self.loss == Loss::Exponential && num_classes != 2 {
            return bad(format!("exponential loss is binary, dataset has {num_classes} classes"));
        }
        if self.loss == Loss::SoftmaxCrossEntropy && num_classes < 2 {
            return bad("softmax needs at least two classes".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::A => "A",
            Phase::B => "B",
        }
    }
}

/// `[classes x d]` weights, or a single row in binary mode. No bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub weights: Array2<f64>,
}

#[inline]
fn sign_of(label: usize) -> f64 {
    if label == 1 {
        1.0
    } else {
        -1.0
    }
}

fn softmax_row(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LinearModel {
    pub fn zeros(rows: usize, d: usize) -> Self {
        LinearModel {
            weights: Array2::zeros((rows, d)),
        }
    }

    /// i.i.d. `N(0, init_std^2)` weights; one row for the exponential loss.
    pub fn random_init(num_classes: usize, d: usize, cfg: &TrainConfig) -> Self {
        let rows = if cfg.loss == Loss::Exponential { 1 } else { num_classes };
        let mut rng = substream(cfg.rng_seed, &[tag::INIT]);
        let normal = Normal::new(0.0, cfg.init_std).expect("validated init_std");
        let weights = Array2::from_shape_fn((rows, d), |_| normal.sample(&mut rng));
        LinearModel { weights }
    }

    pub fn is_binary(&self) -> bool {
        self.weights.nrows() == 1
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Raw scores `[n x rows]`.
    pub fn scores(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        if self.is_binary() {
            x.dot(&self.weights.row(0)).insert_axis(Axis(1))
        } else {
            x.dot(&self.weights.t())
        }
    }

    fn predict_row(&self, scores: &[f64]) -> usize {
        if self.is_binary() {
            usize::from(scores[0] > 0.0)
        } else {
            let mut best = 0;
            for (c, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = c;
                }
            }
            best
        }
    }

    fn margin_row(&self, scores: &[f64], label: usize) -> f64 {
        if self.is_binary() {
            sign_of(label) * scores[0]
        } else {
            let other = scores
                .iter()
                .enumerate()
                .filter(|&(c, _)| c != label)
                .map(|(_, &s)| s)
                .fold(f64::NEG_INFINITY, f64::max);
            scores[label] - other
        }
    }

    fn confidence_row(&self, scores: &[f64], label: usize) -> f64 {
        if self.is_binary() {
            logistic(sign_of(label) * scores[0])
        } else {
            softmax_row(scores)[label]
        }
    }

    /// Per-example `(prediction, margin, confidence)` for the given labels.
    pub fn evaluate(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> Vec<Evaluation> {
        let s = self.scores(x);
        s.rows()
            .into_iter()
            .zip(labels)
            .map(|(row, &y)| {
                let row = row.to_vec();
                Evaluation {
                    prediction: self.predict_row(&row),
                    margin: self.margin_row(&row, y),
                    confidence: self.confidence_row(&row, y),
                }
            })
            .collect()
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<usize> {
        let s = self.scores(x);
        s.rows().into_iter().map(|r| self.predict_row(&r.to_vec())).collect()
    }

    pub fn accuracy(&self, examples: &[Example]) -> f64 {
        if examples.is_empty() {
            return 0.0;
        }
        let x = feature_matrix(examples);
        let hits = self
            .predict(x.view())
            .iter()
            .zip(examples)
            .filter(|(p, e)| **p == e.given_label)
            .count();
        hits as f64 / examples.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub prediction: usize,
    pub margin: f64,
    pub confidence: f64,
}

/// Loss value and gradient on a batch, plus for binary models the
/// coefficients `c_j = -l'(z_j)` so that `-grad = sum_j c_j y_j x_j`.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss: f64,
    pub grad: Array2<f64>,
    pub dual: Vec<f64>,
}

pub fn batch_gradient(model: &LinearModel, x: ArrayView2<'_, f64>, labels: &[usize], loss: Loss) -> BatchGradient {
    let scores = model.scores(x);
    match loss {
        Loss::Exponential => {
            let mut coef = Array1::zeros(labels.len());
            let mut dual = Vec::with_capacity(labels.len());
            let mut total = 0.0;
            for (j, &y) in labels.iter().enumerate() {
                let s = sign_of(y);
                let c = (-s * scores[[j, 0]]).exp();
                total += c;
                dual.push(c);
                coef[j] = -c * s;
            }
            let g = coef.dot(&x);
            BatchGradient {
                loss: total,
                grad: g.insert_axis(Axis(0)),
                dual,
            }
        }
        Loss::SoftmaxCrossEntropy => {
            let m = labels.len() as f64;
            let mut delta = Array2::zeros(scores.raw_dim());
            let mut total = 0.0;
            for (j, &y) in labels.iter().enumerate() {
                let p = softmax_row(&scores.row(j).to_vec());
                total -= p[y].max(f64::MIN_POSITIVE).ln();
                for (c, pc) in p.into_iter().enumerate() {
                    delta[[j, c]] = (pc - if c == y { 1.0 } else { 0.0 }) / m;
                }
            }
            BatchGradient {
                loss: total / m,
                grad: delta.t().dot(&x),
                dual: Vec::new(),
            }
        }
    }
}

/// Momentum / Adam state carried across steps.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    velocity: Array2<f64>,
    second: Array2<f64>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(model: &LinearModel) -> Self {
        OptimizerState {
            velocity: Array2::zeros(model.weights.raw_dim()),
            second: Array2::zeros(model.weights.raw_dim()),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Apply one update with `grad` according to `cfg.optimizer`. GD and SGD
/// share the heavy-ball update `v = momentum*v + g; w -= eta*v`.
pub fn apply_update(model: &mut LinearModel, grad: &Array2<f64>, cfg: &TrainConfig, state: &mut OptimizerState) {
    let mut g = grad.clone();
    if cfg.weight_decay > 0.0 {
        g.scaled_add(cfg.weight_decay, &model.weights);
    }
    state.steps += 1;
    match cfg.optimizer {
        Optimizer::Gd | Optimizer::Sgd => {
            if cfg.momentum > 0.0 {
                state.velocity *= cfg.momentum;
                state.velocity += &g;
                model.weights.scaled_add(-cfg.learning_rate, &state.velocity);
            } else {
                model.weights.scaled_add(-cfg.learning_rate, &g);
            }
        }
        Optimizer::Adam => {
            let AdamParams { beta1, beta2, epsilon } = cfg.adam;
            let t = state.steps as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            ndarray::Zip::from(&mut model.weights)
                .and(&mut state.velocity)
                .and(&mut state.second)
                .and(&g)
                .for_each(|w, m, v, &gi| {
                    *m = beta1 * *m + (1.0 - beta1) * gi;
                    *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *w -= cfg.learning_rate * mhat / (vhat.sqrt() + epsilon);
                });
        }
    }
}

/// One optimizer step on a batch; returns the pre-step batch gradient.
pub fn step(
    model: &mut LinearModel,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    cfg: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<BatchGradient> {
    if labels.is_empty() {
        return Err(ModelsError::EmptyBatch);
    }
    let bg = batch_gradient(model, x, labels, cfg.loss);
    apply_update(model, &bg.grad, cfg, state);
    Ok(bg)
}

/// Callbacks invoked during [`train_phase_observed`].
pub trait StepObserver {
    /// `batch` holds indices into the training split; `dual[j]` is the
    /// coefficient of `y_j x_j` in `-grad` (binary models only, else empty).
    fn on_step(&mut self, _batch: &[usize], _dual: &[f64], _cfg: &TrainConfig) {}
    fn on_epoch_end(&mut self, _epoch: usize, _model: &LinearModel) {}
}

struct NoObserver;
impl StepObserver for NoObserver {}

/// Per-example correctness and true-label confidence at the end of every
/// epoch. Column 0 is the state before the phase's first update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionHistory {
    pub phase: Phase,
    pub epochs: usize,
    pub example_ids: Vec<u64>,
    pub correct: Vec<Vec<bool>>,
    pub confidence: Vec<Vec<f64>>,
}

impl PredictionHistory {
    fn new(phase: Phase, ids: Vec<u64>) -> Self {
        let n = ids.len();
        PredictionHistory {
            phase,
            epochs: 0,
            example_ids: ids,
            correct: vec![Vec::new(); n],
            confidence: vec![Vec::new(); n],
        }
    }

    fn push(&mut self, evals: &[Evaluation], labels: &[usize]) {
        for (i, (e, &y)) in evals.iter().zip(labels).enumerate() {
            self.correct[i].push(e.prediction == y);
            self.confidence[i].push(e.confidence);
        }
    }

    /// Row index of an example id.
    pub fn position(&self, id: u64) -> Option<usize> {
        self.example_ids.iter().position(|&e| e == id)
    }

    /// Final-epoch correctness for every tracked example.
    pub fn final_correct(&self) -> Vec<bool> {
        self.correct.iter().map(|r| *r.last().unwrap_or(&false)).collect()
    }

    /// Keep only the rows whose ids satisfy `keep`.
    pub fn restrict(&self, keep: impl Fn(u64) -> bool) -> Self {
        let mut out = PredictionHistory::new(self.phase, Vec::new());
        out.epochs = self.epochs;
        for (i, &id) in self.example_ids.iter().enumerate() {
            if keep(id) {
                out.example_ids.push(id);
                out.correct.push(self.correct[i].clone());
                out.confidence.push(self.confidence[i].clone());
            }
        }
        out
    }

    /// Append `example_id,phase,epoch,correct,confidence` rows.
    pub fn write_csv<W: io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for (i, &id) in self.example_ids.iter().enumerate() {
            for t in 0..=self.epochs {
                w.write_record([
                    id.to_string(),
                    self.phase.as_str().to_string(),
                    t.to_string(),
                    u8::from(self.correct[i][t]).to_string(),
                    self.confidence[i][t].to_string(),
                ])?;
            }
        }
        Ok(())
    }
}

pub const HISTORY_HEADER: [&str; 5] = ["example_id", "phase", "epoch", "correct", "confidence"];

/// Write both phases into one history log.
pub fn write_history_csv<W: io::Write>(out: W, histories: &[&PredictionHistory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HISTORY_HEADER)?;
    for h in histories {
        h.write_csv(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a history log back into per-phase histories (A, B). Rows may come
/// in any order; every `(id, epoch)` cell must be present exactly once.
pub fn read_history_csv<R: io::Read>(input: R) -> Result<(PredictionHistory, PredictionHistory)> {
    use std::collections::BTreeMap;
    type Cells = BTreeMap<u64, BTreeMap<usize, (bool, f64)>>;
    let mut r = csv::Reader::from_reader(input);
    let mut cells: [Cells; 2] = Default::default();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let bad = |what: &str| ModelsError::InvalidConfig(format!("history row {:?}: bad {what}", rec));
        let id: u64 = field(0).parse().map_err(|_| bad("example_id"))?;
        let phase = match field(1).as_str() {
            "A" => 0,
            "B" => 1,
            _ => return Err(bad("phase")),
        };
        let epoch: usize = field(2).parse().map_err(|_| bad("epoch"))?;
        let correct = match field(3).as_str() {
            "1" => true,
            "0" => false,
            _ => return Err(bad("correct")),
        };
        let conf: f64 = field(4).parse().map_err(|_| bad("confidence"))?;
        if cells[phase].entry(id).or_default().insert(epoch, (correct, conf)).is_some() {
            return Err(bad("duplicate cell"));
        }
    }
    let build = |phase: Phase, map: &BTreeMap<u64, BTreeMap<usize, (bool, f64)>>| -> Result<PredictionHistory> {
        let mut h = PredictionHistory::new(phase, Vec::new());
        let mut epochs = None;
        for (&id, row) in map {
            let t = row.len() - 1;
            if row.keys().copied().ne(0..=t) || epochs.is_some_and(|e| e != t) {
                return Err(ModelsError::InvalidConfig(format!(
                    "history for example {id} in phase {} is incomplete",
                    phase.as_str()
                )));
            }
            epochs = Some(t);
            h.example_ids.push(id);
            h.correct.push(row.values().map(|c| c.0).collect());
            h.confidence.push(row.values().map(|c| c.1).collect());
        }
        h.epochs = epochs.unwrap_or(0);
        Ok(h)
    };
    Ok((build(Phase::A, &cells[0])?, build(Phase::B, &cells[1])?))
}

#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub model: LinearModel,
    pub history: PredictionHistory,
    pub epochs_run: usize,
    pub converged: bool,
    /// Training loss after each epoch; index 0 is the initial loss.
    pub loss_trace: Vec<f64>,
}

/// Same value as `batch_gradient(..).loss`, from precomputed scores.
fn loss_from_scores(scores: &Array2<f64>, labels: &[usize], loss: Loss) -> f64 {
    match loss {
        Loss::Exponential => labels
            .iter()
            .enumerate()
            .map(|(j, &y)| (-sign_of(y) * scores[[j, 0]]).exp())
            .sum(),
        Loss::SoftmaxCrossEntropy => {
            let total: f64 = scores
                .rows()
                .into_iter()
                .zip(labels)
                .map(|(row, &y)| -softmax_row(&row.to_vec())[y].max(f64::MIN_POSITIVE).ln())
                .sum();
            total / labels.len() as f64
        }
    }
}

pub fn train_phase(
    model: LinearModel,
    data: &[Example],
    tracked: &[Example],
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<PhaseOutcome> {
    train_phase_observed(model, data, tracked, cfg, phase, &mut NoObserver)
}

/// Train on `data`, recording predictions on `tracked` after every epoch.
pub fn train_phase_observed(
    mut model: LinearModel,
    data: &[Example],
    tracked: &[Example],
    cfg: &TrainConfig,
    phase: Phase,
    observer: &mut dyn StepObserver,
) -> Result<PhaseOutcome> {
    let classes = if model.is_binary() { 2 } else { model.weights.nrows() };
    cfg.validate(classes)?;
    if data.is_empty() && cfg.max_epochs > 0 {
        return Err(ModelsError::EmptyBatch);
    }
    let x = feature_matrix(data);
    let y: Vec<usize> = data.iter().map(|e| e.given_label).collect();
    let tx = feature_matrix(tracked);
    let ty: Vec<usize> = tracked.iter().map(|e| e.given_label).collect();

    let mut history = PredictionHistory::new(phase, tracked.iter().map(|e| e.example_id).collect());
    if !tracked.is_empty() {
        history.push(&model.evaluate(tx.view(), &ty), &ty);
    }
    let mut state = OptimizerState::new(&model);
    let mut loss_trace = vec![if data.is_empty() {
        0.0
    } else {
        loss_from_scores(&model.scores(x.view()), &y, cfg.loss)
    }];
    let mut rises = 0;
    let mut perfect_streak = 0;
    let mut converged = false;
    let mut epoch = 0;
    let all: Vec<usize> = (0..data.len()).collect();

    while epoch < cfg.max_epochs {
        epoch += 1;
        match cfg.optimizer {
            Optimizer::Gd => {
                let bg = step(&mut model, x.view(), &y, cfg, &mut state)?;
                observer.on_step(&all, &bg.dual, cfg);
            }
            Optimizer::Sgd | Optimizer::Adam => {
                let mut order = all.clone();
                order.shuffle(&mut substream(cfg.rng_seed, &[tag::SHUFFLE, phase as u64, epoch as u64]));
                for batch in order.chunks(cfg.batch_size) {
                    let bx = x.select(Axis(0), batch);
                    let by: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
                    let bg = step(&mut model, bx.view(), &by, cfg, &mut state)?;
                    observer.on_step(batch, &bg.dual, cfg);
                }
            }
        }
        if !tracked.is_empty() {
            history.push(&model.evaluate(tx.view(), &ty), &ty);
        }
        history.epochs = epoch;
        observer.on_epoch_end(epoch, &model);

        let scores = model.scores(x.view());
        let loss = loss_from_scores(&scores, &y, cfg.loss);
        if cfg.optimizer == Optimizer::Gd {
            if !loss.is_finite() {
                return Err(ModelsError::Divergence {
                    epoch,
                    window: rises + 1,
                    learning_rate: cfg.learning_rate,
                });
            }
            if loss > *loss_trace.last().unwrap() {
                rises += 1;
                if rises >= DIVERGENCE_WINDOW {
                    return Err(ModelsError::Divergence {
                        epoch,
                        window: DIVERGENCE_WINDOW,
                        learning_rate: cfg.learning_rate,
                    });
                }
            } else {
                rises = 0;
            }
        }
        loss_trace.push(loss);

        let rows = || scores.rows().into_iter().zip(&y);
        converged = match cfg.convergence {
            ConvergenceRule::Margin => rows().all(|(r, &l)| model.margin_row(r.as_slice().unwrap(), l) >= 1.0),
            ConvergenceRule::PerfectAccuracy { epochs } => {
                let all_correct = rows().all(|(r, &l)| model.predict_row(r.as_slice().unwrap()) == l);
                perfect_streak = if all_correct { perfect_streak + 1 } else { 0 };
                perfect_streak >= epochs
            }
            ConvergenceRule::Fixed => false,
        };
        if converged {
            break;
        }
    }
    if !converged && cfg.convergence != ConvergenceRule::Fixed && cfg.max_epochs > 0 {
        warn!(
            "phase {} stopped at max_epochs={} before reaching {:?}",
            phase.as_str(),
            cfg.max_epochs,
            cfg.convergence
        );
    }
    Ok(PhaseOutcome {
        model,
        history,
        epochs_run: epoch,
        converged,
        loss_trace,
    })
}

/// In-memory result of a two-split experiment.
#[derive(Clone, Debug)]
pub struct TwoSplitRun {
    pub spec: DatasetSpec,
    pub split_a: Vec<Example>,
    pub split_b: Vec<Example>,
    pub phase_a: PhaseOutcome,
    /// Phase B, tracking split A.
    pub phase_b: PhaseOutcome,
    /// Phase-B predictions on split B itself, when requested.
    pub history_b_on_b: Option<PredictionHistory>,
}

/// Train from random init on split A (tracking A), then continue on split B
/// from the phase-A weights (tracking A, and optionally B).
pub fn two_split_run(spec: &DatasetSpec, cfg_a: &TrainConfig, cfg_b: &TrainConfig, track_b: bool) -> Result<TwoSplitRun> {
    let (split_a, split_b) = sample_splits(spec);
    two_split_run_on(spec, split_a, split_b, cfg_a, cfg_b, track_b)
}

/// [`two_split_run`] on pre-sampled splits.
pub fn two_split_run_on(
    spec: &DatasetSpec,
    split_a: Vec<Example>,
    split_b: Vec<Example>,
    cfg_a: &TrainConfig,
    cfg_b: &TrainConfig,
    track_b: bool,
) -> Result<TwoSplitRun> {
    cfg_a.validate(spec.num_classes)?;
    cfg_b.validate(spec.num_classes)?;
    if (cfg_a.loss == Loss::Exponential) != (cfg_b.loss == Loss::Exponential) {
        return Err(ModelsError::InvalidConfig(
            "both phases must use the same model shape (binary vs multiclass)".into(),
        ));
    }
    let init = LinearModel::random_init(spec.num_classes, spec.d, cfg_a);
    let phase_a = train_phase(init, &split_a, &split_a, cfg_a, Phase::A)?;

    let mut tracked = split_a.clone();
    if track_b {
        tracked.extend(split_b.iter().cloned());
    }
    let mut phase_b = train_phase(phase_a.model.clone(), &split_b, &tracked, cfg_b, Phase::B)?;
    let history_b_on_b = if track_b {
        let first_b = spec.n as u64;
        let on_b = phase_b.history.restrict(|id| id >= first_b);
        phase_b.history = phase_b.history.restrict(|id| id < first_b);
        Some(on_b)
    } else {
        None
    };
    Ok(TwoSplitRun {
        spec: spec.clone(),
        split_a,
        split_b,
        phase_a,
        phase_b,
        history_b_on_b,
    })
}

/// Flat weights with shape metadata, as persisted in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsCheckpoint {
    pub shape: [usize; 2],
    pub weights: Vec<f64>,
}

impl From<&LinearModel> for WeightsCheckpoint {
    fn from(m: &LinearModel) -> Self {
        WeightsCheckpoint {
            shape: [m.weights.nrows(), m.weights.ncols()],
            weights: m.weights.iter().copied().collect(),
        }
    }
}

impl TryFrom<WeightsCheckpoint> for LinearModel {
    type Error = ModelsError;
    fn try_from(c: WeightsCheckpoint) -> Result<Self> {
        Array2::from_shape_vec((c.shape[0], c.shape[1]), c.weights)
            .map(|weights| LinearModel { weights })
            .map_err(|e| ModelsError::InvalidConfig(format!("checkpoint shape: {e}")))
    }
}
