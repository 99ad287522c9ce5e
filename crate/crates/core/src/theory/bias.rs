//! Implicit bias of exponential-loss gradient descent and the representer
//! decomposition of the fine-tuning phase.

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    hard_margin_svm, projected_gradient_qp, random_separable_instance, signed, stable_learning_rate, svm::SvmSolution,
    BinaryData, Result, TheoryError,
};
use crate::datagen::{feature_matrix, Example};
use crate::models::{
    train_phase_observed, ConvergenceRule, LinearModel, Loss, Optimizer, Phase, StepObserver, TrainConfig,
};
use crate::rng::{derive_seed, tag};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasCheckpoint {
    pub iteration: usize,
    pub cosine: f64,
    pub weight_norm: f64,
    /// `|w(t) - w_svm ln t|`
    pub residual_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplicitBiasReport {
    pub iterations: usize,
    pub learning_rate: f64,
    pub cosine: f64,
    pub svm_norm: f64,
    pub checkpoints: Vec<BiasCheckpoint>,
}

struct Checkpoints<'a> {
    at: &'a [usize],
    svm: &'a [f64],
    out: Vec<BiasCheckpoint>,
}

impl Checkpoints<'_> {
    fn record(&mut self, iteration: usize, w: &[f64]) {
        let lt = (iteration.max(1) as f64).ln();
        let residual: Vec<f64> = w.iter().zip(self.svm).map(|(a, b)| a - b * lt).collect();
        self.out.push(BiasCheckpoint {
            iteration,
            cosine: cosine(w, self.svm),
            weight_norm: norm(w),
            residual_norm: norm(&residual),
        });
    }
}

impl StepObserver for Checkpoints<'_> {
    fn on_epoch_end(&mut self, epoch: usize, model: &LinearModel) {
        if self.at.contains(&epoch) {
            self.record(epoch, model.weights.row(0).as_slice().unwrap());
        }
    }
}

/// Run `iterations` full-batch exponential-loss GD steps from `init` and
/// report the cosine to the hard-margin direction, plus the residual
/// `w(t) - w_svm ln t` at each requested checkpoint.
pub fn implicit_bias_check(
    data: &[Example],
    svm: &SvmSolution,
    init: LinearModel,
    learning_rate: f64,
    iterations: usize,
    checkpoints: &[usize],
) -> Result<ImplicitBiasReport> {
    if !init.is_binary() {
        return Err(TheoryError::InvalidInput("implicit bias check needs a binary model".into()));
    }
    let mut cfg = TrainConfig::binary_gd(learning_rate, iterations);
    cfg.convergence = ConvergenceRule::Fixed;
    let mut obs = Checkpoints {
        at: checkpoints,
        svm: &svm.w,
        out: Vec::new(),
    };
    if checkpoints.contains(&0) {
        obs.record(0, init.weights.row(0).as_slice().unwrap());
    }
    let out = train_phase_observed(init, data, &[], &cfg, Phase::A, &mut obs)?;
    let w = out.model.weights.row(0).to_vec();
    Ok(ImplicitBiasReport {
        iterations,
        learning_rate,
        cosine: cosine(&w, &svm.w),
        svm_norm: svm.norm(),
        checkpoints: obs.out,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSuiteParams {
    pub instances: usize,
    pub n: usize,
    pub d: usize,
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_qp_iterations")]
    pub qp_max_iterations: usize,
}

fn default_qp_iterations() -> usize {
    100_000
}

impl Default for BiasSuiteParams {
    /// 20 instances, n=20, d=50, 10^5 iterations.
    fn default() -> Self {
        BiasSuiteParams {
            instances: 20,
            n: 20,
            d: 50,
            iterations: 100_000,
            seed: 0,
            qp_max_iterations: default_qp_iterations(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasInstance {
    pub instance: usize,
    pub learning_rate: f64,
    /// Cosine after a tenth of the iterations.
    pub cosine_early: f64,
    pub cosine: f64,
    pub final_residual_norm: f64,
    /// Primal distance between the coordinate-ascent and QP solutions.
    pub solver_distance: f64,
    pub kkt_residual: f64,
    pub support_vectors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSuiteReport {
    pub params: BiasSuiteParams,
    pub min_cosine: f64,
    pub max_solver_distance: f64,
    /// Every instance has `cosine >= cosine_early - 1e-3`.
    pub direction_monotone: bool,
    pub instances: Vec<BiasInstance>,
}

fn bias_instance(p: &BiasSuiteParams, i: usize) -> Result<BiasInstance> {
    let seed = derive_seed(p.seed, &[tag::TRIAL, i as u64]);
    let data = random_separable_instance(p.n, p.d, seed);
    let binary = BinaryData::from_examples(&data);
    let svm = hard_margin_svm(&binary)?;
    let oracle = projected_gradient_qp(&binary, p.qp_max_iterations)?;
    let solver_distance = svm.w.iter().zip(&oracle.w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let learning_rate = stable_learning_rate(&data);
    let mut cfg = TrainConfig::binary_gd(learning_rate, p.iterations);
    cfg.rng_seed = derive_seed(seed, &[tag::INIT]);
    let init = LinearModel::random_init(2, p.d, &cfg);
    let early = (p.iterations / 10).max(1);
    let r = implicit_bias_check(&data, &svm, init, learning_rate, p.iterations, &[early, p.iterations])?;
    let at = |t: usize| r.checkpoints.iter().find(|c| c.iteration == t);
    Ok(BiasInstance {
        instance: i,
        learning_rate,
        cosine_early: at(early).map_or(f64::NAN, |c| c.cosine),
        cosine: r.cosine,
        final_residual_norm: at(p.iterations).map_or(f64::NAN, |c| c.residual_norm),
        solver_distance,
        kkt_residual: svm.kkt_residual,
        support_vectors: svm.support_ids.len(),
    })
}

/// Implicit-bias convergence on random separable instances: each instance
/// runs GD at `1 / lambda_max(X X^T)` from a small random init and is
/// compared against the hard-margin solution, which is itself
/// cross-checked against the QP oracle.
pub fn implicit_bias_suite(p: &BiasSuiteParams) -> Result<BiasSuiteReport> {
    let instances: Vec<BiasInstance> = (0..p.instances)
        .into_par_iter()
        .map(|i| bias_instance(p, i))
        .collect::<Result<_>>()?;
    Ok(BiasSuiteReport {
        params: p.clone(),
        min_cosine: instances.iter().map(|b| b.cosine).fold(f64::INFINITY, f64::min),
        max_solver_distance: instances.iter().map(|b| b.solver_distance).fold(0.0, f64::max),
        direction_monotone: instances.iter().all(|b| b.cosine >= b.cosine_early - 1e-3),
        instances,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresenterTrace {
    pub example_ids: Vec<u64>,
    /// Final accumulated coefficients, aligned with `example_ids`.
    pub beta: Vec<f64>,
    /// Per epoch `1..=T`: smallest coefficient.
    pub min_beta: Vec<f64>,
    /// Per epoch: coefficient mass on the tracked group over total mass.
    pub delta: Vec<f64>,
    /// Per epoch: max-norm error of the reconstruction identity.
    pub reconstruction_error: Vec<f64>,
    /// Per epoch: `|w(t)|`.
    pub weight_norm: Vec<f64>,
    pub epochs: usize,
}

impl RepresenterTrace {
    /// `max_t delta_t`.
    pub fn max_delta(&self) -> f64 {
        self.delta.iter().copied().fold(f64::NAN, f64::max)
    }

    /// Largest reconstruction error scaled by `1 + |w(t)|`.
    pub fn max_relative_error(&self) -> f64 {
        self.reconstruction_error
            .iter()
            .zip(&self.weight_norm)
            .map(|(e, n)| e / (1.0 + n))
            .fold(0.0, f64::max)
    }
}

struct BetaObserver {
    beta: Vec<f64>,
    signed_x: ndarray::Array2<f64>,
    w0: Array1<f64>,
    in_group: Vec<bool>,
    trace_min: Vec<f64>,
    trace_delta: Vec<f64>,
    trace_err: Vec<f64>,
    trace_norm: Vec<f64>,
    failure: Option<(usize, f64, f64)>,
}

impl StepObserver for BetaObserver {
    fn on_step(&mut self, batch: &[usize], dual: &[f64], cfg: &TrainConfig) {
        for (&j, &c) in batch.iter().zip(dual) {
            self.beta[j] += cfg.learning_rate * c;
        }
    }

    fn on_epoch_end(&mut self, epoch: usize, model: &LinearModel) {
        let w = model.weights.row(0);
        let recon = Array1::from(self.beta.clone()).dot(&self.signed_x);
        let err = w
            .iter()
            .zip(&self.w0)
            .zip(&recon)
            .map(|((wt, w0), r)| (wt - w0 - r).abs())
            .fold(0.0, f64::max);
        let norm = w.dot(&w).sqrt();
        let tolerance = 1e-6 * (1.0 + norm);
        if err > tolerance && self.failure.is_none() {
            self.failure = Some((epoch, err, tolerance));
        }
        let total: f64 = self.beta.iter().sum();
        let group: f64 = self.beta.iter().zip(&self.in_group).filter(|(_, &g)| g).map(|(b, _)| b).sum();
        self.trace_min.push(self.beta.iter().copied().fold(f64::INFINITY, f64::min));
        self.trace_delta.push(if total > 0.0 { group / total } else { f64::NAN });
        self.trace_err.push(err);
        self.trace_norm.push(norm);
    }
}

/// Fine-tune `start` on `split_b` with full-batch exponential-loss GD while
/// accumulating `beta_j += eta exp(-y_j w.x_j)` and checking
/// `w(t) - w(0) = sum_j beta_j y_j x_j` after every epoch. `delta_group` is
/// the group whose share of the coefficient mass is traced.
pub fn representer_trace(
    start: &LinearModel,
    split_b: &[Example],
    cfg: &TrainConfig,
    delta_group: usize,
) -> Result<RepresenterTrace> {
    if cfg.loss != Loss::Exponential || cfg.optimizer != Optimizer::Gd {
        return Err(TheoryError::InvalidInput(
            "representer trace needs full-batch GD on the exponential loss".into(),
        ));
    }
    if cfg.weight_decay != 0.0 || cfg.momentum != 0.0 {
        return Err(TheoryError::InvalidInput(
            "weight decay and momentum break the representer identity".into(),
        ));
    }
    let mut signed_x = feature_matrix(split_b);
    for (mut row, e) in signed_x.rows_mut().into_iter().zip(split_b) {
        row *= signed(e.given_label);
    }
    let mut obs = BetaObserver {
        beta: vec![0.0; split_b.len()],
        signed_x,
        w0: start.weights.row(0).to_owned(),
        in_group: split_b.iter().map(|e| e.group_id == delta_group).collect(),
        trace_min: Vec::new(),
        trace_delta: Vec::new(),
        trace_err: Vec::new(),
        trace_norm: Vec::new(),
        failure: None,
    };
    let out = train_phase_observed(start.clone(), split_b, &[], cfg, Phase::B, &mut obs)?;
    if let Some((epoch, error, tolerance)) = obs.failure {
        return Err(TheoryError::ReconstructionMismatch { epoch, error, tolerance });
    }
    Ok(RepresenterTrace {
        example_ids: split_b.iter().map(|e| e.example_id).collect(),
        beta: obs.beta,
        min_beta: obs.trace_min,
        delta: obs.trace_delta,
        reconstruction_error: obs.trace_err,
        weight_norm: obs.trace_norm,
        epochs: out.epochs_run,
    })
}
