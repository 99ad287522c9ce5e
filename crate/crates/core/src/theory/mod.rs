//! Small-instance checks of the linear theory: data assumptions, the
//! hard-margin SVM, implicit bias of exponential-loss GD, the representer
//! decomposition of fine-tuning, and Monte Carlo forgetting trials.

use std::io;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{feature_matrix, DatagenError, DatasetSpec, Example, Provenance, Split};
use crate::models::ModelsError;
use crate::rng::{substream, tag};

pub mod bias;
pub mod svm;
pub mod trials;

pub use bias::{
    implicit_bias_check, implicit_bias_suite, representer_trace, BiasSuiteParams, BiasSuiteReport, ImplicitBiasReport,
    RepresenterTrace,
};
pub use svm::{hard_margin_svm, projected_gradient_qp, SvmSolution};
pub use trials::{
    asymptotic_forgetting_trial, intermediate_window_trial, representer_suite, AsymptoticReport, RepresenterReport,
    TrialParams, WindowReport,
};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("training set is not linearly separable (gave up after {sweeps} sweeps)")]
    NonSeparable { sweeps: usize },
    #[error("{n} examples exceed the small-instance bound {bound}")]
    TooLarge { n: usize, bound: usize },
    #[error("representer reconstruction off by {error:e} at epoch {epoch} (tolerance {tolerance:e})")]
    ReconstructionMismatch { epoch: usize, error: f64, tolerance: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Models(#[from] ModelsError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TheoryError>;

/// A binary training set with labels in {-1, +1}.
#[derive(Clone, Debug)]
pub struct BinaryData {
    pub x: Array2<f64>,
    pub y: Vec<f64>,
    pub ids: Vec<u64>,
}

impl BinaryData {
    /// Given label 1 maps to +1, anything else to -1.
    pub fn from_examples(examples: &[Example]) -> Self {
        BinaryData {
            x: feature_matrix(examples),
            y: examples.iter().map(|e| signed(e.given_label)).collect(),
            ids: examples.iter().map(|e| e.example_id).collect(),
        }
    }
}

pub fn signed(label: usize) -> f64 {
    if label == 1 {
        1.0
    } else {
        -1.0
    }
}

/// `n` standard Gaussian points in `d` dimensions labelled by a random
/// teacher direction, so the set is separable through the origin.
pub fn random_separable_instance(n: usize, d: usize, seed: u64) -> Vec<Example> {
    let mut rng = substream(seed, &[tag::TRIAL]);
    let teacher: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let s: f64 = x.iter().zip(&teacher).map(|(a, b)| a * b).sum();
            let label = usize::from(s > 0.0);
            Example {
                example_id: i as u64,
                x,
                given_label: label,
                true_label: label,
                group_id: label,
                provenance: Provenance::Clean,
                split: Split::A,
            }
        })
        .collect()
}

/// `1 / lambda_max(X X^T)`: a step size for summed exponential-loss GD that
/// keeps the loss monotone from a near-zero start.
pub fn stable_learning_rate(examples: &[Example]) -> f64 {
    let x = feature_matrix(examples);
    1.0 / svm::largest_eigenvalue(&x.dot(&x.t())).max(f64::MIN_POSITIVE)
}

/// One inequality with its two sides; `slack = lhs - rhs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inequality {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub ok: bool,
}

impl Inequality {
    fn at_least(lhs: f64, rhs: f64) -> Self {
        Inequality {
            lhs,
            rhs,
            slack: lhs - rhs,
            ok: lhs >= rhs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionParams {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub mu: f64,
    pub sigma: f64,
}

impl AssumptionParams {
    /// Uses the largest coordinate mean among the majority groups.
    pub fn from_spec(spec: &DatasetSpec) -> Self {
        AssumptionParams {
            n: spec.n,
            d: spec.d,
            k: spec.k,
            mu: spec.majority_groups().map(|g| g.coordinate_mean).fold(0.0, f64::max),
            sigma: spec.sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub delta: f64,
    pub c: f64,
    pub params: AssumptionParams,
    /// `1/C >= delta`
    pub a1: Inequality,
    /// `n >= C ln(1/delta)`
    pub a2: Inequality,
    /// `d >= C max{n^2 ln(n/delta), n k mu^2 / sigma^2}`
    pub a3_dimension: Inequality,
    /// `k mu^2 / sigma^2 >= C ln(n/delta)`
    pub a3_snr: Inequality,
    pub a1_ok: bool,
    pub a2_ok: bool,
    pub a3_ok: bool,
}

impl AssumptionReport {
    pub fn all_ok(&self) -> bool {
        self.a1_ok && self.a2_ok && self.a3_ok
    }
}

/// Evaluate the three data assumptions. Advisory only: failures are logged,
/// never returned as errors.
pub fn check_assumptions(p: AssumptionParams, delta: f64, c: f64) -> AssumptionReport {
    let n = p.n as f64;
    let snr = if p.sigma == 0.0 {
        f64::INFINITY
    } else {
        p.k as f64 * p.mu * p.mu / (p.sigma * p.sigma)
    };
    let a1 = Inequality::at_least(1.0 / c, delta);
    let a2 = Inequality::at_least(n, c * (1.0 / delta).ln());
    let a3_dimension = Inequality::at_least(p.d as f64, c * f64::max(n * n * (n / delta).ln(), n * snr));
    let a3_snr = Inequality::at_least(snr, c * (n / delta).ln());
    let report = AssumptionReport {
        delta,
        c,
        params: p,
        a1,
        a2,
        a3_dimension,
        a3_snr,
        a1_ok: a1.ok,
        a2_ok: a2.ok,
        a3_ok: a3_dimension.ok && a3_snr.ok,
    };
    if !report.all_ok() {
        log::warn!(
            "data assumptions not met (a1 {}, a2 {}, a3 {}); results are outside the guaranteed regime",
            report.a1_ok,
            report.a2_ok,
            report.a3_ok
        );
    }
    report
}

/// Observed frequency with a 95% Wilson score interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frequency {
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Frequency {
    pub fn new(successes: usize, trials: usize) -> Self {
        let (ci_low, ci_high) = wilson_interval(successes, trials, 1.959_963_984_540_054);
        Frequency {
            successes,
            trials,
            rate: if trials == 0 { f64::NAN } else { successes as f64 / trials as f64 },
            ci_low,
            ci_high,
        }
    }
}

/// Wilson score interval for `successes / trials` at normal quantile `z`.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}
