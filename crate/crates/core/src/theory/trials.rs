//! Monte Carlo forgetting trials on the binary two-group mixture.

use std::io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    check_assumptions, hard_margin_svm, representer_trace, stable_learning_rate, AssumptionParams, AssumptionReport,
    BinaryData, Frequency, Result, TheoryError,
};
use crate::datagen::{build_spec, sample_splits, DatasetSpec, Example, GroupKind, Provenance, SpecConfig};
use crate::models::{train_phase, ConvergenceRule, LinearModel, Phase, TrainConfig};
use crate::rng::{derive_seed, tag};

/// Label of the majority group the mislabeled probe comes from.
const D1: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialParams {
    pub d: usize,
    pub k: usize,
    pub n: usize,
    pub mu: f64,
    pub sigma: f64,
    #[serde(default = "default_lambda")]
    pub complexity_factor: f64,
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Phase-B horizon for the intermediate-window trials.
    #[serde(default = "default_phase_b")]
    pub phase_b_epochs: usize,
    /// Phase-A epoch cap for the intermediate-window trials.
    #[serde(default = "default_phase_a")]
    pub phase_a_max_epochs: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_c")]
    pub c: f64,
}

fn default_lambda() -> f64 {
    1.25
}
fn default_phase_b() -> usize {
    500
}
fn default_phase_a() -> usize {
    20_000
}
fn default_delta() -> f64 {
    0.05
}
fn default_c() -> f64 {
    1.0
}

impl TrialParams {
    /// d=500, k=25, n=100, mu=sigma=1, 200 trials.
    pub fn asymptotic_default() -> Self {
        TrialParams {
            d: 500,
            k: 25,
            n: 100,
            mu: 1.0,
            sigma: 1.0,
            complexity_factor: default_lambda(),
            trials: 200,
            seed: 0,
            phase_b_epochs: default_phase_b(),
            phase_a_max_epochs: default_phase_a(),
            delta: default_delta(),
            c: default_c(),
        }
    }

    /// d=500, k=25, n=100, mu=sigma=1, 10 runs of 200 phase-B epochs.
    pub fn representer_default() -> Self {
        TrialParams {
            trials: 10,
            phase_b_epochs: 200,
            ..Self::asymptotic_default()
        }
    }

    /// d=1000, k=25, n=100, mu=sigma=1, 100 trials.
    pub fn intermediate_default() -> Self {
        TrialParams {
            d: 1000,
            trials: 100,
            ..Self::asymptotic_default()
        }
    }

    fn assumptions(&self) -> AssumptionReport {
        check_assumptions(
            AssumptionParams {
                n: self.n,
                d: self.d,
                k: self.k,
                mu: self.mu,
                sigma: self.sigma,
            },
            self.delta,
            self.c,
        )
    }

    fn spec(&self, trial: usize, complex: bool) -> Result<DatasetSpec> {
        let mut cfg = SpecConfig::binary_theory(self.d, self.k, self.n, self.mu, self.sigma, true);
        cfg.complexity_factor = self.complexity_factor;
        if complex {
            for g in cfg.groups.iter_mut().filter(|g| g.kind == GroupKind::Typical) {
                g.kind = GroupKind::Complex;
            }
        }
        cfg.rng_seed = derive_seed(self.seed, &[tag::TRIAL, trial as u64, u64::from(complex)]);
        Ok(build_spec(&cfg)?)
    }
}

fn score(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

fn predicted(w: &[f64], x: &[f64]) -> usize {
    usize::from(score(w, x) > 0.0)
}

/// First clean split-A example of group `D1`, relabelled to the other class.
fn mislabeled_probe(split_a: &mut [Example]) -> Result<usize> {
    let i = split_a
        .iter()
        .position(|e| e.group_id == D1 && e.provenance == Provenance::Clean)
        .ok_or_else(|| TheoryError::InvalidInput("split A has no majority example to relabel".into()))?;
    let e = &mut split_a[i];
    e.given_label = 1 - e.true_label;
    e.provenance = Provenance::Mislabeled;
    Ok(i)
}

fn rare_probe(split_a: &[Example]) -> Result<usize> {
    split_a
        .iter()
        .position(|e| e.provenance == Provenance::Rare)
        .ok_or_else(|| TheoryError::InvalidInput("split A has no rare example".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticOutcome {
    pub trial: usize,
    pub separable: bool,
    pub mislabeled_retained: Option<bool>,
    pub rare_misclassified: Option<bool>,
    pub complex_separable: bool,
    pub complex_misclassified: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticReport {
    pub params: TrialParams,
    pub assumptions: AssumptionReport,
    pub discarded_non_separable: usize,
    pub discarded_complex_non_separable: usize,
    /// Max-margin split-B classifier still predicts the flipped label.
    pub mislabeled_retention: Frequency,
    pub rare_misclassification: Frequency,
    /// Split B drawn from the complex groups; probe is a complex point.
    pub complex_misclassification: Frequency,
    pub outcomes: Vec<AsymptoticOutcome>,
}

fn asymptotic_one(p: &TrialParams, trial: usize) -> Result<AsymptoticOutcome> {
    let spec = p.spec(trial, false)?;
    let (mut a, b) = sample_splits(&spec);
    let mis = mislabeled_probe(&mut a)?;
    let rare = rare_probe(&a)?;
    let (separable, mislabeled_retained, rare_misclassified) = match hard_margin_svm(&BinaryData::from_examples(&b)) {
        Ok(svm) => (
            true,
            Some(predicted(&svm.w, &a[mis].x) == a[mis].given_label),
            Some(predicted(&svm.w, &a[rare].x) != a[rare].true_label),
        ),
        Err(TheoryError::NonSeparable { .. }) => (false, None, None),
        Err(e) => return Err(e),
    };

    let cspec = p.spec(trial, true)?;
    let (ca, cb) = sample_splits(&cspec);
    let probe = ca
        .iter()
        .find(|e| e.group_id == D1)
        .ok_or_else(|| TheoryError::InvalidInput("complex split A has no majority example".into()))?;
    let (complex_separable, complex_misclassified) = match hard_margin_svm(&BinaryData::from_examples(&cb)) {
        Ok(svm) => (true, Some(predicted(&svm.w, &probe.x) != probe.true_label)),
        Err(TheoryError::NonSeparable { .. }) => (false, None),
        Err(e) => return Err(e),
    };
    Ok(AsymptoticOutcome {
        trial,
        separable,
        mislabeled_retained,
        rare_misclassified,
        complex_separable,
        complex_misclassified,
    })
}

fn frequency(values: impl Iterator<Item = Option<bool>>) -> Frequency {
    let (mut hits, mut total) = (0, 0);
    for v in values.flatten() {
        total += 1;
        hits += usize::from(v);
    }
    Frequency::new(hits, total)
}

/// For each trial, fit the hard-margin SVM on a fresh split B and evaluate
/// split-A probes: a relabelled majority point, a rare point and (against a
/// split B drawn from the complex groups) a complex point.
pub fn asymptotic_forgetting_trial(p: &TrialParams) -> Result<AsymptoticReport> {
    let outcomes: Vec<AsymptoticOutcome> = (0..p.trials)
        .into_par_iter()
        .map(|t| asymptotic_one(p, t))
        .collect::<Result<_>>()?;
    Ok(AsymptoticReport {
        params: p.clone(),
        assumptions: p.assumptions(),
        discarded_non_separable: outcomes.iter().filter(|o| !o.separable).count(),
        discarded_complex_non_separable: outcomes.iter().filter(|o| !o.complex_separable).count(),
        mislabeled_retention: frequency(outcomes.iter().map(|o| o.mislabeled_retained)),
        rare_misclassification: frequency(outcomes.iter().map(|o| o.rare_misclassified)),
        complex_misclassification: frequency(outcomes.iter().map(|o| o.complex_misclassified)),
        outcomes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowOutcome {
    pub trial: usize,
    pub separable: bool,
    pub phase_a_epochs: usize,
    /// First phase-B epoch at which the probe disagrees with its given label.
    pub mislabeled_flip: Option<usize>,
    pub rare_flip: Option<usize>,
    /// First epoch of the first run where the mislabeled probe is flipped
    /// and the rare probe is still correct.
    pub window_start: Option<usize>,
    pub window_length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub params: TrialParams,
    pub assumptions: AssumptionReport,
    pub discarded_non_separable: usize,
    /// Over separable trials.
    pub window_exists: Frequency,
    /// Over trials where both probes flip: mislabeled flips first.
    pub mislabeled_flips_first: Frequency,
    pub window_start_median: Option<f64>,
    pub window_length_median: Option<f64>,
    pub outcomes: Vec<WindowOutcome>,
}

fn first_wrong(row: &[bool]) -> Option<usize> {
    row.iter().skip(1).position(|&c| !c).map(|t| t + 1)
}

fn window_one(p: &TrialParams, trial: usize) -> Result<WindowOutcome> {
    let spec = p.spec(trial, false)?;
    let (mut a, b) = sample_splits(&spec);
    let mis = mislabeled_probe(&mut a)?;
    let rare = rare_probe(&a)?;
    let empty = WindowOutcome {
        trial,
        separable: false,
        phase_a_epochs: 0,
        mislabeled_flip: None,
        rare_flip: None,
        window_start: None,
        window_length: 0,
    };
    match hard_margin_svm(&BinaryData::from_examples(&a)) {
        Ok(_) => {}
        Err(TheoryError::NonSeparable { .. }) => return Ok(empty),
        Err(e) => return Err(e),
    }

    let mut cfg_a = TrainConfig::binary_gd(stable_learning_rate(&a), p.phase_a_max_epochs);
    cfg_a.rng_seed = derive_seed(spec.rng_seed, &[tag::INIT]);
    let init = LinearModel::random_init(2, spec.d, &cfg_a);
    let out_a = train_phase(init, &a, &[], &cfg_a, Phase::A)?;

    let mut cfg_b = cfg_a.clone();
    cfg_b.max_epochs = p.phase_b_epochs;
    cfg_b.convergence = ConvergenceRule::Fixed;
    let probes = [a[mis].clone(), a[rare].clone()];
    let out_b = train_phase(out_a.model, &b, &probes, &cfg_b, Phase::B)?;
    let (mrow, rrow) = (&out_b.history.correct[0], &out_b.history.correct[1]);

    let open: Vec<bool> = (1..mrow.len()).map(|t| !mrow[t] && rrow[t]).collect();
    let window_start = open.iter().position(|&o| o).map(|t| t + 1);
    let window_length = window_start.map_or(0, |s| open[s - 1..].iter().take_while(|&&o| o).count());
    Ok(WindowOutcome {
        trial,
        separable: true,
        phase_a_epochs: out_a.epochs_run,
        mislabeled_flip: first_wrong(mrow),
        rare_flip: first_wrong(rrow),
        window_start,
        window_length,
    })
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Two-split runs with one relabelled and one rare example in split A:
/// phase A trains to margin 1, phase B runs a fixed horizon while both
/// probes are tracked, and each trial records whether some phase-B epoch
/// has the relabelled probe forgotten while the rare probe is still right.
pub fn intermediate_window_trial(p: &TrialParams) -> Result<WindowReport> {
    let outcomes: Vec<WindowOutcome> = (0..p.trials)
        .into_par_iter()
        .map(|t| window_one(p, t))
        .collect::<Result<_>>()?;
    let separable: Vec<&WindowOutcome> = outcomes.iter().filter(|o| o.separable).collect();
    let both: Vec<&&WindowOutcome> = separable
        .iter()
        .filter(|o| o.mislabeled_flip.is_some() && o.rare_flip.is_some())
        .collect();
    let with_window: Vec<&&WindowOutcome> = separable.iter().filter(|o| o.window_start.is_some()).collect();
    Ok(WindowReport {
        params: p.clone(),
        assumptions: p.assumptions(),
        discarded_non_separable: outcomes.len() - separable.len(),
        window_exists: Frequency::new(with_window.len(), separable.len()),
        mislabeled_flips_first: Frequency::new(
            both.iter().filter(|o| o.mislabeled_flip < o.rare_flip).count(),
            both.len(),
        ),
        window_start_median: median(with_window.iter().map(|o| o.window_start.unwrap() as f64).collect()),
        window_length_median: median(with_window.iter().map(|o| o.window_length as f64).collect()),
        outcomes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresenterRun {
    pub trial: usize,
    pub phase_a_epochs: usize,
    pub phase_b_epochs: usize,
    /// Smallest coefficient over all logged epochs.
    pub min_beta: f64,
    /// Largest reconstruction error relative to `1 + |w|`.
    pub max_relative_error: f64,
    pub max_delta: f64,
    pub final_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresenterReport {
    pub params: TrialParams,
    pub assumptions: AssumptionReport,
    pub all_beta_non_negative: bool,
    pub max_relative_error: f64,
    pub runs: Vec<RepresenterRun>,
}

fn representer_one(p: &TrialParams, trial: usize) -> Result<RepresenterRun> {
    let spec = p.spec(trial, false)?;
    let (mut a, b) = sample_splits(&spec);
    let mis = mislabeled_probe(&mut a)?;
    let mut cfg_a = TrainConfig::binary_gd(stable_learning_rate(&a), p.phase_a_max_epochs);
    cfg_a.rng_seed = derive_seed(spec.rng_seed, &[tag::INIT]);
    let init = LinearModel::random_init(2, spec.d, &cfg_a);
    let out_a = train_phase(init, &a, &[], &cfg_a, Phase::A)?;

    let mut cfg_b = TrainConfig::binary_gd(stable_learning_rate(&b), p.phase_b_epochs);
    cfg_b.convergence = ConvergenceRule::Fixed;
    let trace = representer_trace(&out_a.model, &b, &cfg_b, a[mis].group_id)?;
    Ok(RepresenterRun {
        trial,
        phase_a_epochs: out_a.epochs_run,
        phase_b_epochs: trace.epochs,
        min_beta: trace.min_beta.iter().copied().fold(f64::INFINITY, f64::min),
        max_relative_error: trace.max_relative_error(),
        max_delta: trace.max_delta(),
        final_delta: trace.delta.last().copied().unwrap_or(f64::NAN),
    })
}

/// Two-split runs with one relabelled example in split A, fine-tuned by
/// full-batch GD on split B while the representer coefficients are traced.
/// The traced group is the relabelled example's true group. `p.trials`
/// sets the number of runs.
pub fn representer_suite(p: &TrialParams) -> Result<RepresenterReport> {
    let runs: Vec<RepresenterRun> = (0..p.trials)
        .into_par_iter()
        .map(|t| representer_one(p, t))
        .collect::<Result<_>>()?;
    Ok(RepresenterReport {
        params: p.clone(),
        assumptions: p.assumptions(),
        all_beta_non_negative: runs.iter().all(|r| r.min_beta >= 0.0),
        max_relative_error: runs.iter().map(|r| r.max_relative_error).fold(0.0, f64::max),
        runs,
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn write_asymptotic_csv<W: io::Write>(outcomes: &[AsymptoticOutcome], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "trial",
        "separable",
        "mislabeled_retained",
        "rare_misclassified",
        "complex_separable",
        "complex_misclassified",
    ])?;
    for o in outcomes {
        w.write_record([
            o.trial.to_string(),
            o.separable.to_string(),
            opt(o.mislabeled_retained),
            opt(o.rare_misclassified),
            o.complex_separable.to_string(),
            opt(o.complex_misclassified),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_window_csv<W: io::Write>(outcomes: &[WindowOutcome], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "trial",
        "separable",
        "phase_a_epochs",
        "mislabeled_flip",
        "rare_flip",
        "window_start",
        "window_length",
    ])?;
    for o in outcomes {
        w.write_record([
            o.trial.to_string(),
            o.separable.to_string(),
            o.phase_a_epochs.to_string(),
            opt(o.mislabeled_flip),
            opt(o.rare_flip),
            opt(o.window_start),
            o.window_length.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_scan() {
        assert_eq!(first_wrong(&[true, true, false, true]), Some(2));
        assert_eq!(first_wrong(&[false, true, true]), None);
    }

    #[test]
    fn small_asymptotic_run_is_deterministic() {
        let mut p = TrialParams::asymptotic_default();
        p.trials = 6;
        let a = asymptotic_forgetting_trial(&p).unwrap();
        let b = asymptotic_forgetting_trial(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.outcomes.len(), 6);
    }

    #[test]
    fn out_of_regime_still_reports() {
        let mut p = TrialParams::intermediate_default();
        // smallest layout holding two majority groups and one rare group
        p.d = 3;
        p.k = 1;
        p.n = 20;
        p.trials = 3;
        p.phase_b_epochs = 20;
        p.phase_a_max_epochs = 2000;
        let r = intermediate_window_trial(&p).unwrap();
        assert!(!r.assumptions.a3_ok);
        assert_eq!(r.outcomes.len(), 3);
    }
}
