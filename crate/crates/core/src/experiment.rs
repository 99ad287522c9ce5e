//! Declarative experiments: JSON configs, the run pipeline (generate, phase
//! A, phase B, metrics, analyses), parameter sweeps, theory suites, and the
//! on-disk artifact tree with its content-hash manifest.
//!
//! Layout of one run:
//!
//! ```text
//! <output_dir>/<run_id>/
//!     config.json      effective single-seed config
//!     data/            spec.json, split_a.csv, split_b.csv, eval.csv
//!     history/         history.csv, history_b_on_b.csv, weights_*.json
//!     metrics/         metrics.csv
//!     reports/         summary.json, auc.csv, curves.csv, scatter.csv, ...
//!     manifest.json    sha256 of every other file
//! ```
//!
//! `run_id` is `seed<seed>-<first 12 hex digits of sha256(config.json)>`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{
    auc_table, curve_data, removal_retrain, stability, write_auc_csv, write_removal_csv, write_stability_csv,
    AnalysisError, AucReport, Correlation, CurveTables, RemovalCurve, RemovalSetup, RemovalStrategy,
};
use crate::datagen::{
    build_spec, sample_clean_eval, sample_splits, write_split_csv, DatagenError, EvalGroups, Example, Provenance,
    SpecConfig,
};
use crate::dynamics::{compute_records, write_metrics_csv, DynamicsError, MetricRecord};
use crate::models::{
    read_history_csv, two_split_run_on, write_history_csv, ModelsError, TrainConfig, TwoSplitRun, WeightsCheckpoint,
};
use crate::rng::{derive_seed, tag};
use crate::theory::{
    asymptotic_forgetting_trial, check_assumptions, implicit_bias_suite, intermediate_window_trial,
    representer_suite, trials::write_asymptotic_csv, trials::write_window_csv, AssumptionParams, AssumptionReport,
    AsymptoticReport, BiasSuiteParams, BiasSuiteReport, RepresenterReport, TheoryError, TrialParams, WindowReport,
};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SSFT_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "ssft-runs";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Models(#[from] ModelsError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("artifact integrity check failed: {0}")]
    Integrity(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

impl ExperimentError {
    fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        ExperimentError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            ExperimentError::Models(ModelsError::Divergence { .. })
                | ExperimentError::Analysis(AnalysisError::Models(ModelsError::Divergence { .. }))
                | ExperimentError::Theory(TheoryError::Models(ModelsError::Divergence { .. }))
        )
    }

    /// 1 config, 2 divergence, 3 I/O or artifact integrity.
    pub fn exit_code(&self) -> i32 {
        use ExperimentError as E;
        if self.is_divergence() {
            return 2;
        }
        match self {
            E::Io { .. } | E::Integrity(_) | E::Csv(_) => 3,
            E::Models(ModelsError::Io(_) | ModelsError::Csv(_))
            | E::Datagen(DatagenError::Io(_) | DatagenError::Csv(_))
            | E::Dynamics(DynamicsError::Io(_) | DynamicsError::Csv(_))
            | E::Analysis(AnalysisError::Io(_) | AnalysisError::Csv(_))
            | E::Theory(TheoryError::Io(_) | TheoryError::Csv(_)) => 3,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisKind {
    Metrics,
    Auc,
    Curves,
    Removal,
    Stability,
    /// Data-assumption report for the dataset parameters.
    Theory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemovalSettings {
    /// Fractions of `|S_A|` to remove; counts are rounded to nearest.
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_retrain_seeds")]
    pub retrain_seeds: usize,
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    #[serde(default)]
    pub eval_groups: EvalGroups,
    #[serde(default = "all_strategies")]
    pub strategies: Vec<RemovalStrategy>,
    /// Retrain for exactly as many epochs as the reference phase A ran.
    #[serde(default = "yes")]
    pub reference_budget: bool,
}

fn default_fractions() -> Vec<f64> {
    vec![0.0, 0.02, 0.05, 0.1, 0.2, 0.4]
}
fn default_retrain_seeds() -> usize {
    5
}
fn default_eval_size() -> usize {
    2000
}
fn all_strategies() -> Vec<RemovalStrategy> {
    RemovalStrategy::ALL.to_vec()
}
fn yes() -> bool {
    true
}

impl Default for RemovalSettings {
    fn default() -> Self {
        RemovalSettings {
            fractions: default_fractions(),
            retrain_seeds: default_retrain_seeds(),
            eval_size: default_eval_size(),
            eval_groups: EvalGroups::default(),
            strategies: all_strategies(),
            reference_budget: true,
        }
    }
}

/// The second training run compared against the main one. Unset phases
/// reuse the main configs with fresh seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_a: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_b: Option<TrainConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssumptionSettings {
    pub delta: f64,
    pub c: f64,
}

impl Default for AssumptionSettings {
    fn default() -> Self {
        AssumptionSettings { delta: 0.05, c: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub dataset: SpecConfig,
    pub phase_a: TrainConfig,
    pub phase_b: TrainConfig,
    #[serde(default = "default_analyses")]
    pub analyses: Vec<AnalysisKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Also record phase-B predictions on split B.
    #[serde(default)]
    pub track_b: bool,
    #[serde(default)]
    pub removal: RemovalSettings,
    #[serde(default)]
    pub stability: StabilitySettings,
    #[serde(default)]
    pub assumptions: AssumptionSettings,
}

fn default_analyses() -> Vec<AnalysisKind> {
    vec![AnalysisKind::Metrics, AnalysisKind::Auc, AnalysisKind::Curves]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn parse_value<T: DeserializeOwned>(value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        ExperimentError::config(path, e.into_inner().to_string())
    })
}

fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ExperimentError::config(path, e.into_inner().to_string())
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))
}

fn to_json(value: &impl Serialize) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report types serialize to JSON");
    out.push(b'\n');
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunConfig {
    /// The 10-class mixture with 10% label noise: SGD at 1e-2 with batch 10,
    /// phase A until 5 perfect epochs (cap 300), phase B for 500 epochs,
    /// seeds 0..5.
    pub fn ten_class_default() -> Self {
        let mut phase_b = TrainConfig::multiclass_sgd(1e-2, 500);
        phase_b.convergence = crate::models::ConvergenceRule::Fixed;
        RunConfig {
            schema_version: SCHEMA_VERSION,
            dataset: SpecConfig::ten_class_default(),
            phase_a: TrainConfig::multiclass_sgd(1e-2, 300),
            phase_b,
            analyses: default_analyses(),
            output_dir: None,
            seeds: (0..5).collect(),
            track_b: false,
            removal: RemovalSettings::default(),
            stability: StabilitySettings::default(),
            assumptions: AssumptionSettings::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }

    pub fn has(&self, a: AnalysisKind) -> bool {
        self.analyses.contains(&a)
    }

    pub fn validate(&self) -> Result<()> {
        use AnalysisKind as A;
        if self.schema_version != SCHEMA_VERSION {
            return Err(ExperimentError::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::config("seeds", "at least one seed is required"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(ExperimentError::config("seeds", format!("seed {s} listed twice")));
        }
        for a in [A::Auc, A::Curves, A::Removal, A::Stability] {
            if self.has(a) && !self.has(A::Metrics) {
                return Err(ExperimentError::config(
                    "analyses",
                    format!("{} requires metrics", serde_json::to_string(&a).unwrap_or_default()),
                ));
            }
        }
        let k = self.dataset.num_classes;
        let wrap = |field: &'static str| move |e: ModelsError| ExperimentError::config(field, e.to_string());
        self.phase_a.validate(k).map_err(wrap("phase_a"))?;
        self.phase_b.validate(k).map_err(wrap("phase_b"))?;
        if let Some(c) = &self.stability.phase_a {
            c.validate(k).map_err(wrap("stability.phase_a"))?;
        }
        if let Some(c) = &self.stability.phase_b {
            c.validate(k).map_err(wrap("stability.phase_b"))?;
        }
        if let Some(f) = self.removal.fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
            return Err(ExperimentError::config(
                "removal.fractions",
                format!("fraction {f} outside [0, 1)"),
            ));
        }
        if self.has(A::Removal) && (self.removal.retrain_seeds == 0 || self.removal.eval_size == 0) {
            return Err(ExperimentError::config(
                "removal",
                "retrain_seeds and eval_size must be positive",
            ));
        }
        build_spec(&self.dataset).map_err(|e| ExperimentError::config("dataset", e.to_string()))?;
        Ok(())
    }

    /// The effective single-seed config: every random stream derives from
    /// `seed`, and the output location is dropped.
    pub fn for_seed(&self, seed: u64) -> RunConfig {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.output_dir = None;
        c.dataset.rng_seed = seed;
        c.phase_a.rng_seed = derive_seed(seed, &[tag::PHASE, 0]);
        c.phase_b.rng_seed = derive_seed(seed, &[tag::PHASE, 1]);
        c
    }

    /// Shrink to a smoke-test size: at most 20 epochs per phase, one
    /// retraining seed and a 200-point evaluation set.
    pub fn make_quick(&mut self) {
        for p in [&mut self.phase_a, &mut self.phase_b] {
            p.max_epochs = p.max_epochs.min(20);
        }
        self.removal.retrain_seeds = 1;
        self.removal.eval_size = self.removal.eval_size.min(200);
    }

    /// Content hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn run_id(&self, seed: u64) -> String {
        format!("seed{seed}-{}", &self.for_seed(seed).hash()[..12])
    }
}

/// Output root: explicit override, else the config's `output_dir`, else
/// `$SSFT_OUTPUT_ROOT`, else `ssft-runs`.
pub fn output_root(explicit: Option<&Path>, configured: Option<&Path>) -> PathBuf {
    explicit
        .or(configured)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceSummary {
    pub provenance: Provenance,
    pub count: usize,
    /// Share with a finite forgetting time.
    pub forgotten_fraction: f64,
    /// Share with a finite learning time.
    pub learned_fraction: f64,
    /// NEVER counts as horizon + 1.
    pub median_ssft: f64,
    pub median_fslt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub run_id: String,
    pub seed: u64,
    pub split_a_size: usize,
    pub split_b_size: usize,
    pub phase_a_epochs: usize,
    pub phase_a_converged: bool,
    pub phase_b_epochs: usize,
    pub provenance: Vec<ProvenanceSummary>,
    pub auc: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stability: Vec<Correlation>,
}

impl RunSummary {
    pub fn of(&self, p: Provenance) -> Option<&ProvenanceSummary> {
        self.provenance.iter().find(|s| s.provenance == p)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn provenance_summaries(records: &[MetricRecord]) -> Vec<ProvenanceSummary> {
    let mut groups: BTreeMap<Provenance, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        if let Some(p) = r.provenance {
            groups.entry(p).or_default().push(r);
        }
    }
    groups
        .into_iter()
        .map(|(p, rs)| {
            let n = rs.len() as f64;
            ProvenanceSummary {
                provenance: p,
                count: rs.len(),
                forgotten_fraction: rs.iter().filter(|r| !r.ssft.is_never()).count() as f64 / n,
                learned_fraction: rs.iter().filter(|r| !r.fslt.is_never()).count() as f64 / n,
                median_ssft: median(rs.iter().map(|r| r.ssft.or_horizon(r.horizon_b) as f64).collect()),
                median_fslt: median(rs.iter().map(|r| r.fslt.or_horizon(r.horizon_a) as f64).collect()),
            }
        })
        .collect()
}

/// Everything computed for one seed, before anything is written.
#[derive(Clone, Debug)]
pub struct RunResults {
    pub config: RunConfig,
    pub run: TwoSplitRun,
    pub records: Vec<MetricRecord>,
    pub auc: Vec<AucReport>,
    pub curves: Option<CurveTables>,
    pub eval: Vec<Example>,
    pub removal: Vec<RemovalCurve>,
    pub stability: Vec<Correlation>,
    pub assumptions: Option<AssumptionReport>,
    pub summary: RunSummary,
}

/// Run the pipeline for one effective config (see [`RunConfig::for_seed`]).
pub fn execute(cfg: &RunConfig) -> Result<RunResults> {
    use AnalysisKind as A;
    let seed = cfg.seeds[0];
    let run_id = format!("seed{seed}-{}", &cfg.hash()[..12]);
    log::info!("{run_id}: generating data");
    let spec = build_spec(&cfg.dataset)?;
    let (split_a, split_b) = sample_splits(&spec);
    log::info!("{run_id}: phase A on {} examples, phase B on {}", split_a.len(), split_b.len());
    let run = two_split_run_on(&spec, split_a, split_b, &cfg.phase_a, &cfg.phase_b, cfg.track_b)?;
    let prov: HashMap<u64, Provenance> = run.split_a.iter().map(|e| (e.example_id, e.provenance)).collect();

    let mut records = Vec::new();
    let mut auc = Vec::new();
    let mut curves = None;
    let mut eval = Vec::new();
    let mut removal = Vec::new();
    let mut stab = Vec::new();
    if cfg.has(A::Metrics) {
        records = compute_records(&run.phase_a.history, &run.phase_b.history, |id| prov.get(&id).copied())?;
    }
    if cfg.has(A::Auc) {
        auc = auc_table(&records)?;
    }
    if cfg.has(A::Curves) {
        curves = Some(curve_data(&run.phase_a.history, &run.phase_b.history, &records));
    }
    if cfg.has(A::Removal) {
        log::info!("{run_id}: removal and retraining");
        eval = sample_clean_eval(&spec, cfg.removal.eval_size, cfg.removal.eval_groups);
        let retrain_seeds: Vec<u64> = (0..cfg.removal.retrain_seeds as u64)
            .map(|i| derive_seed(seed, &[tag::REMOVAL, i]))
            .collect();
        let n = run.split_a.len();
        let counts: Vec<usize> = cfg
            .removal
            .fractions
            .iter()
            .map(|f| (f * n as f64).round() as usize)
            .collect();
        let setup = RemovalSetup {
            split_a: &run.split_a,
            records: &records,
            eval: &eval,
            cfg: &cfg.phase_a,
            num_classes: spec.num_classes,
            retrain_seeds: &retrain_seeds,
            epoch_budget: cfg.removal.reference_budget.then_some(run.phase_a.epochs_run),
        };
        for &s in &cfg.removal.strategies {
            removal.push(removal_retrain(&setup, s, &counts)?);
        }
    }
    if cfg.has(A::Stability) {
        log::info!("{run_id}: second training run for stability");
        let mut a2 = cfg.stability.phase_a.clone().unwrap_or_else(|| cfg.phase_a.clone());
        let mut b2 = cfg.stability.phase_b.clone().unwrap_or_else(|| cfg.phase_b.clone());
        a2.rng_seed = derive_seed(seed, &[tag::PHASE, 2]);
        b2.rng_seed = derive_seed(seed, &[tag::PHASE, 3]);
        let second = two_split_run_on(&spec, run.split_a.clone(), run.split_b.clone(), &a2, &b2, false)?;
        let rec2 = compute_records(&second.phase_a.history, &second.phase_b.history, |id| prov.get(&id).copied())?;
        stab = stability(&records, &rec2)?;
    }
    let assumptions = cfg.has(A::Theory).then(|| {
        check_assumptions(
            AssumptionParams::from_spec(&spec),
            cfg.assumptions.delta,
            cfg.assumptions.c,
        )
    });

    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        run_id,
        seed,
        split_a_size: run.split_a.len(),
        split_b_size: run.split_b.len(),
        phase_a_epochs: run.phase_a.epochs_run,
        phase_a_converged: run.phase_a.converged,
        phase_b_epochs: run.phase_b.epochs_run,
        provenance: provenance_summaries(&records),
        auc: auc.iter().map(|r| (r.metric_name.clone(), r.auc)).collect(),
        stability: stab.clone(),
    };
    Ok(RunResults {
        config: cfg.clone(),
        run,
        records,
        auc,
        curves,
        eval,
        removal,
        stability: stab,
        assumptions,
        summary,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub run_id: String,
    /// Relative path (with `/` separators) to sha256 hex digest.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    /// Digest of the manifest itself, a single fingerprint for the run.
    pub fn digest(&self) -> String {
        sha256_hex(&to_json(self))
    }
}

/// Writes files under one artifact directory and records their hashes.
struct ArtifactWriter {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl ArtifactWriter {
    /// Starts from an empty directory, replacing any earlier artifact with
    /// the same id.
    fn create(dir: PathBuf) -> Result<Self> {
        if dir.join(MANIFEST_FILE).exists() {
            fs::remove_dir_all(&dir).map_err(|e| ExperimentError::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| ExperimentError::io(&dir, e))?;
        Ok(ArtifactWriter {
            dir,
            files: BTreeMap::new(),
        })
    }

    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| ExperimentError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| ExperimentError::io(&path, e))?;
        self.files.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn put_with<F>(&mut self, rel: &str, fill: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<()>,
    {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.put(rel, &buf)
    }

    fn finish(self, run_id: String) -> Result<Artifact> {
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            run_id: run_id.clone(),
            files: self.files,
        };
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, to_json(&manifest)).map_err(|e| ExperimentError::io(&path, e))?;
        Ok(Artifact {
            dir: self.dir,
            run_id,
            manifest,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub dir: PathBuf,
    pub run_id: String,
    pub manifest: Manifest,
}

/// Persist one run under `root/<run_id>/`.
pub fn write_run(root: &Path, res: &RunResults) -> Result<Artifact> {
    let cfg = &res.config;
    let run_id = res.summary.run_id.clone();
    let mut w = ArtifactWriter::create(root.join(&run_id))?;
    let d = res.run.spec.d;
    w.put("config.json", &to_json(cfg))?;
    w.put("data/spec.json", &to_json(&res.run.spec))?;
    w.put_with("data/split_a.csv", |b| Ok(write_split_csv(&res.run.split_a, d, b)?))?;
    w.put_with("data/split_b.csv", |b| Ok(write_split_csv(&res.run.split_b, d, b)?))?;
    if !res.eval.is_empty() {
        w.put_with("data/eval.csv", |b| Ok(write_split_csv(&res.eval, d, b)?))?;
    }
    w.put_with("history/history.csv", |b| {
        Ok(write_history_csv(b, &[&res.run.phase_a.history, &res.run.phase_b.history])?)
    })?;
    if let Some(h) = &res.run.history_b_on_b {
        w.put_with("history/history_b_on_b.csv", |b| Ok(write_history_csv(b, &[h])?))?;
    }
    w.put("history/weights_a.json", &to_json(&WeightsCheckpoint::from(&res.run.phase_a.model)))?;
    w.put("history/weights_b.json", &to_json(&WeightsCheckpoint::from(&res.run.phase_b.model)))?;
    w.put(
        "history/loss.json",
        &to_json(&serde_json::json!({
            "phase_a": res.run.phase_a.loss_trace,
            "phase_b": res.run.phase_b.loss_trace,
        })),
    )?;
    if cfg.has(AnalysisKind::Metrics) {
        w.put_with("metrics/metrics.csv", |b| Ok(write_metrics_csv(&res.records, b)?))?;
    }
    if !res.auc.is_empty() {
        w.put_with("reports/auc.csv", |b| Ok(write_auc_csv(&res.auc, b)?))?;
    }
    if let Some(c) = &res.curves {
        w.put_with("reports/curves.csv", |b| Ok(c.write_curves_csv(b)?))?;
        w.put_with("reports/scatter.csv", |b| Ok(c.write_scatter_csv(b)?))?;
    }
    if cfg.has(AnalysisKind::Removal) {
        w.put_with("reports/removal.csv", |b| Ok(write_removal_csv(&res.removal, b)?))?;
    }
    if cfg.has(AnalysisKind::Stability) {
        w.put_with("reports/stability.csv", |b| Ok(write_stability_csv(&res.stability, b)?))?;
    }
    if let Some(a) = &res.assumptions {
        w.put("reports/assumptions.json", &to_json(a))?;
    }
    w.put("reports/summary.json", &to_json(&res.summary))?;
    w.finish(run_id)
}

/// Outcome of `ssft run`: one artifact per seed.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub artifacts: Vec<Artifact>,
    pub summaries: Vec<RunSummary>,
}

/// Run every seed of `cfg` (in parallel across seeds) and persist each.
pub fn run_all(cfg: &RunConfig, root: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let done: Vec<(Artifact, RunSummary)> = cfg
        .seeds
        .par_iter()
        .map(|&s| {
            let res = execute(&cfg.for_seed(s))?;
            let art = write_run(root, &res)?;
            log::info!("{}: wrote {}", art.run_id, art.dir.display());
            Ok((art, res.summary))
        })
        .collect::<Result<_>>()?;
    let (artifacts, summaries) = done.into_iter().unzip();
    Ok(RunOutput { artifacts, summaries })
}

/// Check that every file listed in `dir/manifest.json` exists and matches
/// its hash.
pub fn verify_artifact(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_str(&read_text(&path)?)
        .map_err(|e| ExperimentError::Integrity(format!("{}: {e}", path.display())))?;
    for (rel, want) in &manifest.files {
        let p = dir.join(rel);
        let bytes = fs::read(&p).map_err(|e| ExperimentError::Integrity(format!("{rel}: {e}")))?;
        let got = sha256_hex(&bytes);
        if &got != want {
            return Err(ExperimentError::Integrity(format!(
                "{rel}: hash {got} does not match manifest {want}"
            )));
        }
    }
    Ok(manifest)
}

/// Human-readable digest of a verified artifact directory.
pub fn describe_artifact(dir: &Path) -> Result<String> {
    use std::fmt::Write;
    let manifest = verify_artifact(dir)?;
    let mut s = String::new();
    let _ = writeln!(s, "artifact {} ({} files, hashes verified)", manifest.run_id, manifest.files.len());
    let summary_path = dir.join("reports/summary.json");
    if summary_path.exists() {
        let summary: RunSummary = serde_json::from_str(&read_text(&summary_path)?)
            .map_err(|e| ExperimentError::Integrity(format!("reports/summary.json: {e}")))?;
        let _ = writeln!(
            s,
            "seed {}: |S_A|={} |S_B|={}, phase A {} epochs (converged: {}), phase B {} epochs",
            summary.seed,
            summary.split_a_size,
            summary.split_b_size,
            summary.phase_a_epochs,
            summary.phase_a_converged,
            summary.phase_b_epochs
        );
        for p in &summary.provenance {
            let _ = writeln!(
                s,
                "  {:<11} n={:<4} forgotten {:.3}  learned {:.3}  median ssft {}  median fslt {}",
                p.provenance.as_str(),
                p.count,
                p.forgotten_fraction,
                p.learned_fraction,
                p.median_ssft,
                p.median_fslt
            );
        }
        for (metric, auc) in &summary.auc {
            let _ = writeln!(s, "  auc({metric}) = {auc:.4}");
        }
        for c in &summary.stability {
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
            let _ = writeln!(
                s,
                "  stability({}) overall {} bottom decile {}",
                c.metric,
                fmt(c.overall),
                fmt(c.bottom_decile)
            );
        }
    } else {
        for rel in manifest.files.keys() {
            let _ = writeln!(s, "  {rel}");
        }
    }
    Ok(s)
}

/// Recompute the metric table from a history directory containing
/// `history.csv`. Provenance is read from `split_a` when given.
pub fn metrics_from_history(history_dir: &Path, split_a: Option<&Path>) -> Result<Vec<MetricRecord>> {
    let path = history_dir.join("history.csv");
    let file = fs::File::open(&path).map_err(|e| ExperimentError::io(&path, e))?;
    let (ha, hb) = read_history_csv(file)?;
    let prov: HashMap<u64, Provenance> = match split_a {
        Some(p) => crate::datagen::read_split_provenance(p)?.into_iter().collect(),
        None => HashMap::new(),
    };
    Ok(compute_records(&ha, &hb, |id| prov.get(&id).copied())?)
}

pub fn write_metrics_file(records: &[MetricRecord], out: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics_csv(records, &mut buf)?;
    fs::write(out, buf).map_err(|e| ExperimentError::io(out, e))
}

/// Replace the value at a dotted path (`phase_b.learning_rate`) in a JSON
/// document. The path must already exist.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let next = match cur {
            Value::Object(map) => map.get_mut(*part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|j| items.get_mut(j)),
            _ => None,
        };
        cur = next.ok_or_else(|| {
            ExperimentError::config(path, format!("no field `{}` in the config", parts[..=i].join(".")))
        })?;
    }
    *cur = value;
    Ok(())
}

/// Parse a comma-separated value list: JSON literals where they parse,
/// bare strings otherwise.
pub fn parse_values(csv: &str) -> Vec<Value> {
    csv.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string())))
        .collect()
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: String,
    pub seed: u64,
    pub run_id: Option<String>,
    pub error: Option<String>,
    pub auc: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub metric: String,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub cells_ok: usize,
    pub cells_failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub axis: String,
    pub values: Vec<String>,
    pub cells: Vec<SweepCell>,
    pub table: Vec<SweepRow>,
}

impl SweepReport {
    pub fn mean_auc(&self, value: &str, metric: &str) -> Option<f64> {
        self.table
            .iter()
            .find(|r| r.value == value && r.metric == metric)
            .map(|r| r.mean_auc)
            .filter(|v| v.is_finite())
    }
}

fn sweep_table(values: &[String], cells: &[SweepCell]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for v in values {
        let here: Vec<&SweepCell> = cells.iter().filter(|c| &c.value == v).collect();
        let failed = here.iter().filter(|c| c.error.is_some()).count();
        let metrics: std::collections::BTreeSet<&String> = here.iter().flat_map(|c| c.auc.keys()).collect();
        for m in metrics {
            let xs: Vec<f64> = here.iter().filter_map(|c| c.auc.get(m)).copied().collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            rows.push(SweepRow {
                value: v.clone(),
                metric: m.clone(),
                mean_auc: mean,
                std_auc: var.sqrt(),
                cells_ok: xs.len(),
                cells_failed: failed,
            });
        }
    }
    rows
}

/// Run `cfg` once per `(value, seed)` with `axis` set to each value. Cells
/// run in parallel; a failing cell is recorded and the sweep continues.
/// The comparison table goes to `root/sweep-<hash>/`.
pub fn sweep(cfg: &RunConfig, axis: &str, values: &[Value], root: &Path) -> Result<(SweepReport, Artifact)> {
    cfg.validate()?;
    if !cfg.has(AnalysisKind::Auc) {
        return Err(ExperimentError::config("analyses", "a sweep compares AUC tables; add \"auc\""));
    }
    if values.is_empty() {
        return Err(ExperimentError::config(axis, "no sweep values given"));
    }
    let labels: Vec<String> = values.iter().map(value_label).collect();
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = labels.iter().find(|l| !seen.insert(*l)) {
        return Err(ExperimentError::config(axis, format!("value {dup} listed twice")));
    }
    let base = serde_json::to_value(cfg).expect("config serializes");
    let mut variants = Vec::new();
    for v in values {
        let mut doc = base.clone();
        set_path(&mut doc, axis, v.clone())?;
        let variant: RunConfig = parse_value(doc)?;
        variant.validate()?;
        variants.push(variant);
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|i| cfg.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let cells: Vec<SweepCell> = jobs
        .par_iter()
        .map(|&(i, seed)| -> Result<SweepCell> {
            let outcome = execute(&variants[i].for_seed(seed));
            let mut cell = SweepCell {
                value: labels[i].clone(),
                seed,
                run_id: None,
                error: None,
                auc: BTreeMap::new(),
            };
            match outcome {
                Ok(res) => {
                    let art = write_run(root, &res)?;
                    cell.run_id = Some(art.run_id);
                    cell.auc = res.summary.auc;
                }
                Err(e) => {
                    log::warn!("sweep cell {axis}={} seed {seed} failed: {e}", labels[i]);
                    cell.error = Some(e.to_string());
                }
            }
            Ok(cell)
        })
        .collect::<Result<_>>()?;

    let report = SweepReport {
        schema_version: SCHEMA_VERSION,
        axis: axis.to_string(),
        values: labels.clone(),
        table: sweep_table(&labels, &cells),
        cells,
    };
    let key = sha256_hex(&to_json(&serde_json::json!({"base": base, "axis": axis, "values": values})));
    let run_id = format!("sweep-{}", &key[..12]);
    let mut w = ArtifactWriter::create(root.join(&run_id))?;
    w.put("config.json", &to_json(cfg))?;
    w.put("reports/sweep.json", &to_json(&report))?;
    w.put_with("reports/sweep.csv", |b| {
        let mut out = csv::Writer::from_writer(b);
        out.write_record([axis, "metric", "mean_auc", "std_auc", "cells_ok", "cells_failed"])?;
        for r in &report.table {
            out.write_record([
                r.value.clone(),
                r.metric.clone(),
                r.mean_auc.to_string(),
                r.std_auc.to_string(),
                r.cells_ok.to_string(),
                r.cells_failed.to_string(),
            ])?;
        }
        out.flush().map_err(|e| ExperimentError::Csv(e.into()))?;
        Ok(())
    })?;
    w.put_with("reports/cells.csv", |b| {
        let mut out = csv::Writer::from_writer(b);
        out.write_record([axis, "seed", "run_id", "status", "metric", "auc"])?;
        for c in &report.cells {
            let status = c.error.clone().map_or("ok".to_string(), |e| format!("failed: {e}"));
            let run = c.run_id.clone().unwrap_or_default();
            if c.auc.is_empty() {
                out.write_record([&c.value, &c.seed.to_string(), &run, &status, "", ""])?;
            }
            for (m, a) in &c.auc {
                out.write_record([&c.value, &c.seed.to_string(), &run, &status, m, &a.to_string()])?;
            }
        }
        out.flush().map_err(|e| ExperimentError::Csv(e.into()))?;
        Ok(())
    })?;
    let art = w.finish(run_id)?;
    Ok((report, art))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub implicit_bias: BiasSuiteParams,
    #[serde(default = "TrialParams::representer_default")]
    pub representer: TrialParams,
    #[serde(default = "TrialParams::asymptotic_default")]
    pub asymptotic: TrialParams,
    #[serde(default = "TrialParams::intermediate_default")]
    pub intermediate: TrialParams,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            schema_version: SCHEMA_VERSION,
            output_dir: None,
            implicit_bias: BiasSuiteParams::default(),
            representer: TrialParams::representer_default(),
            asymptotic: TrialParams::asymptotic_default(),
            intermediate: TrialParams::intermediate_default(),
        }
    }
}

impl TheoryConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TheoryConfig = parse_json(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ExperimentError::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", cfg.schema_version),
            ));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }

    /// Set the trial count of every suite (instances for implicit bias).
    pub fn set_trials(&mut self, trials: usize) {
        self.implicit_bias.instances = trials;
        self.representer.trials = trials;
        self.asymptotic.trials = trials;
        self.intermediate.trials = trials;
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.implicit_bias.seed = seed;
        self.representer.seed = seed;
        self.asymptotic.seed = seed;
        self.intermediate.seed = seed;
    }

    /// 10 trials per suite and 10^4 GD iterations for implicit bias.
    pub fn make_quick(&mut self) {
        self.set_trials(10);
        self.implicit_bias.iterations = self.implicit_bias.iterations.min(10_000);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub schema_version: u32,
    pub implicit_bias: BiasSuiteReport,
    pub representer: RepresenterReport,
    pub asymptotic: AsymptoticReport,
    pub intermediate: WindowReport,
}

/// Run all four theory suites and persist them under `root/theory-<hash>/`.
pub fn run_theory(cfg: &TheoryConfig, root: &Path) -> Result<(TheoryReport, Artifact)> {
    let mut snapshot = cfg.clone();
    snapshot.output_dir = None;
    log::info!("implicit bias: {} instances", cfg.implicit_bias.instances);
    let implicit_bias = implicit_bias_suite(&cfg.implicit_bias)?;
    log::info!("representer: {} runs", cfg.representer.trials);
    let representer = representer_suite(&cfg.representer)?;
    log::info!("asymptotic forgetting: {} trials", cfg.asymptotic.trials);
    let asymptotic = asymptotic_forgetting_trial(&cfg.asymptotic)?;
    log::info!("intermediate window: {} trials", cfg.intermediate.trials);
    let intermediate = intermediate_window_trial(&cfg.intermediate)?;
    let report = TheoryReport {
        schema_version: SCHEMA_VERSION,
        implicit_bias,
        representer,
        asymptotic,
        intermediate,
    };
    let run_id = format!("theory-{}", &sha256_hex(&serde_json::to_vec(&snapshot).expect("config serializes"))[..12]);
    let mut w = ArtifactWriter::create(root.join(&run_id))?;
    w.put("config.json", &to_json(&snapshot))?;
    w.put("reports/theory.json", &to_json(&report))?;
    w.put("reports/implicit_bias.json", &to_json(&report.implicit_bias))?;
    w.put("reports/representer.json", &to_json(&report.representer))?;
    w.put("reports/asymptotic.json", &to_json(&report.asymptotic))?;
    w.put("reports/intermediate.json", &to_json(&report.intermediate))?;
    w.put_with("reports/asymptotic_trials.csv", |b| {
        Ok(write_asymptotic_csv(&report.asymptotic.outcomes, b)?)
    })?;
    w.put_with("reports/intermediate_trials.csv", |b| {
        Ok(write_window_csv(&report.intermediate.outcomes, b)?)
    })?;
    let art = w.finish(run_id)?;
    Ok((report, art))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_json() -> String {
        r#"{
            "schema_version": 1,
            "dataset": {
                "d": 40, "k": 4, "sigma": 1.0, "n": 30, "num_classes": 2, "typical_mean": 3.0,
                "groups": [
                    {"label": 0, "kind": "typical"},
                    {"label": 1, "kind": "typical"},
                    {"label": 0, "kind": "rare"}
                ],
                "mislabel_fraction": 0.1
            },
            "phase_a": {"loss": "softmax_cross_entropy", "optimizer": "sgd", "learning_rate": 0.05,
                        "max_epochs": 2, "convergence": "fixed"},
            "phase_b": {"loss": "softmax_cross_entropy", "optimizer": "sgd", "learning_rate": 0.05,
                        "max_epochs": 2, "convergence": "fixed"},
            "seeds": [3]
        }"#
        .to_string()
    }

    #[test]
    fn missing_phase_b_names_the_field() {
        let mut v: Value = serde_json::from_str(&tiny_json()).unwrap();
        v.as_object_mut().unwrap().remove("phase_b");
        let err = RunConfig::from_json(&v.to_string()).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("phase_b"), "{err}");
    }

    #[test]
    fn nested_type_error_reports_path() {
        let text = tiny_json().replace("\"learning_rate\": 0.05,\n                        \"max_epochs\": 2, \"convergence\": \"fixed\"},\n            \"phase_b\"", "\"learning_rate\": \"fast\",\n                        \"max_epochs\": 2, \"convergence\": \"fixed\"},\n            \"phase_b\"");
        let err = RunConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("phase_a.learning_rate"), "{err}");
    }

    #[test]
    fn removal_requires_metrics() {
        let mut v: Value = serde_json::from_str(&tiny_json()).unwrap();
        v["analyses"] = serde_json::json!(["removal"]);
        let err = RunConfig::from_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, ExperimentError::Config { ref path, .. } if path == "analyses"));
    }

    #[test]
    fn config_round_trips() {
        let cfg = RunConfig::from_json(&tiny_json()).unwrap();
        let eff = cfg.for_seed(3);
        let back = RunConfig::from_json(&String::from_utf8(to_json(&eff)).unwrap()).unwrap();
        assert_eq!(back, eff);
        assert_eq!(back.for_seed(3), eff);
    }

    #[test]
    fn set_path_rejects_unknown_fields() {
        let mut v: Value = serde_json::from_str(&tiny_json()).unwrap();
        set_path(&mut v, "phase_b.learning_rate", serde_json::json!(0.5)).unwrap();
        assert_eq!(v["phase_b"]["learning_rate"], 0.5);
        assert!(set_path(&mut v, "phase_b.speed", Value::Null).is_err());
    }

    #[test]
    fn values_parse_as_json_or_strings() {
        assert_eq!(
            parse_values("1e-4, 0.1,adam"),
            vec![serde_json::json!(1e-4), serde_json::json!(0.1), Value::String("adam".into())]
        );
    }

    #[test]
    fn divergence_maps_to_exit_two() {
        let e = ExperimentError::Analysis(AnalysisError::Models(ModelsError::Divergence {
            epoch: 3,
            window: 5,
            learning_rate: 10.0,
        }));
        assert_eq!(e.exit_code(), 2);
        assert_eq!(ExperimentError::Integrity("x".into()).exit_code(), 3);
    }

    #[test]
    fn tampered_artifact_fails_verification() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::from_json(&tiny_json()).unwrap();
        let out = run_all(&cfg, dir.path()).unwrap();
        let art = &out.artifacts[0];
        assert!(verify_artifact(&art.dir).is_ok());
        fs::write(art.dir.join("metrics/metrics.csv"), b"tampered").unwrap();
        let err = verify_artifact(&art.dir).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn median_handles_even_counts() {
        assert_eq!(median(vec![3.0, 1.0, 2.0, 10.0]), 2.5);
        assert!(median(vec![]).is_nan());
    }
}
