//! Group-mixture synthetic data with mislabeled, rare and complex examples.
//!
//! Each group `g` owns a block of `k` signal coordinates `[g*k, (g+1)*k)`.
//! A sample from group `g` is `mu_g * u_g + sigma * z` with `z ~ N(0, I_d)`
//! and `u_g` the indicator of the block, so `||mu_g * u_g||^2 = k * mu_g^2`.
//! Rare groups only ever contribute `rare_count` examples to split A.

use std::fmt;
use std::io;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{substream, tag};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid dataset parameter: {0}")]
    InvalidParameter(String),
    #[error("signal supports overflow: {groups} groups x k={k} exceeds d={d}")]
    SupportOverflow { groups: usize, k: usize, d: usize },
    #[error("invalid group frequencies: {0}")]
    Frequency(String),
    #[error("group {group} has label {label} outside [0, {num_classes})")]
    InvalidLabel {
        group: usize,
        label: usize,
        num_classes: usize,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DatagenError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Typical,
    Rare,
    Complex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Clean,
    Mislabeled,
    Rare,
    Complex,
}

impl Provenance {
    pub const ALL: [Provenance; 4] = [
        Provenance::Clean,
        Provenance::Mislabeled,
        Provenance::Rare,
        Provenance::Complex,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Clean => "clean",
            Provenance::Mislabeled => "mislabeled",
            Provenance::Rare => "rare",
            Provenance::Complex => "complex",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    A,
    B,
}

impl Split {
    fn index(self) -> u64 {
        match self {
            Split::A => 0,
            Split::B => 1,
        }
    }
}

/// Which groups mislabeled examples are drawn from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MislabelSource {
    /// Majority typical groups only.
    #[default]
    Typical,
    /// Rare groups (only meaningful for split A).
    Rare,
}

/// Declarative description of one group, before index assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub label: usize,
    pub kind: GroupKind,
    /// Relative sampling weight; ignored for rare groups.
    #[serde(default = "one_f64")]
    pub weight: f64,
    /// Exact number of examples per split (overrides weights when every
    /// non-rare group has one).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quota: Option<usize>,
}

/// User-facing dataset parameters, validated into a [`DatasetSpec`] by
/// [`build_spec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecConfig {
    pub d: usize,
    pub k: usize,
    pub sigma: f64,
    /// Examples per split.
    pub n: usize,
    pub num_classes: usize,
    /// Coordinate mean of typical and rare groups.
    pub typical_mean: f64,
    /// Complex groups use `typical_mean / complexity_factor`.
    #[serde(default = "default_lambda")]
    pub complexity_factor: f64,
    pub groups: Vec<GroupConfig>,
    #[serde(default)]
    pub mislabel_fraction: f64,
    #[serde(default = "both_splits")]
    pub mislabel_splits: Vec<Split>,
    #[serde(default)]
    pub mislabel_source: MislabelSource,
    #[serde(default = "one_usize")]
    pub rare_count: usize,
    #[serde(default)]
    pub balanced: bool,
    #[serde(default)]
    pub rng_seed: u64,
}

fn one_f64() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn default_lambda() -> f64 {
    1.25
}
fn both_splits() -> Vec<Split> {
    vec![Split::A, Split::B]
}

impl SpecConfig {
    /// The 10-class desk-scale mixture: per class one typical, one complex
    /// and one rare group; d=500, k=5, sigma=1, 100 examples per split,
    /// typical mean 5 and complex mean 4, 10% label noise.
    pub fn ten_class_default() -> Self {
        let mut groups = Vec::new();
        for label in 0..10 {
            groups.push(GroupConfig {
                label,
                kind: GroupKind::Typical,
                weight: 0.7,
                quota: None,
            });
            groups.push(GroupConfig {
                label,
                kind: GroupKind::Complex,
                weight: 0.3,
                quota: None,
            });
        }
        for label in 0..10 {
            groups.push(GroupConfig {
                label,
                kind: GroupKind::Rare,
                weight: 1.0,
                quota: None,
            });
        }
        SpecConfig {
            d: 500,
            k: 5,
            sigma: 1.0,
            n: 100,
            num_classes: 10,
            typical_mean: 5.0,
            complexity_factor: 1.25,
            groups,
            mislabel_fraction: 0.1,
            mislabel_splits: both_splits(),
            mislabel_source: MislabelSource::Typical,
            rare_count: 1,
            balanced: false,
            rng_seed: 0,
        }
    }

    /// Binary two-group mixture used by the theory suites: group 0 (label 1)
    /// and group 1 (label 0) are balanced majority groups; an optional rare
    /// group with label 1 contributes one example to split A.
    pub fn binary_theory(d: usize, k: usize, n: usize, mean: f64, sigma: f64, rare: bool) -> Self {
        let mut groups = vec![
            GroupConfig {
                label: 1,
                kind: GroupKind::Typical,
                weight: 1.0,
                quota: None,
            },
            GroupConfig {
                label: 0,
                kind: GroupKind::Typical,
                weight: 1.0,
                quota: None,
            },
        ];
        if rare {
            groups.push(GroupConfig {
                label: 1,
                kind: GroupKind::Rare,
                weight: 1.0,
                quota: None,
            });
        }
        SpecConfig {
            d,
            k,
            sigma,
            n,
            num_classes: 2,
            typical_mean: mean,
            complexity_factor: 1.25,
            groups,
            mislabel_fraction: 0.0,
            mislabel_splits: vec![Split::A],
            mislabel_source: MislabelSource::Typical,
            rare_count: 1,
            balanced: true,
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub group_id: usize,
    pub label: usize,
    pub signal_indices: Vec<usize>,
    pub coordinate_mean: f64,
    pub frequency: f64,
    pub kind: GroupKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quota: Option<usize>,
}

impl GroupSpec {
    /// Dense mean vector `mu_g * u_g` of length `d`.
    pub fn mean_vector(&self, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        for &i in &self.signal_indices {
            v[i] = self.coordinate_mean;
        }
        v
    }
}

/// Validated generative parameters of a two-split dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub d: usize,
    pub k: usize,
    pub sigma: f64,
    pub n: usize,
    pub num_classes: usize,
    pub groups: Vec<GroupSpec>,
    pub mislabel_fraction: f64,
    pub mislabel_splits: Vec<Split>,
    pub mislabel_source: MislabelSource,
    pub rare_count: usize,
    pub balanced: bool,
    pub rng_seed: u64,
}

impl DatasetSpec {
    pub fn rare_groups(&self) -> impl Iterator<Item = &GroupSpec> {
        self.groups.iter().filter(|g| g.kind == GroupKind::Rare)
    }

    pub fn majority_groups(&self) -> impl Iterator<Item = &GroupSpec> {
        self.groups.iter().filter(|g| g.kind != GroupKind::Rare)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub example_id: u64,
    pub x: Vec<f64>,
    pub given_label: usize,
    pub true_label: usize,
    pub group_id: usize,
    pub provenance: Provenance,
    pub split: Split,
}

/// Stack example features into an `[n x d]` matrix.
pub fn feature_matrix(examples: &[Example]) -> Array2<f64> {
    let d = examples.first().map_or(0, |e| e.x.len());
    let mut m = Array2::zeros((examples.len(), d));
    for (mut row, e) in m.rows_mut().into_iter().zip(examples) {
        row.iter_mut().zip(&e.x).for_each(|(r, &v)| *r = v);
    }
    m
}

/// Validate a config and assign consecutive disjoint signal blocks.
pub fn build_spec(cfg: &SpecConfig) -> Result<DatasetSpec> {
    if cfg.d == 0 || cfg.k == 0 || cfg.n == 0 || cfg.num_classes == 0 {
        return Err(DatagenError::InvalidParameter(
            "d, k, n and num_classes must be positive".into(),
        ));
    }
    if !(cfg.sigma.is_finite() && cfg.sigma >= 0.0) {
        return Err(DatagenError::InvalidParameter(format!(
            "sigma must be finite and non-negative, got {}",
            cfg.sigma
        )));
    }
    if !cfg.typical_mean.is_finite() {
        return Err(DatagenError::InvalidParameter("typical_mean must be finite".into()));
    }
    if !(cfg.complexity_factor.is_finite() && cfg.complexity_factor > 1.0) {
        return Err(DatagenError::InvalidParameter(format!(
            "complexity_factor must exceed 1, got {}",
            cfg.complexity_factor
        )));
    }
    if !(0.0..1.0).contains(&cfg.mislabel_fraction) {
        return Err(DatagenError::InvalidParameter(format!(
            "mislabel_fraction must lie in [0, 1), got {}",
            cfg.mislabel_fraction
        )));
    }
    if cfg.mislabel_fraction > 0.0 && cfg.num_classes < 2 {
        return Err(DatagenError::InvalidParameter(
            "label noise needs at least two classes".into(),
        ));
    }
    if cfg.groups.is_empty() {
        return Err(DatagenError::Frequency("no groups".into()));
    }
    if cfg.k * cfg.groups.len() > cfg.d {
        return Err(DatagenError::SupportOverflow {
            groups: cfg.groups.len(),
            k: cfg.k,
            d: cfg.d,
        });
    }
    for (g, gc) in cfg.groups.iter().enumerate() {
        if gc.label >= cfg.num_classes {
            return Err(DatagenError::InvalidLabel {
                group: g,
                label: gc.label,
                num_classes: cfg.num_classes,
            });
        }
    }

    let majority: Vec<&GroupConfig> = cfg.groups.iter().filter(|g| g.kind != GroupKind::Rare).collect();
    if majority.is_empty() {
        return Err(DatagenError::Frequency("at least one non-rare group is required".into()));
    }
    let rare_groups = cfg.groups.len() - majority.len();
    let rare_total = rare_groups * cfg.rare_count;
    if rare_total > cfg.n {
        return Err(DatagenError::Frequency(format!(
            "{rare_total} rare examples do not fit in a split of {}",
            cfg.n
        )));
    }

    let quotas: Vec<Option<usize>> = majority.iter().map(|g| g.quota).collect();
    let all_quota = quotas.iter().all(Option::is_some);
    if quotas.iter().any(Option::is_some) && !all_quota {
        return Err(DatagenError::Frequency(
            "either every non-rare group has a quota or none does".into(),
        ));
    }
    let weights: Vec<f64> = if all_quota {
        let total: usize = quotas.iter().map(|q| q.unwrap()).sum();
        if total != cfg.n {
            return Err(DatagenError::Frequency(format!(
                "group quotas sum to {total}, expected n={}",
                cfg.n
            )));
        }
        if rare_total > 0 {
            return Err(DatagenError::Frequency(
                "quota specs cannot also contain rare groups".into(),
            ));
        }
        quotas.iter().map(|q| q.unwrap() as f64).collect()
    } else {
        majority.iter().map(|g| g.weight).collect()
    };
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(DatagenError::Frequency(
            "group weights must be finite and positive".into(),
        ));
    }
    let weight_sum: f64 = weights.iter().sum();
    let rare_pi = cfg.rare_count as f64 / (2 * cfg.n) as f64;
    let majority_mass = 1.0 - rare_pi * rare_groups as f64;

    let complex_mean = cfg.typical_mean / cfg.complexity_factor;
    let mut wi = weights.iter();
    let groups = cfg
        .groups
        .iter()
        .enumerate()
        .map(|(g, gc)| {
            let frequency = match gc.kind {
                GroupKind::Rare => rare_pi,
                _ => majority_mass * wi.next().unwrap() / weight_sum,
            };
            GroupSpec {
                group_id: g,
                label: gc.label,
                signal_indices: (g * cfg.k..(g + 1) * cfg.k).collect(),
                coordinate_mean: match gc.kind {
                    GroupKind::Complex => complex_mean,
                    _ => cfg.typical_mean,
                },
                frequency,
                kind: gc.kind,
                quota: if gc.kind == GroupKind::Rare { None } else { gc.quota },
            }
        })
        .collect();

    Ok(DatasetSpec {
        d: cfg.d,
        k: cfg.k,
        sigma: cfg.sigma,
        n: cfg.n,
        num_classes: cfg.num_classes,
        groups,
        mislabel_fraction: cfg.mislabel_fraction,
        mislabel_splits: cfg.mislabel_splits.clone(),
        mislabel_source: cfg.mislabel_source,
        rare_count: cfg.rare_count,
        balanced: cfg.balanced,
        rng_seed: cfg.rng_seed,
    })
}

/// Parameters of the long-tailed superclass construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZipfConfig {
    pub d: usize,
    pub k: usize,
    pub sigma: f64,
    pub typical_mean: f64,
    /// Multiplier applied to each subgroup size (then floored) to get the
    /// per-split count.
    pub scale: f64,
    pub mislabel_fraction: f64,
    pub rng_seed: u64,
}

/// One label per superclass; each superclass splits into subgroups whose
/// per-split counts are `floor(size * scale)`. Which subgroup receives which
/// size is shuffled per seed.
pub fn build_zipf_spec(
    num_superclasses: usize,
    subgroup_sizes: &[usize],
    cfg: &ZipfConfig,
) -> Result<DatasetSpec> {
    if num_superclasses == 0 || subgroup_sizes.is_empty() {
        return Err(DatagenError::InvalidParameter(
            "need at least one superclass and one subgroup".into(),
        ));
    }
    if subgroup_sizes.windows(2).any(|w| w[0] <= w[1]) {
        return Err(DatagenError::InvalidParameter(
            "subgroup sizes must be strictly decreasing".into(),
        ));
    }
    if !(cfg.scale.is_finite() && cfg.scale > 0.0) {
        return Err(DatagenError::InvalidParameter("scale must be positive".into()));
    }
    let counts: Vec<usize> = subgroup_sizes
        .iter()
        .map(|&s| (s as f64 * cfg.scale).floor() as usize)
        .collect();
    if counts.contains(&0) {
        return Err(DatagenError::Frequency(
            "a scaled subgroup size floors to zero".into(),
        ));
    }
    let mut rng = substream(cfg.rng_seed, &[tag::ORDER]);
    let mut groups = Vec::with_capacity(num_superclasses * counts.len());
    for label in 0..num_superclasses {
        let mut order = counts.clone();
        order.shuffle(&mut rng);
        groups.extend(order.into_iter().map(|c| GroupConfig {
            label,
            kind: GroupKind::Typical,
            weight: 1.0,
            quota: Some(c),
        }));
    }
    let n = counts.iter().sum::<usize>() * num_superclasses;
    build_spec(&SpecConfig {
        d: cfg.d,
        k: cfg.k,
        sigma: cfg.sigma,
        n,
        num_classes: num_superclasses,
        typical_mean: cfg.typical_mean,
        complexity_factor: default_lambda(),
        groups,
        mislabel_fraction: cfg.mislabel_fraction,
        mislabel_splits: both_splits(),
        mislabel_source: MislabelSource::Typical,
        rare_count: 1,
        balanced: true,
        rng_seed: cfg.rng_seed,
    })
}

/// Exact per-group counts by largest remainder; ties go to the lower id.
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

fn draw_features<R: Rng>(group: &GroupSpec, d: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    let mut x: Vec<f64> = if sigma == 0.0 {
        vec![0.0; d]
    } else {
        (0..d)
            .map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>()
    };
    for &i in &group.signal_indices {
        x[i] += group.coordinate_mean;
    }
    x
}

/// Group ids for the non-rare examples of one split, in generation order.
fn assign_groups(spec: &DatasetSpec, split: Split, count: usize) -> Vec<usize> {
    let majority: Vec<&GroupSpec> = spec.majority_groups().collect();
    let mut rng = substream(spec.rng_seed, &[tag::SPLIT, split.index(), tag::ASSIGN]);
    let exact = spec.balanced || majority.iter().all(|g| g.quota.is_some());
    if exact {
        let weights: Vec<f64> = majority.iter().map(|g| g.frequency).collect();
        let counts = apportion(&weights, count);
        let mut ids: Vec<usize> = majority
            .iter()
            .zip(counts)
            .flat_map(|(g, c)| std::iter::repeat_n(g.group_id, c))
            .collect();
        ids.shuffle(&mut rng);
        ids
    } else {
        let total: f64 = majority.iter().map(|g| g.frequency).sum();
        (0..count)
            .map(|_| {
                let mut u = rng.random::<f64>() * total;
                for g in &majority {
                    if u < g.frequency {
                        return g.group_id;
                    }
                    u -= g.frequency;
                }
                majority.last().unwrap().group_id
            })
            .collect()
    }
}

fn sample_split(spec: &DatasetSpec, split: Split, first_id: u64) -> Vec<Example> {
    let mut group_ids = Vec::with_capacity(spec.n);
    if split == Split::A {
        for g in spec.rare_groups() {
            group_ids.extend(std::iter::repeat_n(g.group_id, spec.rare_count));
        }
    }
    let majority_count = spec.n - group_ids.len();
    group_ids.extend(assign_groups(spec, split, majority_count));

    let mut examples: Vec<Example> = group_ids
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let group = &spec.groups[g];
            let mut rng = substream(spec.rng_seed, &[tag::SPLIT, split.index(), tag::NOISE, i as u64]);
            let x = draw_features(group, spec.d, spec.sigma, &mut rng);
            Example {
                example_id: first_id + i as u64,
                x,
                given_label: group.label,
                true_label: group.label,
                group_id: g,
                provenance: match group.kind {
                    GroupKind::Typical => Provenance::Clean,
                    GroupKind::Rare => Provenance::Rare,
                    GroupKind::Complex => Provenance::Complex,
                },
                split,
            }
        })
        .collect();

    if spec.mislabel_fraction > 0.0 && spec.mislabel_splits.contains(&split) {
        let source_kind = match spec.mislabel_source {
            MislabelSource::Typical => GroupKind::Typical,
            MislabelSource::Rare => GroupKind::Rare,
        };
        let candidates: Vec<usize> = examples
            .iter()
            .enumerate()
            .filter(|(_, e)| spec.groups[e.group_id].kind == source_kind)
            .map(|(i, _)| i)
            .collect();
        let count = (spec.mislabel_fraction * candidates.len() as f64).round() as usize;
        let mut rng = substream(spec.rng_seed, &[tag::SPLIT, split.index(), tag::FLIP]);
        let mut chosen: Vec<usize> = sample_indices(&mut rng, candidates.len(), count)
            .into_iter()
            .map(|j| candidates[j])
            .collect();
        chosen.sort_unstable();
        for i in chosen {
            let e = &mut examples[i];
            // uniform over the other classes
            let mut y = rng.random_range(0..spec.num_classes - 1);
            if y >= e.true_label {
                y += 1;
            }
            e.given_label = y;
            e.provenance = Provenance::Mislabeled;
        }
    }
    examples
}

/// Draw split A and split B. Ids run `0..n` for A and `n..2n` for B.
pub fn sample_splits(spec: &DatasetSpec) -> (Vec<Example>, Vec<Example>) {
    let a = sample_split(spec, Split::A, 0);
    let b = sample_split(spec, Split::B, spec.n as u64);
    (a, b)
}

/// One clean example from `group_id`, with noise drawn from the substream
/// at `path` under the spec seed.
pub fn draw_example(spec: &DatasetSpec, group_id: usize, example_id: u64, split: Split, path: &[u64]) -> Example {
    let group = &spec.groups[group_id];
    let mut rng = substream(spec.rng_seed, path);
    Example {
        example_id,
        x: draw_features(group, spec.d, spec.sigma, &mut rng),
        given_label: group.label,
        true_label: group.label,
        group_id,
        provenance: match group.kind {
            GroupKind::Typical => Provenance::Clean,
            GroupKind::Rare => Provenance::Rare,
            GroupKind::Complex => Provenance::Complex,
        },
        split,
    }
}

/// Which groups a held-out evaluation sample is drawn from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalGroups {
    /// Typical and complex groups only.
    Majority,
    /// Every group, rare ones included, with probability `frequency`.
    #[default]
    All,
}

/// A noiseless sample of `count` points drawn from a stream disjoint from
/// both training splits. Ids start at `2n`.
pub fn sample_clean_eval(spec: &DatasetSpec, count: usize, groups: EvalGroups) -> Vec<Example> {
    let pool: Vec<&GroupSpec> = match groups {
        EvalGroups::Majority => spec.majority_groups().collect(),
        EvalGroups::All => spec.groups.iter().collect(),
    };
    let total: f64 = pool.iter().map(|g| g.frequency).sum();
    let mut assign = substream(spec.rng_seed, &[tag::EVAL, tag::ASSIGN]);
    (0..count)
        .map(|i| {
            let mut u = assign.random::<f64>() * total;
            let mut group = *pool.last().unwrap();
            for g in &pool {
                if u < g.frequency {
                    group = g;
                    break;
                }
                u -= g.frequency;
            }
            let mut rng = substream(spec.rng_seed, &[tag::EVAL, tag::NOISE, i as u64]);
            Example {
                example_id: (2 * spec.n + i) as u64,
                x: draw_features(group, spec.d, spec.sigma, &mut rng),
                given_label: group.label,
                true_label: group.label,
                group_id: group.group_id,
                provenance: match group.kind {
                    GroupKind::Typical => Provenance::Clean,
                    GroupKind::Rare => Provenance::Rare,
                    GroupKind::Complex => Provenance::Complex,
                },
                split: Split::B,
            }
        })
        .collect()
}

/// Write one split as CSV: `example_id,group_id,true_label,given_label,provenance,x_0,...`.
pub fn write_split_csv<W: io::Write>(examples: &[Example], d: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["example_id", "group_id", "true_label", "given_label", "provenance"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..d).map(|i| format!("x_{i}")));
    w.write_record(&header)?;
    for e in examples {
        let mut rec = vec![
            e.example_id.to_string(),
            e.group_id.to_string(),
            e.true_label.to_string(),
            e.given_label.to_string(),
            e.provenance.to_string(),
        ];
        rec.extend(e.x.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Read back the `(example_id, provenance)` columns of a split CSV.
pub fn read_split_provenance(path: &Path) -> Result<Vec<(u64, Provenance)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DatagenError::InvalidParameter(format!("bad example_id in {}", path.display())))?;
        let prov = rec
            .get(4)
            .and_then(Provenance::parse)
            .ok_or_else(|| DatagenError::InvalidParameter(format!("bad provenance in {}", path.display())))?;
        out.push((id, prov));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn typical_cfg(groups: usize, k: usize, d: usize) -> SpecConfig {
        SpecConfig {
            d,
            k,
            sigma: 1.0,
            n: 50,
            num_classes: groups,
            typical_mean: 5.0,
            complexity_factor: 1.25,
            groups: (0..groups)
                .map(|label| GroupConfig {
                    label,
                    kind: GroupKind::Typical,
                    weight: 1.0,
                    quota: None,
                })
                .collect(),
            mislabel_fraction: 0.0,
            mislabel_splits: both_splits(),
            mislabel_source: MislabelSource::Typical,
            rare_count: 1,
            balanced: false,
            rng_seed: 1,
        }
    }

    #[test]
    fn ten_typical_groups_get_consecutive_blocks() {
        let spec = build_spec(&typical_cfg(10, 5, 100)).unwrap();
        assert_eq!(spec.groups[0].signal_indices, vec![0, 1, 2, 3, 4]);
        assert_eq!(spec.groups[1].signal_indices, vec![5, 6, 7, 8, 9]);
        assert_eq!(spec.groups[9].signal_indices, (45..50).collect::<Vec<_>>());
        assert!(spec.groups.iter().all(|g| g.coordinate_mean == 5.0));
        let total: f64 = spec.groups.iter().map(|g| g.frequency).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_group_covers_all_coordinates() {
        let spec = build_spec(&typical_cfg(1, 8, 8)).unwrap();
        assert_eq!(spec.groups[0].signal_indices, (0..8).collect::<Vec<_>>());
        assert_eq!(spec.groups[0].frequency, 1.0);
    }

    #[test]
    fn complex_mean_is_typical_over_lambda() {
        let mut cfg = typical_cfg(2, 5, 100);
        cfg.groups[1].kind = GroupKind::Complex;
        let spec = build_spec(&cfg).unwrap();
        assert!((spec.groups[1].coordinate_mean - 4.0).abs() < 1e-12);
        // signal mass identity ||mu_g||^2 = k mu_g^2
        let g = &spec.groups[1];
        let mass: f64 = g.mean_vector(100).iter().map(|v| v * v).sum();
        assert!((mass - 5.0 * 16.0).abs() < 1e-9);
    }

    #[test]
    fn support_overflow_is_rejected() {
        let err = build_spec(&typical_cfg(11, 10, 100)).unwrap_err();
        assert!(matches!(err, DatagenError::SupportOverflow { groups: 11, k: 10, d: 100 }));
    }

    #[test]
    fn bad_weights_are_rejected() {
        let mut cfg = typical_cfg(2, 5, 100);
        cfg.groups[0].weight = -1.0;
        assert!(matches!(build_spec(&cfg), Err(DatagenError::Frequency(_))));
        cfg.groups[0].weight = f64::NAN;
        assert!(matches!(build_spec(&cfg), Err(DatagenError::Frequency(_))));
    }

    #[test]
    fn zero_noise_gives_exact_means() {
        let mut cfg = typical_cfg(3, 4, 20);
        cfg.sigma = 0.0;
        let spec = build_spec(&cfg).unwrap();
        let (a, b) = sample_splits(&spec);
        for e in a.iter().chain(&b) {
            assert_eq!(e.x, spec.groups[e.group_id].mean_vector(20));
        }
    }

    #[test]
    fn splits_are_deterministic() {
        let spec = build_spec(&SpecConfig::ten_class_default()).unwrap().with_seed(7);
        assert_eq!(sample_splits(&spec), sample_splits(&spec));
        let other = spec.clone().with_seed(8);
        assert_ne!(sample_splits(&spec).0[0].x, sample_splits(&other).0[0].x);
    }

    #[test]
    fn rare_examples_only_in_split_a() {
        let spec = build_spec(&SpecConfig::ten_class_default()).unwrap();
        let (a, b) = sample_splits(&spec);
        assert_eq!(a.len(), 100);
        assert_eq!(b.len(), 100);
        let rare_a = a.iter().filter(|e| spec.groups[e.group_id].kind == GroupKind::Rare).count();
        assert_eq!(rare_a, 10);
        assert!(b.iter().all(|e| spec.groups[e.group_id].kind != GroupKind::Rare));
        assert!(b.iter().all(|e| e.provenance != Provenance::Rare));
    }

    #[test]
    fn mislabel_bookkeeping() {
        for seed in 0..20 {
            let spec = build_spec(&SpecConfig::ten_class_default()).unwrap().with_seed(seed);
            let (a, b) = sample_splits(&spec);
            for split in [&a, &b] {
                let typical = split
                    .iter()
                    .filter(|e| spec.groups[e.group_id].kind == GroupKind::Typical)
                    .count();
                let flipped: Vec<_> = split.iter().filter(|e| e.provenance == Provenance::Mislabeled).collect();
                assert_eq!(flipped.len(), (0.1 * typical as f64).round() as usize);
                assert!(flipped.iter().all(|e| e.given_label != e.true_label));
                assert!(split
                    .iter()
                    .filter(|e| e.provenance != Provenance::Mislabeled)
                    .all(|e| e.given_label == e.true_label));
            }
        }
    }

    #[test]
    fn binary_mislabel_reverses_label() {
        let mut cfg = SpecConfig::binary_theory(50, 5, 40, 1.0, 1.0, false);
        cfg.mislabel_fraction = 0.25;
        let spec = build_spec(&cfg).unwrap();
        let (a, _) = sample_splits(&spec);
        for e in a.iter().filter(|e| e.provenance == Provenance::Mislabeled) {
            assert_eq!(e.given_label, 1 - e.true_label);
        }
        assert_eq!(a.iter().filter(|e| e.provenance == Provenance::Mislabeled).count(), 10);
    }

    #[test]
    fn rare_mislabel_source() {
        let mut cfg = SpecConfig::ten_class_default();
        cfg.mislabel_source = MislabelSource::Rare;
        cfg.mislabel_fraction = 0.5;
        let spec = build_spec(&cfg).unwrap();
        let (a, b) = sample_splits(&spec);
        let flipped: Vec<_> = a.iter().filter(|e| e.provenance == Provenance::Mislabeled).collect();
        assert_eq!(flipped.len(), 5);
        assert!(flipped.iter().all(|e| spec.groups[e.group_id].kind == GroupKind::Rare));
        assert!(b.iter().all(|e| e.provenance != Provenance::Mislabeled));
    }

    #[test]
    fn balanced_flag_gives_exact_quotas() {
        let mut cfg = typical_cfg(4, 5, 40);
        cfg.balanced = true;
        cfg.n = 40;
        let spec = build_spec(&cfg).unwrap();
        let (a, _) = sample_splits(&spec);
        for g in 0..4 {
            assert_eq!(a.iter().filter(|e| e.group_id == g).count(), 10);
        }
    }

    #[test]
    fn apportion_sums_to_total() {
        assert_eq!(apportion(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(apportion(&[0.7, 0.3], 9).iter().sum::<usize>(), 9);
    }

    #[test]
    fn zipf_counts_floor_and_sum() {
        let cfg = ZipfConfig {
            d: 300,
            k: 2,
            sigma: 1.0,
            typical_mean: 5.0,
            scale: 0.1,
            mislabel_fraction: 0.0,
            rng_seed: 3,
        };
        let spec = build_zipf_spec(1, &[500, 250, 125, 64, 32], &cfg).unwrap();
        let (a, b) = sample_splits(&spec);
        let mut counts: Vec<usize> = (0..5).map(|g| a.iter().filter(|e| e.group_id == g).count()).collect();
        counts.sort_unstable_by(|x, y| y.cmp(x));
        assert_eq!(counts, vec![50, 25, 12, 6, 3]);
        assert_eq!(a.len(), 96);
        assert_eq!(b.len(), 96);
    }

    #[test]
    fn zipf_capacity_and_ordering() {
        let cfg = ZipfConfig {
            d: 300,
            k: 2,
            sigma: 1.0,
            typical_mean: 5.0,
            scale: 0.1,
            mislabel_fraction: 0.0,
            rng_seed: 3,
        };
        let spec = build_zipf_spec(20, &[500, 250, 125, 64, 32], &cfg).unwrap();
        assert_eq!(spec.groups.len(), 100);
        // shuffled per seed: not every superclass uses the same ordering
        let orders: Vec<Vec<usize>> = spec
            .groups
            .chunks(5)
            .map(|c| c.iter().map(|g| g.quota.unwrap()).collect())
            .collect();
        assert!(orders.iter().any(|o| o != &orders[0]));
        assert!(build_zipf_spec(20, &[500, 250, 125, 64, 32], &ZipfConfig { d: 199, ..cfg.clone() }).is_err());
        assert!(build_zipf_spec(2, &[10, 10], &cfg).is_err());
    }

    #[test]
    fn single_subgroup_zipf_is_uniform_typical() {
        let cfg = ZipfConfig {
            d: 50,
            k: 5,
            sigma: 1.0,
            typical_mean: 5.0,
            scale: 1.0,
            mislabel_fraction: 0.0,
            rng_seed: 0,
        };
        let spec = build_zipf_spec(4, &[10], &cfg).unwrap();
        assert_eq!(spec.groups.len(), 4);
        assert!(spec.groups.iter().all(|g| g.kind == GroupKind::Typical));
        assert!(spec.groups.iter().all(|g| (g.frequency - 0.25).abs() < 1e-12));
    }

    #[test]
    fn csv_dump_has_expected_header() {
        let spec = build_spec(&typical_cfg(2, 2, 4)).unwrap();
        let (a, _) = sample_splits(&spec);
        let mut buf = Vec::new();
        write_split_csv(&a, 4, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("example_id,group_id,true_label,given_label,provenance,x_0,x_1,x_2,x_3\n"));
        assert_eq!(text.lines().count(), 51);
    }
}
