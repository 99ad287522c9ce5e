//! Evaluations over metric tables: mislabeled-example detection AUC,
//! removal-and-retrain curves, cross-run stability and per-epoch curves.

use std::collections::BTreeMap;
use std::io;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{Example, Provenance};
use crate::dynamics::{average_ranks, Epoch, MetricRecord};
use crate::models::{train_phase, ConvergenceRule, LinearModel, ModelsError, Phase, PredictionHistory, TrainConfig};
use crate::rng::{derive_seed, substream, tag};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("AUC needs at least one positive and one negative (got {positives} / {negatives})")]
    DegenerateClasses { positives: usize, negatives: usize },
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("cannot remove {count} of {available} examples")]
    RemovalTooLarge { count: usize, available: usize },
    #[error("metric tables cover different example ids")]
    MismatchedIds,
    #[error(transparent)]
    Models(#[from] ModelsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherIsSuspicious,
    LowerIsSuspicious,
}

impl Direction {
    pub fn reversed(self) -> Self {
        match self {
            Direction::HigherIsSuspicious => Direction::LowerIsSuspicious,
            Direction::LowerIsSuspicious => Direction::HigherIsSuspicious,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub metric_name: String,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
    pub ranking_direction: Direction,
    /// Twice the Mann-Whitney U statistic: 2 per concordant pair, 1 per tie.
    pub concordant_halves: u64,
}

/// Mann-Whitney pair-counting AUC: the fraction of (positive, negative)
/// pairs where the positive is more suspicious, ties counting one half.
pub fn auc(metric_name: &str, scores: &[f64], positive: &[bool], direction: Direction) -> Result<AucReport> {
    if scores.len() != positive.len() {
        return Err(AnalysisError::LengthMismatch {
            scores: scores.len(),
            labels: positive.len(),
        });
    }
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return Err(AnalysisError::DegenerateClasses { positives: p, negatives: n });
    }
    let oriented: Vec<f64> = match direction {
        Direction::HigherIsSuspicious => scores.to_vec(),
        Direction::LowerIsSuspicious => scores.iter().map(|s| -s).collect(),
    };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| oriented[a].total_cmp(&oriented[b]));

    let mut halves: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos_here, mut neg_here) = (0u64, 0u64);
        while j < order.len() && oriented[order[j]].total_cmp(&oriented[order[i]]).is_eq() {
            if positive[order[j]] {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        halves += pos_here * (2 * neg_below + neg_here);
        neg_below += neg_here;
        i = j;
    }
    Ok(AucReport {
        metric_name: metric_name.to_string(),
        auc: halves as f64 / (2 * p as u64 * n as u64) as f64,
        positives: p,
        negatives: n,
        ranking_direction: direction,
        concordant_halves: halves,
    })
}

/// Hardness metrics usable as mislabeled-example detectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Fslt,
    AccL,
    Ssft,
    AccF,
    ConfL,
    NF,
    Joint,
}

impl MetricKind {
    pub const ALL: [MetricKind; 7] = [
        MetricKind::Fslt,
        MetricKind::AccL,
        MetricKind::Ssft,
        MetricKind::AccF,
        MetricKind::ConfL,
        MetricKind::NF,
        MetricKind::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Fslt => "fslt",
            MetricKind::AccL => "acc_l",
            MetricKind::Ssft => "ssft",
            MetricKind::AccF => "acc_f",
            MetricKind::ConfL => "conf_l",
            MetricKind::NF => "n_f",
            MetricKind::Joint => "joint",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            MetricKind::Fslt | MetricKind::NF => Direction::HigherIsSuspicious,
            _ => Direction::LowerIsSuspicious,
        }
    }

    /// Numeric score; `Never` maps to `horizon + 1` (latest learning, never
    /// forgotten).
    pub fn score(self, r: &MetricRecord) -> f64 {
        match self {
            MetricKind::Fslt => r.fslt.or_horizon(r.horizon_a) as f64,
            MetricKind::AccL => r.acc_l as f64,
            MetricKind::Ssft => r.ssft.or_horizon(r.horizon_b) as f64,
            MetricKind::AccF => r.acc_f as f64,
            MetricKind::ConfL => r.conf_l,
            MetricKind::NF => r.n_f as f64,
            MetricKind::Joint => r.joint_rank as f64,
        }
    }
}

/// AUC of `kind` for separating mislabeled from all other examples.
pub fn metric_auc(records: &[MetricRecord], kind: MetricKind) -> Result<AucReport> {
    let scores: Vec<f64> = records.iter().map(|r| kind.score(r)).collect();
    let labels: Vec<bool> = records
        .iter()
        .map(|r| r.provenance == Some(Provenance::Mislabeled))
        .collect();
    auc(kind.name(), &scores, &labels, kind.direction())
}

pub fn auc_table(records: &[MetricRecord]) -> Result<Vec<AucReport>> {
    MetricKind::ALL.iter().map(|&k| metric_auc(records, k)).collect()
}

pub fn write_auc_csv<W: io::Write>(reports: &[AucReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "auc", "positives", "negatives", "direction"])?;
    for r in reports {
        w.write_record([
            r.metric_name.clone(),
            r.auc.to_string(),
            r.positives.to_string(),
            r.negatives.to_string(),
            match r.ranking_direction {
                Direction::HigherIsSuspicious => "higher".to_string(),
                Direction::LowerIsSuspicious => "lower".to_string(),
            },
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalStrategy {
    Random,
    LowestSsft,
    HighestFslt,
    LowestAccF,
    /// Most suspicious by cumulative learning accuracy, i.e. lowest `acc_l`.
    HighestAccLRank,
    Joint,
}

impl RemovalStrategy {
    pub const ALL: [RemovalStrategy; 6] = [
        RemovalStrategy::Random,
        RemovalStrategy::LowestSsft,
        RemovalStrategy::HighestFslt,
        RemovalStrategy::LowestAccF,
        RemovalStrategy::HighestAccLRank,
        RemovalStrategy::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RemovalStrategy::Random => "random",
            RemovalStrategy::LowestSsft => "lowest_ssft",
            RemovalStrategy::HighestFslt => "highest_fslt",
            RemovalStrategy::LowestAccF => "lowest_acc_f",
            RemovalStrategy::HighestAccLRank => "highest_acc_l_rank",
            RemovalStrategy::Joint => "joint",
        }
    }
}

/// Example ids in removal priority order (first = removed first). Ties are
/// broken by example id; `Random` shuffles with the given seed.
pub fn removal_order(records: &[MetricRecord], strategy: RemovalStrategy, seed: u64) -> Vec<u64> {
    let mut ids: Vec<(f64, u64)> = records
        .iter()
        .map(|r| {
            let key = match strategy {
                RemovalStrategy::Random => 0.0,
                RemovalStrategy::LowestSsft => MetricKind::Ssft.score(r),
                RemovalStrategy::HighestFslt => -MetricKind::Fslt.score(r),
                RemovalStrategy::LowestAccF => MetricKind::AccF.score(r),
                RemovalStrategy::HighestAccLRank => MetricKind::AccL.score(r),
                RemovalStrategy::Joint => MetricKind::Joint.score(r),
            };
            (key, r.example_id)
        })
        .collect();
    ids.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<u64> = ids.into_iter().map(|(_, id)| id).collect();
    if strategy == RemovalStrategy::Random {
        out.shuffle(&mut substream(seed, &[tag::REMOVAL]));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovalCurve {
    pub strategy: RemovalStrategy,
    pub removal_counts: Vec<usize>,
    /// Mean over retraining seeds.
    pub test_accuracy: Vec<f64>,
    /// Population standard deviation over retraining seeds.
    pub accuracy_std: Vec<f64>,
    pub seeds_averaged: usize,
}

/// Inputs shared by every removal strategy.
pub struct RemovalSetup<'a> {
    pub split_a: &'a [Example],
    pub records: &'a [MetricRecord],
    pub eval: &'a [Example],
    pub cfg: &'a TrainConfig,
    pub num_classes: usize,
    pub retrain_seeds: &'a [u64],
    /// When set, every retrain runs exactly this many epochs instead of the
    /// config's convergence rule.
    pub epoch_budget: Option<usize>,
}

/// For each count: drop that many split-A examples by `strategy`, retrain
/// from scratch with the phase-A config and measure accuracy on `eval`.
/// Results depend only on the seeds, not on thread count.
pub fn removal_retrain(setup: &RemovalSetup<'_>, strategy: RemovalStrategy, counts: &[usize]) -> Result<RemovalCurve> {
    let available = setup.split_a.len();
    if let Some(&c) = counts.iter().find(|&&c| c >= available) {
        return Err(AnalysisError::RemovalTooLarge { count: c, available });
    }
    let d = setup.split_a.first().map_or(0, |e| e.x.len());
    let jobs: Vec<(usize, u64)> = counts
        .iter()
        .flat_map(|&c| setup.retrain_seeds.iter().map(move |&s| (c, s)))
        .collect();
    let accs: Vec<f64> = jobs
        .par_iter()
        .map(|&(count, seed)| -> Result<f64> {
            let order = removal_order(setup.records, strategy, seed);
            let dropped: std::collections::HashSet<u64> = order.into_iter().take(count).collect();
            let kept: Vec<Example> = setup
                .split_a
                .iter()
                .filter(|e| !dropped.contains(&e.example_id))
                .cloned()
                .collect();
            let mut cfg = setup.cfg.clone();
            if let Some(epochs) = setup.epoch_budget {
                cfg.convergence = ConvergenceRule::Fixed;
                cfg.max_epochs = epochs;
            }
            cfg.rng_seed = derive_seed(seed, &[tag::REMOVAL, tag::INIT]);
            let init = LinearModel::random_init(setup.num_classes, d, &cfg);
            let out = train_phase(init, &kept, &[], &cfg, Phase::A)?;
            Ok(out.model.accuracy(setup.eval))
        })
        .collect::<Result<_>>()?;

    let k = setup.retrain_seeds.len().max(1);
    let (mut mean, mut std) = (Vec::new(), Vec::new());
    for chunk in accs.chunks(k) {
        let m = chunk.iter().sum::<f64>() / chunk.len() as f64;
        let v = chunk.iter().map(|a| (a - m).powi(2)).sum::<f64>() / chunk.len() as f64;
        mean.push(m);
        std.push(v.sqrt());
    }
    Ok(RemovalCurve {
        strategy,
        removal_counts: counts.to_vec(),
        test_accuracy: mean,
        accuracy_std: std,
        seeds_averaged: setup.retrain_seeds.len(),
    })
}

pub fn write_removal_csv<W: io::Write>(curves: &[RemovalCurve], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["strategy", "removed", "test_accuracy", "accuracy_std", "seeds"])?;
    for c in curves {
        for (i, &count) in c.removal_counts.iter().enumerate() {
            w.write_record([
                c.strategy.name().to_string(),
                count.to_string(),
                c.test_accuracy[i].to_string(),
                c.accuracy_std[i].to_string(),
                c.seeds_averaged.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 || b.len() != n {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub metric: String,
    pub overall: Option<f64>,
    /// Restricted to the 10% of examples forgotten earliest in the first table.
    pub bottom_decile: Option<f64>,
    pub n: usize,
    pub n_bottom: usize,
}

/// Rank correlation of each metric between two runs over the same examples.
pub fn stability(first: &[MetricRecord], second: &[MetricRecord]) -> Result<Vec<Correlation>> {
    let index = |rs: &[MetricRecord]| -> BTreeMap<u64, usize> {
        rs.iter().enumerate().map(|(i, r)| (r.example_id, i)).collect()
    };
    let (ia, ib) = (index(first), index(second));
    if ia.len() != first.len() || ia.keys().ne(ib.keys()) || ib.len() != second.len() {
        return Err(AnalysisError::MismatchedIds);
    }
    let a: Vec<&MetricRecord> = ia.values().map(|&i| &first[i]).collect();
    let b: Vec<&MetricRecord> = ib.values().map(|&i| &second[i]).collect();
    let n = a.len();

    let ssft_a: Vec<f64> = a.iter().map(|r| MetricKind::Ssft.score(r)).collect();
    let mut by_ssft: Vec<usize> = (0..n).collect();
    by_ssft.sort_by(|&x, &y| ssft_a[x].total_cmp(&ssft_a[y]).then(a[x].example_id.cmp(&a[y].example_id)));
    let bottom: Vec<usize> = by_ssft.into_iter().take(n.div_ceil(10)).collect();

    let kinds = [
        MetricKind::Ssft,
        MetricKind::Fslt,
        MetricKind::AccL,
        MetricKind::AccF,
        MetricKind::ConfL,
        MetricKind::NF,
    ];
    Ok(kinds
        .iter()
        .map(|&k| {
            let va: Vec<f64> = a.iter().map(|r| k.score(r)).collect();
            let vb: Vec<f64> = b.iter().map(|r| k.score(r)).collect();
            let ra = average_ranks(&va, |x, y| x.total_cmp(y));
            let rb = average_ranks(&vb, |x, y| x.total_cmp(y));
            let sub = |r: &[f64]| bottom.iter().map(|&i| r[i]).collect::<Vec<f64>>();
            Correlation {
                metric: k.name().to_string(),
                overall: pearson(&ra, &rb),
                bottom_decile: pearson(&sub(&ra), &sub(&rb)),
                n,
                n_bottom: bottom.len(),
            }
        })
        .collect())
}

pub fn write_stability_csv<W: io::Write>(rows: &[Correlation], out: W) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "overall", "bottom_decile", "n", "n_bottom"])?;
    for r in rows {
        w.write_record([
            r.metric.clone(),
            opt(r.overall),
            opt(r.bottom_decile),
            r.n.to_string(),
            r.n_bottom.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub provenance: Provenance,
    pub phase: Phase,
    pub epoch: usize,
    pub count: usize,
    pub fraction_correct: f64,
    /// Phase B only: fraction incorrect at this and every later epoch.
    pub fraction_forgotten: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub example_id: u64,
    pub provenance: Option<Provenance>,
    pub fslt: Epoch,
    pub ssft: Epoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveTables {
    pub rows: Vec<CurveRow>,
    pub scatter: Vec<ScatterRow>,
}

/// Per-provenance, per-epoch fraction of correctly classified split-A
/// examples in both phases, plus the fslt-vs-ssft scatter.
pub fn curve_data(
    history_a: &PredictionHistory,
    history_b: &PredictionHistory,
    records: &[MetricRecord],
) -> CurveTables {
    let prov: BTreeMap<u64, Provenance> = records
        .iter()
        .filter_map(|r| r.provenance.map(|p| (r.example_id, p)))
        .collect();
    let mut rows = Vec::new();
    for p in Provenance::ALL {
        for h in [history_a, history_b] {
            let members: Vec<usize> = h
                .example_ids
                .iter()
                .enumerate()
                .filter(|(_, id)| prov.get(id) == Some(&p))
                .map(|(i, _)| i)
                .collect();
            if members.is_empty() {
                continue;
            }
            // first epoch from which each member stays incorrect
            let settle: Vec<usize> = members
                .iter()
                .map(|&i| {
                    let row = &h.correct[i];
                    row.len() - row.iter().rev().take_while(|&&c| !c).count()
                })
                .collect();
            let size = members.len() as f64;
            for t in 0..=h.epochs {
                let correct = members.iter().filter(|&&i| h.correct[i][t]).count();
                rows.push(CurveRow {
                    provenance: p,
                    phase: h.phase,
                    epoch: t,
                    count: members.len(),
                    fraction_correct: correct as f64 / size,
                    fraction_forgotten: (h.phase == Phase::B && t >= 1)
                        .then(|| settle.iter().filter(|&&s| s.max(1) <= t).count() as f64 / size),
                });
            }
        }
    }
    let scatter = records
        .iter()
        .map(|r| ScatterRow {
            example_id: r.example_id,
            provenance: r.provenance,
            fslt: r.fslt,
            ssft: r.ssft,
        })
        .collect();
    CurveTables { rows, scatter }
}

impl CurveTables {
    /// Fraction correct for a provenance class at the last epoch of a phase.
    pub fn final_fraction(&self, provenance: Provenance, phase: Phase) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.provenance == provenance && r.phase == phase)
            .max_by_key(|r| r.epoch)
            .map(|r| r.fraction_correct)
    }

    pub fn write_curves_csv<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["provenance", "phase", "epoch", "count", "fraction_correct", "fraction_forgotten"])?;
        for r in &self.rows {
            w.write_record([
                r.provenance.to_string(),
                r.phase.as_str().to_string(),
                r.epoch.to_string(),
                r.count.to_string(),
                r.fraction_correct.to_string(),
                r.fraction_forgotten.map_or(String::new(), |f| f.to_string()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_scatter_csv<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["example_id", "provenance", "fslt", "ssft"])?;
        for r in &self.scatter {
            w.write_record([
                r.example_id.to_string(),
                r.provenance.map_or("unknown", |p| p.as_str()).to_string(),
                r.fslt.to_string(),
                r.ssft.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], pos: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if pos[i] && !pos[j] {
                    den += 1.0;
                    if si > sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn perfect_separation() {
        let r = auc("m", &[0.9, 0.8, 0.1, 0.2], &[true, true, false, false], Direction::HigherIsSuspicious).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!((r.positives, r.negatives), (2, 2));
    }

    #[test]
    fn all_ties_give_half() {
        let r = auc("m", &[3.0; 5], &[true, false, true, false, false], Direction::LowerIsSuspicious).unwrap();
        assert_eq!(r.auc, 0.5);
    }

    #[test]
    fn six_point_mixed_case() {
        // 3 positives x 3 negatives = 9 pairs
        let s = [0.7, 0.3, 0.5, 0.5, 0.1, 0.6];
        let p = [true, true, true, false, false, false];
        let r = auc("m", &s, &p, Direction::HigherIsSuspicious).unwrap();
        // pairs: 0.7 beats all 3; 0.3 beats 0.1 only; 0.5 beats 0.1, ties 0.5 -> 3 + 1 + 1.5
        assert_eq!(r.auc, 5.5 / 9.0);
        assert_eq!(r.auc, brute_auc(&s, &p));
    }

    #[test]
    fn degenerate_classes_rejected() {
        assert!(matches!(
            auc("m", &[1.0, 2.0], &[true, true], Direction::HigherIsSuspicious),
            Err(AnalysisError::DegenerateClasses { .. })
        ));
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    fn rec(id: u64, prov: Provenance, fslt: Epoch, ssft: Epoch, acc_l: usize) -> MetricRecord {
        MetricRecord {
            example_id: id,
            provenance: Some(prov),
            fslt,
            ssft,
            n_f: 0,
            acc_l,
            conf_l: acc_l as f64 * 0.5,
            acc_f: 0,
            joint_rank: 0,
            horizon_a: 10,
            horizon_b: 10,
        }
    }

    #[test]
    fn removal_orders() {
        let rs = vec![
            rec(0, Provenance::Clean, Epoch::At(1), Epoch::Never, 9),
            rec(1, Provenance::Mislabeled, Epoch::At(7), Epoch::At(2), 3),
            rec(2, Provenance::Rare, Epoch::Never, Epoch::At(6), 0),
            rec(3, Provenance::Clean, Epoch::At(2), Epoch::At(2), 8),
        ];
        assert_eq!(removal_order(&rs, RemovalStrategy::LowestSsft, 0), vec![1, 3, 2, 0]);
        assert_eq!(removal_order(&rs, RemovalStrategy::HighestFslt, 0), vec![2, 1, 3, 0]);
        assert_eq!(removal_order(&rs, RemovalStrategy::HighestAccLRank, 0), vec![2, 1, 3, 0]);
        let mut r = removal_order(&rs, RemovalStrategy::Random, 5);
        assert_eq!(r, removal_order(&rs, RemovalStrategy::Random, 5));
        r.sort_unstable();
        assert_eq!(r, vec![0, 1, 2, 3]);
    }

    #[test]
    fn stability_self_is_one_and_ids_checked() {
        let rs: Vec<MetricRecord> = (0..30)
            .map(|i| rec(i, Provenance::Clean, Epoch::At((i % 7 + 1) as usize), Epoch::At((i % 5 + 1) as usize), i as usize))
            .collect();
        let corr = stability(&rs, &rs).unwrap();
        for c in &corr {
            if let Some(v) = c.overall {
                assert!((v - 1.0).abs() < 1e-12, "{}", c.metric);
            }
        }
        assert_eq!(corr[0].n_bottom, 3);
        let mut other = rs.clone();
        other[0].example_id = 99;
        assert!(matches!(stability(&rs, &other), Err(AnalysisError::MismatchedIds)));
    }

    #[test]
    fn independent_permutations_are_uncorrelated() {
        let n = 1000;
        let mut a: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut b = a.clone();
        a.shuffle(&mut substream(11, &[1]));
        b.shuffle(&mut substream(11, &[2]));
        assert!(pearson(&a, &b).unwrap().abs() <= 0.1);
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force(
            data in proptest::collection::vec((0u8..6, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
            let pos: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
            let r = auc("m", &scores, &pos, Direction::HigherIsSuspicious).unwrap();
            prop_assert!((r.auc - brute_auc(&scores, &pos)).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_maps_and_complemented_by_reversal(
            data in proptest::collection::vec((-50i32..50, any::<bool>()), 2..80),
            scale in 0.01f64..100.0,
            shift in -1e3f64..1e3,
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
            let pos: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
            let base = auc("m", &scores, &pos, Direction::HigherIsSuspicious).unwrap();
            let affine: Vec<f64> = scores.iter().map(|s| scale * s + shift).collect();
            let ranks = average_ranks(&scores, |a, b| a.total_cmp(b));
            let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
            for t in [&affine, &ranks, &cubed] {
                let r = auc("m", t, &pos, Direction::HigherIsSuspicious).unwrap();
                prop_assert_eq!(r.concordant_halves, base.concordant_halves);
            }
            let rev = auc("m", &scores, &pos, Direction::LowerIsSuspicious).unwrap();
            let total = 2 * (base.positives * base.negatives) as u64;
            prop_assert_eq!(rev.concordant_halves, total - base.concordant_halves);
            prop_assert!((rev.auc - (1.0 - base.auc)).abs() < 1e-15);
        }
    }
}
