//! Per-example learning and forgetting metrics computed from prediction
//! histories.
//!
//! Epochs are 1-indexed. A history row holds epochs `0..=T`; epoch 0 (the
//! state before the phase's first update) enters forgetting-event counts but
//! never the learning/forgetting-time argmins.

use std::cmp::Ordering;
use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::datagen::Provenance;
use crate::models::PredictionHistory;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("empty history: no training epochs to evaluate")]
    EmptyHistory,
    #[error("phase-B history has no row for example {0}")]
    MissingExample(u64),
    #[error("history rows for example {id} have mismatched lengths")]
    Ragged { id: u64 },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

/// An epoch index, or `Never` when the defining event does not occur within
/// the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Epoch {
    At(usize),
    Never,
}

impl Epoch {
    pub fn finite(self) -> Option<usize> {
        match self {
            Epoch::At(t) => Some(t),
            Epoch::Never => None,
        }
    }

    pub fn is_never(self) -> bool {
        self == Epoch::Never
    }

    /// `Never` maps to `horizon + 1`.
    pub fn or_horizon(self, horizon: usize) -> usize {
        self.finite().unwrap_or(horizon + 1)
    }
}

impl fmt::Display for Epoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Epoch::At(t) => write!(f, "{t}"),
            Epoch::Never => f.write_str("NEVER"),
        }
    }
}

impl FromStr for Epoch {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "NEVER" => Ok(Epoch::Never),
            _ => s.parse().map(Epoch::At).map_err(|_| format!("bad epoch {s:?}")),
        }
    }
}

impl Serialize for Epoch {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Epoch::At(t) => s.serialize_u64(*t as u64),
            Epoch::Never => s.serialize_str("NEVER"),
        }
    }
}

impl<'de> Deserialize<'de> for Epoch {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(Epoch::At(n as usize)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// First-split learning time over epochs `1..=T` (`row[0]` is epoch 1):
/// the smallest `t*` with the example correct at every `t >= t*`.
pub fn fslt(row: &[bool]) -> Result<Epoch> {
    settle_time(row, true)
}

/// Second-split forgetting time over epochs `1..=T'`: the smallest `t*` with
/// the example incorrect at every `t >= t*`.
pub fn ssft(row: &[bool]) -> Result<Epoch> {
    settle_time(row, false)
}

/// One backward pass: the answer is one past the last epoch that disagrees
/// with `target`.
fn settle_time(row: &[bool], target: bool) -> Result<Epoch> {
    let last = *row.last().ok_or(DynamicsError::EmptyHistory)?;
    if last != target {
        return Ok(Epoch::Never);
    }
    let tail = row.iter().rev().take_while(|&&c| c == target).count();
    Ok(Epoch::At(row.len() - tail + 1))
}

/// Number of correct-to-incorrect transitions between consecutive entries.
pub fn forgetting_events(row: &[bool]) -> usize {
    row.windows(2).filter(|w| w[0] && !w[1]).count()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cumulative {
    pub acc_l: usize,
    pub conf_l: f64,
    pub acc_f: usize,
}

/// Sums over training epochs (epoch 0 excluded by the caller).
pub fn cumulative_metrics(correct_a: &[bool], confidence_a: &[f64], correct_b: &[bool]) -> Cumulative {
    Cumulative {
        acc_l: correct_a.iter().filter(|&&c| c).count(),
        conf_l: confidence_a.iter().sum(),
        acc_f: correct_b.iter().filter(|&&c| c).count(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub example_id: u64,
    pub provenance: Option<Provenance>,
    pub fslt: Epoch,
    pub ssft: Epoch,
    pub n_f: usize,
    pub acc_l: usize,
    pub conf_l: f64,
    pub acc_f: usize,
    pub joint_rank: usize,
    /// Phase-A horizon `T`.
    pub horizon_a: usize,
    /// Phase-B horizon `T'`.
    pub horizon_b: usize,
}

/// Metrics for every example tracked in both phases, in phase-A row order,
/// with joint ranks assigned. An empty phase (0 epochs) yields `Never`.
pub fn compute_records(
    history_a: &PredictionHistory,
    history_b: &PredictionHistory,
    provenance: impl Fn(u64) -> Option<Provenance>,
) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::with_capacity(history_a.example_ids.len());
    for (i, &id) in history_a.example_ids.iter().enumerate() {
        let j = history_b.position(id).ok_or(DynamicsError::MissingExample(id))?;
        let (ca, fa) = (&history_a.correct[i], &history_a.confidence[i]);
        let cb = &history_b.correct[j];
        if ca.len() != history_a.epochs + 1 || fa.len() != ca.len() || cb.len() != history_b.epochs + 1 {
            return Err(DynamicsError::Ragged { id });
        }
        let train_a = &ca[1..];
        let train_b = &cb[1..];
        let cum = cumulative_metrics(train_a, &fa[1..], train_b);
        out.push(MetricRecord {
            example_id: id,
            provenance: provenance(id),
            fslt: if train_a.is_empty() { Epoch::Never } else { fslt(train_a)? },
            ssft: if train_b.is_empty() { Epoch::Never } else { ssft(train_b)? },
            n_f: forgetting_events(ca),
            acc_l: cum.acc_l,
            conf_l: cum.conf_l,
            acc_f: cum.acc_f,
            joint_rank: 0,
            horizon_a: history_a.epochs,
            horizon_b: history_b.epochs,
        });
    }
    joint_rank(&mut out);
    Ok(out)
}

/// 1-based average ranks of `keys` under `cmp` (ties share their mean rank).
pub fn average_ranks<T>(keys: &[T], cmp: impl Fn(&T, &T) -> Ordering) -> Vec<f64> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| cmp(&keys[a], &keys[b]));
    let mut ranks = vec![0.0; keys.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && cmp(&keys[order[i]], &keys[order[j]]) == Ordering::Equal {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Rank of each record by ssft ascending (`Never` last).
pub fn ssft_ranks(records: &[MetricRecord]) -> Vec<f64> {
    let keys: Vec<usize> = records.iter().map(|r| r.ssft.or_horizon(r.horizon_b)).collect();
    average_ranks(&keys, |a, b| a.cmp(b))
}

/// Rank of each record by fslt descending (`Never` first).
pub fn fslt_ranks(records: &[MetricRecord]) -> Vec<f64> {
    let keys: Vec<usize> = records.iter().map(|r| r.fslt.or_horizon(r.horizon_a)).collect();
    average_ranks(&keys, |a, b| b.cmp(a))
}

/// Combine learning and forgetting: each record's suspiciousness is its
/// ssft rank plus its fslt rank (average ranks for ties); `joint_rank` is the
/// 1-based position by that sum, ties broken by ssft rank then example id.
pub fn joint_rank(records: &mut [MetricRecord]) {
    let rs = ssft_ranks(records);
    let rf = fslt_ranks(records);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        (rs[a] + rf[a])
            .total_cmp(&(rs[b] + rf[b]))
            .then(rs[a].total_cmp(&rs[b]))
            .then(records[a].example_id.cmp(&records[b].example_id))
    });
    for (pos, &i) in order.iter().enumerate() {
        records[i].joint_rank = pos + 1;
    }
}

pub const METRICS_HEADER: [&str; 9] = [
    "example_id",
    "provenance",
    "fslt",
    "ssft",
    "n_f",
    "acc_l",
    "conf_l",
    "acc_f",
    "joint_rank",
];

/// Metrics table CSV; `Never` is written as `NEVER`, a missing provenance
/// as `unknown`.
pub fn write_metrics_csv<W: io::Write>(records: &[MetricRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in records {
        w.write_record([
            r.example_id.to_string(),
            r.provenance.map_or("unknown", |p| p.as_str()).to_string(),
            r.fslt.to_string(),
            r.ssft.to_string(),
            r.n_f.to_string(),
            r.acc_l.to_string(),
            r.conf_l.to_string(),
            r.acc_f.to_string(),
            r.joint_rank.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const T: bool = true;
    const F: bool = false;

    #[test]
    fn fslt_examples() {
        assert_eq!(fslt(&[F, T, T, T]).unwrap(), Epoch::At(2));
        assert_eq!(fslt(&[T, T, F]).unwrap(), Epoch::Never);
        assert_eq!(fslt(&[T; 7]).unwrap(), Epoch::At(1));
        assert!(matches!(fslt(&[]), Err(DynamicsError::EmptyHistory)));
    }

    #[test]
    fn ssft_examples() {
        assert_eq!(ssft(&[T, T, F, F]).unwrap(), Epoch::At(3));
        assert_eq!(ssft(&[T, T, T]).unwrap(), Epoch::Never);
        assert_eq!(ssft(&[F, T, F, F]).unwrap(), Epoch::At(3));
        assert!(matches!(ssft(&[]), Err(DynamicsError::EmptyHistory)));
    }

    #[test]
    fn forgetting_event_examples() {
        assert_eq!(forgetting_events(&[F, T, F, T, T]), 1);
        assert_eq!(forgetting_events(&[T; 5]), 0);
        assert_eq!(forgetting_events(&[T, F, T, F]), 2);
        assert_eq!(forgetting_events(&[T]), 0);
    }

    #[test]
    fn cumulative_examples() {
        assert_eq!(cumulative_metrics(&[T, F, T, T], &[0.0; 4], &[]).acc_l, 3);
        assert_eq!(cumulative_metrics(&[], &[0.5, 0.5], &[]).conf_l, 1.0);
        assert_eq!(cumulative_metrics(&[], &[], &[F, F, F]).acc_f, 0);
    }

    fn rec(id: u64, fslt: Epoch, ssft: Epoch) -> MetricRecord {
        MetricRecord {
            example_id: id,
            provenance: None,
            fslt,
            ssft,
            n_f: 0,
            acc_l: 0,
            conf_l: 0.0,
            acc_f: 0,
            joint_rank: 0,
            horizon_a: 10,
            horizon_b: 10,
        }
    }

    #[test]
    fn dominant_example_ranks_first() {
        let mut rs = vec![
            rec(0, Epoch::At(2), Epoch::At(8)),
            rec(1, Epoch::At(9), Epoch::At(1)),
            rec(2, Epoch::At(3), Epoch::Never),
        ];
        joint_rank(&mut rs);
        assert_eq!(rs[1].joint_rank, 1);
    }

    #[test]
    fn identical_metrics_rank_by_id() {
        let mut rs: Vec<_> = [4, 2, 9, 0].iter().map(|&i| rec(i, Epoch::At(3), Epoch::At(5))).collect();
        joint_rank(&mut rs);
        let ranks: Vec<usize> = rs.iter().map(|r| r.joint_rank).collect();
        assert_eq!(ranks, vec![3, 2, 4, 1]);
    }

    #[test]
    fn three_example_rank_sum_by_hand() {
        // ssft: a=4, b=2, c=NEVER(11)  -> ascending ranks a=2, b=1, c=3
        // fslt: a=5, b=NEVER(11), c=5  -> descending ranks b=1, a=c=2.5
        // sums: a=4.5, b=2, c=5.5      -> joint b=1, a=2, c=3
        let mut rs = vec![
            rec(0, Epoch::At(5), Epoch::At(4)),
            rec(1, Epoch::Never, Epoch::At(2)),
            rec(2, Epoch::At(5), Epoch::Never),
        ];
        joint_rank(&mut rs);
        assert_eq!(rs.iter().map(|r| r.joint_rank).collect::<Vec<_>>(), vec![2, 1, 3]);
    }

    #[test]
    fn tie_in_sum_broken_by_ssft_rank() {
        // ssft ranks a=1, b=2; fslt ranks a=2, b=1 -> equal sums, a wins on ssft
        let mut rs = vec![rec(7, Epoch::At(1), Epoch::At(1)), rec(3, Epoch::At(4), Epoch::At(2))];
        joint_rank(&mut rs);
        assert_eq!(rs[0].joint_rank, 1);
        assert_eq!(rs[1].joint_rank, 2);
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[3, 1, 3, 2], |a, b| a.cmp(b)), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn epoch_serialization() {
        assert_eq!(serde_json::to_string(&Epoch::Never).unwrap(), "\"NEVER\"");
        assert_eq!(serde_json::to_string(&Epoch::At(4)).unwrap(), "4");
        assert_eq!(serde_json::from_str::<Epoch>("\"NEVER\"").unwrap(), Epoch::Never);
        assert_eq!(serde_json::from_str::<Epoch>("12").unwrap(), Epoch::At(12));
        assert_eq!("NEVER".parse::<Epoch>().unwrap(), Epoch::Never);
    }

    fn naive_settle(row: &[bool], target: bool) -> Epoch {
        (1..=row.len())
            .find(|&t| row[t - 1..].iter().all(|&c| c == target))
            .map_or(Epoch::Never, Epoch::At)
    }

    proptest! {
        #[test]
        fn matches_quadratic_oracle(row in proptest::collection::vec(any::<bool>(), 1..60)) {
            prop_assert_eq!(fslt(&row).unwrap(), naive_settle(&row, true));
            prop_assert_eq!(ssft(&row).unwrap(), naive_settle(&row, false));
        }

        #[test]
        fn appending_epochs_moves_ssft_monotonically(row in proptest::collection::vec(any::<bool>(), 1..40)) {
            let before = ssft(&row).unwrap();
            let mut up = row.clone();
            up.push(true);
            prop_assert_eq!(ssft(&up).unwrap(), Epoch::Never);
            let mut down = row.clone();
            down.push(false);
            match before {
                Epoch::At(t) => prop_assert_eq!(ssft(&down).unwrap(), Epoch::At(t)),
                Epoch::Never => prop_assert_eq!(ssft(&down).unwrap(), Epoch::At(row.len() + 1)),
            }
        }

        #[test]
        fn always_correct_iff_fslt_one_and_no_events(row in proptest::collection::vec(any::<bool>(), 2..30)) {
            let train = &row[1..];
            let lhs = fslt(train).unwrap() == Epoch::At(1) && forgetting_events(&row) == 0;
            prop_assert_eq!(lhs, train.iter().all(|&c| c));
        }

        #[test]
        fn never_forgotten_implies_final_correct(row in proptest::collection::vec(any::<bool>(), 1..30)) {
            if ssft(&row).unwrap() == Epoch::Never {
                prop_assert!(cumulative_metrics(&[], &[], &row).acc_f >= 1);
            }
        }
    }
}
