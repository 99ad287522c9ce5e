use std::collections::HashSet;

use proptest::prelude::*;
use ssft_core::analysis::{metric_auc, MetricKind};
use ssft_core::datagen::{build_spec, sample_splits};
use ssft_core::experiment::{
    execute, run_all, run_theory, sweep, verify_artifact, AnalysisKind, RunConfig, TheoryConfig,
};
use ssft_core::{Provenance, SpecConfig, TrainConfig};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::ten_class_default();
    cfg.seeds = vec![0];
    cfg.phase_a.max_epochs = 30;
    cfg.phase_b = TrainConfig {
        max_epochs: 30,
        ..cfg.phase_b.clone()
    };
    cfg
}

#[test]
fn clean_data_is_mostly_never_forgotten() {
    let mut cfg = RunConfig::ten_class_default();
    cfg.dataset.mislabel_fraction = 0.0;
    cfg.analyses = vec![AnalysisKind::Metrics];
    let res = execute(&cfg.for_seed(0)).unwrap();
    let never = res.records.iter().filter(|r| r.ssft.is_never()).count();
    assert!(
        never as f64 >= 0.95 * res.records.len() as f64,
        "{never} of {} never forgotten",
        res.records.len()
    );
    assert!(res.records.iter().all(|r| r.provenance != Some(Provenance::Mislabeled)));
}

#[test]
fn execute_is_deterministic() {
    let cfg = small_config().for_seed(3);
    let (a, b) = (execute(&cfg).unwrap(), execute(&cfg).unwrap());
    assert_eq!(a.records, b.records);
    assert_eq!(a.summary, b.summary);
}

#[test]
fn seeds_change_the_data() {
    let cfg = small_config();
    let (a, b) = (execute(&cfg.for_seed(0)).unwrap(), execute(&cfg.for_seed(1)).unwrap());
    assert_ne!(a.records, b.records);
}

#[test]
fn config_round_trips_through_json() {
    let mut cfg = RunConfig::ten_class_default();
    cfg.analyses.push(AnalysisKind::Removal);
    let text = serde_json::to_string_pretty(&cfg).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    assert_eq!(RunConfig::from_json(&text).unwrap().hash(), cfg.hash());
}

#[test]
fn unknown_field_is_rejected_with_its_path() {
    let mut doc = serde_json::to_value(RunConfig::ten_class_default()).unwrap();
    doc["phase_a"]["learning_rat"] = serde_json::json!(0.1);
    let err = RunConfig::from_json(&doc.to_string()).unwrap_err().to_string();
    assert!(err.contains("phase_a"), "{err}");
}

#[test]
fn single_value_sweep_matches_plain_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let lr = cfg.phase_b.learning_rate;
    let (report, _) = sweep(&cfg, "phase_b.learning_rate", &[serde_json::json!(lr)], dir.path()).unwrap();
    let plain = execute(&cfg.for_seed(0)).unwrap();
    let expected = metric_auc(&plain.records, MetricKind::Ssft).unwrap().auc;
    let got = report.mean_auc(&report.values[0], "ssft").unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn run_artifact_verifies_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.make_quick();
    let out = run_all(&cfg, dir.path()).unwrap();
    let art = &out.artifacts[0];
    verify_artifact(&art.dir).unwrap();
    let auc = art.dir.join("reports/auc.csv");
    let mut text = std::fs::read_to_string(&auc).unwrap();
    text.push('\n');
    std::fs::write(&auc, text).unwrap();
    assert!(verify_artifact(&art.dir).is_err());
}

#[test]
fn quick_theory_run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TheoryConfig::default();
    cfg.make_quick();
    cfg.set_trials(3);
    let (report, art) = run_theory(&cfg, dir.path()).unwrap();
    verify_artifact(&art.dir).unwrap();
    assert!(art.dir.join("reports/theory.json").exists());
    assert_eq!(report.asymptotic.params.trials, 3);
}

fn spec_strategy() -> impl Strategy<Value = SpecConfig> {
    (any::<u64>(), 2usize..5, 20usize..80, 0.0f64..0.3, any::<bool>()).prop_map(|(seed, k, n, noise, rare)| {
        let mut cfg = SpecConfig::binary_theory(60, k, n, 2.0, 1.0, rare);
        cfg.mislabel_fraction = noise;
        cfg.rng_seed = seed;
        cfg
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_are_well_formed(cfg in spec_strategy()) {
        let spec = build_spec(&cfg).unwrap();
        let (a, b) = sample_splits(&spec);
        prop_assert_eq!(a.len(), cfg.n);
        prop_assert_eq!(b.len(), cfg.n);
        let ids: HashSet<u64> = a.iter().chain(&b).map(|e| e.example_id).collect();
        prop_assert_eq!(ids.len(), 2 * cfg.n);
        for e in a.iter().chain(&b) {
            prop_assert_eq!(e.x.len(), cfg.d);
            prop_assert!(e.given_label < cfg.num_classes);
            prop_assert_eq!(e.provenance == Provenance::Mislabeled, e.given_label != e.true_label);
        }
    }

    #[test]
    fn sampling_is_reproducible(cfg in spec_strategy()) {
        let spec = build_spec(&cfg).unwrap();
        prop_assert_eq!(sample_splits(&spec), sample_splits(&spec));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn joint_ranks_form_a_permutation(seed in 0u64..1000) {
        let mut cfg = small_config();
        cfg.make_quick();
        let res = execute(&cfg.for_seed(seed)).unwrap();
        let mut ranks: Vec<usize> = res.records.iter().map(|r| r.joint_rank).collect();
        ranks.sort_unstable();
        prop_assert_eq!(ranks, (1..=res.records.len()).collect::<Vec<_>>());
        for r in &res.records {
            prop_assert!(r.acc_l <= r.horizon_a && r.acc_f <= r.horizon_b);
            if let Some(t) = r.fslt.finite() { prop_assert!((1..=r.horizon_a).contains(&t)); }
            if let Some(t) = r.ssft.finite() { prop_assert!((1..=r.horizon_b).contains(&t)); }
        }
    }
}
