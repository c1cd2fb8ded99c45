//! End-to-end behaviour of the refinement loop on small synthetic data.

use std::collections::BTreeSet;
use std::fs;

use poolrefine::backend::{classifier_from_config, gold_probability};
use poolrefine::config::{IndicatorMode, Switch};
use poolrefine::filter::{has_pseudo_duplicates, train_filter_model};
use poolrefine::orchestrator::{run, RunReport};
use poolrefine::pool::{load_snapshot, SnapshotManifest};
use poolrefine::rng::rng_from_seed;
use poolrefine::scorer::{score_pool, train_shallow};
use poolrefine::testbed::{build_synthetic_testbed, contains_token, SyntheticBiasSpec, Testbed};
use poolrefine::{Error, Origin, RunConfig, Sample};

fn small_testbed(seed: u64) -> Testbed {
    let spec = SyntheticBiasSpec {
        sample_count: 600,
        dev_size: 150,
        anti_biased_test_size: 150,
        ..SyntheticBiasSpec::default()
    };
    build_synthetic_testbed(&spec, &mut rng_from_seed(seed)).unwrap()
}

fn small_config() -> RunConfig {
    RunConfig {
        n_iter: 3,
        per_iter_generation: 300,
        shallow_train_count: 150,
        refresh_count: 150,
        task_epochs: 5,
        ..RunConfig::desk()
    }
}

fn content(samples: &[Sample]) -> Vec<(String, Vec<String>, String)> {
    samples.iter().map(|s| (s.id.clone(), s.segments.clone(), s.label.clone())).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn shallow_scores_favour_spurious_carriers() {
    let tb = build_synthetic_testbed(&SyntheticBiasSpec::default(), &mut rng_from_seed(0)).unwrap();
    let cfg = RunConfig::desk();
    let template = classifier_from_config(&cfg.classifier, &tb.task).unwrap();
    let shallow = train_shallow(
        template.as_ref(),
        &tb.train,
        cfg.shallow_train_count,
        cfg.shallow_epochs,
        cfg.shallow_lr,
        1,
    )
    .unwrap();
    let scored = score_pool(shallow.model.as_ref(), &tb.train).unwrap();
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for s in scored.samples() {
        let v = s.bias_score.unwrap();
        if contains_token(s, "not") {
            with.push(v);
        } else {
            without.push(v);
        }
    }
    assert!(mean(&with) >= mean(&without) + 0.05, "{} vs {}", mean(&with), mean(&without));
}

#[test]
fn filter_prefers_label_consistent_texts() {
    let tb = build_synthetic_testbed(&SyntheticBiasSpec::default(), &mut rng_from_seed(2)).unwrap();
    let cfg = RunConfig::desk();
    let template = classifier_from_config(&cfg.classifier, &tb.task).unwrap();
    let filter = train_filter_model(template.as_ref(), &tb.train, &cfg, None, 7).unwrap();
    let labels = tb.task.label_names();
    let mut wins = 0;
    for s in &tb.unbiased_dev {
        let other = labels.iter().find(|l| **l != s.label).unwrap();
        let flipped = Sample {
            label: other.clone(),
            ..s.clone()
        };
        let a = gold_probability(filter.as_ref(), s).unwrap();
        let b = gold_probability(filter.as_ref(), &flipped).unwrap();
        wins += usize::from(a > b);
    }
    assert!(wins as f64 >= 0.9 * tb.unbiased_dev.len() as f64, "{wins}/{}", tb.unbiased_dev.len());
}

#[test]
fn run_writes_consistent_artifacts() {
    let tb = small_testbed(3);
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = run(cfg.clone(), tb.train.clone(), Some(&out_dir)).unwrap();

    assert_eq!(out.records.len(), 3);
    let epochs: Vec<usize> = out.records.iter().map(|r| r.generator_epochs).collect();
    assert_eq!(epochs, [3, 1, 1]);
    for r in &out.records {
        assert!(r.ledger_holds());
        assert!(r.shallow_refreshed);
        assert!(r.chosen_indicators.keys().all(|&b| (1..=2).contains(&b)));
        assert_eq!(r.candidates_generated, 300);
    }
    for s in out.pool.samples().iter().filter(|s| s.origin == Origin::Pseudo) {
        assert!(s.filter_confidence.unwrap() >= cfg.filter_threshold);
    }
    assert!(!has_pseudo_duplicates(&out.pool));

    let report = RunReport::load(&out_dir.join(RunReport::FILE)).unwrap();
    assert_eq!(report.final_pool_size, out.pool.len());
    assert_eq!(report.original_count, 600);
    let snaps = out_dir.join("snapshots");
    let latest = load_snapshot(&snaps, None).unwrap();
    assert_eq!(content(latest.samples()), content(out.pool.samples()));
    let manifest = SnapshotManifest::load(&snaps).unwrap();
    assert_eq!(manifest.snapshots.len(), 4);
    assert_eq!(content(load_snapshot(&snaps, Some(0)).unwrap().samples()), content(tb.train.samples()));
}

#[test]
fn corrupted_snapshot_is_reported_with_its_path() {
    let tb = small_testbed(4);
    let cfg = RunConfig {
        n_iter: 1,
        ..small_config()
    };
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    run(cfg, tb.train, Some(&out_dir)).unwrap();
    let snaps = out_dir.join("snapshots");
    let file = snaps.join("pool_iter_1.jsonl");
    let mut text = fs::read_to_string(&file).unwrap();
    text = text.replacen("\"label\":\"neutral\"", "\"label\":\"entailment\"", 1);
    fs::write(&file, text).unwrap();
    match load_snapshot(&snaps, Some(1)) {
        Err(e @ Error::Integrity { .. }) => assert!(e.to_string().contains("pool_iter_1.jsonl"), "{e}"),
        other => panic!("expected an integrity error, got {other:?}"),
    }
    assert!(load_snapshot(&snaps, Some(0)).is_ok());
}

#[test]
fn existing_run_directory_is_left_alone() {
    let tb = small_testbed(5);
    let dir = tempfile::tempdir().unwrap();
    let keep = dir.path().join("keep.txt");
    fs::write(&keep, "mine").unwrap();
    let err = run(small_config(), tb.train, Some(dir.path())).unwrap_err();
    assert!(err.to_string().contains("not empty"), "{err}");
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, ["keep.txt"]);
    assert_eq!(fs::read_to_string(keep).unwrap(), "mine");
}

#[test]
fn pinned_lowest_indicator() {
    let tb = small_testbed(6);
    let mut cfg = small_config();
    cfg.ablations.indicator = IndicatorMode::PinnedB1;
    let out = run(cfg, tb.train, None).unwrap();
    for r in &out.records {
        assert_eq!(r.chosen_indicators.keys().copied().collect::<BTreeSet<_>>(), BTreeSet::from([1]));
    }
}

#[test]
fn single_shot_uses_the_whole_budget() {
    let tb = small_testbed(7);
    let mut cfg = small_config();
    cfg.ablations.iterative = Switch(false);
    let out = run(cfg, tb.train, None).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].candidates_generated, 900);
    assert_eq!(out.records[0].generator_epochs, 3);
}

#[test]
fn fixed_scorer_is_never_refreshed() {
    let tb = small_testbed(8);
    let mut cfg = small_config();
    cfg.ablations.refresh = Switch(false);
    let out = run(cfg, tb.train, None).unwrap();
    assert!(out.records.iter().all(|r| !r.shallow_refreshed));
}

#[test]
fn label_only_conditioning_records_no_indicators() {
    let tb = small_testbed(9);
    let mut cfg = small_config();
    cfg.ablations.bias_indicator = Switch(false);
    let out = run(cfg, tb.train, None).unwrap();
    assert!(out.records.iter().all(|r| r.chosen_indicators.is_empty() && r.ledger_holds()));
}

#[test]
fn zero_budget_leaves_the_pool_unchanged() {
    let tb = small_testbed(10);
    let cfg = RunConfig {
        per_iter_generation: 0,
        ..small_config()
    };
    let out = run(cfg, tb.train.clone(), None).unwrap();
    assert_eq!(content(out.pool.samples()), content(tb.train.samples()));
    assert!(out.records.iter().all(|r| r.candidates_generated == 0 && r.pool_size_after == 600));
    assert_eq!(out.pool.iteration(), 3);
}

#[test]
fn too_many_groups_is_an_error() {
    let tb = small_testbed(11);
    let cfg = RunConfig {
        n_bi: 601,
        ..small_config()
    };
    assert!(matches!(run(cfg, tb.train, None), Err(Error::TooManyGroups { n_bi: 601, pool: 600 })));
}
