//! Confidence filtering and deduplication of generated candidates.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{gold_probability, require_probabilistic, ClassifierBackend};
use crate::config::{FilterModelChoice, RunConfig};
use crate::error::{Error, Result};
use crate::pool::{Origin, Sample, SamplePool};
use crate::rng::rng_from_seed;
use crate::scorer::fit;

/// Trains the filtering classifier on the original samples only, or hands
/// back the current shallow scorer when configured to reuse it.
pub fn train_filter_model(
    template: &dyn ClassifierBackend,
    pool: &SamplePool,
    config: &RunConfig,
    shallow: Option<&dyn ClassifierBackend>,
    seed: u64,
) -> Result<Box<dyn ClassifierBackend>> {
    if config.filter_model == FilterModelChoice::ReuseShallow {
        let s = shallow.ok_or_else(|| Error::config("filter_model", "reuse_shallow needs a shallow model"))?;
        return Ok(s.clone_box());
    }
    let originals: Vec<&Sample> = pool.originals().collect();
    if originals.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut model = template.fresh();
    fit(model.as_mut(), &originals, config.task_epochs, config.task_lr, &mut rng_from_seed(seed))?;
    Ok(model)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<Sample>,
    pub rejected: Vec<Sample>,
}

/// Keeps candidates whose confidence on their own label is at least
/// `threshold`. Every candidate is annotated with `filter_confidence`;
/// relative order is preserved in both lists.
pub fn filter_candidates(
    model: &dyn ClassifierBackend,
    candidates: Vec<Sample>,
    threshold: f64,
) -> Result<FilterOutcome> {
    require_probabilistic(model)?;
    let conf: Vec<Result<f64>> = candidates.par_iter().map(|c| gold_probability(model, c)).collect();
    let mut out = FilterOutcome::default();
    for (mut c, p) in candidates.into_iter().zip(conf) {
        let p = p?.clamp(0.0, 1.0);
        c.filter_confidence = Some(p);
        if p >= threshold {
            out.kept.push(c);
        } else {
            out.rejected.push(c);
        }
    }
    Ok(out)
}

/// Splits `kept` into survivors and duplicates of the pool or of earlier
/// candidates. With `enabled == false` nothing is removed.
pub fn dedup_candidates(kept: Vec<Sample>, pool: &SamplePool, enabled: bool) -> (Vec<Sample>, Vec<Sample>) {
    if !enabled {
        return (kept, Vec::new());
    }
    let mut seen = pool.content_keys();
    let mut unique = Vec::with_capacity(kept.len());
    let mut dups = Vec::new();
    for c in kept {
        if seen.insert(c.content_key()) {
            unique.push(c);
        } else {
            dups.push(c);
        }
    }
    (unique, dups)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectionReason {
    BelowThreshold,
    Duplicate,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRecord {
    pub candidate_id: String,
    pub confidence: Option<f64>,
    pub reason: RejectionReason,
    /// Parser verdict for malformed draws.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detail: Option<String>,
}

pub fn write_rejection_log(path: &Path, records: &[RejectionRecord]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pool invariant under deduplication: no two samples with the same
/// `(segments, label)` unless both are originals.
pub fn has_pseudo_duplicates(pool: &SamplePool) -> bool {
    let mut seen = HashSet::new();
    for s in pool.samples() {
        let fresh = seen.insert(s.content_key());
        if !fresh && s.origin == Origin::Pseudo {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::backend::{FixedClassifier, FixedMode, LinearBow};
    use crate::pool::{init_pool, TaskDescriptor};

    fn task() -> TaskDescriptor {
        TaskDescriptor::new(&["entailment", "neutral", "contradiction"], 2).unwrap()
    }

    fn cand(i: usize, label: &str) -> Sample {
        Sample::pseudo(format!("c{i}"), vec![format!("p{i}"), format!("h{i}")], label, 1)
    }

    fn table(conf: &[f64]) -> FixedClassifier {
        let t: BTreeMap<String, f64> = conf.iter().enumerate().map(|(i, c)| (format!("c{i}"), *c)).collect();
        FixedClassifier::new(task(), FixedMode::GoldConfidence(t))
    }

    #[test]
    fn six_candidates_half_threshold() {
        let conf = [0.9, 0.7, 0.5, 0.4, 0.2, 0.1];
        let cands: Vec<Sample> = (0..6).map(|i| cand(i, "neutral")).collect();
        let out = filter_candidates(&table(&conf), cands, 0.5).unwrap();
        let ids: Vec<&str> = out.kept.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["c0", "c1", "c2"]);
        assert_eq!(out.rejected.len(), 3);
        assert!(out.kept.iter().all(|s| s.filter_confidence.unwrap() >= 0.5));
    }

    #[test]
    fn zero_threshold_keeps_everything() {
        let cands: Vec<Sample> = (0..4).map(|i| cand(i, "neutral")).collect();
        let out = filter_candidates(&FixedClassifier::new(task(), FixedMode::Uniform), cands, 0.0).unwrap();
        assert_eq!(out.kept.len(), 4);
    }

    #[test]
    fn unit_threshold_with_soft_model_keeps_nothing() {
        let cands: Vec<Sample> = (0..4).map(|i| cand(i, "neutral")).collect();
        let out = filter_candidates(&table(&[0.99, 0.5, 1.0 - 1e-12, 0.3]), cands, 1.0).unwrap();
        assert!(out.kept.is_empty());
        let cands: Vec<Sample> = (0..2).map(|i| cand(i, "neutral")).collect();
        let out = filter_candidates(&FixedClassifier::new(task(), FixedMode::OneHotGold), cands, 1.0).unwrap();
        assert_eq!(out.kept.len(), 2);
    }

    #[test]
    fn dedup_against_pool_and_batch() {
        let orig = Sample::original("o", vec!["p1".into(), "h1".into()], "neutral");
        let pool = init_pool(vec![orig], task()).unwrap();
        let batch = vec![cand(1, "neutral"), cand(2, "neutral"), cand(2, "neutral"), cand(1, "entailment")];
        let mut batch = batch;
        batch[2].id = "c2b".into();
        let (unique, dups) = dedup_candidates(batch.clone(), &pool, true);
        let ids: Vec<&str> = unique.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["c2", "c1"]);
        assert_eq!(dups.len(), 2);
        let (same, none) = dedup_candidates(batch.clone(), &pool, false);
        assert_eq!(same, batch);
        assert!(none.is_empty());
    }

    #[test]
    fn reuse_shallow_returns_the_scorer() {
        let pool = init_pool(vec![Sample::original("o", vec!["a".into(), "b".into()], "neutral")], task()).unwrap();
        let shallow = FixedClassifier::new(task(), FixedMode::OneHotGold);
        let cfg = RunConfig {
            filter_model: FilterModelChoice::ReuseShallow,
            ..RunConfig::default()
        };
        let tmpl = LinearBow::new(task(), 0.0, 1);
        let f = train_filter_model(&tmpl, &pool, &cfg, Some(&shallow), 0).unwrap();
        assert_eq!(f.name(), FixedClassifier::NAME);
    }

    #[test]
    fn rejection_log_is_line_delimited() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rej.jsonl");
        let recs = vec![
            RejectionRecord {
                candidate_id: "a".into(),
                confidence: Some(0.2),
                reason: RejectionReason::BelowThreshold,
                detail: None,
            },
            RejectionRecord {
                candidate_id: "b".into(),
                confidence: None,
                reason: RejectionReason::Malformed,
                detail: Some("empty_segment".into()),
            },
        ];
        write_rejection_log(&p, &recs).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("below-threshold"));
        let back: RejectionRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(back, recs[1]);
    }
}
