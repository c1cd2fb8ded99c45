//! Sample data model, the sample pool, and on-disk snapshots.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub id: usize,
    pub name: String,
}

/// Label set and segment arity shared by every sample of a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub labels: Vec<Label>,
    pub arity: usize,
}

impl TaskDescriptor {
    pub fn new<S: AsRef<str>>(names: &[S], arity: usize) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::config("labels", "label set must not be empty"));
        }
        if !(1..=2).contains(&arity) {
            return Err(Error::config("arity", "segment arity must be 1 or 2"));
        }
        let mut seen = HashSet::new();
        let mut labels = Vec::with_capacity(names.len());
        for (id, n) in names.iter().enumerate() {
            let name = n.as_ref().trim().to_string();
            if name.is_empty() || !seen.insert(name.clone()) {
                return Err(Error::config("labels", format!("invalid or repeated label `{name}`")));
            }
            labels.push(Label { id, name });
        }
        Ok(Self { labels, arity })
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_id(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.name == name)
    }

    pub fn label_name(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(|l| l.name.as_str())
    }

    pub fn label_names(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.name.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Original,
    Pseudo,
}

/// One labeled task instance. Serialized as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub segments: Vec<String>,
    pub label: String,
    pub origin: Origin,
    pub created_iteration: u32,
    pub bias_score: Option<f64>,
    pub bias_indicator: Option<usize>,
    pub filter_confidence: Option<f64>,
}

impl Sample {
    pub fn original(id: impl Into<String>, segments: Vec<String>, label: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            segments,
            label: label.into(),
            origin: Origin::Original,
            created_iteration: 0,
            bias_score: None,
            bias_indicator: None,
            filter_confidence: None,
        }
    }

    pub fn pseudo(
        id: impl Into<String>,
        segments: Vec<String>,
        label: impl Into<String>,
        created_iteration: u32,
    ) -> Self {
        Self {
            origin: Origin::Pseudo,
            created_iteration,
            ..Self::original(id, segments, label)
        }
    }

    /// Identity used for duplicate detection.
    pub fn content_key(&self) -> (Vec<String>, String) {
        (self.segments.clone(), self.label.clone())
    }

    /// Checks the record invariants against a task.
    pub fn validate(&self, task: &TaskDescriptor) -> Result<()> {
        let bad = |reason: &str| Error::InvalidSample {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() {
            return Err(bad("empty id"));
        }
        if self.segments.len() != task.arity {
            return Err(bad(&format!(
                "expected {} segments, found {}",
                task.arity,
                self.segments.len()
            )));
        }
        if self.segments.iter().any(|s| s.trim().is_empty()) {
            return Err(bad("empty segment"));
        }
        if task.label_id(&self.label).is_none() {
            return Err(Error::UnknownLabel(self.label.clone()));
        }
        if self.origin == Origin::Original && self.created_iteration != 0 {
            return Err(bad("original samples must have created_iteration 0"));
        }
        if let Some(s) = self.bias_score {
            if !(0.0..=1.0).contains(&s) {
                return Err(bad("bias_score outside [0,1]"));
            }
        }
        if let Some(c) = self.filter_confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(bad("filter_confidence outside [0,1]"));
            }
        }
        match (self.bias_indicator, self.bias_score) {
            (Some(0), _) => Err(bad("bias_indicator must be >= 1")),
            (Some(_), None) => Err(bad("bias_indicator without bias_score")),
            _ => Ok(()),
        }
    }
}

/// The iteratively expanded sample collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePool {
    samples: Vec<Sample>,
    task: TaskDescriptor,
    iteration: u32,
}

/// Builds the iteration-0 pool from original training samples.
pub fn init_pool(originals: Vec<Sample>, task: TaskDescriptor) -> Result<SamplePool> {
    if originals.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut ids = HashSet::with_capacity(originals.len());
    for s in &originals {
        if s.origin != Origin::Original {
            return Err(Error::InvalidSample {
                id: s.id.clone(),
                reason: "init_pool accepts only original samples".into(),
            });
        }
        s.validate(&task)?;
        if !ids.insert(s.id.as_str()) {
            return Err(Error::DuplicateId(s.id.clone()));
        }
    }
    Ok(SamplePool {
        samples: originals,
        task,
        iteration: 0,
    })
}

impl SamplePool {
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn task(&self) -> &TaskDescriptor {
        &self.task
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn originals(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.origin == Origin::Original)
    }

    /// Overwrites per-sample annotations (score, indicator) while keeping
    /// content, identity and order. `f` must not change id, segments,
    /// label or origin.
    pub(crate) fn annotate<F>(&mut self, mut f: F) -> Result<()>
    where
        F: FnMut(usize, &mut Sample) -> Result<()>,
    {
        for (i, s) in self.samples.iter_mut().enumerate() {
            f(i, s)?;
        }
        Ok(())
    }

    /// Appends pseudo samples and advances the iteration counter.
    /// All-or-nothing: on error the pool is unchanged.
    pub fn extend_pseudo(&mut self, new: Vec<Sample>, iteration: u32) -> Result<()> {
        if iteration < self.iteration {
            return Err(Error::InvalidSample {
                id: "<pool>".into(),
                reason: format!("iteration {iteration} precedes pool iteration {}", self.iteration),
            });
        }
        let mut ids: HashSet<&str> = self.samples.iter().map(|s| s.id.as_str()).collect();
        for s in &new {
            if s.origin != Origin::Pseudo || s.created_iteration != iteration {
                return Err(Error::InvalidSample {
                    id: s.id.clone(),
                    reason: format!("expected a pseudo sample of iteration {iteration}"),
                });
            }
            s.validate(&self.task)?;
            if !ids.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        self.samples.extend(new);
        self.iteration = iteration;
        Ok(())
    }

    pub fn counts_by_origin(&self) -> BTreeMap<Origin, usize> {
        let mut m = BTreeMap::new();
        for s in &self.samples {
            *m.entry(s.origin).or_insert(0) += 1;
        }
        m
    }

    pub fn counts_by_iteration(&self) -> BTreeMap<u32, usize> {
        let mut m = BTreeMap::new();
        for s in &self.samples {
            *m.entry(s.created_iteration).or_insert(0) += 1;
        }
        m
    }

    pub fn content_keys(&self) -> HashSet<(Vec<String>, String)> {
        self.samples.iter().map(Sample::content_key).collect()
    }
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Integrity {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", n + 1),
        })?;
        out.push(s);
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub iteration: u32,
    pub file: String,
    pub size: usize,
    pub sha256: String,
    pub counts_by_origin: BTreeMap<Origin, usize>,
    pub counts_by_iteration: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub task: TaskDescriptor,
    pub snapshots: Vec<SnapshotEntry>,
}

impl SnapshotManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Integrity {
            path,
            reason: e.to_string(),
        })
    }

    pub fn latest(&self) -> Option<&SnapshotEntry> {
        self.snapshots.iter().max_by_key(|e| e.iteration)
    }
}

pub fn snapshot_file_name(iteration: u32) -> String {
    format!("pool_iter_{iteration}.jsonl")
}

/// Writes `pool_iter_<t>.jsonl` for the pool's current iteration and
/// records it in `manifest.json`, replacing any earlier entry for `t`.
pub fn snapshot_pool(pool: &SamplePool, dir: &Path) -> Result<SnapshotManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file = snapshot_file_name(pool.iteration);
    let path = dir.join(&file);
    write_jsonl(&path, &pool.samples)?;
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;

    let mut manifest = match SnapshotManifest::load(dir) {
        Ok(m) if m.task == pool.task => m,
        _ => SnapshotManifest {
            task: pool.task.clone(),
            snapshots: Vec::new(),
        },
    };
    manifest.snapshots.retain(|e| e.iteration != pool.iteration);
    manifest.snapshots.push(SnapshotEntry {
        iteration: pool.iteration,
        file,
        size: pool.len(),
        sha256: sha256_hex(&bytes),
        counts_by_origin: pool.counts_by_origin(),
        counts_by_iteration: pool.counts_by_iteration(),
    });
    manifest.snapshots.sort_by_key(|e| e.iteration);

    let mpath = dir.join(SnapshotManifest::FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Reloads the snapshot of `iteration` (latest when `None`), verifying the
/// file digest and the recorded counts.
pub fn load_snapshot(dir: &Path, iteration: Option<u32>) -> Result<SamplePool> {
    let manifest = SnapshotManifest::load(dir)?;
    let entry = match iteration {
        Some(t) => manifest.snapshots.iter().find(|e| e.iteration == t),
        None => manifest.latest(),
    }
    .ok_or_else(|| Error::Integrity {
        path: dir.join(SnapshotManifest::FILE),
        reason: format!("no snapshot for iteration {iteration:?}"),
    })?;

    let path: PathBuf = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let integrity = |reason: String| Error::Integrity {
        path: path.clone(),
        reason,
    };
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(integrity("digest does not match manifest".into()));
    }
    let samples = read_jsonl(&path)?;
    let pool = SamplePool {
        samples,
        task: manifest.task.clone(),
        iteration: entry.iteration,
    };
    if pool.len() != entry.size
        || pool.counts_by_origin() != entry.counts_by_origin
        || pool.counts_by_iteration() != entry.counts_by_iteration
    {
        return Err(integrity("sample counts do not match manifest".into()));
    }
    let mut ids = HashSet::new();
    for s in &pool.samples {
        s.validate(&pool.task).map_err(|e| integrity(e.to_string()))?;
        if !ids.insert(s.id.as_str()) {
            return Err(integrity(format!("duplicate sample id `{}`", s.id)));
        }
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn nli() -> TaskDescriptor {
        TaskDescriptor::new(&["entailment", "neutral", "contradiction"], 2).unwrap()
    }

    fn toy(id: &str, label: &str) -> Sample {
        Sample::original(id, vec![format!("premise {id}"), format!("hyp {id}")], label)
    }

    #[test]
    fn init_pool_identity() {
        let pool = init_pool(
            ["a", "b", "c", "d"].iter().map(|i| toy(i, "neutral")).collect(),
            nli(),
        )
        .unwrap();
        assert_eq!(pool.len(), 4);
        assert_eq!(pool.iteration(), 0);
    }

    #[test]
    fn init_pool_rejects_bad_input() {
        assert!(matches!(init_pool(vec![], nli()), Err(Error::EmptyPool)));
        let dup = vec![toy("a", "neutral"), toy("a", "entailment")];
        assert!(matches!(init_pool(dup, nli()), Err(Error::DuplicateId(_))));
        let unknown = vec![toy("a", "maybe")];
        assert!(matches!(init_pool(unknown, nli()), Err(Error::UnknownLabel(_))));
        let mut blank = toy("a", "neutral");
        blank.segments[1] = "   ".into();
        assert!(init_pool(vec![blank], nli()).is_err());
        let pseudo = Sample::pseudo("p", vec!["x".into(), "y".into()], "neutral", 1);
        assert!(init_pool(vec![pseudo], nli()).is_err());
    }

    #[test]
    fn indicator_requires_score() {
        let mut s = toy("a", "neutral");
        s.bias_indicator = Some(1);
        assert!(s.validate(&nli()).is_err());
        s.bias_score = Some(0.3);
        assert!(s.validate(&nli()).is_ok());
    }

    #[test]
    fn extend_is_all_or_nothing() {
        let mut pool = init_pool(vec![toy("a", "neutral")], nli()).unwrap();
        let good = Sample::pseudo("p1", vec!["x".into(), "y".into()], "neutral", 1);
        let clash = Sample::pseudo("a", vec!["x".into(), "z".into()], "neutral", 1);
        assert!(pool.extend_pseudo(vec![good.clone(), clash], 1).is_err());
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.iteration(), 0);
        pool.extend_pseudo(vec![good], 1).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.iteration(), 1);
    }

    #[test]
    fn manifest_counts_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut pool = init_pool((0..6).map(|i| toy(&format!("o{i}"), "entailment")).collect(), nli()).unwrap();
        let pseudo = (0..4)
            .map(|i| {
                let mut s = Sample::pseudo(format!("p{i}"), vec!["a b".into(), format!("c {i}")], "contradiction", 1);
                s.filter_confidence = Some(0.1 * i as f64 + 1e-17);
                s.bias_score = Some(1.0 / 3.0);
                s.bias_indicator = Some(2);
                s
            })
            .collect();
        pool.extend_pseudo(pseudo, 1).unwrap();
        let m = snapshot_pool(&pool, dir.path()).unwrap();
        let e = m.latest().unwrap();
        assert_eq!(e.counts_by_origin[&Origin::Original], 6);
        assert_eq!(e.counts_by_origin[&Origin::Pseudo], 4);
        let back = load_snapshot(dir.path(), None).unwrap();
        assert_eq!(back, pool);
    }

    #[test]
    fn tampered_snapshot_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let pool = init_pool(vec![toy("a", "neutral"), toy("b", "neutral")], nli()).unwrap();
        snapshot_pool(&pool, dir.path()).unwrap();
        let path = dir.path().join("pool_iter_0.jsonl");
        let text = fs::read_to_string(&path).unwrap().replace("neutral", "entailment");
        fs::write(&path, text).unwrap();
        match load_snapshot(dir.path(), Some(0)) {
            Err(Error::Integrity { path: p, .. }) => assert_eq!(p, path),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn missing_optionals_serialize_as_null() {
        let line = serde_json::to_string(&toy("a", "neutral")).unwrap();
        assert!(line.contains("\"bias_score\":null"));
        assert!(line.contains("\"bias_indicator\":null"));
        assert!(line.contains("\"filter_confidence\":null"));
        assert!(line.contains("\"origin\":\"original\""));
    }
}
