//! Trainable label-probability models.
//!
//! One abstraction serves as shallow bias scorer, filter model and
//! downstream task model; only the training regime differs.

mod fixed;
mod linear_bow;

use std::fmt::Debug;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use fixed::{FixedClassifier, FixedMode};
pub use linear_bow::{bow_features, LinearBow, LinearBowState};

use crate::config::ClassifierConfig;
use crate::error::{Error, Result};
use crate::pool::{Sample, TaskDescriptor};
use crate::rng::StageRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub trainable: bool,
    pub probabilistic: bool,
}

pub trait ClassifierBackend: Debug + Send + Sync {
    fn name(&self) -> &str;

    fn task(&self) -> &TaskDescriptor;

    fn capabilities(&self) -> Capabilities;

    fn is_trained(&self) -> bool;

    /// An untrained copy with the same hyperparameters.
    fn fresh(&self) -> Box<dyn ClassifierBackend>;

    fn clone_box(&self) -> Box<dyn ClassifierBackend>;

    /// One pass over `samples` in an order drawn from `rng`.
    fn train_epoch(&mut self, samples: &[&Sample], lr: f64, rng: &mut StageRng) -> Result<()>;

    /// Distribution over the task's labels, indexed by label id.
    fn predict(&self, sample: &Sample) -> Result<Vec<f64>>;

    /// Serializable model state.
    fn state(&self) -> Result<serde_json::Value>;
}

impl Clone for Box<dyn ClassifierBackend> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub(crate) fn require_trainable(b: &dyn ClassifierBackend) -> Result<()> {
    let caps = b.capabilities();
    let missing = match (caps.trainable, caps.probabilistic) {
        (false, _) => "trainable",
        (_, false) => "probabilistic",
        _ => return Ok(()),
    };
    Err(Error::Capability {
        backend: b.name().to_string(),
        missing: missing.to_string(),
    })
}

pub(crate) fn require_probabilistic(b: &dyn ClassifierBackend) -> Result<()> {
    if b.capabilities().probabilistic {
        Ok(())
    } else {
        Err(Error::Capability {
            backend: b.name().to_string(),
            missing: "probabilistic".to_string(),
        })
    }
}

/// Probability of the sample's own label.
pub fn gold_probability(model: &dyn ClassifierBackend, sample: &Sample) -> Result<f64> {
    let id = model
        .task()
        .label_id(&sample.label)
        .ok_or_else(|| Error::UnknownLabel(sample.label.clone()))?;
    let dist = model.predict(sample)?;
    Ok(dist[id])
}

/// Builds an untrained backend by registry name.
pub fn classifier_from_config(
    cfg: &ClassifierConfig,
    task: &TaskDescriptor,
) -> Result<Box<dyn ClassifierBackend>> {
    match cfg.backend.as_str() {
        LinearBow::NAME => Ok(Box::new(LinearBow::new(task.clone(), cfg.l2, cfg.batch_size))),
        other => Err(Error::UnknownBackend(other.to_string())),
    }
}

/// Written next to a saved classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub backend: String,
    pub seed: u64,
    pub labels: Vec<String>,
    pub epochs: usize,
    pub lr: f64,
    pub subset_ids: Vec<String>,
}

pub fn save_classifier(
    dir: &Path,
    model: &dyn ClassifierBackend,
    meta: &TrainingMetadata,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join("metadata.json");
    fs::write(&meta_path, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&meta_path, e))?;
    let state_path = dir.join("state.json");
    let state = serde_json::json!({
        "task": model.task(),
        "state": model.state()?,
    });
    fs::write(&state_path, serde_json::to_vec(&state)?).map_err(|e| Error::io(&state_path, e))
}

pub fn load_classifier(dir: &Path) -> Result<(Box<dyn ClassifierBackend>, TrainingMetadata)> {
    let meta_path = dir.join("metadata.json");
    let meta: TrainingMetadata = serde_json::from_str(
        &fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
    )?;
    let state_path = dir.join("state.json");
    let mut doc: serde_json::Value = serde_json::from_slice(
        &fs::read(&state_path).map_err(|e| Error::io(&state_path, e))?,
    )?;
    let task: TaskDescriptor = serde_json::from_value(doc["task"].take())?;
    let model: Box<dyn ClassifierBackend> = match meta.backend.as_str() {
        LinearBow::NAME => {
            let st: LinearBowState = serde_json::from_value(doc["state"].take())?;
            Box::new(LinearBow::from_state(task, st))
        }
        other => return Err(Error::UnknownBackend(other.to_string())),
    };
    Ok((model, meta))
}
