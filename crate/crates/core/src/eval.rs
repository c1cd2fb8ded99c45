//! Downstream retraining and accuracy evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backend::ClassifierBackend;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pool::{read_jsonl, Sample, SamplePool, TaskDescriptor};
use crate::rng::rng_from_seed;
use crate::scorer::fit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub epochs_run: usize,
    /// Epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
    pub holdout_size: usize,
    pub holdout_accuracy: Option<f64>,
    pub seed: u64,
}

#[derive(Debug)]
pub struct TaskModel {
    pub model: Box<dyn ClassifierBackend>,
    pub info: TrainingInfo,
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

fn holdout_accuracy(model: &dyn ClassifierBackend, holdout: &[&Sample]) -> Result<f64> {
    let task = model.task();
    let mut correct = 0usize;
    for s in holdout {
        let y = task.label_id(&s.label).ok_or_else(|| Error::UnknownLabel(s.label.clone()))?;
        if argmax(&model.predict(s)?) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / holdout.len() as f64)
}

/// Trains a fresh task model on the whole pool for up to `task_epochs`,
/// keeping the weights of the best epoch on a held-out split and stopping
/// after `patience` epochs without improvement.
pub fn retrain_task_model(
    template: &dyn ClassifierBackend,
    pool: &SamplePool,
    config: &RunConfig,
    seed: u64,
) -> Result<TaskModel> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut rng = rng_from_seed(seed);
    let mut order: Vec<&Sample> = pool.samples().iter().collect();
    order.shuffle(&mut rng);
    let n_hold = if pool.len() >= 2 {
        ((pool.len() as f64 * config.early_stop.holdout_fraction).round() as usize).min(pool.len() - 1)
    } else {
        0
    };
    let (holdout, train) = order.split_at(n_hold);

    let mut model = template.fresh();
    if holdout.is_empty() {
        fit(model.as_mut(), train, config.task_epochs, config.task_lr, &mut rng)?;
        return Ok(TaskModel {
            model,
            info: TrainingInfo {
                epochs_run: config.task_epochs,
                best_epoch: config.task_epochs,
                holdout_size: 0,
                holdout_accuracy: None,
                seed,
            },
        });
    }

    let mut best: Option<(f64, usize, Box<dyn ClassifierBackend>)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 1..=config.task_epochs {
        fit(model.as_mut(), train, 1, config.task_lr, &mut rng)?;
        epochs_run = epoch;
        let acc = holdout_accuracy(model.as_ref(), holdout)?;
        match &best {
            Some((b, _, _)) if acc <= *b => {
                since_best += 1;
                if since_best >= config.early_stop.patience {
                    break;
                }
            }
            _ => {
                best = Some((acc, epoch, model.clone_box()));
                since_best = 0;
            }
        }
    }
    let (acc, best_epoch, model) = best.expect("at least one epoch");
    Ok(TaskModel {
        model,
        info: TrainingInfo {
            epochs_run,
            best_epoch,
            holdout_size: holdout.len(),
            holdout_accuracy: Some(acc),
            seed,
        },
    })
}

/// Declares a dataset's label set and arity, plus an optional map that
/// folds model labels onto the dataset's coarser labels (e.g. neutral and
/// contradiction onto non-entailment).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub labels: Vec<String>,
    pub arity: usize,
    #[serde(default)]
    pub collapse: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<Sample>,
    pub meta: Option<DatasetMeta>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Self {
        Self {
            name: name.into(),
            samples,
            meta: None,
        }
    }

    pub fn with_meta(mut self, meta: DatasetMeta) -> Self {
        self.meta = Some(meta);
        self
    }
}

/// Reads a dataset from the pool record format; `meta_path` points to a
/// JSON [`DatasetMeta`].
pub fn load_dataset(name: &str, samples_path: &Path, meta_path: Option<&Path>) -> Result<Dataset> {
    let samples = read_jsonl(samples_path)?;
    if samples.is_empty() {
        return Err(Error::Dataset {
            name: name.to_string(),
            reason: format!("{} contains no samples", samples_path.display()),
        });
    }
    let meta = match meta_path {
        None => None,
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Dataset {
                name: name.to_string(),
                reason: format!("metadata {}: {e}", p.display()),
            })?)
        }
    };
    Ok(Dataset {
        name: name.to_string(),
        samples,
        meta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub training: Option<TrainingInfo>,
}

fn dataset_accuracy(model: &dyn ClassifierBackend, ds: &Dataset) -> Result<f64> {
    let bad = |reason: String| Error::Dataset {
        name: ds.name.clone(),
        reason,
    };
    if ds.samples.is_empty() {
        return Err(bad("empty dataset".into()));
    }
    let task: &TaskDescriptor = model.task();
    let collapse = ds.meta.as_ref().and_then(|m| m.collapse.as_ref());
    if let Some(meta) = &ds.meta {
        if meta.arity != task.arity {
            return Err(bad(format!("arity {} does not match the model's {}", meta.arity, task.arity)));
        }
    }
    let mut correct = 0usize;
    for s in &ds.samples {
        let predicted = task.label_name(argmax(&model.predict(s)?)).expect("argmax in range");
        let predicted = match collapse {
            Some(map) => map.get(predicted).map(String::as_str).unwrap_or(predicted),
            None => predicted,
        };
        let allowed = match &ds.meta {
            Some(m) => m.labels.iter().any(|l| *l == s.label),
            None => task.label_id(&s.label).is_some(),
        };
        if !allowed {
            return Err(bad(format!("sample `{}` has label `{}` outside the label set", s.id, s.label)));
        }
        if predicted == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.samples.len() as f64)
}

/// Argmax accuracy per dataset.
pub fn evaluate(model: &dyn ClassifierBackend, datasets: &[Dataset]) -> Result<EvalReport> {
    let mut accuracy = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for ds in datasets {
        if accuracy.contains_key(&ds.name) {
            return Err(Error::Dataset {
                name: ds.name.clone(),
                reason: "dataset name given twice".into(),
            });
        }
        accuracy.insert(ds.name.clone(), dataset_accuracy(model, ds)?);
        counts.insert(ds.name.clone(), ds.samples.len());
    }
    Ok(EvalReport {
        accuracy,
        counts,
        training: None,
    })
}

/// Per-dataset mean accuracy over several seeds' reports.
pub fn mean_accuracy(reports: &[EvalReport]) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in reports {
        for (k, v) in &r.accuracy {
            let e = sums.entry(k.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}
