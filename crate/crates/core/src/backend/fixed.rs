use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Capabilities, ClassifierBackend};
use crate::error::{Error, Result};
use crate::pool::{Sample, TaskDescriptor};
use crate::rng::StageRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FixedMode {
    Uniform,
    /// Probability 1 on the sample's own label.
    OneHotGold,
    /// Gold-label confidence looked up by sample id; the remaining mass is
    /// spread evenly over the other labels. Unknown ids get uniform.
    GoldConfidence(BTreeMap<String, f64>),
}

/// A non-learning classifier with a prescribed output. Used to pin
/// behaviour in tests and diagnostics.
#[derive(Debug, Clone)]
pub struct FixedClassifier {
    task: TaskDescriptor,
    mode: FixedMode,
    probabilistic: bool,
}

impl FixedClassifier {
    pub const NAME: &'static str = "fixed";

    pub fn new(task: TaskDescriptor, mode: FixedMode) -> Self {
        Self {
            task,
            mode,
            probabilistic: true,
        }
    }

    /// A variant that reports no probabilistic capability.
    pub fn non_probabilistic(task: TaskDescriptor) -> Self {
        Self {
            task,
            mode: FixedMode::Uniform,
            probabilistic: false,
        }
    }
}

impl ClassifierBackend for FixedClassifier {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn task(&self) -> &TaskDescriptor {
        &self.task
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            trainable: false,
            probabilistic: self.probabilistic,
        }
    }

    fn is_trained(&self) -> bool {
        true
    }

    fn fresh(&self) -> Box<dyn ClassifierBackend> {
        Box::new(self.clone())
    }

    fn clone_box(&self) -> Box<dyn ClassifierBackend> {
        Box::new(self.clone())
    }

    fn train_epoch(&mut self, _: &[&Sample], _: f64, _: &mut StageRng) -> Result<()> {
        Err(Error::Capability {
            backend: Self::NAME.into(),
            missing: "trainable".into(),
        })
    }

    fn predict(&self, sample: &Sample) -> Result<Vec<f64>> {
        let k = self.task.num_labels();
        let uniform = vec![1.0 / k as f64; k];
        let gold = || {
            self.task
                .label_id(&sample.label)
                .ok_or_else(|| Error::UnknownLabel(sample.label.clone()))
        };
        Ok(match &self.mode {
            FixedMode::Uniform => uniform,
            FixedMode::OneHotGold => {
                let mut d = vec![0.0; k];
                d[gold()?] = 1.0;
                d
            }
            FixedMode::GoldConfidence(table) => match table.get(&sample.id) {
                None => uniform,
                Some(&c) => {
                    let y = gold()?;
                    let rest = if k > 1 { (1.0 - c) / (k - 1) as f64 } else { 0.0 };
                    (0..k).map(|i| if i == y { c } else { rest }).collect()
                }
            },
        })
    }

    fn state(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(&self.mode)?)
    }
}
