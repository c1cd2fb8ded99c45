use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{softmax, Capabilities, ClassifierBackend};
use crate::error::{Error, Result};
use crate::pool::{Sample, TaskDescriptor};
use crate::rng::StageRng;

/// Serializable weights of [`LinearBow`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBowState {
    pub l2: f64,
    pub batch_size: usize,
    /// Feature strings in column order.
    pub features: Vec<String>,
    /// Row-major `[feature][label]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub trained: bool,
}

/// Multinomial logistic regression over binary segment-tagged word
/// features, trained with shuffled mini-batch SGD and L2 decay.
#[derive(Debug, Clone)]
pub struct LinearBow {
    task: TaskDescriptor,
    state: LinearBowState,
    index: HashMap<String, usize>,
}

/// Binary features of a sample: `"<segment>:<lowercased word>"`, each once.
pub fn bow_features(sample: &Sample) -> Vec<String> {
    let set: BTreeSet<String> = sample
        .segments
        .iter()
        .enumerate()
        .flat_map(|(k, seg)| {
            seg.split_whitespace()
                .map(move |w| format!("{k}:{}", w.to_lowercase()))
        })
        .collect();
    set.into_iter().collect()
}

impl LinearBow {
    pub const NAME: &'static str = "linear-bow";

    pub fn new(task: TaskDescriptor, l2: f64, batch_size: usize) -> Self {
        let k = task.num_labels();
        Self {
            task,
            state: LinearBowState {
                l2,
                batch_size: batch_size.max(1),
                features: Vec::new(),
                weights: Vec::new(),
                bias: vec![0.0; k],
                trained: false,
            },
            index: HashMap::new(),
        }
    }

    pub fn from_state(task: TaskDescriptor, state: LinearBowState) -> Self {
        let index = state
            .features
            .iter()
            .enumerate()
            .map(|(i, f)| (f.clone(), i))
            .collect();
        Self { task, state, index }
    }

    pub fn weights(&self) -> &LinearBowState {
        &self.state
    }

    fn k(&self) -> usize {
        self.task.num_labels()
    }

    fn intern(&mut self, feature: &str) -> usize {
        if let Some(&i) = self.index.get(feature) {
            return i;
        }
        let i = self.state.features.len();
        self.state.features.push(feature.to_string());
        self.state.weights.extend(std::iter::repeat(0.0).take(self.k()));
        self.index.insert(feature.to_string(), i);
        i
    }

    fn logits(&self, cols: &[usize]) -> Vec<f64> {
        let k = self.k();
        let mut z = self.state.bias.clone();
        for &c in cols {
            let row = &self.state.weights[c * k..(c + 1) * k];
            for (zi, w) in z.iter_mut().zip(row) {
                *zi += w;
            }
        }
        z
    }
}

impl ClassifierBackend for LinearBow {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn task(&self) -> &TaskDescriptor {
        &self.task
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            trainable: true,
            probabilistic: true,
        }
    }

    fn is_trained(&self) -> bool {
        self.state.trained
    }

    fn fresh(&self) -> Box<dyn ClassifierBackend> {
        Box::new(LinearBow::new(self.task.clone(), self.state.l2, self.state.batch_size))
    }

    fn clone_box(&self) -> Box<dyn ClassifierBackend> {
        Box::new(self.clone())
    }

    fn train_epoch(&mut self, samples: &[&Sample], lr: f64, rng: &mut StageRng) -> Result<()> {
        let k = self.k();
        let mut encoded = Vec::with_capacity(samples.len());
        for s in samples {
            let y = self
                .task
                .label_id(&s.label)
                .ok_or_else(|| Error::UnknownLabel(s.label.clone()))?;
            let cols: Vec<usize> = bow_features(s).iter().map(|f| self.intern(f)).collect();
            encoded.push((cols, y));
        }
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        order.shuffle(rng);

        let decay = 1.0 - lr * self.state.l2;
        let mut grad: HashMap<usize, Vec<f64>> = HashMap::new();
        for batch in order.chunks(self.state.batch_size) {
            grad.clear();
            let mut gbias = vec![0.0; k];
            for &i in batch {
                let (cols, y) = &encoded[i];
                let mut p = softmax(&self.logits(cols));
                p[*y] -= 1.0;
                for (g, d) in gbias.iter_mut().zip(&p) {
                    *g += d;
                }
                for &c in cols {
                    let g = grad.entry(c).or_insert_with(|| vec![0.0; k]);
                    for (gi, d) in g.iter_mut().zip(&p) {
                        *gi += d;
                    }
                }
            }
            let step = lr / batch.len() as f64;
            if self.state.l2 > 0.0 {
                for w in self.state.weights.iter_mut() {
                    *w *= decay;
                }
            }
            // Apply in column order so float results do not depend on map iteration.
            let mut touched: Vec<_> = grad.iter().collect();
            touched.sort_unstable_by_key(|(c, _)| **c);
            for (&c, g) in touched {
                for (w, gi) in self.state.weights[c * k..(c + 1) * k].iter_mut().zip(g) {
                    *w -= step * gi;
                }
            }
            for (b, g) in self.state.bias.iter_mut().zip(&gbias) {
                *b -= step * g;
            }
        }
        self.state.trained = true;
        Ok(())
    }

    fn predict(&self, sample: &Sample) -> Result<Vec<f64>> {
        if !self.state.trained {
            return Err(Error::NotTrained(Self::NAME.into()));
        }
        let cols: Vec<usize> = bow_features(sample)
            .iter()
            .filter_map(|f| self.index.get(f).copied())
            .collect();
        Ok(softmax(&self.logits(&cols)))
    }

    fn state(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(&self.state)?)
    }
}
