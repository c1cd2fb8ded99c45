use super::tokens::{ConditionedSequence, ControlTokenMap};
use super::GeneratorBackend;
use crate::error::{Error, Result};
use crate::pool::TaskDescriptor;
use crate::rng::StageRng;

/// Emits one fixed continuation after any prefix, with probability 1 on
/// each of its tokens. Useful as a degenerate generator.
#[derive(Debug, Clone)]
pub struct FixedSequenceGenerator {
    ctrl: ControlTokenMap,
    continuation: Vec<String>,
    vocab: Vec<String>,
}

impl FixedSequenceGenerator {
    pub const NAME: &'static str = "fixed-sequence";

    /// `continuation` is everything after the conditioning prefix,
    /// end marker included.
    pub fn new(task: &TaskDescriptor, n_bi: usize, continuation: Vec<String>) -> Self {
        let mut vocab: Vec<String> = Vec::new();
        for t in &continuation {
            if !vocab.contains(t) {
                vocab.push(t.clone());
            }
        }
        Self {
            ctrl: ControlTokenMap::new(task, n_bi),
            continuation,
            vocab,
        }
    }
}

impl GeneratorBackend for FixedSequenceGenerator {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn is_trained(&self) -> bool {
        true
    }

    fn control_tokens(&self) -> &ControlTokenMap {
        &self.ctrl
    }

    fn vocabulary(&self) -> &[String] {
        &self.vocab
    }

    fn prepare(&mut self, _: &[ConditionedSequence]) -> Result<()> {
        Ok(())
    }

    fn train_epoch(&mut self, _: &[ConditionedSequence], _: f64, _: &mut StageRng) -> Result<()> {
        Ok(())
    }

    fn next_token_distribution(&self, context: &[String]) -> Result<Vec<f64>> {
        let prefix = context
            .iter()
            .take_while(|t| **t != self.ctrl.separator)
            .count();
        let step = context.len() - prefix;
        let next = self
            .continuation
            .get(step)
            .ok_or_else(|| Error::InvalidSample {
                id: "<sequence>".into(),
                reason: "context longer than the fixed continuation".into(),
            })?;
        Ok(self.vocab.iter().map(|v| f64::from(u8::from(v == next))).collect())
    }

    fn state(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(&self.continuation)?)
    }
}
