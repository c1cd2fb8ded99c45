//! Run configuration: one flat YAML file with an `ablations` sub-block.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A boolean that also accepts `on` / `off` in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SwitchRepr", into = "String")]
pub struct Switch(pub bool);

#[derive(Deserialize)]
#[serde(untagged)]
enum SwitchRepr {
    Bool(bool),
    Text(String),
}

impl TryFrom<SwitchRepr> for Switch {
    type Error = String;

    fn try_from(r: SwitchRepr) -> std::result::Result<Self, String> {
        match r {
            SwitchRepr::Bool(b) => Ok(Switch(b)),
            SwitchRepr::Text(t) => match t.to_ascii_lowercase().as_str() {
                "on" | "true" | "yes" => Ok(Switch(true)),
                "off" | "false" | "no" => Ok(Switch(false)),
                other => Err(format!("expected on/off, found `{other}`")),
            },
        }
    }
}

impl From<Switch> for String {
    fn from(s: Switch) -> String {
        if s.0 { "on" } else { "off" }.to_string()
    }
}

impl Switch {
    pub fn on(self) -> bool {
        self.0
    }
}

/// How the generation-time indicator is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorMode {
    /// Uniform over the lower half of the indicators.
    RandomLow,
    /// Always the lowest indicator.
    PinnedB1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterModelChoice {
    /// A classifier trained once on the original samples.
    Dedicated,
    /// The current shallow scorer.
    ReuseShallow,
}

/// Switches reproducing the ablation variants. All defaults give the full
/// method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Retrain the shallow scorer after every iteration.
    pub refresh: Switch,
    pub indicator: IndicatorMode,
    /// Condition the generator on the bias indicator.
    pub bias_indicator: Switch,
    /// Off collapses the run into a single iteration with the whole budget.
    pub iterative: Switch,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            refresh: Switch(true),
            indicator: IndicatorMode::RandomLow,
            bias_indicator: Switch(true),
            iterative: Switch(true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub backend: String,
    /// L2 penalty applied to every weight at each update.
    pub l2: f64,
    pub batch_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            backend: "linear-bow".into(),
            l2: 1e-4,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub backend: String,
    /// Hard cap on generated tokens after the conditioning prefix.
    pub max_len: usize,
    /// Position-within-segment buckets used as context features.
    pub position_buckets: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            backend: "loglinear-lm".into(),
            max_len: 64,
            position_buckets: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStopConfig {
    pub holdout_fraction: f64,
    pub patience: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.02,
            patience: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_bi: usize,
    pub n_iter: usize,
    pub shallow_train_count: usize,
    pub shallow_epochs: usize,
    pub shallow_lr: f64,
    pub gen_lr: f64,
    pub gen_epochs_first: usize,
    pub gen_epochs_rest: usize,
    /// Candidates drawn per iteration, before filtering.
    pub per_iter_generation: usize,
    /// Draws per indicator selection.
    pub generation_batch: usize,
    pub filter_threshold: f64,
    pub filter_model: FilterModelChoice,
    pub refresh_count: usize,
    pub task_epochs: usize,
    pub task_lr: f64,
    pub seed: u64,
    pub dedup: bool,
    pub early_stop: EarlyStopConfig,
    pub classifier: ClassifierConfig,
    pub generator: GeneratorConfig,
    pub ablations: Ablations,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_bi: 5,
            n_iter: 5,
            shallow_train_count: 2000,
            shallow_epochs: 3,
            shallow_lr: 5e-5,
            gen_lr: 5e-5,
            gen_epochs_first: 3,
            gen_epochs_rest: 1,
            per_iter_generation: 200_000,
            generation_batch: 100,
            filter_threshold: 0.5,
            filter_model: FilterModelChoice::Dedicated,
            refresh_count: 2000,
            task_epochs: 8,
            task_lr: 1e-5,
            seed: 0,
            dedup: true,
            early_stop: EarlyStopConfig::default(),
            classifier: ClassifierConfig::default(),
            generator: GeneratorConfig::default(),
            ablations: Ablations::default(),
        }
    }
}

impl RunConfig {
    /// Settings sized for the bundled desk-scale backends and the synthetic
    /// testbed (a few thousand samples). Learning rates are those of the
    /// linear backends, not of pretrained transformers.
    pub fn desk() -> Self {
        Self {
            n_iter: 3,
            shallow_train_count: 200,
            shallow_epochs: 3,
            shallow_lr: 0.5,
            gen_lr: 0.1,
            gen_epochs_first: 3,
            gen_epochs_rest: 1,
            per_iter_generation: 6000,
            refresh_count: 200,
            task_epochs: 20,
            task_lr: 1.0,
            early_stop: EarlyStopConfig {
                holdout_fraction: 0.1,
                patience: 5,
            },
            classifier: ClassifierConfig {
                l2: 1e-4,
                ..ClassifierConfig::default()
            },
            ..Self::default()
        }
    }

    /// Generator epochs for an iteration (0-based).
    pub fn gen_epochs_for(&self, iteration: u32) -> usize {
        if iteration == 0 {
            self.gen_epochs_first
        } else {
            self.gen_epochs_rest
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(field, "must be >= 1"))
            } else {
                Ok(())
            }
        };
        positive("n_bi", self.n_bi)?;
        positive("n_iter", self.n_iter)?;
        positive("shallow_train_count", self.shallow_train_count)?;
        positive("shallow_epochs", self.shallow_epochs)?;
        positive("gen_epochs_first", self.gen_epochs_first)?;
        positive("gen_epochs_rest", self.gen_epochs_rest)?;
        positive("generation_batch", self.generation_batch)?;
        positive("refresh_count", self.refresh_count)?;
        positive("task_epochs", self.task_epochs)?;
        positive("classifier.batch_size", self.classifier.batch_size)?;
        for (field, v) in [
            ("shallow_lr", self.shallow_lr),
            ("gen_lr", self.gen_lr),
            ("task_lr", self.task_lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, "must be a positive real"));
            }
        }
        if !(0.0..=1.0).contains(&self.filter_threshold) {
            return Err(Error::config("filter_threshold", "must lie in [0, 1]"));
        }
        if !(self.classifier.l2.is_finite() && self.classifier.l2 >= 0.0) {
            return Err(Error::config("classifier.l2", "must be >= 0"));
        }
        if self.generator.max_len < 3 {
            return Err(Error::config("generator.max_len", "must be >= 3"));
        }
        positive("generator.position_buckets", self.generator.position_buckets)?;
        let h = self.early_stop.holdout_fraction;
        if !(0.0..0.5).contains(&h) {
            return Err(Error::config("early_stop.holdout_fraction", "must lie in [0, 0.5)"));
        }
        Ok(())
    }

    pub fn from_yaml(text: &str) -> Result<Self> {
        let cfg: RunConfig = if text.trim().is_empty() {
            RunConfig::default()
        } else {
            serde_yaml::from_str(text).map_err(|e| Error::config(&yaml_field(&e), e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_yaml(&self) -> Result<String> {
        serde_yaml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Short hex digest of the serialized config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::pool::sha256_hex(&json)[..16].to_string()
    }
}

/// Best-effort extraction of the offending field from a serde_yaml message.
fn yaml_field(e: &serde_yaml::Error) -> String {
    let msg = e.to_string();
    if let Some(rest) = msg.split("unknown field `").nth(1) {
        return rest.split('`').next().unwrap_or("<config>").to_string();
    }
    match msg.split_once(':') {
        Some((head, _)) if !head.contains(' ') => head.to_string(),
        _ => "<config>".to_string(),
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_yaml(&text)
}
