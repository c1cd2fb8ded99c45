//! Indicator-conditioned sample generation.
//!
//! Samples are serialized as control-token sequences, a generator backend
//! is finetuned on the whole pool with the negative log-likelihood of the
//! sample tokens given `(indicator, label)`, and candidates are drawn by
//! ancestral sampling from a chosen `(indicator, label)` prefix.

mod fixed;
mod loglinear;
mod tokens;

use std::fmt::Debug;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use fixed::FixedSequenceGenerator;
pub use loglinear::{LogLinearLm, LogLinearState};
pub use tokens::{
    conditioning_prefix, indicator_token, label_token, parse_generation, serialize_conditioned,
    ConditionedSequence, ControlTokenMap, MalformedReason, ParsedSequence, EOS, SEP,
};

use crate::config::GeneratorConfig;
use crate::error::{Error, Result};
use crate::indicators::BiasIndicator;
use crate::pool::{Sample, SamplePool, TaskDescriptor};
use crate::rng::{rng_from_seed, SeedTree, StageRng};

pub trait GeneratorBackend: Debug + Send + Sync {
    fn name(&self) -> &str;

    fn is_trained(&self) -> bool;

    fn control_tokens(&self) -> &ControlTokenMap;

    /// Output vocabulary: ordinary words plus separator and end marker.
    fn vocabulary(&self) -> &[String];

    /// Registers any unseen words before training.
    fn prepare(&mut self, sequences: &[ConditionedSequence]) -> Result<()>;

    fn train_epoch(&mut self, sequences: &[ConditionedSequence], lr: f64, rng: &mut StageRng) -> Result<()>;

    /// Distribution over `vocabulary()` for the token following `context`
    /// (conditioning prefix included).
    fn next_token_distribution(&self, context: &[String]) -> Result<Vec<f64>>;

    /// `sum ln p(target_t | context_<t)` over the non-prefix tokens.
    fn sequence_log_prob(&self, seq: &ConditionedSequence) -> Result<f64> {
        let p = seq.prefix_len();
        let mut total = 0.0;
        for t in p..seq.tokens.len() {
            let dist = self.next_token_distribution(&seq.tokens[..t])?;
            let prob = self
                .vocabulary()
                .iter()
                .position(|v| *v == seq.tokens[t])
                .map_or(0.0, |i| dist[i]);
            total += prob.ln();
        }
        Ok(total)
    }

    fn state(&self) -> Result<serde_json::Value>;
}

pub fn generator_from_config(
    cfg: &GeneratorConfig,
    task: &TaskDescriptor,
    n_bi: usize,
) -> Result<Box<dyn GeneratorBackend>> {
    match cfg.backend.as_str() {
        LogLinearLm::NAME => Ok(Box::new(LogLinearLm::new(task, n_bi, cfg.position_buckets))),
        other => Err(Error::UnknownBackend(other.to_string())),
    }
}

/// The generation objective: `-sum_i ln p(x_i | b_i, y_i)` over all sequences.
pub fn generator_loss(backend: &dyn GeneratorBackend, sequences: &[ConditionedSequence]) -> Result<f64> {
    let parts: Vec<Result<f64>> = sequences.par_iter().map(|s| backend.sequence_log_prob(s)).collect();
    let mut total = 0.0;
    for p in parts {
        total -= p?;
    }
    Ok(total)
}

/// Serializes every pool sample; fails before any training if one lacks
/// an indicator.
pub fn serialize_pool(
    pool: &SamplePool,
    ctrl: &ControlTokenMap,
    with_indicator: bool,
) -> Result<Vec<ConditionedSequence>> {
    pool.samples()
        .iter()
        .map(|s| serialize_conditioned(s, ctrl, with_indicator))
        .collect()
}

/// Trains for `epochs` passes over the pool and returns the objective on
/// the pool after the last pass.
pub fn finetune_generator(
    backend: &mut dyn GeneratorBackend,
    pool: &SamplePool,
    epochs: usize,
    lr: f64,
    seed: u64,
    with_indicator: bool,
) -> Result<f64> {
    if epochs == 0 {
        return Err(Error::config("gen_epochs", "must be >= 1"));
    }
    let sequences = serialize_pool(pool, backend.control_tokens(), with_indicator)?;
    backend.prepare(&sequences)?;
    let mut rng = rng_from_seed(seed);
    for _ in 0..epochs {
        backend.train_epoch(&sequences, lr, &mut rng)?;
    }
    generator_loss(backend, &sequences)
}

fn sample_index<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen::<f64>() * dist.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(dist.len() - 1)
}

/// Temperature-1 ancestral sampling after `prefix` until the end marker or
/// `max_len` generated tokens. Returns the full sequence.
pub fn sample_sequence<R: Rng + ?Sized>(
    backend: &dyn GeneratorBackend,
    prefix: Vec<String>,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    let end = backend.control_tokens().end.clone();
    let mut tokens = prefix;
    for _ in 0..max_len {
        let dist = backend.next_token_distribution(&tokens)?;
        let tok = backend.vocabulary()[sample_index(&dist, rng)].clone();
        let stop = tok == end;
        tokens.push(tok);
        if stop {
            break;
        }
    }
    Ok(tokens)
}

/// Where the per-draw random streams of a batch come from.
#[derive(Debug, Clone, Copy)]
pub struct DrawSeeds {
    pub tree: SeedTree,
    pub iteration: u32,
    /// Global index of the first draw of the batch within the iteration.
    pub first_draw: u64,
}

impl DrawSeeds {
    pub fn rng(&self, draw: u64) -> StageRng {
        self.tree.stream("decode", &[self.iteration as u64, draw])
    }
}

#[derive(Debug, Clone)]
pub struct GenerationRequest<'a> {
    /// `None` conditions on the label only.
    pub indicator: Option<BiasIndicator>,
    pub n: usize,
    pub task: &'a TaskDescriptor,
    pub max_len: usize,
    /// Stamped on candidates as `created_iteration`.
    pub created_iteration: u32,
    pub seeds: DrawSeeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalformedDraw {
    pub draw_id: String,
    pub reason: MalformedReason,
}

#[derive(Debug, Clone, Default)]
pub struct GenerationBatch {
    pub candidates: Vec<Sample>,
    pub malformed: Vec<MalformedDraw>,
}

pub fn draw_id(iteration: u32, draw: u64) -> String {
    format!("pseudo-{iteration}-{draw:07}")
}

/// Draws `n` candidates. For each draw the label is uniform over the task
/// labels and the text is sampled token by token. Every draw has its own
/// random stream, so the result does not depend on scheduling.
pub fn generate_candidates(backend: &dyn GeneratorBackend, req: &GenerationRequest<'_>) -> Result<GenerationBatch> {
    if !backend.is_trained() {
        return Err(Error::NotTrained(backend.name().to_string()));
    }
    let ctrl = backend.control_tokens();
    let with_indicator = req.indicator.is_some();
    let k = req.task.num_labels();

    let outcomes: Vec<Result<(String, std::result::Result<ParsedSequence, MalformedReason>)>> = (0..req.n as u64)
        .into_par_iter()
        .map(|d| {
            let draw = req.seeds.first_draw + d;
            let mut rng = req.seeds.rng(draw);
            let label = req.task.labels[rng.gen_range(0..k)].name.clone();
            let prefix = conditioning_prefix(req.indicator.map(BiasIndicator::index), &label);
            let tokens = sample_sequence(backend, prefix, req.max_len, &mut rng)?;
            let verdict = parse_generation(&tokens, req.task, ctrl, with_indicator);
            Ok((draw_id(req.seeds.iteration, draw), verdict))
        })
        .collect();

    let mut batch = GenerationBatch::default();
    for o in outcomes {
        let (id, verdict) = o?;
        match verdict {
            Ok(p) => batch
                .candidates
                .push(Sample::pseudo(id, p.segments, p.label, req.created_iteration)),
            Err(reason) => batch.malformed.push(MalformedDraw { draw_id: id, reason }),
        }
    }
    if batch.candidates.is_empty() && req.n > 0 {
        log::warn!(
            "generation produced no well-formed samples ({} malformed)",
            batch.malformed.len()
        );
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCheckpointMeta {
    pub backend: String,
    pub config_hash: String,
}

/// Writes `meta.json`, `vocab.json`, `control_tokens.json` and `state.json`.
pub fn save_generator(dir: &Path, backend: &dyn GeneratorBackend, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: Vec<u8>| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    let meta = GeneratorCheckpointMeta {
        backend: backend.name().to_string(),
        config_hash: config_hash.to_string(),
    };
    write("meta.json", serde_json::to_vec_pretty(&meta)?)?;
    write("vocab.json", serde_json::to_vec_pretty(backend.vocabulary())?)?;
    write("control_tokens.json", serde_json::to_vec_pretty(backend.control_tokens())?)?;
    write("state.json", serde_json::to_vec(&backend.state()?)?)
}

pub fn load_generator(dir: &Path) -> Result<(Box<dyn GeneratorBackend>, GeneratorCheckpointMeta)> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let meta: GeneratorCheckpointMeta = serde_json::from_slice(&read("meta.json")?)?;
    let backend: Box<dyn GeneratorBackend> = match meta.backend.as_str() {
        LogLinearLm::NAME => {
            let st: LogLinearState = serde_json::from_slice(&read("state.json")?)?;
            Box::new(LogLinearLm::from_state(st))
        }
        other => return Err(Error::UnknownBackend(other.to_string())),
    };
    Ok((backend, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::init_pool;

    fn task() -> TaskDescriptor {
        TaskDescriptor::new(&["entailment", "neutral", "contradiction"], 2).unwrap()
    }

    fn indicated_pool() -> SamplePool {
        let labels = ["entailment", "neutral", "contradiction"];
        let samples = (0..9)
            .map(|i| {
                let mut s = Sample::original(
                    format!("s{i}"),
                    vec![format!("p{} q", i % 4), format!("h{}", i % 3)],
                    labels[i % 3],
                );
                s.bias_score = Some(i as f64 / 10.0);
                s.bias_indicator = Some(1 + i % 5);
                s
            })
            .collect();
        init_pool(samples, task()).unwrap()
    }

    #[test]
    fn untrained_generator_refuses_to_sample() {
        let g = LogLinearLm::new(&task(), 5, 4);
        let req = GenerationRequest {
            indicator: None,
            n: 1,
            task: &task(),
            max_len: 8,
            created_iteration: 1,
            seeds: DrawSeeds {
                tree: SeedTree::new(0),
                iteration: 1,
                first_draw: 0,
            },
        };
        assert!(matches!(generate_candidates(&g, &req), Err(Error::NotTrained(_))));
    }

    #[test]
    fn missing_indicator_fails_before_training() {
        let mut pool = indicated_pool();
        pool.annotate(|i, s| {
            if i == 8 {
                s.bias_indicator = None;
            }
            Ok(())
        })
        .unwrap();
        let mut g = LogLinearLm::new(&task(), 5, 4);
        assert!(matches!(
            finetune_generator(&mut g, &pool, 1, 0.1, 0, true),
            Err(Error::MissingIndicator(_))
        ));
        assert!(!g.is_trained());
    }

    #[test]
    fn generation_is_schedule_independent() {
        let mut g = LogLinearLm::new(&task(), 5, 4);
        finetune_generator(&mut g, &indicated_pool(), 3, 0.3, 1, true).unwrap();
        let t = task();
        let seeds = DrawSeeds {
            tree: SeedTree::new(3),
            iteration: 1,
            first_draw: 0,
        };
        let req = |first, n| GenerationRequest {
            indicator: Some(BiasIndicator::new(1, 5).unwrap()),
            n,
            task: &t,
            max_len: 16,
            created_iteration: 1,
            seeds: DrawSeeds { first_draw: first, ..seeds },
        };
        let whole = generate_candidates(&g, &req(0, 40)).unwrap();
        let a = generate_candidates(&g, &req(0, 25)).unwrap();
        let b = generate_candidates(&g, &req(25, 15)).unwrap();
        let ids = |bs: &[&GenerationBatch]| -> Vec<String> {
            bs.iter().flat_map(|b| b.candidates.iter().map(|c| c.id.clone())).collect()
        };
        assert_eq!(ids(&[&whole]), ids(&[&a, &b]));
        assert_eq!(whole.candidates.len() + whole.malformed.len(), 40);
        let joined: Vec<Sample> = a.candidates.iter().chain(&b.candidates).cloned().collect();
        assert_eq!(whole.candidates, joined);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = LogLinearLm::new(&task(), 5, 4);
        let pool = indicated_pool();
        finetune_generator(&mut g, &pool, 2, 0.3, 1, true).unwrap();
        save_generator(dir.path(), &g, "abc").unwrap();
        let (back, meta) = load_generator(dir.path()).unwrap();
        assert_eq!(meta.config_hash, "abc");
        let seqs = serialize_pool(&pool, g.control_tokens(), true).unwrap();
        assert_eq!(generator_loss(&g, &seqs).unwrap(), generator_loss(back.as_ref(), &seqs).unwrap());
        let ctrl: ControlTokenMap =
            serde_json::from_slice(&fs::read(dir.path().join("control_tokens.json")).unwrap()).unwrap();
        assert_eq!(&ctrl, g.control_tokens());
    }
}
