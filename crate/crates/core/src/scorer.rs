//! Bias-degree scoring with a shallow classifier.
//!
//! The shallow model is an ordinary classifier trained on a small random
//! subset; it overfits surface cues, so its confidence on a sample's gold
//! label is read as that sample's bias degree.

use rand::seq::index;
use rayon::prelude::*;

use crate::backend::{gold_probability, require_probabilistic, require_trainable, ClassifierBackend};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pool::{Sample, SamplePool};
use crate::rng::{rng_from_seed, StageRng};

/// Gold-label confidence of the shallow model, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct BiasScore(f64);

impl BiasScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// A trained scorer together with the subset it saw.
#[derive(Debug, Clone)]
pub struct ShallowModel {
    pub model: Box<dyn ClassifierBackend>,
    pub subset_ids: Vec<String>,
    pub seed: u64,
}

/// Indices of `count` pool members drawn uniformly without replacement,
/// in ascending order. Drawing the whole pool involves no randomness.
pub fn sample_subset(pool_len: usize, count: usize, rng: &mut StageRng) -> Result<Vec<usize>> {
    if count > pool_len {
        return Err(Error::CountExceedsPool {
            requested: count,
            available: pool_len,
        });
    }
    if count == pool_len {
        return Ok((0..pool_len).collect());
    }
    let mut idx = index::sample(rng, pool_len, count).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Runs `epochs` passes of `model.train_epoch`.
pub fn fit(
    model: &mut dyn ClassifierBackend,
    samples: &[&Sample],
    epochs: usize,
    lr: f64,
    rng: &mut StageRng,
) -> Result<()> {
    require_trainable(model)?;
    for _ in 0..epochs {
        model.train_epoch(samples, lr, rng)?;
    }
    Ok(())
}

/// Trains a fresh copy of `template` on a random `count`-subset of the pool.
pub fn train_shallow(
    template: &dyn ClassifierBackend,
    pool: &SamplePool,
    count: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ShallowModel> {
    require_trainable(template)?;
    let mut rng = rng_from_seed(seed);
    let idx = sample_subset(pool.len(), count, &mut rng)?;
    let subset: Vec<&Sample> = idx.iter().map(|&i| &pool.samples()[i]).collect();
    let mut model = template.fresh();
    fit(model.as_mut(), &subset, epochs, lr, &mut rng)?;
    Ok(ShallowModel {
        model,
        subset_ids: subset.iter().map(|s| s.id.clone()).collect(),
        seed,
    })
}

/// Retrains the scorer from pristine initialization on `refresh_count`
/// samples of the current pool, originals and pseudo samples alike.
pub fn refresh_shallow(
    template: &dyn ClassifierBackend,
    pool: &SamplePool,
    config: &RunConfig,
    seed: u64,
) -> Result<ShallowModel> {
    train_shallow(
        template,
        pool,
        config.refresh_count,
        config.shallow_epochs,
        config.shallow_lr,
        seed,
    )
}

pub fn score_sample(model: &dyn ClassifierBackend, sample: &Sample) -> Result<BiasScore> {
    require_probabilistic(model)?;
    let p = gold_probability(model, sample)?;
    Ok(BiasScore(p.clamp(0.0, 1.0)))
}

/// Returns a copy of the pool with `bias_score` set on every sample.
/// Scores are computed in parallel; order and values match a sequential pass.
pub fn score_pool(model: &dyn ClassifierBackend, pool: &SamplePool) -> Result<SamplePool> {
    let scores: Vec<Result<BiasScore>> = pool
        .samples()
        .par_iter()
        .map(|s| {
            score_sample(model, s).map_err(|e| match e {
                e @ Error::Capability { .. } => e,
                other => Error::InvalidSample {
                    id: s.id.clone(),
                    reason: other.to_string(),
                },
            })
        })
        .collect();
    let mut out = pool.clone();
    let mut scores = scores.into_iter();
    out.annotate(|_, s| {
        let score = scores.next().expect("one score per sample")?;
        s.bias_score = Some(score.value());
        Ok(())
    })?;
    Ok(out)
}
