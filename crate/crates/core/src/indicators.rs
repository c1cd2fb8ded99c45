//! Equal-size bias groups and the generation-time indicator choice.

use rand::Rng;

use crate::config::IndicatorMode;
use crate::error::{Error, Result};
use crate::pool::SamplePool;

/// Group index in `1..=n_bi`; 1 is the lowest bias degree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BiasIndicator(usize);

impl BiasIndicator {
    pub fn new(index: usize, n_bi: usize) -> Result<Self> {
        if index == 0 || index > n_bi {
            return Err(Error::config("bias_indicator", format!("{index} not in [1, {n_bi}]")));
        }
        Ok(Self(index))
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Sizes of the `n_bi` groups for a pool of `n`: the remainder goes to the
/// lowest-indexed groups, one extra sample each.
pub fn group_sizes(n: usize, n_bi: usize) -> Vec<usize> {
    let (base, rem) = (n / n_bi, n % n_bi);
    (0..n_bi).map(|g| base + usize::from(g < rem)).collect()
}

/// Sorts by `(bias_score, sample_id)` ascending and labels consecutive
/// blocks `b_1 ..= b_{n_bi}`. Returns a copy; sample order is preserved.
pub fn assign_indicators(pool: &SamplePool, n_bi: usize) -> Result<SamplePool> {
    if n_bi == 0 {
        return Err(Error::config("n_bi", "must be >= 1"));
    }
    if n_bi > pool.len() {
        return Err(Error::TooManyGroups {
            n_bi,
            pool: pool.len(),
        });
    }
    let samples = pool.samples();
    let mut keyed = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let score = s.bias_score.ok_or_else(|| Error::MissingScore(s.id.clone()))?;
        keyed.push((score, s.id.as_str(), i));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));

    let mut indicator = vec![0usize; samples.len()];
    let mut rank = keyed.iter();
    for (g, size) in group_sizes(samples.len(), n_bi).into_iter().enumerate() {
        for &(_, _, i) in rank.by_ref().take(size) {
            indicator[i] = g + 1;
        }
    }

    let mut out = pool.clone();
    out.annotate(|i, s| {
        s.bias_indicator = Some(indicator[i]);
        Ok(())
    })?;
    Ok(out)
}

/// Largest admissible generation indicator: `max(1, floor(n_bi / 2))`.
pub fn low_indicator_bound(n_bi: usize) -> usize {
    (n_bi / 2).max(1)
}

/// Uniform draw from the low half `{1, ..., max(1, floor(n_bi/2))}`.
pub fn select_generation_indicator<R: Rng + ?Sized>(n_bi: usize, rng: &mut R) -> BiasIndicator {
    BiasIndicator(rng.gen_range(1..=low_indicator_bound(n_bi)))
}

pub fn choose_indicator<R: Rng + ?Sized>(mode: IndicatorMode, n_bi: usize, rng: &mut R) -> BiasIndicator {
    match mode {
        IndicatorMode::RandomLow => select_generation_indicator(n_bi, rng),
        IndicatorMode::PinnedB1 => BiasIndicator(1),
    }
}
