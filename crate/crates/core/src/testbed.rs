//! Synthetic NLI-shaped data with one injected spurious token, and the
//! token/label PMI statistic used to measure how strongly a pool carries it.
//!
//! Every sample is a premise of filler words and a hypothesis holding one
//! label-specific "semantic" word, so the label is always recoverable
//! without the spurious token. Carriers of the spurious token put it in
//! front of the semantic word; a fraction `rho` of carriers belong to the
//! designated label.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::{init_pool, Sample, SamplePool, TaskDescriptor};
use crate::rng::StageRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticBiasSpec {
    pub num_labels: usize,
    /// Filler vocabulary size.
    pub vocab_size: usize,
    pub spurious_token: String,
    /// Share of spurious-token carriers that carry the designated label.
    pub rho: f64,
    pub sample_count: usize,
    pub anti_biased_test_size: usize,
    pub dev_size: usize,
    /// Share of training samples that carry the spurious token.
    pub carrier_rate: f64,
    pub semantic_words_per_label: usize,
    pub premise_len: usize,
    /// Label id tied to the spurious token.
    pub designated_label: usize,
}

impl Default for SyntheticBiasSpec {
    fn default() -> Self {
        Self {
            num_labels: 3,
            vocab_size: 40,
            spurious_token: "not".into(),
            rho: 0.95,
            sample_count: 2000,
            anti_biased_test_size: 600,
            dev_size: 600,
            carrier_rate: 0.3,
            semantic_words_per_label: 30,
            premise_len: 3,
            designated_label: 2,
        }
    }
}

impl SyntheticBiasSpec {
    pub fn task(&self) -> Result<TaskDescriptor> {
        let names: Vec<String> = if self.num_labels == 3 {
            ["entailment", "neutral", "contradiction"].map(String::from).to_vec()
        } else {
            (0..self.num_labels).map(|i| format!("label{i}")).collect()
        };
        TaskDescriptor::new(&names, 2)
    }

    pub fn designated_label_name(&self) -> Result<String> {
        Ok(self
            .task()?
            .label_name(self.designated_label)
            .expect("validated")
            .to_string())
    }

    pub fn semantic_word(&self, label: usize, j: usize) -> String {
        format!("s{label}x{j}")
    }

    pub fn filler_word(&self, j: usize) -> String {
        format!("w{j}")
    }

    fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: &str| Err(Error::config(f, r));
        if self.num_labels < 2 {
            return bad("num_labels", "need at least two labels");
        }
        if self.designated_label >= self.num_labels {
            return bad("designated_label", "out of range");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.carrier_rate) {
            return bad("carrier_rate", "must lie in [0, 1]");
        }
        for (f, v) in [
            ("vocab_size", self.vocab_size),
            ("sample_count", self.sample_count),
            ("anti_biased_test_size", self.anti_biased_test_size),
            ("dev_size", self.dev_size),
            ("semantic_words_per_label", self.semantic_words_per_label),
            ("premise_len", self.premise_len),
        ] {
            if v == 0 {
                return bad(f, "must be >= 1");
            }
        }
        if self.spurious_token.split_whitespace().count() != 1 {
            return bad("spurious_token", "must be a single word");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Testbed {
    pub task: TaskDescriptor,
    pub train: SamplePool,
    pub unbiased_dev: Vec<Sample>,
    pub anti_biased_test: Vec<Sample>,
}

struct Builder<'a> {
    spec: &'a SyntheticBiasSpec,
    task: TaskDescriptor,
}

impl Builder<'_> {
    fn sample(&self, id: String, label: usize, carrier: bool, rng: &mut StageRng) -> Sample {
        let premise: Vec<String> = (0..self.spec.premise_len)
            .map(|_| self.spec.filler_word(rng.gen_range(0..self.spec.vocab_size)))
            .collect();
        let mut hyp = Vec::with_capacity(3);
        if carrier {
            hyp.push(self.spec.spurious_token.clone());
        }
        hyp.push(self.spec.semantic_word(label, rng.gen_range(0..self.spec.semantic_words_per_label)));
        hyp.push(self.spec.filler_word(rng.gen_range(0..self.spec.vocab_size)));
        Sample::original(
            id,
            vec![premise.join(" "), hyp.join(" ")],
            self.task.label_name(label).expect("label in range"),
        )
    }

    /// Balanced labels; carriers per label given by `carriers[label]`.
    fn split(&self, prefix: &str, n: usize, carriers: &[usize], rng: &mut StageRng) -> Result<Vec<Sample>> {
        let k = self.spec.num_labels;
        let mut by_label: Vec<Vec<bool>> = (0..k)
            .map(|l| {
                let count = n / k + usize::from(l < n % k);
                let c = carriers[l];
                if c > count {
                    return Err(Error::config(
                        "rho",
                        format!("needs {c} carriers of label {l} but only {count} samples exist"),
                    ));
                }
                let mut flags = vec![true; c];
                flags.resize(count, false);
                flags.shuffle(rng);
                Ok(flags)
            })
            .collect::<Result<_>>()?;
        let mut slots: Vec<(usize, bool)> = Vec::with_capacity(n);
        for (l, flags) in by_label.iter_mut().enumerate() {
            slots.extend(flags.drain(..).map(|f| (l, f)));
        }
        slots.shuffle(rng);
        Ok(slots
            .into_iter()
            .enumerate()
            .map(|(i, (l, c))| self.sample(format!("{prefix}-{i:05}"), l, c, rng))
            .collect())
    }
}

/// Splits `total` carriers so that a share `rho` goes to `designated` and
/// the rest is spread evenly (remainder to lower ids) over the others.
fn carrier_counts(total: usize, rho: f64, k: usize, designated: usize) -> Vec<usize> {
    let tied = (rho * total as f64).round() as usize;
    let rest = total - tied.min(total);
    let others = k - 1;
    let mut out = vec![0; k];
    let mut j = 0;
    for (l, c) in out.iter_mut().enumerate() {
        if l == designated {
            *c = tied.min(total);
        } else {
            *c = rest / others + usize::from(j < rest % others);
            j += 1;
        }
    }
    out
}

pub fn build_synthetic_testbed(spec: &SyntheticBiasSpec, rng: &mut StageRng) -> Result<Testbed> {
    spec.validate()?;
    let task = spec.task()?;
    let b = Builder {
        spec,
        task: task.clone(),
    };
    let k = spec.num_labels;

    let n_carriers = (spec.carrier_rate * spec.sample_count as f64).round() as usize;
    if spec.rho > 0.0 && n_carriers == 0 {
        return Err(Error::config("carrier_rate", "no carriers at this sample count"));
    }
    let train = b.split(
        "train",
        spec.sample_count,
        &carrier_counts(n_carriers, spec.rho, k, spec.designated_label),
        rng,
    )?;

    // Carriers spread in proportion to the label counts: token independent of label.
    let dev_carriers = (spec.carrier_rate * spec.dev_size as f64).round() as usize;
    let dev = b.split("dev", spec.dev_size, &carrier_counts(dev_carriers, 1.0 / k as f64, k, spec.designated_label), rng)?;

    let others: Vec<usize> = (0..k).filter(|&l| l != spec.designated_label).collect();
    let anti = (0..spec.anti_biased_test_size)
        .map(|i| b.sample(format!("anti-{i:05}"), others[i % others.len()], true, rng))
        .collect();

    Ok(Testbed {
        train: init_pool(train, task.clone())?,
        task,
        unbiased_dev: dev,
        anti_biased_test: anti,
    })
}

/// True when any segment contains `token` as a whole word (case-insensitive).
pub fn contains_token(sample: &Sample, token: &str) -> bool {
    sample
        .segments
        .iter()
        .any(|seg| seg.split_whitespace().any(|w| w.eq_ignore_ascii_case(token)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStat {
    /// Smoothed pointwise mutual information (natural log).
    pub pmi: f64,
    pub total: usize,
    pub with_feature: usize,
    pub with_label: usize,
    pub joint: usize,
}

/// `ln[p(f, l) / (p(f) p(l))]` over the 2x2 feature/label table with one
/// pseudo-count added to every cell.
pub fn spurious_correlation_stat<'a, I, F>(samples: I, feature: F, label: &str) -> CorrelationStat
where
    I: IntoIterator<Item = &'a Sample>,
    F: Fn(&Sample) -> bool,
{
    let (mut total, mut with_feature, mut with_label, mut joint) = (0, 0, 0, 0);
    for s in samples {
        let f = feature(s);
        let l = s.label == label;
        total += 1;
        with_feature += usize::from(f);
        with_label += usize::from(l);
        joint += usize::from(f && l);
    }
    let n = total as f64 + 4.0;
    let p_joint = (joint as f64 + 1.0) / n;
    let p_f = (with_feature as f64 + 2.0) / n;
    let p_l = (with_label as f64 + 2.0) / n;
    CorrelationStat {
        pmi: (p_joint / (p_f * p_l)).ln(),
        total,
        with_feature,
        with_label,
        joint,
    }
}

/// PMI of the spurious token with the designated label over a pool.
pub fn pool_spurious_pmi(pool: &SamplePool, spec: &SyntheticBiasSpec) -> Result<CorrelationStat> {
    let label = spec.designated_label_name()?;
    Ok(spurious_correlation_stat(
        pool.samples(),
        |s| contains_token(s, &spec.spurious_token),
        &label,
    ))
}
