//! Desk-scale autoregressive generator: a log-linear next-token model.
//!
//! The next-token logits are a sum of weight rows, one per active context
//! feature:
//!
//! | template                        | context                                |
//! |---------------------------------|----------------------------------------|
//! | bias                            | always                                 |
//! | previous token                  | last generated token (or start)        |
//! | segment x position              | separators seen, offset in segment     |
//! | label x segment (x position)    | conditioning label                     |
//! | indicator x segment x position  | conditioning indicator                 |
//! | indicator x label x segment (x position) | both                          |
//! | history                         | each distinct word emitted so far      |
//!
//! Training uses Adagrad on the summed token negative log-likelihood.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::tokens::{ConditionedSequence, ControlTokenMap};
use super::GeneratorBackend;
use crate::backend::softmax;
use crate::error::{Error, Result};
use crate::pool::TaskDescriptor;
use crate::rng::StageRng;

const ADAGRAD_EPS: f64 = 1e-8;
const TEMPLATES: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLinearState {
    pub ctrl: ControlTokenMap,
    pub labels: Vec<String>,
    pub n_bi: usize,
    pub arity: usize,
    pub position_buckets: usize,
    pub vocab: Vec<String>,
    /// Row-major `[feature row][vocab]`.
    pub weights: Vec<f64>,
    pub grad_sq: Vec<f64>,
    pub trained: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    v: usize,
    k: usize,
    b: usize,
    s: usize,
    p: usize,
}

impl Layout {
    fn prev_rows(&self) -> usize {
        self.v + 2
    }

    fn offsets(&self) -> [usize; TEMPLATES + 1] {
        let Layout { k, b, s, p, .. } = *self;
        let sizes = [
            1,
            self.prev_rows(),
            s * p,
            k * s,
            k * s * p,
            b * s * p,
            b * k * s,
            b * k * s * p,
            self.v,
        ];
        let mut off = [0; TEMPLATES + 1];
        for (i, n) in sizes.iter().enumerate() {
            off[i + 1] = off[i] + n;
        }
        off
    }

    fn rows(&self) -> usize {
        self.offsets()[TEMPLATES]
    }

    fn bos(&self) -> usize {
        self.v
    }

    fn unk(&self) -> usize {
        self.v + 1
    }

    fn active(&self, c: &Context) -> Vec<usize> {
        let Layout { k, s, p, .. } = *self;
        let o = self.offsets();
        let (seg, pos, y, b) = (c.seg, c.pos, c.label, c.indicator);
        let mut rows = vec![
            o[0],
            o[1] + c.prev,
            o[2] + seg * p + pos,
            o[3] + y * s + seg,
            o[4] + (y * s + seg) * p + pos,
            o[5] + (b * s + seg) * p + pos,
            o[6] + (b * k + y) * s + seg,
            o[7] + ((b * k + y) * s + seg) * p + pos,
        ];
        rows.extend(c.seen.iter().map(|w| o[8] + w));
        rows
    }
}

/// Everything the model conditions on at one step.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Context {
    /// Distinct in-vocabulary words generated so far, ascending.
    seen: Vec<usize>,
    prev: usize,
    seg: usize,
    pos: usize,
    label: usize,
    /// 0 when the sequence carries no indicator.
    indicator: usize,
}

#[derive(Debug, Clone)]
pub struct LogLinearLm {
    st: LogLinearState,
    index: BTreeMap<String, usize>,
}

impl LogLinearLm {
    pub const NAME: &'static str = "loglinear-lm";

    pub fn new(task: &TaskDescriptor, n_bi: usize, position_buckets: usize) -> Self {
        let ctrl = ControlTokenMap::new(task, n_bi);
        let vocab = vec![ctrl.separator.clone(), ctrl.end.clone()];
        let mut lm = Self::from_state(LogLinearState {
            ctrl,
            labels: task.label_names(),
            n_bi,
            arity: task.arity,
            position_buckets: position_buckets.max(1),
            vocab,
            weights: Vec::new(),
            grad_sq: Vec::new(),
            trained: false,
        });
        let n = lm.layout().rows() * lm.st.vocab.len();
        lm.st.weights = vec![0.0; n];
        lm.st.grad_sq = vec![0.0; n];
        lm
    }

    pub fn from_state(st: LogLinearState) -> Self {
        let index = st.vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { st, index }
    }

    fn layout(&self) -> Layout {
        Layout {
            v: self.st.vocab.len(),
            k: self.st.labels.len(),
            b: self.st.n_bi + 1,
            s: self.st.arity + 1,
            p: self.st.position_buckets,
        }
    }

    /// Flat parameter vector (for gradient checks and inspection).
    pub fn params(&self) -> &[f64] {
        &self.st.weights
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.st.weights
    }

    /// Marks the model usable without training, e.g. after setting
    /// parameters directly.
    pub fn mark_trained(&mut self) {
        self.st.trained = true;
    }

    /// Registers words without training.
    pub fn extend_vocabulary<'a>(&mut self, words: impl IntoIterator<Item = &'a str>) {
        let new: BTreeSet<&str> = words
            .into_iter()
            .filter(|w| !self.index.contains_key(*w) && !self.st.ctrl.is_control(w))
            .collect();
        if new.is_empty() {
            return;
        }
        let old = self.layout();
        for w in new {
            self.index.insert(w.to_string(), self.st.vocab.len());
            self.st.vocab.push(w.to_string());
        }
        let new_layout = self.layout();
        let (ov, nv) = (old.v, new_layout.v);
        let (oo, no) = (old.offsets(), new_layout.offsets());
        let remap_row = |r: usize| -> usize {
            let t = (0..TEMPLATES).find(|&t| r < oo[t + 1]).expect("row in layout");
            let local = r - oo[t];
            let local = if t == 1 {
                match local {
                    l if l == old.bos() => new_layout.bos(),
                    l if l == old.unk() => new_layout.unk(),
                    l => l,
                }
            } else {
                local
            };
            no[t] + local
        };
        let mut w = vec![0.0; new_layout.rows() * nv];
        let mut g = vec![0.0; new_layout.rows() * nv];
        for r in 0..old.rows() {
            let nr = remap_row(r);
            w[nr * nv..nr * nv + ov].copy_from_slice(&self.st.weights[r * ov..(r + 1) * ov]);
            g[nr * nv..nr * nv + ov].copy_from_slice(&self.st.grad_sq[r * ov..(r + 1) * ov]);
        }
        self.st.weights = w;
        self.st.grad_sq = g;
    }

    fn token_id(&self, t: &str) -> Option<usize> {
        self.index.get(t).copied()
    }

    /// Decodes the conditioning prefix into `(label, indicator)`.
    fn condition(&self, tokens: &[String]) -> Result<(usize, usize, usize)> {
        let mut i = 0;
        let mut indicator = 0;
        if let Some(b) = tokens.first().and_then(|t| self.st.ctrl.indicator_of(t)) {
            indicator = b;
            i = 1;
        }
        let label = tokens
            .get(i)
            .and_then(|t| self.st.ctrl.label_of(t))
            .and_then(|l| self.st.labels.iter().position(|x| x == l))
            .ok_or_else(|| Error::InvalidSample {
                id: "<sequence>".into(),
                reason: "conditioning prefix lacks a label token".into(),
            })?;
        Ok((label, indicator, i + 1))
    }

    /// Contexts for every target position, paired with the target id
    /// (`None` when the target is outside the vocabulary).
    fn contexts(&self, tokens: &[String]) -> Result<(Vec<(Context, Option<usize>)>, Context)> {
        let layout = self.layout();
        let (label, indicator, start) = self.condition(tokens)?;
        let mut c = Context {
            seen: Vec::new(),
            prev: layout.bos(),
            seg: 0,
            pos: 0,
            label,
            indicator,
        };
        let mut steps = Vec::with_capacity(tokens.len().saturating_sub(start));
        let mut seps = 0usize;
        let mut offset = 0usize;
        for t in &tokens[start..] {
            let id = self.token_id(t);
            steps.push((c.clone(), id));
            if let Some(w) = id {
                if let Err(at) = c.seen.binary_search(&w) {
                    c.seen.insert(at, w);
                }
            }
            if *t == self.st.ctrl.separator {
                seps += 1;
                offset = 0;
            } else {
                offset += 1;
            }
            c.prev = id.unwrap_or(layout.unk());
            c.seg = seps.min(layout.s - 1);
            c.pos = offset.min(layout.p - 1);
        }
        Ok((steps, c))
    }

    fn dist(&self, layout: &Layout, c: &Context) -> Vec<f64> {
        let v = layout.v;
        let mut z = vec![0.0; v];
        for r in layout.active(c) {
            for (zi, w) in z.iter_mut().zip(&self.st.weights[r * v..(r + 1) * v]) {
                *zi += w;
            }
        }
        softmax(&z)
    }

    /// Objective over `sequences` and its gradient w.r.t. [`Self::params`].
    pub fn loss_and_gradient(&self, sequences: &[ConditionedSequence]) -> Result<(f64, Vec<f64>)> {
        let layout = self.layout();
        let v = layout.v;
        let mut grad = vec![0.0; self.st.weights.len()];
        let mut loss = 0.0;
        for seq in sequences {
            let (steps, _) = self.contexts(&seq.tokens)?;
            for (c, target) in steps {
                let mut p = self.dist(&layout, &c);
                let y = target.ok_or_else(|| Error::InvalidSample {
                    id: "<sequence>".into(),
                    reason: "target token outside vocabulary".into(),
                })?;
                loss -= p[y].ln();
                p[y] -= 1.0;
                for r in layout.active(&c) {
                    for (g, d) in grad[r * v..(r + 1) * v].iter_mut().zip(&p) {
                        *g += d;
                    }
                }
            }
        }
        Ok((loss, grad))
    }
}

impl GeneratorBackend for LogLinearLm {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn is_trained(&self) -> bool {
        self.st.trained
    }

    fn control_tokens(&self) -> &ControlTokenMap {
        &self.st.ctrl
    }

    fn vocabulary(&self) -> &[String] {
        &self.st.vocab
    }

    fn prepare(&mut self, sequences: &[ConditionedSequence]) -> Result<()> {
        let words: Vec<&str> = sequences
            .iter()
            .flat_map(|s| s.targets().iter().map(String::as_str))
            .collect();
        self.extend_vocabulary(words);
        Ok(())
    }

    fn train_epoch(&mut self, sequences: &[ConditionedSequence], lr: f64, rng: &mut StageRng) -> Result<()> {
        let layout = self.layout();
        let v = layout.v;
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(rng);
        let mut grad: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for i in order {
            let (steps, _) = self.contexts(&sequences[i].tokens)?;
            grad.clear();
            for (c, target) in steps {
                let Some(y) = target else {
                    return Err(Error::InvalidSample {
                        id: "<sequence>".into(),
                        reason: "target token outside vocabulary; call prepare first".into(),
                    });
                };
                let mut p = self.dist(&layout, &c);
                p[y] -= 1.0;
                for r in layout.active(&c) {
                    let g = grad.entry(r).or_insert_with(|| vec![0.0; v]);
                    for (gi, d) in g.iter_mut().zip(&p) {
                        *gi += d;
                    }
                }
            }
            for (&r, g) in &grad {
                let w = &mut self.st.weights[r * v..(r + 1) * v];
                let acc = &mut self.st.grad_sq[r * v..(r + 1) * v];
                for ((wi, ai), gi) in w.iter_mut().zip(acc.iter_mut()).zip(g) {
                    *ai += gi * gi;
                    *wi -= lr * gi / (ai.sqrt() + ADAGRAD_EPS);
                }
            }
        }
        self.st.trained = true;
        Ok(())
    }

    fn next_token_distribution(&self, context: &[String]) -> Result<Vec<f64>> {
        let (_, c) = self.contexts(context)?;
        Ok(self.dist(&self.layout(), &c))
    }

    fn sequence_log_prob(&self, seq: &ConditionedSequence) -> Result<f64> {
        let layout = self.layout();
        let (steps, _) = self.contexts(&seq.tokens)?;
        Ok(steps
            .iter()
            .map(|(c, t)| t.map_or(f64::NEG_INFINITY, |y| self.dist(&layout, c)[y].ln()))
            .sum())
    }

    fn state(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(&self.st)?)
    }
}
