//! Control-token sequences: `[<bias_n>] <lbl_y> <sep> seg1 ... [<sep> seg2 ...] <eos>`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::{Sample, TaskDescriptor};

pub const SEP: &str = "<sep>";
pub const EOS: &str = "<eos>";

pub fn indicator_token(index: usize) -> String {
    format!("<bias_{index}>")
}

pub fn label_token(name: &str) -> String {
    format!("<lbl_{name}>")
}

/// Public control-token inventory; external backends implementing the same
/// conditioning contract read this from a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlTokenMap {
    pub indicators: BTreeMap<usize, String>,
    pub labels: BTreeMap<String, String>,
    pub separator: String,
    pub end: String,
}

impl ControlTokenMap {
    pub fn new(task: &TaskDescriptor, n_bi: usize) -> Self {
        Self {
            indicators: (1..=n_bi).map(|i| (i, indicator_token(i))).collect(),
            labels: task
                .labels
                .iter()
                .map(|l| (l.name.clone(), label_token(&l.name)))
                .collect(),
            separator: SEP.into(),
            end: EOS.into(),
        }
    }

    pub fn is_control(&self, token: &str) -> bool {
        token == self.separator
            || token == self.end
            || self.indicators.values().any(|t| t == token)
            || self.labels.values().any(|t| t == token)
    }

    pub fn indicator_of(&self, token: &str) -> Option<usize> {
        self.indicators.iter().find(|(_, t)| *t == token).map(|(i, _)| *i)
    }

    pub fn label_of(&self, token: &str) -> Option<&str> {
        self.labels.iter().find(|(_, t)| *t == token).map(|(l, _)| l.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionedSequence {
    pub tokens: Vec<String>,
}

impl ConditionedSequence {
    /// Number of leading conditioning tokens (indicator and/or label).
    /// These are excluded from the training loss.
    pub fn prefix_len(&self) -> usize {
        self.tokens.iter().take_while(|t| *t != SEP).count()
    }

    pub fn prefix(&self) -> &[String] {
        &self.tokens[..self.prefix_len()]
    }

    pub fn targets(&self) -> &[String] {
        &self.tokens[self.prefix_len()..]
    }
}

/// The conditioning prefix for a draw.
pub fn conditioning_prefix(indicator: Option<usize>, label: &str) -> Vec<String> {
    indicator
        .map(indicator_token)
        .into_iter()
        .chain(std::iter::once(label_token(label)))
        .collect()
}

/// Serializes a sample. With `with_indicator` the sample must carry a bias
/// indicator; without it the indicator token is omitted entirely.
pub fn serialize_conditioned(
    sample: &Sample,
    ctrl: &ControlTokenMap,
    with_indicator: bool,
) -> Result<ConditionedSequence> {
    let indicator = if with_indicator {
        let b = sample
            .bias_indicator
            .ok_or_else(|| Error::MissingIndicator(sample.id.clone()))?;
        if !ctrl.indicators.contains_key(&b) {
            return Err(Error::InvalidSample {
                id: sample.id.clone(),
                reason: format!("indicator {b} outside the control-token inventory"),
            });
        }
        Some(b)
    } else {
        None
    };
    if !ctrl.labels.contains_key(&sample.label) {
        return Err(Error::UnknownLabel(sample.label.clone()));
    }
    let mut tokens = conditioning_prefix(indicator, &sample.label);
    for seg in &sample.segments {
        tokens.push(ctrl.separator.clone());
        for w in seg.split_whitespace() {
            if ctrl.is_control(w) {
                return Err(Error::InvalidSample {
                    id: sample.id.clone(),
                    reason: format!("segment contains reserved token `{w}`"),
                });
            }
            tokens.push(w.to_string());
        }
    }
    tokens.push(ctrl.end.clone());
    Ok(ConditionedSequence { tokens })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MalformedReason {
    MissingIndicator,
    UnknownLabelToken,
    MissingSeparator,
    ExtraSeparator,
    EmptySegment,
    NoEndMarker,
    StrayControlToken,
}

impl MalformedReason {
    pub fn as_str(self) -> &'static str {
        match self {
            MalformedReason::MissingIndicator => "missing_indicator",
            MalformedReason::UnknownLabelToken => "unknown_label_token",
            MalformedReason::MissingSeparator => "missing_separator",
            MalformedReason::ExtraSeparator => "extra_separator",
            MalformedReason::EmptySegment => "empty_segment",
            MalformedReason::NoEndMarker => "no_end_marker",
            MalformedReason::StrayControlToken => "stray_control_token",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSequence {
    pub indicator: Option<usize>,
    pub label: String,
    pub segments: Vec<String>,
}

/// Parses a full token sequence (prefix included). Malformedness is a
/// verdict, never an error.
pub fn parse_generation(
    tokens: &[String],
    task: &TaskDescriptor,
    ctrl: &ControlTokenMap,
    with_indicator: bool,
) -> std::result::Result<ParsedSequence, MalformedReason> {
    use MalformedReason::*;
    let mut it = tokens.iter().map(String::as_str).peekable();

    let indicator = if with_indicator {
        Some(it.next().and_then(|t| ctrl.indicator_of(t)).ok_or(MissingIndicator)?)
    } else {
        None
    };
    let label = it
        .next()
        .and_then(|t| ctrl.label_of(t))
        .filter(|l| task.label_id(l).is_some())
        .ok_or(UnknownLabelToken)?
        .to_string();

    let mut segments: Vec<Vec<&str>> = Vec::new();
    let mut ended = false;
    for t in it.by_ref() {
        if t == ctrl.end {
            ended = true;
            break;
        }
        if t == ctrl.separator {
            if segments.len() == task.arity {
                return Err(ExtraSeparator);
            }
            segments.push(Vec::new());
            continue;
        }
        if ctrl.is_control(t) {
            return Err(StrayControlToken);
        }
        match segments.last_mut() {
            Some(seg) => seg.push(t),
            None => return Err(MissingSeparator),
        }
    }
    if !ended {
        return Err(NoEndMarker);
    }
    if it.next().is_some() {
        return Err(StrayControlToken);
    }
    if segments.len() < task.arity {
        return Err(MissingSeparator);
    }
    if segments.iter().any(|s| s.is_empty()) {
        return Err(EmptySegment);
    }
    Ok(ParsedSequence {
        indicator,
        label,
        segments: segments.into_iter().map(|s| s.join(" ")).collect(),
    })
}
