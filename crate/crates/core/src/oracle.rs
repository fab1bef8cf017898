// SPDX-License-Identifier: MIT OR Apache-2.0

//! Context-segment ablation oracle.
//!
//! The test context is cut into segments. Each segment is scored by how much
//! the target's log-probability drops when the segment is deleted from the
//! prompt; a sample is correct when the segment holding the gold answer
//! scores strictly higher than every other segment.

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, TargetMode};
use crate::error::{Error, Result};
use crate::prompting::{RenderedPrompt, Span};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Granularity {
    Sentence,
    /// Fixed windows of `window` whitespace-separated words.
    Span {
        window: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// Target is the first token of the gold answer.
    Step,
    /// Target is the model's full greedy answer.
    Sequence,
}

impl OracleMode {
    pub fn name(&self) -> &'static str {
        match self {
            OracleMode::Step => "step",
            OracleMode::Sequence => "sequence",
        }
    }

    pub fn target_mode(&self) -> TargetMode {
        match self {
            OracleMode::Step => TargetMode::FirstToken,
            OracleMode::Sequence => TargetMode::FullSequence,
        }
    }
}

/// Segments covering a context exactly, in order, as byte spans relative to
/// the context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub segments: Vec<Span>,
    pub gold_index: usize,
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '?' | '!')
}

fn is_cjk_terminal(c: char) -> bool {
    matches!(c, '。' | '？' | '！')
}

/// Sentence boundaries: after `.`, `?` or `!` followed by whitespace or the
/// end of text, and after `。`, `？`, `！` unconditionally. Whitespace after
/// a boundary stays with the preceding sentence.
fn sentence_spans(text: &str) -> Vec<Span> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i].1;
        let next_ws = chars.get(i + 1).is_none_or(|(_, n)| n.is_whitespace());
        if is_cjk_terminal(c) || (is_terminal(c) && next_ws) {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            let end = chars.get(j).map_or(text.len(), |(b, _)| *b);
            out.push(Span::new(start, end));
            start = end;
            i = j;
        } else {
            i += 1;
        }
    }
    if start < text.len() || out.is_empty() {
        out.push(Span::new(start, text.len()));
    }
    out
}

fn window_spans(text: &str, window: usize) -> Vec<Span> {
    let mut word_starts = Vec::new();
    let mut prev_ws = true;
    for (b, c) in text.char_indices() {
        if !c.is_whitespace() && prev_ws {
            word_starts.push(b);
        }
        prev_ws = c.is_whitespace();
    }
    let mut cuts: Vec<usize> = word_starts.iter().step_by(window).copied().collect();
    if cuts.first().is_none_or(|&c| c != 0) {
        // Leading whitespace joins the first window.
        if cuts.is_empty() {
            cuts.push(0);
        } else {
            cuts[0] = 0;
        }
    }
    cuts.iter()
        .enumerate()
        .map(|(k, &s)| Span::new(s, cuts.get(k + 1).copied().unwrap_or(text.len())))
        .collect()
}

/// Segment `context`; the gold segment is the one containing byte
/// `answer_start`.
pub fn segment_context(
    context: &str,
    answer_start: usize,
    granularity: Granularity,
) -> Result<Segmentation> {
    if answer_start > context.len() || !context.is_char_boundary(answer_start) {
        return Err(Error::InvalidArgument(format!(
            "answer start {answer_start} is not a character boundary of the context"
        )));
    }
    let segments = match granularity {
        Granularity::Sentence => sentence_spans(context),
        Granularity::Span { window } => {
            if window == 0 {
                return Err(Error::Config("span window must be positive".into()));
            }
            window_spans(context, window)
        }
    };
    let gold_index = segments
        .iter()
        .position(|s| s.contains(answer_start))
        .unwrap_or(segments.len() - 1);
    Ok(Segmentation {
        segments,
        gold_index,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleOutcome {
    pub sample_id: String,
    pub mode: OracleMode,
    pub target: String,
    pub segments: Vec<Span>,
    pub scores: Vec<f64>,
    pub gold_index: usize,
    /// Gold score minus the best other score; `None` with a single segment.
    pub margin: Option<f64>,
    pub correct: bool,
}

/// Score every segment of the test context in `prompt` against `target`.
pub fn estimate_oracle(
    backend: &dyn Backend,
    prompt: &RenderedPrompt,
    segmentation: &Segmentation,
    mode: OracleMode,
    target: &str,
) -> Result<OracleOutcome> {
    let ctx_len = prompt.context_span().len();
    let covered = segmentation.segments.last().map(|s| s.end);
    if covered != Some(ctx_len) || segmentation.gold_index >= segmentation.segments.len() {
        return Err(Error::InvalidArgument(format!(
            "segmentation of sample `{}` does not cover its context",
            prompt.sample_id
        )));
    }
    let tm = mode.target_mode();
    let base = backend.target_logprob(&prompt.text, target, tm)?;
    let mut scores = Vec::with_capacity(segmentation.segments.len());
    for seg in &segmentation.segments {
        if seg.is_empty() {
            scores.push(0.0);
            continue;
        }
        let ablated = prompt.with_context_range_deleted(*seg)?;
        scores.push(base - backend.target_logprob(&ablated, target, tm)?);
    }
    let gold = segmentation.gold_index;
    let best_other = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != gold)
        .map(|(_, s)| *s)
        .fold(None, |acc: Option<f64>, s| {
            Some(acc.map_or(s, |a| a.max(s)))
        });
    let margin = best_other.map(|b| scores[gold] - b);
    Ok(OracleOutcome {
        sample_id: prompt.sample_id.clone(),
        mode,
        target: target.to_string(),
        segments: segmentation.segments.clone(),
        scores,
        gold_index: gold,
        margin,
        correct: margin.is_none_or(|m| m > 0.0),
    })
}

/// Percentage of correct outcomes.
pub fn oracle_accuracy(outcomes: &[OracleOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::InvalidArgument(
            "oracle accuracy over zero samples".into(),
        ));
    }
    let correct = outcomes.iter().filter(|o| o.correct).count();
    Ok(100.0 * correct as f64 / outcomes.len() as f64)
}
