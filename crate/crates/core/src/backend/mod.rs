// SPDX-License-Identifier: MIT OR Apache-2.0

//! The narrow contract a language model must satisfy.
//!
//! Analyses never talk to a model directly: generation, target
//! log-probabilities, layer relevance, hidden states and offset tokenization
//! all go through [`Backend`]. Relevance is a capability supplied by the
//! backend (typically an adapter around an external LRP-style attribution
//! library); this crate treats the values as opaque reals.

mod http;
mod mock;
mod trace;

pub use http::HttpBackend;
pub use mock::{EvidenceCue, MockBackend, MockScript, ResponseRule};
pub use trace::{read_trace, write_trace, TraceCache, TraceKind, TraceTensor, TRACE_MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    /// Number of transformer blocks, N.
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub supports_relevance: bool,
    pub supports_hidden: bool,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
}

fn default_concurrency() -> usize {
    1
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "backend `{}` must have at least one layer and a positive hidden size",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    #[serde(default)]
    pub temperature: f32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            max_new_tokens: 64,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Eos,
    Length,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Generated continuation, without the prompt.
    pub text: String,
    pub finish_reason: FinishReason,
    pub prompt_token_count: usize,
}

/// How much of a target sequence a log-probability covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// `log p(t1 | prompt)`.
    FirstToken,
    /// `sum_i log p(t_i | prompt, t_<i)`, including the end-of-sequence token.
    FullSequence,
}

/// What a relevance matrix is attributed toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceTarget {
    FirstAnswerToken,
    FullSequence,
}

impl RelevanceTarget {
    pub fn name(&self) -> &'static str {
        match self {
            RelevanceTarget::FirstAnswerToken => "first_answer_token",
            RelevanceTarget::FullSequence => "full_sequence",
        }
    }
}

/// Layer × prompt-token relevance, row-major by layer. Row `i` is block
/// layer `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMatrix {
    num_layers: usize,
    num_tokens: usize,
    values: Vec<f32>,
    pub target: RelevanceTarget,
}

impl RelevanceMatrix {
    pub fn new(
        num_layers: usize,
        num_tokens: usize,
        values: Vec<f32>,
        target: RelevanceTarget,
    ) -> Result<Self> {
        if num_layers == 0 || values.len() != num_layers * num_tokens {
            return Err(Error::Trace(format!(
                "relevance matrix of {} values does not match {num_layers}x{num_tokens}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Trace(format!(
                "non-finite relevance at layer {}, token {}",
                i / num_tokens.max(1) + 1,
                i % num_tokens.max(1)
            )));
        }
        Ok(RelevanceMatrix {
            num_layers,
            num_tokens,
            values,
            target,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>], target: RelevanceTarget) -> Result<Self> {
        let t = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::Trace("ragged relevance rows".into()));
        }
        RelevanceMatrix::new(rows.len(), t, rows.concat(), target)
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Relevance of `token` in block layer `layer` (0-based row).
    pub fn get(&self, layer: usize, token: usize) -> f32 {
        self.values[layer * self.num_tokens + token]
    }

    /// Per-layer relevance of one token.
    pub fn token_profile(&self, token: usize) -> Vec<f64> {
        (0..self.num_layers)
            .map(|l| f64::from(self.get(l, token)))
            .collect()
    }
}

/// Hidden states for every layer and prompt position: embeddings at index
/// 0, then the N block outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenTrace {
    num_layers: usize,
    num_tokens: usize,
    hidden_dim: usize,
    values: Vec<f32>,
}

impl HiddenTrace {
    /// `num_layers` counts the embedding layer, i.e. it is N + 1.
    pub fn new(
        num_layers: usize,
        num_tokens: usize,
        hidden_dim: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if num_layers < 2 || hidden_dim == 0 || values.len() != num_layers * num_tokens * hidden_dim
        {
            return Err(Error::Trace(format!(
                "hidden trace of {} values does not match {num_layers}x{num_tokens}x{hidden_dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Trace("non-finite hidden state".into()));
        }
        Ok(HiddenTrace {
            num_layers,
            num_tokens,
            hidden_dim,
            values,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn vector(&self, layer: usize, token: usize) -> &[f32] {
        let start = (layer * self.num_tokens + token) * self.hidden_dim;
        &self.values[start..start + self.hidden_dim]
    }
}

/// A token and its byte range in the tokenized text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenOffset {
    pub token_id: u32,
    pub char_start: usize,
    pub char_end: usize,
}

/// A prompt wrapped in the backend's chat template; the original prompt
/// sits verbatim at `user_offset`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatWrap {
    pub text: String,
    pub user_offset: usize,
}

/// Everything the analyses need from a model.
///
/// Implementations must be deterministic for fixed arguments.
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Apply the model's chat template to a user prompt.
    fn chat_wrap(&self, prompt: &str) -> Result<ChatWrap> {
        Ok(ChatWrap {
            text: prompt.to_string(),
            user_offset: 0,
        })
    }

    /// Greedy continuation of `prompt`.
    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<GenerationResult>;

    fn target_logprob(&self, prompt: &str, target: &str, mode: TargetMode) -> Result<f64>;

    fn layer_relevance(&self, prompt: &str, target: RelevanceTarget) -> Result<RelevanceMatrix>;

    fn hidden_states(&self, prompt: &str) -> Result<HiddenTrace>;

    fn tokenize_with_offsets(&self, text: &str) -> Result<Vec<TokenOffset>>;

    fn require_relevance(&self) -> Result<()> {
        let d = self.descriptor();
        if d.supports_relevance {
            Ok(())
        } else {
            Err(Error::Capability {
                backend: d.name.clone(),
                capability: "layer relevance",
            })
        }
    }

    fn require_hidden(&self) -> Result<()> {
        let d = self.descriptor();
        if d.supports_hidden {
            Ok(())
        } else {
            Err(Error::Capability {
                backend: d.name.clone(),
                capability: "hidden states",
            })
        }
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }
    fn chat_wrap(&self, prompt: &str) -> Result<ChatWrap> {
        (**self).chat_wrap(prompt)
    }
    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<GenerationResult> {
        (**self).generate(prompt, params)
    }
    fn target_logprob(&self, prompt: &str, target: &str, mode: TargetMode) -> Result<f64> {
        (**self).target_logprob(prompt, target, mode)
    }
    fn layer_relevance(&self, prompt: &str, target: RelevanceTarget) -> Result<RelevanceMatrix> {
        (**self).layer_relevance(prompt, target)
    }
    fn hidden_states(&self, prompt: &str) -> Result<HiddenTrace> {
        (**self).hidden_states(prompt)
    }
    fn tokenize_with_offsets(&self, text: &str) -> Result<Vec<TokenOffset>> {
        (**self).tokenize_with_offsets(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relevance_rejects_nan() {
        let err = RelevanceMatrix::from_rows(
            &[vec![1.0, f32::NAN], vec![0.0, 1.0]],
            RelevanceTarget::FirstAnswerToken,
        );
        assert!(matches!(err, Err(Error::Trace(_))));
    }

    #[test]
    fn relevance_rows_are_layers() {
        let m = RelevanceMatrix::from_rows(
            &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]],
            RelevanceTarget::FirstAnswerToken,
        )
        .unwrap();
        assert_eq!((m.num_layers(), m.num_tokens()), (2, 3));
        assert_eq!(m.token_profile(1), vec![0.0, 1.0]);
    }

    #[test]
    fn hidden_indexing() {
        let values: Vec<f32> = (0..2 * 3 * 2).map(|v| v as f32).collect();
        let h = HiddenTrace::new(2, 3, 2, values).unwrap();
        assert_eq!(h.vector(1, 2), &[10.0, 11.0]);
        assert!(HiddenTrace::new(2, 3, 2, vec![0.0; 5]).is_err());
    }
}
