// SPDX-License-Identifier: MIT OR Apache-2.0

//! A deterministic, table-scripted backend.
//!
//! Tokenization splits on whitespace. Generations come from a digest table,
//! then from cue rules, then from a default response. Next-token
//! log-probabilities are uniform over `vocab_size` unless a token is
//! scripted; "evidence cues" subtract their weight from every step whose
//! conditioning text lacks the cue, which lets tests script how much each
//! context segment matters. Relevance and hidden states are scripted per
//! prompt digest or derived from seeded hashes of the token text.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Backend, BackendDescriptor, ChatWrap, FinishReason, GenerationParams, GenerationResult,
    HiddenTrace, RelevanceMatrix, RelevanceTarget, TargetMode, TokenOffset,
};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};

/// Respond with `response` when `cue` occurs in the focus region of the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRule {
    pub cue: String,
    pub response: String,
}

/// Lowers every next-token log-probability by `weight` when `cue` is absent
/// from the conditioning text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceCue {
    pub cue: String,
    pub weight: f64,
}

fn default_vocab_size() -> usize {
    32
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default = "default_name")]
    pub name: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    /// Tokens with fixed ids, in id order.
    #[serde(default)]
    pub vocab: Vec<String>,
    #[serde(default)]
    pub context_limit: Option<usize>,
    #[serde(default = "yes")]
    pub supports_relevance: bool,
    #[serde(default = "yes")]
    pub supports_hidden: bool,
    #[serde(default)]
    pub chat_prefix: String,
    #[serde(default)]
    pub chat_suffix: String,
    /// Prompt SHA-256 → generation.
    #[serde(default)]
    pub generations: BTreeMap<String, String>,
    #[serde(default)]
    pub rules: Vec<ResponseRule>,
    /// Rules only look at text after the last occurrence of this marker.
    #[serde(default)]
    pub focus_marker: Option<String>,
    #[serde(default)]
    pub default_response: String,
    /// Token → log-probability; others get `-ln(vocab_size)`.
    #[serde(default)]
    pub token_logprobs: BTreeMap<String, f64>,
    #[serde(default)]
    pub eos_logprob: Option<f64>,
    #[serde(default)]
    pub evidence: Vec<EvidenceCue>,
    /// Prompt SHA-256 → layer × token matrix.
    #[serde(default)]
    pub relevance: BTreeMap<String, Vec<Vec<f32>>>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
}

fn default_name() -> String {
    "mock".into()
}

fn default_concurrency() -> usize {
    4
}

impl MockScript {
    pub fn new(num_layers: usize, hidden_dim: usize) -> Self {
        MockScript {
            name: default_name(),
            num_layers,
            hidden_dim,
            vocab_size: default_vocab_size(),
            vocab: Vec::new(),
            context_limit: None,
            supports_relevance: true,
            supports_hidden: true,
            chat_prefix: String::new(),
            chat_suffix: String::new(),
            generations: BTreeMap::new(),
            rules: Vec::new(),
            focus_marker: None,
            default_response: String::new(),
            token_logprobs: BTreeMap::new(),
            eos_logprob: None,
            evidence: Vec::new(),
            relevance: BTreeMap::new(),
            max_concurrency: default_concurrency(),
        }
    }
}

#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    descriptor: BackendDescriptor,
    calls: AtomicUsize,
}

fn whitespace_tokens(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, text.len()));
    }
    out
}

fn seed_of(parts: &[&str]) -> u64 {
    let digest = sha256_hex(parts.join("\u{1f}"));
    u64::from_str_radix(&digest[..16], 16).expect("hex")
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self> {
        if script.vocab_size < 2 {
            return Err(Error::InvalidArgument(
                "mock vocab_size must be at least 2".into(),
            ));
        }
        let descriptor = BackendDescriptor {
            name: script.name.clone(),
            num_layers: script.num_layers,
            hidden_dim: script.hidden_dim,
            supports_relevance: script.supports_relevance,
            supports_hidden: script.supports_hidden,
            max_concurrency: script.max_concurrency.max(1),
        };
        descriptor.validate()?;
        Ok(MockBackend {
            script,
            descriptor,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        let script: MockScript =
            serde_json::from_str(raw).map_err(|e| Error::json("mock script", e))?;
        MockBackend::new(script)
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    /// Number of model calls served (tokenization and chat wrapping excluded).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn count(&self) {
        self.calls.fetch_add(1, Ordering::SeqCst);
    }

    fn check_length(&self, prompt: &str) -> Result<usize> {
        let n = whitespace_tokens(prompt).len();
        match self.script.context_limit {
            Some(limit) if n > limit => Err(Error::ContextOverflow { tokens: n, limit }),
            _ => Ok(n),
        }
    }

    fn token_logprob(&self, token: &str) -> f64 {
        self.script
            .token_logprobs
            .get(token)
            .copied()
            .unwrap_or_else(|| -(self.script.vocab_size as f64).ln())
    }

    fn eos_logprob(&self) -> f64 {
        self.script
            .eos_logprob
            .unwrap_or_else(|| -(self.script.vocab_size as f64).ln())
    }

    fn evidence_penalty(&self, conditioning: &str) -> f64 {
        self.script
            .evidence
            .iter()
            .filter(|c| !conditioning.contains(&c.cue))
            .map(|c| c.weight)
            .sum()
    }

    /// Log-probability of `token` as the next token after `conditioning`.
    pub fn step_logprob(&self, conditioning: &str, token: Option<&str>) -> f64 {
        let base = match token {
            Some(t) => self.token_logprob(t),
            None => self.eos_logprob(),
        };
        base - self.evidence_penalty(conditioning)
    }

    fn respond(&self, prompt: &str) -> String {
        if let Some(text) = self.script.generations.get(&sha256_hex(prompt)) {
            return text.clone();
        }
        let focus = match &self.script.focus_marker {
            Some(m) => prompt.rfind(m.as_str()).map_or(prompt, |i| &prompt[i..]),
            None => prompt,
        };
        self.script
            .rules
            .iter()
            .find(|r| focus.contains(&r.cue))
            .map(|r| r.response.clone())
            .unwrap_or_else(|| self.script.default_response.clone())
    }

    fn unit(seed: u64) -> f64 {
        ChaCha8Rng::seed_from_u64(seed).gen::<f64>()
    }
}

impl Backend for MockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn chat_wrap(&self, prompt: &str) -> Result<ChatWrap> {
        Ok(ChatWrap {
            text: format!(
                "{}{}{}",
                self.script.chat_prefix, prompt, self.script.chat_suffix
            ),
            user_offset: self.script.chat_prefix.len(),
        })
    }

    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<GenerationResult> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        self.count();
        let prompt_token_count = self.check_length(prompt)?;
        if params.max_new_tokens == 0 {
            return Ok(GenerationResult {
                text: String::new(),
                finish_reason: FinishReason::Length,
                prompt_token_count,
            });
        }
        let full = self.respond(prompt);
        let tokens = whitespace_tokens(&full);
        let (text, finish_reason) = if tokens.len() > params.max_new_tokens {
            let end = tokens[params.max_new_tokens - 1].1;
            (full[..end].to_string(), FinishReason::Length)
        } else {
            (full, FinishReason::Eos)
        };
        Ok(GenerationResult {
            text,
            finish_reason,
            prompt_token_count,
        })
    }

    /// Steps condition on `prompt` followed by the already-forced target
    /// tokens, joined with single spaces.
    fn target_logprob(&self, prompt: &str, target: &str, mode: TargetMode) -> Result<f64> {
        self.count();
        self.check_length(prompt)?;
        let tokens: Vec<&str> = whitespace_tokens(target)
            .into_iter()
            .map(|(s, e)| &target[s..e])
            .collect();
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("target has no tokens".into()));
        }
        if mode == TargetMode::FirstToken {
            return Ok(self.step_logprob(prompt, Some(tokens[0])));
        }
        let mut conditioning = prompt.to_string();
        let mut total = 0.0;
        for token in &tokens {
            total += self.step_logprob(&conditioning, Some(token));
            conditioning.push(' ');
            conditioning.push_str(token);
        }
        total += self.step_logprob(&conditioning, None);
        Ok(total)
    }

    fn layer_relevance(&self, prompt: &str, target: RelevanceTarget) -> Result<RelevanceMatrix> {
        self.require_relevance()?;
        self.count();
        self.check_length(prompt)?;
        if let Some(rows) = self.script.relevance.get(&sha256_hex(prompt)) {
            return RelevanceMatrix::from_rows(rows, target);
        }
        let spans = whitespace_tokens(prompt);
        let n = self.script.num_layers;
        let mut values = vec![0f32; n * spans.len()];
        for (t, &(s, e)) in spans.iter().enumerate() {
            let tok = &prompt[s..e];
            let decay = 0.2 + 1.5 * Self::unit(seed_of(&["decay", tok, target.name()]));
            for l in 0..n {
                let u = Self::unit(seed_of(&["rel", tok, &l.to_string(), target.name()]));
                values[l * spans.len() + t] = ((0.05 + u) * (-decay * l as f64).exp()) as f32;
            }
        }
        RelevanceMatrix::new(n, spans.len(), values, target)
    }

    fn hidden_states(&self, prompt: &str) -> Result<HiddenTrace> {
        self.require_hidden()?;
        self.count();
        self.check_length(prompt)?;
        let spans = whitespace_tokens(prompt);
        let (n, d) = (self.script.num_layers, self.script.hidden_dim);
        let mut values = Vec::with_capacity((n + 1) * spans.len() * d);
        for l in 0..=n {
            // A layer-wide shared direction whose weight rises then falls with depth.
            let mut shared_rng = ChaCha8Rng::seed_from_u64(seed_of(&["shared", &l.to_string()]));
            let shared: Vec<f64> = (0..d).map(|_| shared_rng.gen_range(-1.0..1.0)).collect();
            let weight = 3.0 * (std::f64::consts::PI * l as f64 / n as f64).sin();
            for &(s, e) in &spans {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(seed_of(&["hid", &prompt[s..e], &l.to_string()]));
                for sh in &shared {
                    let noise: f64 = rng.gen_range(-1.0..1.0);
                    values.push((weight * sh + noise + 0.01) as f32);
                }
            }
        }
        HiddenTrace::new(n + 1, spans.len(), d, values)
    }

    fn tokenize_with_offsets(&self, text: &str) -> Result<Vec<TokenOffset>> {
        Ok(whitespace_tokens(text)
            .into_iter()
            .map(|(s, e)| {
                let tok = &text[s..e];
                let token_id = match self.script.vocab.iter().position(|v| v == tok) {
                    Some(i) => i as u32,
                    None => self.script.vocab.len() as u32 + (seed_of(&[tok]) % 1_000_000) as u32,
                };
                TokenOffset {
                    token_id,
                    char_start: s,
                    char_end: e,
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mock(script: MockScript) -> MockBackend {
        MockBackend::new(script).unwrap()
    }

    #[test]
    fn scripted_generation_by_digest() {
        let mut s = MockScript::new(2, 4);
        s.generations
            .insert(sha256_hex("How many?"), "Answer: four".into());
        let m = mock(s);
        let out = m
            .generate("How many?", &GenerationParams::default())
            .unwrap();
        assert_eq!(out.text, "Answer: four");
        assert_eq!(out.finish_reason, FinishReason::Eos);
    }

    #[test]
    fn zero_new_tokens() {
        let mut s = MockScript::new(2, 4);
        s.default_response = "Answer: four".into();
        let out = mock(s)
            .generate(
                "q",
                &GenerationParams {
                    max_new_tokens: 0,
                    temperature: 0.0,
                },
            )
            .unwrap();
        assert_eq!(out.text, "");
        assert_eq!(out.finish_reason, FinishReason::Length);
    }

    #[test]
    fn truncation_reports_length() {
        let mut s = MockScript::new(2, 4);
        s.default_response = "Answer: four Pro Bowl".into();
        let out = mock(s)
            .generate(
                "q",
                &GenerationParams {
                    max_new_tokens: 2,
                    temperature: 0.0,
                },
            )
            .unwrap();
        assert_eq!(out.text, "Answer: four");
        assert_eq!(out.finish_reason, FinishReason::Length);
    }

    #[test]
    fn overlong_prompt_overflows() {
        let mut s = MockScript::new(2, 4);
        s.context_limit = Some(64);
        let m = mock(s);
        let ok = vec!["w"; 64].join(" ");
        let long = vec!["w"; 65].join(" ");
        assert!(m.generate(&ok, &GenerationParams::default()).is_ok());
        assert!(matches!(
            m.generate(&long, &GenerationParams::default()),
            Err(Error::ContextOverflow {
                tokens: 65,
                limit: 64
            })
        ));
    }

    #[test]
    fn uniform_logprobs_are_analytic() {
        let mut s = MockScript::new(2, 4);
        s.vocab_size = 4;
        let m = mock(s);
        let q = (0.25f64).ln();
        assert_eq!(
            m.target_logprob("p", "four", TargetMode::FirstToken)
                .unwrap(),
            q
        );
        // Three tokens plus end-of-sequence, all uniform.
        let full = m
            .target_logprob("p", "a b c", TargetMode::FullSequence)
            .unwrap();
        assert!((full - 4.0 * q).abs() < 1e-12);
        assert!(m.target_logprob("p", "  ", TargetMode::FirstToken).is_err());
    }

    #[test]
    fn certain_first_token_scores_zero() {
        let mut s = MockScript::new(2, 4);
        s.token_logprobs.insert("four".into(), 0.0);
        assert_eq!(
            mock(s)
                .target_logprob("p", "four", TargetMode::FirstToken)
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn full_sequence_is_sum_of_forced_steps() {
        let mut s = MockScript::new(2, 4);
        s.vocab_size = 4;
        s.eos_logprob = Some(-0.5);
        s.token_logprobs.insert("b".into(), -2.0);
        s.evidence.push(EvidenceCue {
            cue: "a".into(),
            weight: 1.5,
        });
        let m = mock(s);
        let prompt = "context x";
        let steps = m
            .target_logprob(prompt, "a", TargetMode::FirstToken)
            .unwrap()
            + m.target_logprob("context x a", "b", TargetMode::FirstToken)
                .unwrap()
            + m.target_logprob("context x a b", "c", TargetMode::FirstToken)
                .unwrap()
            + m.step_logprob("context x a b c", None);
        let full = m
            .target_logprob(prompt, "a b c", TargetMode::FullSequence)
            .unwrap();
        assert_eq!(full, steps);
        // Analytic: step 1 lacks cue "a" (penalty 1.5), later steps contain it.
        let q = (0.25f64).ln();
        assert!((full - ((q - 1.5) + -2.0 + q + -0.5)).abs() < 1e-12);
    }

    #[test]
    fn scripted_relevance_is_verbatim() {
        let mut s = MockScript::new(2, 4);
        let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]];
        s.relevance.insert(sha256_hex("x y z"), rows.clone());
        let m = mock(s);
        let r = m
            .layer_relevance("x y z", RelevanceTarget::FirstAnswerToken)
            .unwrap();
        assert_eq!(r.values(), &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn nan_relevance_is_rejected_at_ingestion() {
        let mut s = MockScript::new(2, 4);
        s.relevance
            .insert(sha256_hex("x y"), vec![vec![1.0, f32::NAN], vec![0.0, 1.0]]);
        let m = mock(s);
        assert!(matches!(
            m.layer_relevance("x y", RelevanceTarget::FirstAnswerToken),
            Err(Error::Trace(_))
        ));
    }

    #[test]
    fn capabilities_are_enforced() {
        let mut s = MockScript::new(2, 4);
        s.supports_relevance = false;
        s.supports_hidden = false;
        let m = mock(s);
        assert!(matches!(
            m.layer_relevance("a", RelevanceTarget::FirstAnswerToken),
            Err(Error::Capability { .. })
        ));
        assert!(matches!(
            m.hidden_states("a"),
            Err(Error::Capability { .. })
        ));
    }

    #[test]
    fn hidden_shape() {
        let m = mock(MockScript::new(2, 4));
        let h = m.hidden_states("a b c d e").unwrap();
        assert_eq!((h.num_layers(), h.num_tokens(), h.hidden_dim()), (3, 5, 4));
        assert_eq!(h, m.hidden_states("a b c d e").unwrap());
    }

    #[test]
    fn whitespace_tokenizer_offsets() {
        let mut s = MockScript::new(2, 4);
        s.vocab = vec!["a".into(), "bc".into()];
        let m = mock(s);
        let toks = m.tokenize_with_offsets("a bc").unwrap();
        assert_eq!(
            toks,
            vec![
                TokenOffset {
                    token_id: 0,
                    char_start: 0,
                    char_end: 1
                },
                TokenOffset {
                    token_id: 1,
                    char_start: 2,
                    char_end: 4
                },
            ]
        );
        assert!(m.tokenize_with_offsets("").unwrap().is_empty());
    }

    #[test]
    fn chat_wrap_offsets() {
        let mut s = MockScript::new(2, 4);
        s.chat_prefix = "<|user|>\n".into();
        s.chat_suffix = "\n<|assistant|>".into();
        let w = mock(s).chat_wrap("hi").unwrap();
        assert_eq!(&w.text[w.user_offset..w.user_offset + 2], "hi");
    }

    proptest! {
        #[test]
        fn offsets_reconstruct_non_whitespace(text in "[a-zé \\t\\n]{0,40}") {
            let m = mock(MockScript::new(2, 4));
            let toks = m.tokenize_with_offsets(&text).unwrap();
            let mut prev_end = 0;
            for t in &toks {
                prop_assert!(t.char_start >= prev_end && t.char_end <= text.len());
                prev_end = t.char_end;
            }
            let joined: String = toks.iter().map(|t| &text[t.char_start..t.char_end]).collect();
            let expected: String = text.chars().filter(|c| !c.is_whitespace()).collect();
            prop_assert_eq!(joined, expected);
        }
    }
}
