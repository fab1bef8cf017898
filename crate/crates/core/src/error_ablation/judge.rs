// SPDX-License-Identifier: MIT OR Apache-2.0

//! LLM-as-judge client for typing generation failures.
//!
//! The judge sees a fixed classification prompt and must reply with a
//! single digit. Replies are cached on disk keyed by question digest,
//! answer digest and judge model id, so reclassification never repeats a
//! call. Raw transcripts of every call are appended next to the cache.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::digest::sha256_hex;
use crate::error::{Error, Result};

const PROMPT_TEMPLATE: &str = include_str!("../../resources/judge_prompt.txt");

/// Category codes of the judge prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeCategory {
    Reasonable = 0,
    Blank = 1,
    Gibberish = 2,
    Refusal = 3,
}

impl JudgeCategory {
    pub fn code(self) -> u8 {
        self as u8
    }
}

/// Result of asking the judge about one answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeOutcome {
    Category(JudgeCategory),
    /// The transport kept failing; the record is excluded from rates.
    Unavailable,
}

/// The full judge prompt for one (question, answer) pair.
pub fn judge_prompt(question: &str, raw_answer: &str) -> String {
    PROMPT_TEMPLATE
        .trim_end()
        .replace("{{question}}", question)
        .replace("{{raw_answer}}", raw_answer)
}

/// Parse a reply consisting of a single digit 0-3 (a trailing period is tolerated).
pub fn parse_judge_reply(reply: &str) -> Option<JudgeCategory> {
    let t = reply.trim();
    let t = t.strip_suffix('.').unwrap_or(t).trim();
    match t {
        "0" => Some(JudgeCategory::Reasonable),
        "1" => Some(JudgeCategory::Blank),
        "2" => Some(JudgeCategory::Gibberish),
        "3" => Some(JudgeCategory::Refusal),
        _ => None,
    }
}

/// Something that can send a prompt to a judge model.
pub trait JudgeTransport: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Chat-completions style HTTP endpoint.
pub struct HttpJudge {
    url: String,
    model: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpJudge {
    /// `auth_env` names the environment variable holding the bearer token.
    pub fn new(url: &str, model: &str, auth_env: Option<&str>, timeout: Duration) -> Result<Self> {
        let token =
            match auth_env {
                Some(var) => Some(std::env::var(var).map_err(|_| {
                    Error::Config(format!("judge auth variable `{var}` is not set"))
                })?),
                None => None,
            };
        Ok(HttpJudge {
            url: url.to_string(),
            model: model.to_string(),
            token,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        })
    }
}

impl JudgeTransport for HttpJudge {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let mut req = self.agent.post(&self.url);
        if let Some(t) = &self.token {
            req = req.set("Authorization", &format!("Bearer {t}"));
        }
        let body = json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": 0,
            "max_tokens": 8,
        });
        let resp: serde_json::Value = req
            .send_json(body)
            .map_err(|e| Error::Judge(format!("transport: {e}")))?
            .into_json()
            .map_err(|e| Error::Judge(format!("malformed reply: {e}")))?;
        resp.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Judge("reply has no choices[0].message.content".into()))
    }
}

/// Always answers with the same text. Useful for dry runs.
pub struct ConstantJudge {
    pub model: String,
    pub reply: String,
}

impl JudgeTransport for ConstantJudge {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, _prompt: &str) -> Result<String> {
        Ok(self.reply.clone())
    }
}

/// Never reachable; only cached replies can be served.
pub struct OfflineJudge {
    pub model: String,
}

impl JudgeTransport for OfflineJudge {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, _prompt: &str) -> Result<String> {
        Err(Error::Judge(
            "judge is offline and the reply is not cached".into(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedReply {
    pub model: String,
    pub question_digest: String,
    pub answer_digest: String,
    pub reply: String,
}

impl CachedReply {
    pub fn new(model: &str, question: &str, answer: &str, reply: &str) -> Self {
        CachedReply {
            model: model.to_string(),
            question_digest: sha256_hex(question),
            answer_digest: sha256_hex(answer),
            reply: reply.to_string(),
        }
    }

    fn key(&self) -> (String, String, String) {
        (
            self.question_digest.clone(),
            self.answer_digest.clone(),
            self.model.clone(),
        )
    }
}

#[derive(Serialize)]
struct Transcript<'a> {
    model: &'a str,
    attempt: usize,
    prompt: &'a str,
    reply: Option<&'a str>,
    error: Option<String>,
}

/// Reply cache, optionally persisted as `replies.jsonl` plus `transcripts.jsonl`.
#[derive(Debug, Default)]
pub struct JudgeCache {
    dir: Option<PathBuf>,
    entries: Mutex<BTreeMap<(String, String, String), String>>,
}

impl JudgeCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or create) a cache directory and load its recorded replies.
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("replies.jsonl");
        let mut entries = BTreeMap::new();
        if path.is_file() {
            let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for line in raw.lines().filter(|l| !l.trim().is_empty()) {
                let r: CachedReply = serde_json::from_str(line)
                    .map_err(|e| Error::json(path.display().to_string(), e))?;
                entries.insert(r.key(), r.reply);
            }
        }
        Ok(JudgeCache {
            dir: Some(dir.to_path_buf()),
            entries: Mutex::new(entries),
        })
    }

    pub fn get(&self, model: &str, question: &str, answer: &str) -> Option<String> {
        let key = CachedReply::new(model, question, answer, "").key();
        self.entries.lock().expect("judge cache").get(&key).cloned()
    }

    pub fn insert(&self, record: CachedReply) -> Result<()> {
        let mut entries = self.entries.lock().expect("judge cache");
        if entries.contains_key(&record.key()) {
            return Ok(());
        }
        if let Some(dir) = &self.dir {
            append_line(&dir.join("replies.jsonl"), &record)?;
        }
        entries.insert(record.key(), record.reply);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("judge cache").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn transcript(&self, t: &Transcript<'_>) {
        if let Some(dir) = &self.dir {
            // Holding the entries lock serializes appends from worker threads.
            let _guard = self.entries.lock().expect("judge cache");
            if let Err(e) = append_line(&dir.join("transcripts.jsonl"), t) {
                log::warn!("could not record judge transcript: {e}");
            }
        }
    }
}

fn append_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut line = serde_json::to_string(value).map_err(|e| Error::json("judge record", e))?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Judge transport plus cache, retry and backoff policy.
pub struct JudgeClient {
    transport: Box<dyn JudgeTransport>,
    cache: JudgeCache,
    pub max_retries: usize,
    pub backoff: Duration,
    calls: AtomicUsize,
}

impl JudgeClient {
    pub fn new(transport: Box<dyn JudgeTransport>, cache: JudgeCache) -> Self {
        JudgeClient {
            transport,
            cache,
            max_retries: 3,
            backoff: Duration::from_millis(500),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_retries(mut self, max_retries: usize, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    pub fn model_id(&self) -> &str {
        self.transport.model_id()
    }

    /// Transport calls actually made (cache hits excluded).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn cache(&self) -> &JudgeCache {
        &self.cache
    }

    fn call_with_backoff(&self, prompt: &str) -> Result<String> {
        let mut delay = self.backoff;
        let mut last = None;
        for attempt in 0..=self.max_retries {
            self.calls.fetch_add(1, Ordering::SeqCst);
            match self.transport.complete(prompt) {
                Ok(reply) => {
                    self.cache.transcript(&Transcript {
                        model: self.model_id(),
                        attempt,
                        prompt,
                        reply: Some(&reply),
                        error: None,
                    });
                    return Ok(reply);
                }
                Err(e) => {
                    self.cache.transcript(&Transcript {
                        model: self.model_id(),
                        attempt,
                        prompt,
                        reply: None,
                        error: Some(e.to_string()),
                    });
                    last = Some(e);
                    if attempt < self.max_retries && !delay.is_zero() {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(last.unwrap_or_else(|| Error::Judge("no attempt made".into())))
    }

    /// Type one answer. Blank answers short-circuit without a judge call.
    pub fn classify_generation(&self, question: &str, answer: &str) -> JudgeOutcome {
        if answer.trim().is_empty() {
            return JudgeOutcome::Category(JudgeCategory::Blank);
        }
        let model = self.model_id().to_string();
        if let Some(reply) = self.cache.get(&model, question, answer) {
            return JudgeOutcome::Category(parse_judge_reply(&reply).unwrap_or_else(|| {
                log::warn!("cached judge reply {reply:?} is not a category; using 0");
                JudgeCategory::Reasonable
            }));
        }
        let prompt = judge_prompt(question, answer);
        let mut last_reply = String::new();
        for _ in 0..=self.max_retries {
            match self.call_with_backoff(&prompt) {
                Ok(reply) => {
                    if let Some(cat) = parse_judge_reply(&reply) {
                        self.remember(&model, question, answer, &reply);
                        return JudgeOutcome::Category(cat);
                    }
                    last_reply = reply;
                }
                Err(e) => {
                    log::warn!("judge unavailable: {e}");
                    return JudgeOutcome::Unavailable;
                }
            }
        }
        log::warn!("judge reply {last_reply:?} not parsable after retries; using 0");
        self.remember(&model, question, answer, &last_reply);
        JudgeOutcome::Category(JudgeCategory::Reasonable)
    }

    fn remember(&self, model: &str, question: &str, answer: &str, reply: &str) {
        if let Err(e) = self
            .cache
            .insert(CachedReply::new(model, question, answer, reply))
        {
            log::warn!("could not cache judge reply: {e}");
        }
    }

    /// Classify many `(question, answer)` pairs with up to `concurrency`
    /// calls in flight. Output order matches input order.
    pub fn classify_all(
        &self,
        items: &[(String, String)],
        concurrency: usize,
    ) -> Vec<JudgeOutcome> {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<JudgeOutcome>>> = Mutex::new(vec![None; items.len()]);
        std::thread::scope(|scope| {
            for _ in 0..concurrency.clamp(1, items.len().max(1)) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((q, a)) = items.get(i) else { break };
                    let outcome = self.classify_generation(q, a);
                    results.lock().expect("results")[i] = Some(outcome);
                });
            }
        });
        results
            .into_inner()
            .expect("results")
            .into_iter()
            .map(|o| o.expect("every item classified"))
            .collect()
    }
}
