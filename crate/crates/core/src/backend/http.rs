// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON-over-HTTP adapter for an external model server.
//!
//! The server exposes one POST route per backend operation under a base URL:
//! `describe`, `chat_wrap`, `generate`, `target_logprob`, `layer_relevance`,
//! `hidden_states` and `tokenize`. A `413` reply to any prompt-bearing route
//! signals a context-length overflow with body `{"tokens": n, "limit": m}`.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    Backend, BackendDescriptor, ChatWrap, GenerationParams, GenerationResult, HiddenTrace,
    RelevanceMatrix, RelevanceTarget, TargetMode, TokenOffset,
};
use crate::error::{Error, Result};

pub struct HttpBackend {
    base: String,
    agent: ureq::Agent,
    descriptor: BackendDescriptor,
}

#[derive(Deserialize)]
struct Overflow {
    tokens: usize,
    limit: usize,
}

fn post<T: DeserializeOwned>(
    agent: &ureq::Agent,
    base: &str,
    route: &str,
    body: Value,
) -> Result<T> {
    let url = format!("{}/{route}", base.trim_end_matches('/'));
    match agent.post(&url).send_json(body) {
        Ok(resp) => resp
            .into_json()
            .map_err(|e| Error::Backend(format!("{route}: malformed reply: {e}"))),
        Err(ureq::Error::Status(413, resp)) => {
            let o: Overflow = resp
                .into_json()
                .map_err(|e| Error::Backend(format!("{route}: malformed overflow reply: {e}")))?;
            Err(Error::ContextOverflow {
                tokens: o.tokens,
                limit: o.limit,
            })
        }
        Err(ureq::Error::Status(code, resp)) => Err(Error::Backend(format!(
            "{route}: HTTP {code}: {}",
            resp.into_string().unwrap_or_default()
        ))),
        Err(e) => Err(Error::Backend(format!("{route}: {e}"))),
    }
}

impl HttpBackend {
    pub fn connect(base: &str, timeout: Duration) -> Result<Self> {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        let descriptor: BackendDescriptor = post(&agent, base, "describe", json!({}))?;
        descriptor.validate()?;
        Ok(HttpBackend {
            base: base.to_string(),
            agent,
            descriptor,
        })
    }

    fn call<T: DeserializeOwned>(&self, route: &str, body: Value) -> Result<T> {
        post(&self.agent, &self.base, route, body)
    }
}

impl Backend for HttpBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn chat_wrap(&self, prompt: &str) -> Result<ChatWrap> {
        self.call("chat_wrap", json!({ "prompt": prompt }))
    }

    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<GenerationResult> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        self.call(
            "generate",
            json!({
                "prompt": prompt,
                "max_new_tokens": params.max_new_tokens,
                "temperature": params.temperature,
            }),
        )
    }

    fn target_logprob(&self, prompt: &str, target: &str, mode: TargetMode) -> Result<f64> {
        if target.trim().is_empty() {
            return Err(Error::InvalidArgument("target has no tokens".into()));
        }
        #[derive(Deserialize)]
        struct Reply {
            logprob: f64,
        }
        let r: Reply = self.call(
            "target_logprob",
            json!({ "prompt": prompt, "target": target, "mode": mode }),
        )?;
        Ok(r.logprob)
    }

    fn layer_relevance(&self, prompt: &str, target: RelevanceTarget) -> Result<RelevanceMatrix> {
        self.require_relevance()?;
        #[derive(Deserialize)]
        struct Reply {
            values: Vec<Vec<f32>>,
        }
        let r: Reply = self.call(
            "layer_relevance",
            json!({ "prompt": prompt, "target": target }),
        )?;
        RelevanceMatrix::from_rows(&r.values, target)
    }

    fn hidden_states(&self, prompt: &str) -> Result<HiddenTrace> {
        self.require_hidden()?;
        #[derive(Deserialize)]
        struct Reply {
            values: Vec<Vec<Vec<f32>>>,
        }
        let r: Reply = self.call("hidden_states", json!({ "prompt": prompt }))?;
        let layers = r.values.len();
        let tokens = r.values.first().map_or(0, Vec::len);
        let dim = r
            .values
            .first()
            .and_then(|l| l.first())
            .map_or(self.descriptor.hidden_dim, Vec::len);
        let flat: Vec<f32> = r.values.into_iter().flatten().flatten().collect();
        HiddenTrace::new(layers, tokens, dim, flat)
    }

    fn tokenize_with_offsets(&self, text: &str) -> Result<Vec<TokenOffset>> {
        #[derive(Deserialize)]
        struct Reply {
            tokens: Vec<TokenOffset>,
        }
        let r: Reply = self.call("tokenize", json!({ "text": text }))?;
        Ok(r.tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serve canned `(status, body)` replies to successive requests.
    fn serve(replies: Vec<(u16, String)>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        format!("http://{addr}")
    }

    const DESCRIBE: &str = r#"{"name":"remote","num_layers":2,"hidden_dim":2,"supports_relevance":true,"supports_hidden":false}"#;

    #[test]
    fn describes_and_fetches_relevance() {
        let base = serve(vec![
            (200, DESCRIBE.into()),
            (200, r#"{"values":[[1.0,0.0],[0.5,0.5]]}"#.into()),
        ]);
        let b = HttpBackend::connect(&base, Duration::from_secs(5)).unwrap();
        assert_eq!(b.descriptor().num_layers, 2);
        let r = b
            .layer_relevance("p", RelevanceTarget::FirstAnswerToken)
            .unwrap();
        assert_eq!(r.values(), &[1.0, 0.0, 0.5, 0.5]);
        assert!(matches!(
            b.hidden_states("p"),
            Err(Error::Capability { .. })
        ));
    }

    #[test]
    fn maps_413_to_overflow() {
        let base = serve(vec![
            (200, DESCRIBE.into()),
            (413, r#"{"tokens":70,"limit":64}"#.into()),
        ]);
        let b = HttpBackend::connect(&base, Duration::from_secs(5)).unwrap();
        let err = b.generate("p", &GenerationParams::default()).unwrap_err();
        assert!(matches!(
            err,
            Error::ContextOverflow {
                tokens: 70,
                limit: 64
            }
        ));
    }
}
