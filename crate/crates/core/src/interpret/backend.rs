use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::prompt::DecodingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Caption,
    Interpretation,
}

#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub stage: Stage,
    pub system: Option<&'a str>,
    pub prompt: &'a str,
    pub image: &'a [u8],
    pub decoding: &'a DecodingConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    /// The backend stopped because it hit `max_new_tokens`.
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("invalid backend response: {0}")]
    InvalidResponse(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status >= 500 || *status == 429,
            BackendError::InvalidResponse(_) => false,
        }
    }
}

/// A large multimodal model reachable through one completion call.
pub trait LmmBackend: Send + Sync {
    fn name(&self) -> &str;
    fn supports_system_instruction(&self) -> bool;
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError>;
}

/// Deterministic stand-in backend. Captions are `CAPTION:` plus a digest of
/// the image bytes; interpretations are a fixed three-sentence paragraph
/// built from the quoted prompt fields and a digest of the whole request.
#[derive(Debug)]
pub struct MockBackend {
    name: String,
    supports_system: bool,
    calls: AtomicUsize,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new("mock", true)
    }
}

impl MockBackend {
    pub fn new(name: impl Into<String>, supports_system: bool) -> Self {
        Self {
            name: name.into(),
            supports_system,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn request_digest(request: &CompletionRequest<'_>) -> String {
        let mut h = Sha256::new();
        h.update(request.system.unwrap_or("").as_bytes());
        h.update([0]);
        h.update(request.prompt.as_bytes());
        h.update([0]);
        h.update(request.image);
        h.update(
            format!(
                "{}:{}",
                request.decoding.no_repeat_ngram_size, request.decoding.max_new_tokens
            )
            .as_bytes(),
        );
        hex::encode(&h.finalize()[..8])
    }
}

fn quoted_segments(prompt: &str) -> Vec<&str> {
    let mut parts = prompt.split('"');
    let mut out = Vec::new();
    parts.next();
    while let Some(inner) = parts.next() {
        out.push(inner);
        if parts.next().is_none() {
            break;
        }
    }
    out
}

fn cap_tokens(text: String, max_new_tokens: u32) -> Completion {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= max_new_tokens as usize {
        return Completion {
            text,
            truncated: false,
        };
    }
    Completion {
        text: words[..max_new_tokens as usize].join(" "),
        truncated: true,
    }
}

impl LmmBackend for MockBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn supports_system_instruction(&self) -> bool {
        self.supports_system
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = match request.stage {
            Stage::Caption => {
                let digest = Sha256::digest(request.image);
                format!("CAPTION:{}", hex::encode(&digest[..8]))
            }
            Stage::Interpretation => {
                let quoted = quoted_segments(request.prompt);
                let caption = quoted.first().copied().unwrap_or("");
                let overlay = quoted.get(1).copied().unwrap_or("");
                format!(
                    "The meme shows {caption} together with the words {overlay}. \
                     Read together, the image and text convey message {digest}. \
                     Any bias depends on whether a group is targeted.",
                    digest = Self::request_digest(request),
                )
            }
        };
        Ok(cap_tokens(text, request.decoding.max_new_tokens))
    }
}

#[derive(Debug, Serialize)]
struct WireDecoding {
    strategy: &'static str,
    no_repeat_ngram_size: u32,
    max_new_tokens: u32,
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none")]
    system: Option<&'a str>,
    prompt: &'a str,
    image_base64: String,
    decoding: WireDecoding,
}

/// Client for an external inference server. One POST per completion:
/// request `{stage, system?, prompt, image_base64, decoding}`,
/// response `{text, truncated?}`.
pub struct HttpBackend {
    name: String,
    endpoint: String,
    supports_system: bool,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(
        name: impl Into<String>,
        endpoint: impl Into<String>,
        supports_system: bool,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            name: name.into(),
            endpoint: endpoint.into(),
            supports_system,
            client,
        })
    }
}

impl LmmBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn supports_system_instruction(&self) -> bool {
        self.supports_system
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
        let body = WireRequest {
            stage: request.stage,
            system: request.system,
            prompt: request.prompt,
            image_base64: base64::engine::general_purpose::STANDARD.encode(request.image),
            decoding: WireDecoding {
                strategy: "greedy",
                no_repeat_ngram_size: request.decoding.no_repeat_ngram_size,
                max_new_tokens: request.decoding.max_new_tokens,
            },
        };
        let response = self
            .client
            .post(&self.endpoint)
            .json(&body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    BackendError::Timeout
                } else {
                    BackendError::Transport(e.to_string())
                }
            })?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(BackendError::Status {
                status: status.as_u16(),
                body,
            });
        }
        response
            .json::<Completion>()
            .map_err(|e| BackendError::InvalidResponse(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_caption_depends_only_on_image() {
        let backend = MockBackend::default();
        let cfg = DecodingConfig::default();
        let req = |prompt, image| CompletionRequest {
            stage: Stage::Caption,
            system: None,
            prompt,
            image,
            decoding: &cfg,
        };
        let a = backend.complete(&req("x", b"img")).unwrap();
        let b = backend.complete(&req("y", b"img")).unwrap();
        let c = backend.complete(&req("x", b"other")).unwrap();
        assert!(a.text.starts_with("CAPTION:"));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(backend.calls(), 3);
    }

    #[test]
    fn mock_respects_token_cap() {
        let backend = MockBackend::default();
        let cfg = DecodingConfig {
            max_new_tokens: 5,
            ..DecodingConfig::default()
        };
        let out = backend
            .complete(&CompletionRequest {
                stage: Stage::Interpretation,
                system: None,
                prompt: "caption is \"a dog\" and text is \"hello there\"",
                image: b"i",
                decoding: &cfg,
            })
            .unwrap();
        assert!(out.truncated);
        assert_eq!(out.text.split_whitespace().count(), 5);
    }

    #[test]
    fn quoted_segments_extracts_pairs() {
        assert_eq!(quoted_segments("a \"b\" c \"d e\" f"), vec!["b", "d e"]);
        assert!(quoted_segments("none").is_empty());
    }

    #[test]
    fn retry_classification() {
        assert!(BackendError::Timeout.is_retryable());
        assert!(BackendError::Status { status: 503, body: String::new() }.is_retryable());
        assert!(!BackendError::Status { status: 400, body: String::new() }.is_retryable());
        assert!(!BackendError::InvalidResponse("x".into()).is_retryable());
    }
}
