//! Two-stage interpretation generation: caption the meme image, then ask the
//! same backend to interpret the meme given that caption and the overlay text.

mod backend;
mod cache;
mod prompt;

use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{
    BackendError, Completion, CompletionRequest, HttpBackend, LmmBackend, MockBackend, Stage,
};
pub use cache::{CachedCaption, InterpretationCache};
pub use prompt::{
    prompt_hash, DecodingConfig, DecodingStrategy, PromptBundle, PromptError, CAPTION_PROMPT,
    INTERPRETATION_TEMPLATE, LENGTH_CONTROL, SYSTEM_INSTRUCTION,
};

use crate::dataset::MemeInput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InterpretationQuality {
    #[default]
    Complete,
    /// Caption or interpretation stopped at the token cap.
    Truncated,
    /// Caption or interpretation came back empty.
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interpretation {
    pub meme_id: String,
    pub caption: String,
    pub text: String,
    pub backend_name: String,
    pub prompt_hash: String,
    #[serde(default)]
    pub quality: InterpretationQuality,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("cannot read image for meme {meme_id:?} at {path}: {source}")]
    Image {
        meme_id: String,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("backend failed for meme {meme_id:?} after {attempts} attempt(s): {source}")]
    Backend {
        meme_id: String,
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error("invalid decoding config: {0}")]
    Config(String),
}

impl GenerateError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GenerateError::Backend { source, .. } if source.is_retryable())
    }
}

/// Drives a backend over memes, consulting a cache first when one is set.
pub struct Interpreter<'a> {
    backend: &'a dyn LmmBackend,
    bundle: &'a PromptBundle,
    decoding: DecodingConfig,
    cache: Option<&'a InterpretationCache>,
    max_attempts: u32,
}

impl<'a> Interpreter<'a> {
    pub fn new(backend: &'a dyn LmmBackend, bundle: &'a PromptBundle, decoding: DecodingConfig) -> Self {
        Self {
            backend,
            bundle,
            decoding,
            cache: None,
            max_attempts: 3,
        }
    }

    pub fn with_cache(mut self, cache: &'a InterpretationCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_max_attempts(mut self, attempts: u32) -> Self {
        self.max_attempts = attempts.max(1);
        self
    }

    fn system(&self) -> Option<&str> {
        if self.backend.supports_system_instruction() {
            self.bundle.system_instruction()
        } else {
            None
        }
    }

    fn call(&self, meme_id: &str, request: &CompletionRequest<'_>) -> Result<Completion, GenerateError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.backend.complete(request) {
                Ok(c) => return Ok(c),
                Err(e) if e.is_retryable() && attempt < self.max_attempts => {
                    log::warn!("backend attempt {attempt} for {meme_id} failed: {e}");
                }
                Err(source) => {
                    return Err(GenerateError::Backend {
                        meme_id: meme_id.to_string(),
                        attempts: attempt,
                        source,
                    })
                }
            }
        }
    }

    pub fn generate(&self, meme: &MemeInput) -> Result<Interpretation, GenerateError> {
        self.decoding.validate().map_err(GenerateError::Config)?;
        let system = self.system();
        let mut image: Option<Vec<u8>> = None;
        let mut load_image = || -> Result<Vec<u8>, GenerateError> {
            if image.is_none() {
                image = Some(std::fs::read(&meme.image_ref).map_err(|source| GenerateError::Image {
                    meme_id: meme.id.clone(),
                    path: meme.image_ref.clone(),
                    source,
                })?);
            }
            Ok(image.clone().unwrap())
        };

        let caption_key = prompt_hash(system, self.bundle.caption_prompt(), &self.decoding);
        let caption = match self.cache.and_then(|c| c.get_caption(&meme.id, &caption_key)) {
            Some(hit) => hit,
            None => {
                let bytes = load_image()?;
                let out = self.call(
                    &meme.id,
                    &CompletionRequest {
                        stage: Stage::Caption,
                        system,
                        prompt: self.bundle.caption_prompt(),
                        image: &bytes,
                        decoding: &self.decoding,
                    },
                )?;
                let entry = CachedCaption {
                    meme_id: meme.id.clone(),
                    key: caption_key,
                    caption: out.text.trim().to_string(),
                    truncated: out.truncated,
                };
                if let Some(cache) = self.cache {
                    if let Err(e) = cache.put_caption(&entry) {
                        log::warn!("failed to cache caption for {}: {e}", meme.id);
                    }
                }
                entry
            }
        };

        let rendered = self
            .bundle
            .render_interpretation_prompt(&caption.caption, &meme.overlay_text);
        let hash = prompt_hash(system, &rendered, &self.decoding);
        if let Some(hit) = self.cache.and_then(|c| c.get(&meme.id, &hash)) {
            return Ok(hit);
        }

        let bytes = load_image()?;
        let out = self.call(
            &meme.id,
            &CompletionRequest {
                stage: Stage::Interpretation,
                system,
                prompt: &rendered,
                image: &bytes,
                decoding: &self.decoding,
            },
        )?;
        let quality = if out.text.trim().is_empty() || caption.caption.is_empty() {
            InterpretationQuality::Empty
        } else if out.truncated || caption.truncated {
            InterpretationQuality::Truncated
        } else {
            InterpretationQuality::Complete
        };
        let interpretation = Interpretation {
            meme_id: meme.id.clone(),
            caption: caption.caption,
            text: out.text.trim().to_string(),
            backend_name: self.backend.name().to_string(),
            prompt_hash: hash,
            quality,
            created_at: Utc::now(),
        };
        if let Some(cache) = self.cache {
            if let Err(e) = cache.put(&interpretation) {
                log::warn!("failed to cache interpretation for {}: {e}", meme.id);
            }
        }
        Ok(interpretation)
    }

    /// Generates for every meme with at most `in_flight` concurrent backend
    /// calls. Output order matches input order.
    pub fn generate_all(
        &self,
        memes: &[MemeInput],
        in_flight: usize,
    ) -> Vec<Result<Interpretation, GenerateError>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(in_flight.max(1))
            .build()
            .expect("thread pool");
        pool.install(|| {
            use rayon::prelude::*;
            memes.par_iter().map(|m| self.generate(m)).collect()
        })
    }
}

/// One-shot generation without a cache.
pub fn generate_interpretation(
    meme: &MemeInput,
    backend: &dyn LmmBackend,
    bundle: &PromptBundle,
    config: DecodingConfig,
) -> Result<Interpretation, GenerateError> {
    Interpreter::new(backend, bundle, config).generate(meme)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn meme(dir: &std::path::Path, id: &str, bytes: &[u8]) -> MemeInput {
        let path = dir.join(format!("{id}.png"));
        std::fs::write(&path, bytes).unwrap();
        MemeInput {
            id: id.into(),
            image_ref: path,
            overlay_text: format!("text of {id}"),
        }
    }

    struct Flaky {
        failures: AtomicUsize,
        empty: bool,
    }

    impl LmmBackend for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn supports_system_instruction(&self) -> bool {
            false
        }
        fn complete(&self, req: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
            assert!(req.system.is_none(), "system instruction must not be sent");
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(BackendError::Timeout);
            }
            Ok(Completion {
                text: if self.empty { "  ".into() } else { "ok".into() },
                truncated: false,
            })
        }
    }

    #[test]
    fn mock_generation_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let m = meme(dir.path(), "a", b"pixels");
        let backend = MockBackend::default();
        let bundle = PromptBundle::default();
        let a = generate_interpretation(&m, &backend, &bundle, DecodingConfig::default()).unwrap();
        let b = generate_interpretation(&m, &backend, &bundle, DecodingConfig::default()).unwrap();
        assert_eq!(a.caption, b.caption);
        assert_eq!(a.text, b.text);
        assert_eq!(a.prompt_hash, b.prompt_hash);
        assert!(a.caption.starts_with("CAPTION:"));
        assert_eq!(backend.calls(), 4);
        let rendered = bundle.render_interpretation_prompt(&a.caption, &m.overlay_text);
        assert_eq!(
            a.prompt_hash,
            prompt_hash(Some(SYSTEM_INSTRUCTION), &rendered, &DecodingConfig::default())
        );
    }

    #[test]
    fn cached_second_pass_makes_no_calls() {
        let dir = tempfile::tempdir().unwrap();
        let memes: Vec<_> = (0..6)
            .map(|i| meme(dir.path(), &format!("m{i}"), format!("img{i}").as_bytes()))
            .collect();
        let cache = InterpretationCache::open(&dir.path().join("cache"), "mock").unwrap();
        let backend = MockBackend::default();
        let bundle = PromptBundle::default();
        let interp = Interpreter::new(&backend, &bundle, DecodingConfig::default()).with_cache(&cache);
        let first: Vec<_> = interp.generate_all(&memes, 3).into_iter().map(Result::unwrap).collect();
        assert_eq!(backend.calls(), 12);
        let second: Vec<_> = interp.generate_all(&memes, 3).into_iter().map(Result::unwrap).collect();
        assert_eq!(backend.calls(), 12);
        assert_eq!(first, second);
    }

    #[test]
    fn changed_decoding_config_misses_cache() {
        let dir = tempfile::tempdir().unwrap();
        let m = meme(dir.path(), "a", b"pixels");
        let cache = InterpretationCache::open(&dir.path().join("cache"), "mock").unwrap();
        let backend = MockBackend::default();
        let bundle = PromptBundle::default();
        let full = Interpreter::new(&backend, &bundle, DecodingConfig::default())
            .with_cache(&cache)
            .generate(&m)
            .unwrap();
        let short_cfg = DecodingConfig {
            max_new_tokens: 128,
            ..DecodingConfig::default()
        };
        let short = Interpreter::new(&backend, &bundle, short_cfg)
            .with_cache(&cache)
            .generate(&m)
            .unwrap();
        assert_ne!(full.prompt_hash, short.prompt_hash);
        assert_eq!(backend.calls(), 4);
    }

    #[test]
    fn retries_then_reports_attempts() {
        let dir = tempfile::tempdir().unwrap();
        let m = meme(dir.path(), "a", b"pixels");
        let bundle = PromptBundle::default();
        let ok = Flaky { failures: AtomicUsize::new(2), empty: false };
        let out = Interpreter::new(&ok, &bundle, DecodingConfig::default())
            .with_max_attempts(3)
            .generate(&m)
            .unwrap();
        assert_eq!(out.text, "ok");

        let failing = Flaky { failures: AtomicUsize::new(10), empty: false };
        let err = Interpreter::new(&failing, &bundle, DecodingConfig::default())
            .with_max_attempts(3)
            .generate(&m)
            .unwrap_err();
        assert!(matches!(err, GenerateError::Backend { attempts: 3, .. }));
        assert!(err.is_retryable());
    }

    #[test]
    fn empty_output_is_flagged_not_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let m = meme(dir.path(), "a", b"pixels");
        let bundle = PromptBundle::default();
        let backend = Flaky { failures: AtomicUsize::new(0), empty: true };
        let out = generate_interpretation(&m, &backend, &bundle, DecodingConfig::default()).unwrap();
        assert_eq!(out.quality, InterpretationQuality::Empty);
        assert!(out.text.is_empty());
    }

    #[test]
    fn truncation_is_flagged_not_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let m = meme(dir.path(), "a", b"pixels");
        let cfg = DecodingConfig {
            max_new_tokens: 4,
            ..DecodingConfig::default()
        };
        let out = generate_interpretation(&m, &MockBackend::default(), &PromptBundle::default(), cfg)
            .unwrap();
        assert_eq!(out.quality, InterpretationQuality::Truncated);
        assert_eq!(out.text.split_whitespace().count(), 4);
    }

    #[test]
    fn missing_image_is_reported() {
        let m = MemeInput {
            id: "ghost".into(),
            image_ref: "/nonexistent/ghost.png".into(),
            overlay_text: String::new(),
        };
        let err = generate_interpretation(
            &m,
            &MockBackend::default(),
            &PromptBundle::default(),
            DecodingConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, GenerateError::Image { .. }));
    }
}
