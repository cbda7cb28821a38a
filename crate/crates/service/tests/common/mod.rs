#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Arc;

use chrono::{TimeZone, Utc};
use memeguard_core::dataset::MemeInput;
use memeguard_core::encoding::{TextEncoderConfig, VisionLanguageEncoderConfig};
use memeguard_core::explainer::ExplainOptions;
use memeguard_core::fusion::Normalization;
use memeguard_core::interpret::{BackendError, Completion, CompletionRequest, LmmBackend, MockBackend};
use memeguard_core::model::{AblationMode, MemeClassifier};
use memeguard_core::pipeline::Pipeline;
use memeguard_core::synthetic::{signal_corpus, Signal};
use memeguard_service::{Durability, EventStore, ManualClock, ModerationService, ServiceConfig};

pub fn model() -> MemeClassifier {
    MemeClassifier::new(
        AblationMode::Both,
        VisionLanguageEncoderConfig::tiny(8, 1),
        TextEncoderConfig::tiny(8, 2),
        Normalization::Softmax,
        3,
    )
    .unwrap()
}

pub fn pipeline(backend: Arc<dyn LmmBackend>) -> Arc<Pipeline> {
    Arc::new(
        Pipeline::new(backend, model()).with_explain_options(ExplainOptions {
            n_samples: 60,
            ..ExplainOptions::default()
        }),
    )
}

pub fn memes(dir: &Path, n: usize) -> Vec<MemeInput> {
    let corpus = signal_corpus(dir, Signal::Image, n, 0, 8).unwrap();
    corpus.train.iter().map(MemeInput::from).collect()
}

pub fn clock() -> ManualClock {
    ManualClock::new(Utc.with_ymd_and_hms(2026, 1, 5, 9, 0, 0).unwrap())
}

pub fn open(log_dir: &Path, pipeline: Arc<Pipeline>, clock: &ManualClock, config: ServiceConfig) -> ModerationService {
    let store = EventStore::open(log_dir, Durability::Flush).unwrap();
    ModerationService::new(store, pipeline, Arc::new(clock.clone()), config)
}

/// Fails every call until `healthy` is set.
pub struct FlakyBackend {
    pub inner: MockBackend,
    pub healthy: std::sync::atomic::AtomicBool,
    pub failures: AtomicUsize,
}

impl FlakyBackend {
    pub fn new() -> Self {
        Self {
            inner: MockBackend::default(),
            healthy: false.into(),
            failures: AtomicUsize::new(0),
        }
    }
}

impl LmmBackend for FlakyBackend {
    fn name(&self) -> &str {
        "flaky"
    }

    fn supports_system_instruction(&self) -> bool {
        true
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
        if self.healthy.load(AtomicOrdering::SeqCst) {
            self.inner.complete(request)
        } else {
            self.failures.fetch_add(1, AtomicOrdering::SeqCst);
            Err(BackendError::Timeout)
        }
    }
}
