//! Meme in, interpretation plus classification out.

use std::sync::Arc;

use thiserror::Error;

use crate::dataset::MemeInput;
use crate::encoding::preprocess_image;
use crate::explainer::{explain, ExplainError, ExplainOptions, ExplanationReport};
use crate::fusion::ClassificationResult;
use crate::interpret::{
    DecodingConfig, GenerateError, Interpretation, InterpretationCache, Interpreter, LmmBackend, PromptBundle,
};
use crate::model::{MemeClassifier, ModelError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
}

impl PipelineError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, PipelineError::Generate(e) if e.is_retryable())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub interpretation: Interpretation,
    pub classification: ClassificationResult,
}

pub struct Pipeline {
    backend: Arc<dyn LmmBackend>,
    bundle: PromptBundle,
    decoding: DecodingConfig,
    cache: Option<InterpretationCache>,
    model: MemeClassifier,
    explain_options: ExplainOptions,
}

impl Pipeline {
    pub fn new(backend: Arc<dyn LmmBackend>, model: MemeClassifier) -> Self {
        Self {
            backend,
            bundle: PromptBundle::default(),
            decoding: DecodingConfig::default(),
            cache: None,
            model,
            explain_options: ExplainOptions::default(),
        }
    }

    pub fn with_cache(mut self, cache: InterpretationCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_prompts(mut self, bundle: PromptBundle, decoding: DecodingConfig) -> Self {
        self.bundle = bundle;
        self.decoding = decoding;
        self
    }

    pub fn with_explain_options(mut self, options: ExplainOptions) -> Self {
        self.explain_options = options;
        self
    }

    pub fn model(&self) -> &MemeClassifier {
        &self.model
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// Fails unless the meme image can be read and decoded.
    pub fn validate_image(&self, meme: &MemeInput) -> Result<(), ModelError> {
        let bytes = std::fs::read(&meme.image_ref).map_err(|source| ModelError::Image {
            path: meme.image_ref.clone(),
            source,
        })?;
        preprocess_image(&self.model.vla.config, &meme.id, &bytes)?;
        Ok(())
    }

    pub fn interpret(&self, meme: &MemeInput) -> Result<Interpretation, GenerateError> {
        let mut interpreter = Interpreter::new(self.backend.as_ref(), &self.bundle, self.decoding);
        if let Some(cache) = &self.cache {
            interpreter = interpreter.with_cache(cache);
        }
        interpreter.generate(meme)
    }

    pub fn classify(&self, meme: &MemeInput, interpretation: &Interpretation) -> Result<ClassificationResult, ModelError> {
        let sample = self.model.prepare(meme, Some(&interpretation.text))?;
        self.model.classify(&sample)
    }

    pub fn run(&self, meme: &MemeInput) -> Result<PipelineOutput, PipelineError> {
        let interpretation = self.interpret(meme)?;
        let classification = self.classify(meme, &interpretation)?;
        Ok(PipelineOutput {
            interpretation,
            classification,
        })
    }

    /// Word attribution for the interpretation, with the meme side fixed.
    pub fn explain(&self, meme: &MemeInput, interpretation: &Interpretation) -> Result<ExplanationReport, PipelineError> {
        let sample = self.model.prepare(meme, Some(&interpretation.text))?;
        let predict = self.model.text_predictor(&sample.image, &meme.overlay_text);
        Ok(explain(&predict, interpretation, &self.explain_options)?)
    }
}
