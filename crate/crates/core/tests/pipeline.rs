use std::sync::Arc;

use memeguard_core::dataset::MemeInput;
use memeguard_core::encoding::{TextEncoderConfig, VisionLanguageEncoderConfig};
use memeguard_core::fusion::Normalization;
use memeguard_core::interpret::{InterpretationCache, MockBackend};
use memeguard_core::model::{AblationMode, MemeClassifier};
use memeguard_core::pipeline::Pipeline;
use memeguard_core::synthetic::{signal_corpus, Signal};

fn model() -> MemeClassifier {
    MemeClassifier::new(
        AblationMode::Both,
        VisionLanguageEncoderConfig::tiny(8, 1),
        TextEncoderConfig::tiny(8, 2),
        Normalization::Softmax,
        3,
    )
    .unwrap()
}

#[test]
fn second_run_is_identical_and_fully_cached() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = signal_corpus(&dir.path().join("data"), Signal::Image, 12, 0, 5).unwrap();
    let memes: Vec<MemeInput> = corpus.train.iter().map(MemeInput::from).collect();
    let backend = Arc::new(MockBackend::default());

    let run = || {
        let cache = InterpretationCache::open(&dir.path().join("cache"), "mock").unwrap();
        let pipeline = Pipeline::new(backend.clone(), model()).with_cache(cache);
        memes.iter().map(|m| pipeline.run(m).unwrap()).collect::<Vec<_>>()
    };

    let first = run();
    let calls_after_first = backend.calls();
    assert_eq!(calls_after_first, 2 * memes.len());
    let second = run();
    assert_eq!(backend.calls(), calls_after_first);

    for (a, b) in first.iter().zip(&second) {
        assert_eq!(
            serde_json::to_vec(&a.interpretation).unwrap(),
            serde_json::to_vec(&b.interpretation).unwrap()
        );
        assert_eq!(a.classification.prob_hateful.to_bits(), b.classification.prob_hateful.to_bits());
    }
}

#[test]
fn explanation_uses_interpretation_words() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = signal_corpus(dir.path(), Signal::Interpretation, 2, 0, 5).unwrap();
    let meme = MemeInput::from(&corpus.train[0]);
    let pipeline = Pipeline::new(Arc::new(MockBackend::default()), model());
    let out = pipeline.run(&meme).unwrap();
    let report = pipeline.explain(&meme, &out.interpretation).unwrap();
    let words: Vec<&str> = out.interpretation.text.split_whitespace().collect();
    assert_eq!(report.token_weights.len(), words.len());
    assert!(report.token_weights.iter().all(|t| words[t.position] == t.word));
    assert!((report.base_prediction - out.classification.prob_hateful).abs() < 1e-12);
}
