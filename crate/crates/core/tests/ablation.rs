use memeguard_core::evaluation::{run_ablation, AblationSpec, EvalSummary};
use memeguard_core::model::AblationMode;
use memeguard_core::synthetic::{signal_corpus, Signal};
use memeguard_core::training::{TrainConfig, TrainingData};

fn desk_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

fn run(signal: Signal, mode: AblationMode) -> EvalSummary {
    let dir = tempfile::tempdir().unwrap();
    let corpus = signal_corpus(dir.path(), signal, 200, 200, 11).unwrap();
    let train = TrainingData { records: &corpus.train, interpretations: &corpus.interpretations };
    let test = TrainingData { records: &corpus.test, interpretations: &corpus.interpretations };
    let spec = AblationSpec { mode, backend_name: "mock".into() };
    run_ablation(&spec, &train, &test, &desk_config()).unwrap()
}

#[test]
fn interpretation_signal_needs_the_text_branch() {
    assert!(run(Signal::Interpretation, AblationMode::Mie).acc_mean >= 0.95);
    assert!(run(Signal::Interpretation, AblationMode::Both).acc_mean >= 0.95);
    assert!(run(Signal::Interpretation, AblationMode::Vla).acc_mean <= 0.60);
}

#[test]
fn image_signal_needs_the_meme_branch() {
    assert!(run(Signal::Image, AblationMode::Vla).acc_mean >= 0.95);
    assert!(run(Signal::Image, AblationMode::Both).acc_mean >= 0.95);
    assert!(run(Signal::Image, AblationMode::Mie).acc_mean <= 0.60);
}

#[test]
fn summary_has_one_entry_per_seed() {
    let s = run(Signal::Image, AblationMode::Concat);
    assert_eq!(s.per_seed.len(), 5);
    assert_eq!(s.model_tag, "CONCAT/mock");
}
