//! Fine-tuning loop: Adam, per-epoch shuffling, a stratified validation
//! slice, early stopping on mean(accuracy, AUROC), and multi-seed sweeps.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Label, MemeInput, MemeRecord};
use crate::encoding::{Parameters, TextEncoderConfig, VisionLanguageEncoderConfig};
use crate::evaluation::{accuracy, auroc};
use crate::fusion::{loss_grad, loss_with, FusionClassifier, Normalization};
use crate::model::{AblationMode, Checkpoint, MemeClassifier, ModelError, PreparedSample};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("missing interpretations for {} meme(s): {}", .0.len(), .0.join(", "))]
    MissingInterpretations(Vec<String>),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("seed {seed} failed after {} completed run(s): {source}", .completed.len())]
    Sweep {
        seed: u64,
        completed: Vec<TrainReport>,
        #[source]
        source: Box<TrainError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub seeds: Vec<u64>,
    pub freeze_encoders: bool,
    pub ablation_mode: AblationMode,
    pub normalization: Normalization,
    pub validation_fraction: f64,
    pub vla_encoder: String,
    pub mie_encoder: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            adam: AdamConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            freeze_encoders: false,
            ablation_mode: AblationMode::Both,
            normalization: Normalization::Softmax,
            validation_fraction: 0.1,
            vla_encoder: "tiny-vl-h16".into(),
            mie_encoder: "tiny-text-h16".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return fail("max_epochs and patience must be positive");
        }
        if self.patience >= self.max_epochs {
            return fail("patience must be smaller than max_epochs");
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required");
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return fail("seeds must be distinct");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail("validation_fraction must be in [0, 1)");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn encoder_configs(
        &self,
        seed: u64,
    ) -> Result<(VisionLanguageEncoderConfig, TextEncoderConfig), TrainError> {
        let vla = VisionLanguageEncoderConfig::named(&self.vla_encoder, seed)
            .map_err(|e| TrainError::Model(e.into()))?;
        let mie = TextEncoderConfig::named(&self.mie_encoder, seed.wrapping_add(1))
            .map_err(|e| TrainError::Model(e.into()))?;
        Ok((vla, mie))
    }
}

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    config: AdamConfig,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, config: AdamConfig) -> Self {
        Self {
            lr,
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len());
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (t, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[t], &mut self.second[t]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + epsilon);
            }
        }
    }
}

/// Patience-based stopping on a metric where larger is better.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    epoch: usize,
    best: Option<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            epoch: 0,
            best: None,
        }
    }

    /// Records the next epoch's metric (epochs are 1-based).
    pub fn observe(&mut self, value: f64) -> StopSignal {
        self.epoch += 1;
        match self.best {
            Some((_, best)) if value <= best || value.is_nan() => {
                if self.epoch - self.best_epoch().unwrap() >= self.patience {
                    StopSignal::Stop
                } else {
                    StopSignal::Continue
                }
            }
            _ => {
                self.best = Some((self.epoch, value));
                StopSignal::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_value(&self) -> Option<f64> {
        self.best.map(|(_, v)| v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub best_epoch: usize,
    pub last_epoch: usize,
    pub stopped_early: bool,
}

/// Runs epochs until patience runs out or `max_epochs` is reached.
/// `epoch_fn` gets the 1-based epoch and returns the selection metric;
/// `on_improve` fires whenever that epoch becomes the new best.
pub fn run_schedule<E>(
    max_epochs: usize,
    patience: usize,
    mut epoch_fn: impl FnMut(usize) -> Result<f64, E>,
    mut on_improve: impl FnMut(usize),
) -> Result<Schedule, E> {
    let mut stopper = EarlyStopping::new(patience);
    for epoch in 1..=max_epochs {
        let value = epoch_fn(epoch)?;
        match stopper.observe(value) {
            StopSignal::Improved => on_improve(epoch),
            StopSignal::Continue => {}
            StopSignal::Stop => {
                return Ok(Schedule {
                    best_epoch: stopper.best_epoch().unwrap(),
                    last_epoch: epoch,
                    stopped_early: epoch < max_epochs,
                })
            }
        }
    }
    Ok(Schedule {
        best_epoch: stopper.best_epoch().unwrap_or(0),
        last_epoch: max_epochs,
        stopped_early: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_auroc: Option<f64>,
    pub selection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub mode: AblationMode,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub best_checkpoint: Option<PathBuf>,
    pub config_hash: String,
}

impl TrainReport {
    pub fn best(&self) -> Option<&EpochMetrics> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

/// Mean of accuracy and AUROC; accuracy alone when AUROC is undefined.
pub fn selection_metric(acc: f64, auc: Option<f64>) -> f64 {
    match auc {
        Some(a) => (acc + a) / 2.0,
        None => acc,
    }
}

/// Something the generic loop can optimize.
pub trait Learner: Clone {
    type Sample;

    fn logits(&self, sample: &Self::Sample) -> Result<[f64; 2], TrainError>;
    /// Adds this sample's gradient into `grads`; returns the loss.
    fn accumulate(&self, sample: &Self::Sample, label: Label, grads: &mut Self) -> Result<f64, TrainError>;
    fn zeroed_like(&self) -> Self;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;
    fn params(&self) -> Vec<&[f64]>;
    fn prob_hateful(&self, logits: [f64; 2]) -> f64;
}

pub struct FullModel {
    pub model: MemeClassifier,
    pub train_encoders: bool,
}

impl Clone for FullModel {
    fn clone(&self) -> Self {
        Self {
            model: self.model.clone(),
            train_encoders: self.train_encoders,
        }
    }
}

impl Learner for FullModel {
    type Sample = PreparedSample;

    fn logits(&self, sample: &PreparedSample) -> Result<[f64; 2], TrainError> {
        Ok(self.model.forward(sample)?.logits)
    }

    fn accumulate(&self, sample: &PreparedSample, label: Label, grads: &mut Self) -> Result<f64, TrainError> {
        let pass = self.model.forward(sample)?;
        Ok(self.model.backward(&pass, label, &mut grads.model, self.train_encoders))
    }

    fn zeroed_like(&self) -> Self {
        let mut g = self.clone();
        g.model.zero();
        g
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.model.trainable_mut(self.train_encoders)
    }

    fn params(&self) -> Vec<&[f64]> {
        self.model.trainable(self.train_encoders)
    }

    fn prob_hateful(&self, logits: [f64; 2]) -> f64 {
        self.model.head.prob_hateful(logits)
    }
}

impl Learner for FusionClassifier {
    type Sample = Vec<f64>;

    fn logits(&self, sample: &Vec<f64>) -> Result<[f64; 2], TrainError> {
        Ok(FusionClassifier::logits(self, sample))
    }

    fn accumulate(&self, sample: &Vec<f64>, label: Label, grads: &mut Self) -> Result<f64, TrainError> {
        let logits = FusionClassifier::logits(self, sample);
        self.backward(sample, loss_grad(self.normalization, logits, label), grads);
        Ok(loss_with(self.normalization, logits, label))
    }

    fn zeroed_like(&self) -> Self {
        let mut g = self.clone();
        Parameters::zero(&mut g);
        g
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.tensors_mut()
    }

    fn params(&self) -> Vec<&[f64]> {
        self.tensors()
    }

    fn prob_hateful(&self, logits: [f64; 2]) -> f64 {
        FusionClassifier::prob_hateful(self, logits)
    }
}

/// Predicted labels and hateful probabilities for a batch of samples.
pub fn predict<L: Learner>(learner: &L, samples: &[L::Sample]) -> Result<(Vec<Label>, Vec<f64>), TrainError> {
    let mut labels = Vec::with_capacity(samples.len());
    let mut probs = Vec::with_capacity(samples.len());
    for s in samples {
        let logits = learner.logits(s)?;
        labels.push(if logits[1] > logits[0] { Label::Hateful } else { Label::NonHateful });
        probs.push(learner.prob_hateful(logits));
    }
    Ok((labels, probs))
}

fn predict_pairs<L: Learner>(learner: &L, pairs: &[(L::Sample, Label)]) -> Result<(Vec<Label>, Vec<f64>), TrainError> {
    let mut labels = Vec::with_capacity(pairs.len());
    let mut probs = Vec::with_capacity(pairs.len());
    for (s, _) in pairs {
        let logits = learner.logits(s)?;
        labels.push(if logits[1] > logits[0] { Label::Hateful } else { Label::NonHateful });
        probs.push(learner.prob_hateful(logits));
    }
    Ok((labels, probs))
}

// Keeps the split stream independent of the init/shuffle stream.
const SPLIT_SALT: u64 = 0x5117_5eed;

/// Indices of a stratified validation slice: `round(fraction · n_class)`
/// per class, at least one when the class has two or more examples.
pub fn stratified_split(labels: &[Label], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    if fraction <= 0.0 {
        return ((0..labels.len()).collect(), Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(*l).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let mut k = (fraction * idx.len() as f64).round() as usize;
        if k == 0 && idx.len() >= 2 {
            k = 1;
        }
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

pub struct FitOutcome<L> {
    pub best: L,
    pub epochs: Vec<EpochMetrics>,
    pub schedule: Schedule,
}

/// Generic optimization loop shared by full-model and head-only training.
pub fn fit<L: Learner>(
    initial: L,
    train: &[(L::Sample, Label)],
    val: &[(L::Sample, Label)],
    config: &TrainConfig,
    seed: u64,
) -> Result<FitOutcome<L>, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut model = initial;
    let mut best = model.clone();
    let mut adam = Adam::new(config.learning_rate, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs: Vec<EpochMetrics> = Vec::new();
    let mut best_value = f64::NEG_INFINITY;

    let schedule = run_schedule(
        config.max_epochs,
        config.patience,
        |epoch| -> Result<f64, TrainError> {
            order.shuffle(&mut rng);
            let mut total_loss = 0.0;
            for batch in order.chunks(config.batch_size) {
                let mut grads = model.zeroed_like();
                for &i in batch {
                    let (sample, label) = &train[i];
                    total_loss += model.accumulate(sample, *label, &mut grads)?;
                }
                let scale = 1.0 / batch.len() as f64;
                let grad_tensors: Vec<Vec<f64>> = grads
                    .params()
                    .iter()
                    .map(|t| t.iter().map(|g| g * scale).collect())
                    .collect();
                adam.step(model.params_mut(), grad_tensors.iter().map(Vec::as_slice).collect());
            }
            let train_loss = total_loss / train.len() as f64;

            // With no validation slice, select on the training set itself.
            let eval = if val.is_empty() { train } else { val };
            let (preds, probs) = predict_pairs(&model, eval)?;
            let eval_labels: Vec<Label> = eval.iter().map(|(_, l)| *l).collect();
            let val_accuracy = accuracy(&preds, &eval_labels).unwrap_or(0.0);
            let val_auroc = auroc(&probs, &eval_labels).ok();
            let selection = selection_metric(val_accuracy, val_auroc);
            epochs.push(EpochMetrics {
                epoch,
                train_loss,
                val_accuracy,
                val_auroc,
                selection,
            });
            if epochs.len() == 1 || selection > best_value {
                best_value = selection;
                best = model.clone();
            }
            Ok(selection)
        },
        |_| {},
    )?;
    Ok(FitOutcome { best, epochs, schedule })
}

/// Training inputs: records plus an interpretation text per meme id.
pub struct TrainingData<'a> {
    pub records: &'a [MemeRecord],
    pub interpretations: &'a HashMap<String, String>,
}

fn check_interpretations(data: &TrainingData<'_>, mode: AblationMode) -> Result<(), TrainError> {
    if !mode.needs_interpretation() {
        return Ok(());
    }
    let missing: Vec<String> = data
        .records
        .iter()
        .filter(|r| !data.interpretations.contains_key(&r.id))
        .map(|r| r.id.clone())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(TrainError::MissingInterpretations(missing))
    }
}

pub fn prepare_samples(
    model: &MemeClassifier,
    records: &[MemeRecord],
    interpretations: &HashMap<String, String>,
) -> Result<Vec<(PreparedSample, Label)>, TrainError> {
    use rayon::prelude::*;
    records
        .par_iter()
        .map(|r| {
            let text = interpretations.get(&r.id).map(String::as_str);
            let text = if model.mode.needs_interpretation() { text } else { None };
            Ok((model.prepare(&MemeInput::from(r), text)?, r.label))
        })
        .collect()
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: MemeClassifier,
}

/// Trains one seed. When `out_dir` is set the best checkpoint and the report
/// are written under `out_dir/seed-<seed>/`.
pub fn train(
    data: &TrainingData<'_>,
    config: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    check_interpretations(data, config.ablation_mode)?;
    let (vla_cfg, mie_cfg) = config.encoder_configs(seed)?;
    let model = MemeClassifier::new(config.ablation_mode, vla_cfg, mie_cfg, config.normalization, seed)?;

    let samples = prepare_samples(&model, data.records, data.interpretations)?;
    let labels: Vec<Label> = samples.iter().map(|(_, l)| *l).collect();
    let (train_idx, val_idx) = stratified_split(&labels, config.validation_fraction, seed);
    let mut slots: Vec<Option<(PreparedSample, Label)>> = samples.into_iter().map(Some).collect();
    let train_set: Vec<_> = train_idx.iter().map(|&i| slots[i].take().unwrap()).collect();
    let val_set: Vec<_> = val_idx.iter().map(|&i| slots[i].take().unwrap()).collect();

    let learner = FullModel {
        model,
        train_encoders: !config.freeze_encoders,
    };
    let fit = fit(learner, &train_set, &val_set, config, seed)?;

    let config_hash = config.hash();
    let best_checkpoint = match out_dir {
        Some(dir) => {
            let seed_dir = dir.join(format!("seed-{seed}"));
            std::fs::create_dir_all(&seed_dir)?;
            let path = seed_dir.join("best.ckpt");
            Checkpoint {
                model: fit.best.model.clone(),
                train_config_hash: config_hash.clone(),
            }
            .save(&path)?;
            Some(path)
        }
        None => None,
    };
    let report = TrainReport {
        seed,
        mode: config.ablation_mode,
        epochs: fit.epochs,
        best_epoch: fit.schedule.best_epoch,
        stopped_early: fit.schedule.stopped_early,
        best_checkpoint,
        config_hash,
    };
    if let Some(dir) = out_dir {
        let path = dir.join(format!("seed-{seed}")).join("report.json");
        std::fs::write(path, serde_json::to_vec_pretty(&report).expect("report serializes"))?;
    }
    Ok(TrainOutcome {
        report,
        model: fit.best.model,
    })
}

/// One training run per configured seed, in order. A failing seed aborts the
/// sweep; reports of the seeds that finished are kept in the error.
pub fn seed_sweep(
    data: &TrainingData<'_>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<TrainOutcome>, TrainError> {
    config.validate()?;
    let mut done: Vec<TrainOutcome> = Vec::new();
    for &seed in &config.seeds {
        match train(data, config, seed, out_dir) {
            Ok(outcome) => done.push(outcome),
            Err(source) => {
                return Err(TrainError::Sweep {
                    seed,
                    completed: done.into_iter().map(|o| o.report).collect(),
                    source: Box::new(source),
                })
            }
        }
    }
    Ok(done)
}

/// Head-only training on precomputed feature vectors (frozen encoders).
pub fn train_head(
    features: &[Vec<f64>],
    labels: &[Label],
    config: &TrainConfig,
    seed: u64,
) -> Result<(FusionClassifier, TrainReport), TrainError> {
    config.validate()?;
    let dim = features.first().map(Vec::len).ok_or(TrainError::EmptyTrainingSet)?;
    let (train_idx, val_idx) = stratified_split(labels, config.validation_fraction, seed);
    let pick = |idx: &[usize]| -> Vec<(Vec<f64>, Label)> {
        idx.iter().map(|&i| (features[i].clone(), labels[i])).collect()
    };
    let head = FusionClassifier::seeded(dim, 0, config.normalization, seed);
    let fit = fit(head, &pick(&train_idx), &pick(&val_idx), config, seed)?;
    let report = TrainReport {
        seed,
        mode: config.ablation_mode,
        epochs: fit.epochs,
        best_epoch: fit.schedule.best_epoch,
        stopped_early: fit.schedule.stopped_early,
        best_checkpoint: None,
        config_hash: config.hash(),
    };
    Ok((fit.best, report))
}
