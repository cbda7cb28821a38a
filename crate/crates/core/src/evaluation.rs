//! Accuracy, AUROC, seed aggregation and result tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetKind, Label, MemeRecord};
use crate::model::{AblationMode, MemeClassifier};
use crate::training::{predict, prepare_samples, seed_sweep, TrainConfig, TrainError, TrainingData};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no examples")]
    Empty,
    #[error("AUROC undefined: labels contain a single class")]
    SingleClass,
    #[error("need at least two seeds to aggregate, got {0}")]
    TooFewSeeds(usize),
}

pub fn accuracy(predictions: &[Label], labels: &[Label]) -> Result<f64, MetricError> {
    if predictions.len() != labels.len() {
        return Err(MetricError::LengthMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Area under the ROC curve as the Mann–Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
/// Sort-based, O(n log n).
pub fn auroc(scores: &[f64], labels: &[Label]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|l| **l == Label::Hateful).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Walk tie groups in ascending score order; each positive earns one
    // credit per strictly lower negative and a half per tied negative.
    let mut credit = 0.0;
    let mut negatives_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            match labels[order[j]] {
                Label::Hateful => pos += 1,
                Label::NonHateful => neg += 1,
            }
            j += 1;
        }
        credit += pos as f64 * (negatives_below as f64 + 0.5 * neg as f64);
        negatives_below += neg;
        i = j;
    }
    Ok(credit / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub auroc: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub dataset: Option<DatasetKind>,
    pub model_tag: String,
    pub auroc_mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub auroc_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub per_seed: Vec<SeedResult>,
}

/// Mean and sample (n − 1) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate_seeds(
    dataset: Option<DatasetKind>,
    model_tag: impl Into<String>,
    per_seed: Vec<SeedResult>,
) -> Result<EvalSummary, MetricError> {
    if per_seed.len() < 2 {
        return Err(MetricError::TooFewSeeds(per_seed.len()));
    }
    let aurocs: Vec<f64> = per_seed.iter().map(|r| r.auroc).collect();
    let accs: Vec<f64> = per_seed.iter().map(|r| r.accuracy).collect();
    let (auroc_mean, auroc_std) = mean_std(&aurocs);
    let (acc_mean, acc_std) = mean_std(&accs);
    Ok(EvalSummary {
        dataset,
        model_tag: model_tag.into(),
        auroc_mean,
        auroc_std,
        acc_mean,
        acc_std,
        per_seed,
    })
}

/// `81.50±1.11`: percentage points, two decimals.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{:.2}±{:.2}", mean * 100.0, std * 100.0)
}

/// Aligned text table with one row per summary.
pub fn render_table(summaries: &[EvalSummary]) -> String {
    let rows: Vec<[String; 4]> = summaries
        .iter()
        .map(|s| {
            [
                s.model_tag.clone(),
                s.dataset.map(|d| d.to_string()).unwrap_or_else(|| "-".into()),
                format_cell(s.auroc_mean, s.auroc_std),
                format_cell(s.acc_mean, s.acc_std),
            ]
        })
        .collect();
    let header = ["Model", "Dataset", "AUROC", "Acc."];
    let mut widths = header.map(|h| h.chars().count());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: [&str; 4]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&mut out, header);
    let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    let _ = writeln!(out, "{}", "-".repeat(total));
    for row in &rows {
        line(&mut out, [&row[0], &row[1], &row[2], &row[3]]);
    }
    out
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// One cell of the ablation matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub mode: AblationMode,
    /// LMM that produced the interpretations.
    pub backend_name: String,
}

impl AblationSpec {
    pub fn tag(&self) -> String {
        format!("{}/{}", self.mode, self.backend_name)
    }
}

/// Test-set AUROC and accuracy of a trained model.
pub fn evaluate_model(
    model: &MemeClassifier,
    records: &[MemeRecord],
    interpretations: &std::collections::HashMap<String, String>,
) -> Result<(f64, f64), EvalError> {
    let samples = prepare_samples(model, records, interpretations)?;
    let (xs, labels): (Vec<_>, Vec<Label>) = samples.into_iter().unzip();
    let learner = crate::training::FullModel {
        model: model.clone(),
        train_encoders: false,
    };
    let (preds, probs) = predict(&learner, &xs)?;
    Ok((auroc(&probs, &labels)?, accuracy(&preds, &labels)?))
}

/// Trains `spec.mode` once per configured seed and scores each run on `test`.
pub fn run_ablation(
    spec: &AblationSpec,
    train: &TrainingData<'_>,
    test: &TrainingData<'_>,
    config: &TrainConfig,
) -> Result<EvalSummary, EvalError> {
    let config = TrainConfig {
        ablation_mode: spec.mode,
        ..config.clone()
    };
    let runs = seed_sweep(train, &config, None)?;
    let mut per_seed = Vec::with_capacity(runs.len());
    for run in &runs {
        let (auroc, accuracy) = evaluate_model(&run.model, test.records, test.interpretations)?;
        per_seed.push(SeedResult {
            seed: run.report.seed,
            auroc,
            accuracy,
        });
    }
    let dataset = test.records.first().map(|r| r.dataset);
    Ok(aggregate_seeds(dataset, spec.tag(), per_seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Hateful as H, NonHateful as N};

    #[test]
    fn accuracy_by_hand() {
        assert_eq!(accuracy(&[H, N, H, N], &[H, H, H, N]).unwrap(), 0.75);
        assert_eq!(accuracy(&[H, N], &[H, N]).unwrap(), 1.0);
        assert_eq!(accuracy(&[H, N], &[N, H]).unwrap(), 0.0);
        assert_eq!(accuracy(&[H], &[H, N]).unwrap_err(), MetricError::LengthMismatch(1, 2));
        assert_eq!(accuracy(&[], &[]).unwrap_err(), MetricError::Empty);
    }

    #[test]
    fn auroc_reference_cases() {
        assert_eq!(auroc(&[0.9, 0.8, 0.3], &[H, N, H]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.7, 0.2, 0.1], &[H, H, N, N]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4; 5], &[H, N, H, N, N]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.2], &[H, H]).unwrap_err(), MetricError::SingleClass);
    }

    #[test]
    fn aggregation_uses_sample_std() {
        let seeds = |vals: &[f64]| {
            vals.iter()
                .enumerate()
                .map(|(i, &v)| SeedResult { seed: i as u64, auroc: v, accuracy: v })
                .collect::<Vec<_>>()
        };
        let s = aggregate_seeds(None, "m", seeds(&[0.80, 0.82, 0.78, 0.81, 0.79])).unwrap();
        assert!((s.auroc_mean - 0.800).abs() < 1e-12);
        assert!((s.auroc_std - 0.0158).abs() < 1e-4);
        assert!((s.auroc_std - 0.00025f64.sqrt()).abs() < 1e-12);

        let s = aggregate_seeds(None, "m", seeds(&[0.7, 0.9])).unwrap();
        assert!((s.acc_mean - 0.8).abs() < 1e-12);
        assert!((s.acc_std - 0.02f64.sqrt()).abs() < 1e-12);

        let s = aggregate_seeds(None, "m", seeds(&[0.5, 0.5, 0.5])).unwrap();
        assert_eq!(s.auroc_std, 0.0);

        assert_eq!(aggregate_seeds(None, "m", seeds(&[0.5])).unwrap_err(), MetricError::TooFewSeeds(1));
    }

    #[test]
    fn table_cells_mirror_published_format() {
        assert_eq!(format_cell(0.8150, 0.0111), "81.50±1.11");
        let s = EvalSummary {
            dataset: Some(DatasetKind::Fhm),
            model_tag: "BOTH".into(),
            auroc_mean: 0.815,
            auroc_std: 0.0111,
            acc_mean: 0.7,
            acc_std: 0.01,
            per_seed: vec![],
        };
        let table = render_table(&[s]);
        assert!(table.lines().next().unwrap().starts_with("Model"));
        assert!(table.contains("81.50±1.11"));
        assert!(table.contains("70.00±1.00"));
    }
}
