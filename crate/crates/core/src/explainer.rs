//! Local surrogate attribution over interpretation words.
//!
//! Words are removed at random, the classifier is queried on each perturbed
//! interpretation, and a proximity-weighted ridge regression over the
//! keep/remove masks gives one signed weight per word position.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interpret::Interpretation;

#[derive(Debug, Error, PartialEq)]
pub enum ExplainError {
    #[error("nothing to perturb: interpretation has {0} word(s), need at least 2")]
    NothingToPerturb(usize),
    #[error("n_samples must be at least {MIN_SAMPLES}, got {0}")]
    TooFewSamples(usize),
    #[error("kernel width must be positive and finite, got {0}")]
    KernelWidth(f64),
    #[error("surrogate fit failed: {0}")]
    Fit(String),
    #[error("report parse error: {0}")]
    Parse(String),
}

pub const MIN_SAMPLES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainOptions {
    pub n_samples: usize,
    /// Defaults to 0.75·√(number of words).
    pub kernel_width: Option<f64>,
    pub ridge_alpha: f64,
    pub seed: u64,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self {
            n_samples: 500,
            kernel_width: None,
            ridge_alpha: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSample {
    pub mask: Vec<bool>,
    pub perturbed_text: String,
    pub model_prob: f64,
    pub proximity_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenWeight {
    pub word: String,
    /// Index of the word in the whitespace-split interpretation.
    pub position: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub meme_id: String,
    /// Sorted by |weight|, largest first.
    pub token_weights: Vec<TokenWeight>,
    pub intercept: f64,
    pub fidelity_r2: f64,
    pub n_samples: usize,
    pub kernel_width: f64,
    pub base_prediction: f64,
}

impl ExplanationReport {
    pub fn top(&self) -> Option<&TokenWeight> {
        self.token_weights.first()
    }
}

pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn masked_text(words: &[&str], mask: &[bool]) -> String {
    words
        .iter()
        .zip(mask)
        .filter(|(_, keep)| **keep)
        .map(|(w, _)| *w)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Cosine distance from `mask` to the all-ones mask, scaled by √n so that it
/// is measured on the same scale as the kernel width.
fn distance(mask: &[bool]) -> f64 {
    let n = mask.len() as f64;
    let kept = mask.iter().filter(|k| **k).count() as f64;
    let cosine = if kept == 0.0 { 0.0 } else { kept / (kept.sqrt() * n.sqrt()) };
    (1.0 - cosine) * n.sqrt()
}

pub fn kernel(distance: f64, width: f64) -> f64 {
    (-(distance * distance) / (width * width)).exp()
}

pub fn default_kernel_width(n_words: usize) -> f64 {
    0.75 * (n_words as f64).sqrt()
}

/// Original mask followed by `n_samples` random masks, each removing a
/// uniformly drawn number of distinct words.
pub fn sample_masks(n_words: usize, n_samples: usize, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Vec::with_capacity(n_samples + 1);
    masks.push(vec![true; n_words]);
    for _ in 0..n_samples {
        let k = rng.random_range(1..=n_words);
        let mut mask = vec![true; n_words];
        for i in index::sample(&mut rng, n_words, k) {
            mask[i] = false;
        }
        masks.push(mask);
    }
    masks
}

/// Draws perturbations and queries `predict_fn` on each (original first).
pub fn perturb<F>(predict_fn: &F, text: &str, options: &ExplainOptions) -> Result<Vec<PerturbationSample>, ExplainError>
where
    F: Fn(&str) -> f64 + Sync,
{
    let ws = words(text);
    if ws.len() < 2 {
        return Err(ExplainError::NothingToPerturb(ws.len()));
    }
    if options.n_samples < MIN_SAMPLES {
        return Err(ExplainError::TooFewSamples(options.n_samples));
    }
    let width = options.kernel_width.unwrap_or_else(|| default_kernel_width(ws.len()));
    if !(width > 0.0 && width.is_finite()) {
        return Err(ExplainError::KernelWidth(width));
    }
    let masks = sample_masks(ws.len(), options.n_samples, options.seed);
    Ok(masks
        .into_par_iter()
        .map(|mask| {
            let perturbed_text = masked_text(&ws, &mask);
            let model_prob = predict_fn(&perturbed_text);
            let proximity_weight = kernel(distance(&mask), width);
            PerturbationSample {
                mask,
                perturbed_text,
                model_prob,
                proximity_weight,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub r2: f64,
}

/// Weighted ridge regression with an unpenalized intercept (features and
/// targets are centered by their weighted means before solving).
pub fn weighted_ridge(x: &[Vec<f64>], y: &[f64], w: &[f64], alpha: f64) -> Result<RidgeFit, ExplainError> {
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    let total: f64 = w.iter().sum();
    if n == 0 || total <= 0.0 {
        return Err(ExplainError::Fit("no weighted samples".into()));
    }
    let x_mean: Vec<f64> = (0..d)
        .map(|j| x.iter().zip(w).map(|(row, wi)| wi * row[j]).sum::<f64>() / total)
        .collect();
    let y_mean = y.iter().zip(w).map(|(yi, wi)| wi * yi).sum::<f64>() / total;

    let xc = DMatrix::from_fn(n, d, |i, j| (x[i][j] - x_mean[j]) * w[i].sqrt());
    let yc = DVector::from_fn(n, |i, _| (y[i] - y_mean) * w[i].sqrt());
    let gram = xc.transpose() * &xc + DMatrix::identity(d, d) * alpha;
    let rhs = xc.transpose() * yc;
    let beta = gram
        .cholesky()
        .ok_or_else(|| ExplainError::Fit("normal equations not positive definite".into()))?
        .solve(&rhs);

    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let intercept = y_mean - coefficients.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for i in 0..n {
        let pred = intercept + coefficients.iter().zip(&x[i]).map(|(b, v)| b * v).sum::<f64>();
        ss_res += w[i] * (y[i] - pred).powi(2);
        ss_tot += w[i] * (y[i] - y_mean).powi(2);
    }
    let r2 = if ss_tot <= f64::EPSILON * total {
        // A constant target is fit exactly by the intercept.
        if ss_res <= f64::EPSILON * total { 1.0 } else { 0.0 }
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(RidgeFit {
        coefficients,
        intercept,
        r2,
    })
}

/// Explains `predict_fn` around `text`. `predict_fn` must hold the meme side
/// fixed and vary only the interpretation; it is called `n_samples + 1` times.
pub fn explain_text<F>(
    predict_fn: &F,
    meme_id: &str,
    text: &str,
    options: &ExplainOptions,
) -> Result<ExplanationReport, ExplainError>
where
    F: Fn(&str) -> f64 + Sync,
{
    let samples = perturb(predict_fn, text, options)?;
    let ws = words(text);
    let x: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect())
        .collect();
    let y: Vec<f64> = samples.iter().map(|s| s.model_prob).collect();
    let w: Vec<f64> = samples.iter().map(|s| s.proximity_weight).collect();
    let fit = weighted_ridge(&x, &y, &w, options.ridge_alpha)?;

    let mut token_weights: Vec<TokenWeight> = ws
        .iter()
        .zip(&fit.coefficients)
        .enumerate()
        .map(|(position, (word, &weight))| TokenWeight {
            word: word.to_string(),
            position,
            weight,
        })
        .collect();
    token_weights.sort_by(|a, b| b.weight.abs().total_cmp(&a.weight.abs()).then(a.position.cmp(&b.position)));

    Ok(ExplanationReport {
        meme_id: meme_id.to_string(),
        token_weights,
        intercept: fit.intercept,
        fidelity_r2: fit.r2,
        n_samples: options.n_samples,
        kernel_width: options.kernel_width.unwrap_or_else(|| default_kernel_width(ws.len())),
        base_prediction: samples[0].model_prob,
    })
}

pub fn explain<F>(
    predict_fn: &F,
    interpretation: &Interpretation,
    options: &ExplainOptions,
) -> Result<ExplanationReport, ExplainError>
where
    F: Fn(&str) -> f64 + Sync,
{
    explain_text(predict_fn, &interpretation.meme_id, &interpretation.text, options)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub json: String,
    pub html: String,
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Highlight opacity for a weight: proportional to |w| relative to the
/// largest |w| in the report, floored so small weights stay visible.
pub fn highlight_opacity(weight: f64, max_abs: f64) -> f64 {
    if max_abs <= 0.0 {
        return 0.0;
    }
    0.15 + 0.85 * (weight.abs() / max_abs)
}

/// Machine-readable JSON plus a self-contained HTML highlight view. Words are
/// shown in their original order; positive weights get class `pos`, negative
/// ones `neg`. The JSON is embedded in the HTML so either can be parsed back.
pub fn render_report(report: &ExplanationReport) -> RenderedReport {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    let mut by_position: Vec<&TokenWeight> = report.token_weights.iter().collect();
    by_position.sort_by_key(|t| t.position);
    let max_abs = report.token_weights.iter().map(|t| t.weight.abs()).fold(0.0, f64::max);

    let mut body = String::new();
    for (i, t) in by_position.iter().enumerate() {
        if i > 0 {
            body.push(' ');
        }
        let word = escape_html(&t.word);
        if t.weight == 0.0 || max_abs == 0.0 {
            body.push_str(&word);
            continue;
        }
        let (class, rgb) = if t.weight > 0.0 { ("pos", "214,39,40") } else { ("neg", "31,119,180") };
        let alpha = highlight_opacity(t.weight, max_abs);
        body.push_str(&format!(
            "<span class=\"{class}\" data-weight=\"{:e}\" style=\"background: rgba({rgb},{alpha:.3})\">{word}</span>",
            t.weight
        ));
    }
    let html = format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Explanation {id}</title>\n\
<style>body{{font-family:sans-serif;max-width:48em;margin:2em auto;line-height:1.8}}\
span{{padding:0 .15em;border-radius:.2em}}</style></head>\n<body>\n\
<h1>{id}</h1>\n<p>P(hateful) = {p:.4}, surrogate R&#178; = {r2:.3}</p>\n<p class=\"interpretation\">{body}</p>\n\
<script type=\"application/json\" id=\"report\">{embedded}</script>\n</body></html>\n",
        id = escape_html(&report.meme_id),
        p = report.base_prediction,
        r2 = report.fidelity_r2,
        embedded = serde_json::to_string(report).expect("report serializes").replace("</", "<\\/"),
    );
    RenderedReport { json, html }
}

/// Parses either the JSON report or the HTML view produced by `render_report`.
pub fn parse_report(document: &str) -> Result<ExplanationReport, ExplainError> {
    let trimmed = document.trim_start();
    let json = if trimmed.starts_with('{') {
        trimmed.to_string()
    } else {
        let start_tag = "<script type=\"application/json\" id=\"report\">";
        let start = document
            .find(start_tag)
            .ok_or_else(|| ExplainError::Parse("no embedded report".into()))?
            + start_tag.len();
        let end = document[start..]
            .find("</script>")
            .ok_or_else(|| ExplainError::Parse("unterminated embedded report".into()))?;
        document[start..start + end].replace("<\\/", "</")
    };
    serde_json::from_str(&json).map_err(|e| ExplainError::Parse(e.to_string()))
}
