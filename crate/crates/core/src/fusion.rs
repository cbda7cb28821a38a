//! Single-layer classification head over the concatenated meme and
//! interpretation CLS vectors: `logits = Wᵀ·[m_cls, i_cls] + b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Label;
use crate::encoding::{Embedding, EmbeddingSource, Parameters};

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("{which} dimension mismatch: expected {expected}, got {actual}")]
    Dim {
        which: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("expected a {expected:?} embedding, got {actual:?}")]
    Source {
        expected: EmbeddingSource,
        actual: EmbeddingSource,
    },
    #[error("embeddings belong to different memes ({0:?} vs {1:?})")]
    MemeMismatch(String, String),
}

/// How the two logits become a probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Softmax,
    /// Independent sigmoid per output; trained with per-output binary
    /// cross-entropy against the one-hot target.
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub meme_id: String,
    pub logits: [f64; 2],
    pub prob_hateful: f64,
    pub predicted_label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionClassifier {
    vla_dim: usize,
    mie_dim: usize,
    /// d × 2, row-major: `weight[2*j + k]` links input j to class k.
    weight: Vec<f64>,
    bias: Vec<f64>,
    pub normalization: Normalization,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let p1 = sigmoid(logits[1] - logits[0]);
    [1.0 - p1, p1]
}

/// Two-class cross-entropy over softmax-normalized logits.
pub fn loss(logits: [f64; 2], label: Label) -> f64 {
    let y = label.as_index();
    // -log softmax_y = ln(1 + e^{l_other - l_y})
    softplus(logits[1 - y] - logits[y])
}

pub fn loss_with(normalization: Normalization, logits: [f64; 2], label: Label) -> f64 {
    match normalization {
        Normalization::Softmax => loss(logits, label),
        Normalization::Sigmoid => {
            let y = label.as_index();
            (0..2)
                .map(|k| if k == y { softplus(-logits[k]) } else { softplus(logits[k]) })
                .sum()
        }
    }
}

/// dL/dlogits for [`loss_with`].
pub fn loss_grad(normalization: Normalization, logits: [f64; 2], label: Label) -> [f64; 2] {
    let y = label.as_index();
    let target = |k: usize| if k == y { 1.0 } else { 0.0 };
    match normalization {
        Normalization::Softmax => {
            let p = softmax2(logits);
            [p[0] - target(0), p[1] - target(1)]
        }
        Normalization::Sigmoid => [sigmoid(logits[0]) - target(0), sigmoid(logits[1]) - target(1)],
    }
}

pub fn mean_loss(items: &[([f64; 2], Label)]) -> f64 {
    items.iter().map(|(l, y)| loss(*l, *y)).sum::<f64>() / items.len() as f64
}

impl FusionClassifier {
    pub fn zeros(vla_dim: usize, mie_dim: usize, normalization: Normalization) -> Self {
        let d = vla_dim + mie_dim;
        Self {
            vla_dim,
            mie_dim,
            weight: vec![0.0; d * 2],
            bias: vec![0.0; 2],
            normalization,
        }
    }

    pub fn seeded(vla_dim: usize, mie_dim: usize, normalization: Normalization, seed: u64) -> Self {
        let mut clf = Self::zeros(vla_dim, mie_dim, normalization);
        let bound = (1.0 / clf.input_dim() as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf05e);
        clf.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        clf
    }

    /// Builds a head from explicit parameters; `weight` is d × 2 row-major.
    pub fn from_parts(
        vla_dim: usize,
        mie_dim: usize,
        weight: Vec<f64>,
        bias: [f64; 2],
        normalization: Normalization,
    ) -> Result<Self, FusionError> {
        let expected = (vla_dim + mie_dim) * 2;
        if weight.len() != expected {
            return Err(FusionError::Dim {
                which: "weight",
                expected,
                actual: weight.len(),
            });
        }
        Ok(Self {
            vla_dim,
            mie_dim,
            weight,
            bias: bias.to_vec(),
            normalization,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.vla_dim + self.mie_dim
    }

    pub fn vla_dim(&self) -> usize {
        self.vla_dim
    }

    pub fn mie_dim(&self) -> usize {
        self.mie_dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> [f64; 2] {
        [self.bias[0], self.bias[1]]
    }

    /// Logits for an already-concatenated input of length d.
    pub fn logits(&self, x: &[f64]) -> [f64; 2] {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut out = [self.bias[0], self.bias[1]];
        for (xj, row) in x.iter().zip(self.weight.chunks_exact(2)) {
            out[0] += xj * row[0];
            out[1] += xj * row[1];
        }
        out
    }

    pub fn prob_hateful(&self, logits: [f64; 2]) -> f64 {
        match self.normalization {
            Normalization::Softmax => softmax2(logits)[1],
            Normalization::Sigmoid => sigmoid(logits[1]),
        }
    }

    pub fn result(&self, meme_id: &str, logits: [f64; 2]) -> ClassificationResult {
        ClassificationResult {
            meme_id: meme_id.to_string(),
            logits,
            prob_hateful: self.prob_hateful(logits),
            predicted_label: if logits[1] > logits[0] { Label::Hateful } else { Label::NonHateful },
        }
    }

    /// Classifies from both CLS vectors.
    pub fn forward(&self, m_cls: &Embedding, i_cls: &Embedding) -> Result<ClassificationResult, FusionError> {
        if m_cls.source != EmbeddingSource::Vla {
            return Err(FusionError::Source {
                expected: EmbeddingSource::Vla,
                actual: m_cls.source,
            });
        }
        if i_cls.source != EmbeddingSource::Mie {
            return Err(FusionError::Source {
                expected: EmbeddingSource::Mie,
                actual: i_cls.source,
            });
        }
        if m_cls.meme_id != i_cls.meme_id {
            return Err(FusionError::MemeMismatch(m_cls.meme_id.clone(), i_cls.meme_id.clone()));
        }
        let x = self.concat(Some(&m_cls.vector), Some(&i_cls.vector))?;
        Ok(self.result(&m_cls.meme_id, self.logits(&x)))
    }

    /// `[m_cls, i_cls]`, with an absent branch replaced by zeros.
    pub fn concat(&self, m_cls: Option<&[f64]>, i_cls: Option<&[f64]>) -> Result<Vec<f64>, FusionError> {
        let mut x = Vec::with_capacity(self.input_dim());
        for (part, dim, which) in [(m_cls, self.vla_dim, "M_CLS"), (i_cls, self.mie_dim, "I_CLS")] {
            match part {
                Some(v) if v.len() != dim => {
                    return Err(FusionError::Dim {
                        which,
                        expected: dim,
                        actual: v.len(),
                    })
                }
                Some(v) => x.extend_from_slice(v),
                None => x.extend(std::iter::repeat_n(0.0, dim)),
            }
        }
        Ok(x)
    }

    /// Accumulates dL/dW and dL/db into `grads`; returns dL/dx.
    pub fn backward(&self, x: &[f64], grad_logits: [f64; 2], grads: &mut FusionClassifier) -> Vec<f64> {
        for (xj, row) in x.iter().zip(grads.weight.chunks_exact_mut(2)) {
            row[0] += xj * grad_logits[0];
            row[1] += xj * grad_logits[1];
        }
        grads.bias[0] += grad_logits[0];
        grads.bias[1] += grad_logits[1];
        self.weight
            .chunks_exact(2)
            .map(|row| row[0] * grad_logits[0] + row[1] * grad_logits[1])
            .collect()
    }
}

impl Parameters for FusionClassifier {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(source: EmbeddingSource, v: &[f64]) -> Embedding {
        Embedding {
            meme_id: "m".into(),
            source,
            vector: v.to_vec(),
        }
    }

    #[test]
    fn zero_head_is_undecided() {
        let clf = FusionClassifier::zeros(3, 2, Normalization::Softmax);
        let r = clf
            .forward(&emb(EmbeddingSource::Vla, &[1.0, 2.0, 3.0]), &emb(EmbeddingSource::Mie, &[4.0, 5.0]))
            .unwrap();
        assert_eq!(r.prob_hateful, 0.5);
        assert_eq!(r.predicted_label, Label::NonHateful);
    }

    #[test]
    fn hand_computed_softmax() {
        // column1 - column0 = (1, 0, 0, 0)
        let weight = vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let clf = FusionClassifier::from_parts(2, 2, weight, [0.0, 0.0], Normalization::Softmax).unwrap();
        let r = clf
            .forward(&emb(EmbeddingSource::Vla, &[2.0, 0.0]), &emb(EmbeddingSource::Mie, &[0.0, 0.0]))
            .unwrap();
        assert_eq!(r.logits, [0.0, 2.0]);
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((r.prob_hateful - expected).abs() < 1e-12);
        assert!((r.prob_hateful - 0.8808).abs() < 1e-4);
        assert_eq!(r.predicted_label, Label::Hateful);
    }

    #[test]
    fn concat_order_matters() {
        let clf = FusionClassifier::seeded(3, 3, Normalization::Softmax, 11);
        let a = [0.3, -0.7, 0.2];
        let b = [0.9, 0.1, -0.4];
        let ab = clf.logits(&clf.concat(Some(&a), Some(&b)).unwrap());
        let ba = clf.logits(&clf.concat(Some(&b), Some(&a)).unwrap());
        assert_ne!(ab, ba);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let clf = FusionClassifier::zeros(2, 2, Normalization::Softmax);
        let m = emb(EmbeddingSource::Vla, &[1.0, 2.0]);
        let i = emb(EmbeddingSource::Mie, &[1.0, 2.0]);
        assert!(matches!(clf.forward(&i, &i), Err(FusionError::Source { .. })));
        assert!(matches!(clf.forward(&m, &m), Err(FusionError::Source { .. })));
        let short = emb(EmbeddingSource::Mie, &[1.0]);
        assert_eq!(
            clf.forward(&m, &short).unwrap_err(),
            FusionError::Dim { which: "I_CLS", expected: 2, actual: 1 }
        );
        let mut other = i.clone();
        other.meme_id = "n".into();
        assert!(matches!(clf.forward(&m, &other), Err(FusionError::MemeMismatch(..))));
    }

    #[test]
    fn loss_reference_values() {
        assert!((loss([0.0, 0.0], Label::Hateful) - std::f64::consts::LN_2).abs() < 1e-12);
        let tiny = loss([-10.0, 10.0], Label::Hateful);
        // Series ln(1+u) = u - u²/2 + ..., exact enough at u = e^-20.
        let u = (-20.0f64).exp();
        let expected = u - u * u / 2.0;
        assert!(((tiny - expected) / expected).abs() < 1e-12);
        assert!((tiny - 2.06e-9).abs() < 1e-11);
        let items = [([0.3, -0.2], Label::Hateful), ([1.0, 2.0], Label::NonHateful)];
        let mean = mean_loss(&items);
        assert!((mean - (loss(items[0].0, items[0].1) + loss(items[1].0, items[1].1)) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_mode_probability() {
        let clf = FusionClassifier::from_parts(1, 1, vec![0.0, 1.0, 0.0, 0.0], [0.0, 0.0], Normalization::Sigmoid)
            .unwrap();
        let r = clf.result("m", clf.logits(&[3.0, 0.0]));
        assert!((r.prob_hateful - sigmoid(3.0)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn argmax_shift_invariance(l0 in -50.0f64..50.0, l1 in -50.0f64..50.0, c in -100.0f64..100.0) {
            let clf = FusionClassifier::zeros(1, 1, Normalization::Softmax);
            let a = clf.result("m", [l0, l1]);
            let b = clf.result("m", [l0 + c, l1 + c]);
            prop_assert_eq!(a.predicted_label, b.predicted_label);
        }

        #[test]
        fn probabilities_are_bounded(l0 in -1e3f64..1e3, l1 in -1e3f64..1e3, sig in any::<bool>()) {
            let norm = if sig { Normalization::Sigmoid } else { Normalization::Softmax };
            let clf = FusionClassifier::zeros(1, 1, norm);
            let p = clf.prob_hateful([l0, l1]);
            prop_assert!((0.0..=1.0).contains(&p));
            let s = softmax2([l0, l1]);
            prop_assert!((s[0] + s[1] - 1.0).abs() <= 1e-6);
            prop_assert!(loss([l0, l1], Label::Hateful) >= 0.0);
        }
    }
}
