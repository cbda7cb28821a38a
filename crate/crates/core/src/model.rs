//! The full classifier: meme encoder, interpretation encoder and fusion head,
//! plus the ablation wiring and the checkpoint format.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Label, MemeInput};
use crate::encoding::{
    preprocess_image, EncodeError, Embedding, EmbeddingSource, ImageFeatures, Parameters, TextEncoder,
    TextEncoderConfig, TextTrace, VisionLanguageEncoder, VisionLanguageEncoderConfig, VisionLanguageTrace,
};
use crate::fusion::{loss_grad, loss_with, ClassificationResult, FusionClassifier, Normalization};

/// Which branches feed the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum AblationMode {
    /// Interpretation encoder only; the meme half of the head input is zero.
    Mie,
    /// Meme encoder only; the interpretation half is zero.
    Vla,
    #[default]
    Both,
    /// Meme encoder over the overlay text with the interpretation appended;
    /// no separate interpretation encoder.
    Concat,
}

impl AblationMode {
    pub fn needs_interpretation(self) -> bool {
        !matches!(self, AblationMode::Vla)
    }

    pub fn all() -> [AblationMode; 4] {
        [AblationMode::Mie, AblationMode::Vla, AblationMode::Both, AblationMode::Concat]
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationMode::Mie => "MIE",
            AblationMode::Vla => "VLA",
            AblationMode::Both => "BOTH",
            AblationMode::Concat => "CONCAT",
        })
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "MIE" => Ok(AblationMode::Mie),
            "VLA" => Ok(AblationMode::Vla),
            "BOTH" => Ok(AblationMode::Both),
            "CONCAT" => Ok(AblationMode::Concat),
            other => Err(format!("unknown ablation mode {other:?}")),
        }
    }
}

/// A meme with its inputs tokenized and its image preprocessed once.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub meme_id: String,
    pub image: ImageFeatures,
    /// Tokens the meme encoder sees (overlay text, or overlay text plus
    /// interpretation in CONCAT mode).
    pub meme_text_ids: Vec<usize>,
    pub interpretation_ids: Option<Vec<usize>>,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Fusion(#[from] crate::fusion::FusionError),
    #[error("cannot read image {path}: {source}")]
    Image {
        path: std::path::PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("mode {mode} needs an interpretation for meme {meme_id:?}")]
    MissingInterpretation { mode: AblationMode, meme_id: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

pub struct ForwardPass {
    pub input: Vec<f64>,
    pub logits: [f64; 2],
    vla: Option<VisionLanguageTrace>,
    mie: Option<TextTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemeClassifier {
    pub mode: AblationMode,
    pub vla: VisionLanguageEncoder,
    pub mie: TextEncoder,
    pub head: FusionClassifier,
}

impl MemeClassifier {
    pub fn new(
        mode: AblationMode,
        vla_config: VisionLanguageEncoderConfig,
        mie_config: TextEncoderConfig,
        normalization: Normalization,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let vla = VisionLanguageEncoder::new(vla_config)?;
        let mie = TextEncoder::new(mie_config)?;
        let head = FusionClassifier::seeded(vla.hidden_dim(), mie.hidden_dim(), normalization, seed);
        Ok(Self { mode, vla, mie, head })
    }

    pub fn prepare(
        &self,
        meme: &MemeInput,
        interpretation: Option<&str>,
    ) -> Result<PreparedSample, ModelError> {
        let bytes = fs::read(&meme.image_ref).map_err(|source| ModelError::Image {
            path: meme.image_ref.clone(),
            source,
        })?;
        self.prepare_bytes(&meme.id, &bytes, &meme.overlay_text, interpretation)
    }

    pub fn prepare_bytes(
        &self,
        meme_id: &str,
        image_bytes: &[u8],
        overlay_text: &str,
        interpretation: Option<&str>,
    ) -> Result<PreparedSample, ModelError> {
        if self.mode.needs_interpretation() && interpretation.is_none() {
            return Err(ModelError::MissingInterpretation {
                mode: self.mode,
                meme_id: meme_id.to_string(),
            });
        }
        let image = preprocess_image(&self.vla.config, meme_id, image_bytes)?;
        let meme_text_ids = match (self.mode, interpretation) {
            (AblationMode::Concat, Some(text)) => self.vla.token_ids(&format!("{overlay_text} {text}")),
            _ => self.vla.token_ids(overlay_text),
        };
        let interpretation_ids = match (self.mode, interpretation) {
            (AblationMode::Mie | AblationMode::Both, Some(text)) => Some(self.mie.token_ids(text)?),
            _ => None,
        };
        Ok(PreparedSample {
            meme_id: meme_id.to_string(),
            image,
            meme_text_ids,
            interpretation_ids,
        })
    }

    fn uses_vla(&self) -> bool {
        !matches!(self.mode, AblationMode::Mie)
    }

    pub fn forward(&self, sample: &PreparedSample) -> Result<ForwardPass, ModelError> {
        let vla = self
            .uses_vla()
            .then(|| self.vla.forward(&sample.image, &sample.meme_text_ids));
        let mie = match (self.mode, &sample.interpretation_ids) {
            (AblationMode::Mie | AblationMode::Both, Some(ids)) => Some(self.mie.forward_ids(ids)),
            (AblationMode::Mie | AblationMode::Both, None) => {
                return Err(ModelError::MissingInterpretation {
                    mode: self.mode,
                    meme_id: sample.meme_id.clone(),
                })
            }
            _ => None,
        };
        let input = self.head.concat(
            vla.as_ref().map(VisionLanguageTrace::output),
            mie.as_ref().map(TextTrace::output),
        )?;
        let logits = self.head.logits(&input);
        Ok(ForwardPass { input, logits, vla, mie })
    }

    /// Backpropagates the loss for `label`, accumulating into `grads`.
    /// Encoder gradients are skipped when `train_encoders` is false.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        label: Label,
        grads: &mut MemeClassifier,
        train_encoders: bool,
    ) -> f64 {
        let norm = self.head.normalization;
        let g_logits = loss_grad(norm, pass.logits, label);
        let g_input = self.head.backward(&pass.input, g_logits, &mut grads.head);
        if train_encoders {
            let split = self.head.vla_dim();
            if let Some(trace) = &pass.vla {
                self.vla.backward(trace, &g_input[..split], &mut grads.vla);
            }
            if let Some(trace) = &pass.mie {
                self.mie.backward(trace, &g_input[split..], &mut grads.mie);
            }
        }
        loss_with(norm, pass.logits, label)
    }

    pub fn classify(&self, sample: &PreparedSample) -> Result<ClassificationResult, ModelError> {
        let pass = self.forward(sample)?;
        Ok(self.head.result(&sample.meme_id, pass.logits))
    }

    pub fn meme_embedding(&self, sample: &PreparedSample) -> Embedding {
        Embedding {
            meme_id: sample.meme_id.clone(),
            source: EmbeddingSource::Vla,
            vector: self.vla.forward(&sample.image, &sample.meme_text_ids).output().to_vec(),
        }
    }

    /// Probability of hateful for an arbitrary interpretation with the meme
    /// side held fixed. Empty text is allowed and pools the CLS row alone.
    pub fn text_predictor<'a>(
        &'a self,
        image: &'a ImageFeatures,
        overlay_text: &'a str,
    ) -> impl Fn(&str) -> f64 + 'a {
        let fixed_meme = match self.mode {
            AblationMode::Mie => None,
            AblationMode::Concat => None,
            _ => Some(self.vla.forward(image, &self.vla.token_ids(overlay_text)).output().to_vec()),
        };
        move |text: &str| {
            let ids = self.mie.token_ids(text).unwrap_or_default();
            let (m, i) = match self.mode {
                AblationMode::Concat => {
                    let ids = self.vla.token_ids(&format!("{overlay_text} {text}"));
                    (Some(self.vla.forward(image, &ids).output().to_vec()), None)
                }
                AblationMode::Vla => (fixed_meme.clone(), None),
                AblationMode::Mie | AblationMode::Both => {
                    (fixed_meme.clone(), Some(self.mie.forward_ids(&ids).output().to_vec()))
                }
            };
            let x = self
                .head
                .concat(m.as_deref(), i.as_deref())
                .expect("encoder dims match the head");
            self.head.prob_hateful(self.head.logits(&x))
        }
    }

    /// Tensors the optimizer updates.
    pub fn trainable_mut(&mut self, train_encoders: bool) -> Vec<&mut [f64]> {
        let mut out = self.head.tensors_mut();
        if train_encoders {
            out.extend(self.vla.tensors_mut());
            out.extend(self.mie.tensors_mut());
        }
        out
    }

    pub fn trainable(&self, train_encoders: bool) -> Vec<&[f64]> {
        let mut out = self.head.tensors();
        if train_encoders {
            out.extend(self.vla.tensors());
            out.extend(self.mie.tensors());
        }
        out
    }
}

impl Parameters for MemeClassifier {
    fn tensors(&self) -> Vec<&[f64]> {
        self.trainable(true)
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.trainable_mut(true)
    }
}

const MAGIC: &[u8; 4] = b"MGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    mode: AblationMode,
    normalization: Normalization,
    vla_encoder: VisionLanguageEncoderConfig,
    mie_encoder: TextEncoderConfig,
    train_config_hash: String,
    tensor_lengths: Vec<usize>,
}

/// A persisted model plus the hash of the config that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MemeClassifier,
    pub train_config_hash: String,
}

impl Checkpoint {
    /// Layout: `MGCK`, u32 version, u32 header length, JSON header, then
    /// every tensor as little-endian f64 in the header's order.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), ModelError> {
        let model = &self.model;
        let tensors = model.tensors();
        let header = CheckpointHeader {
            mode: model.mode,
            normalization: model.head.normalization,
            vla_encoder: model.vla.config.clone(),
            mie_encoder: model.mie.config.clone(),
            train_config_hash: self.train_config_hash.clone(),
            tensor_lengths: tensors.iter().map(|t| t.len()).collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for t in tensors {
            for v in t {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ModelError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Checkpoint("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        r.read_exact(&mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;

        let mut model = MemeClassifier::new(
            header.mode,
            header.vla_encoder,
            header.mie_encoder,
            header.normalization,
            0,
        )?;
        let mut tensors = model.tensors_mut();
        if tensors.len() != header.tensor_lengths.len() {
            return Err(ModelError::Checkpoint("tensor count mismatch".into()));
        }
        let mut buf = [0u8; 8];
        for (t, &len) in tensors.iter_mut().zip(&header.tensor_lengths) {
            if t.len() != len {
                return Err(ModelError::Checkpoint(format!(
                    "tensor length {len} does not match architecture ({})",
                    t.len()
                )));
            }
            for v in t.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        if !model.is_finite() {
            return Err(ModelError::Checkpoint("non-finite parameters".into()));
        }
        Ok(Self {
            model,
            train_config_hash: header.train_config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::read_from(io::BufReader::new(fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(mode: AblationMode) -> MemeClassifier {
        MemeClassifier::new(
            mode,
            VisionLanguageEncoderConfig::tiny(6, 1),
            TextEncoderConfig::tiny(4, 2),
            Normalization::Softmax,
            3,
        )
        .unwrap()
    }

    fn png() -> Vec<u8> {
        let img = image::RgbImage::from_fn(8, 8, |x, y| image::Rgb([(x * 30) as u8, (y * 30) as u8, 77]));
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        buf.into_inner()
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let ckpt = Checkpoint {
            model: model(AblationMode::Both),
            train_config_hash: "abc".into(),
        };
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MGCK");
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(Checkpoint::read_from(&b"XXXX\x01\x00\x00\x00"[..]).is_err());
        let ckpt = Checkpoint {
            model: model(AblationMode::Vla),
            train_config_hash: String::new(),
        };
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn ablation_zeroes_missing_branch() {
        let bytes = png();
        let mie = model(AblationMode::Mie);
        let s = mie.prepare_bytes("m", &bytes, "overlay", Some("an interpretation")).unwrap();
        let pass = mie.forward(&s).unwrap();
        assert!(pass.input[..6].iter().all(|v| *v == 0.0));
        assert!(pass.input[6..].iter().any(|v| *v != 0.0));

        let vla = model(AblationMode::Vla);
        let s = vla.prepare_bytes("m", &bytes, "overlay", None).unwrap();
        let pass = vla.forward(&s).unwrap();
        assert!(pass.input[6..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn concat_feeds_interpretation_to_meme_encoder() {
        let bytes = png();
        let m = model(AblationMode::Concat);
        let a = m.prepare_bytes("m", &bytes, "overlay", Some("first reading")).unwrap();
        let b = m.prepare_bytes("m", &bytes, "overlay", Some("second reading")).unwrap();
        assert!(a.interpretation_ids.is_none());
        let (pa, pb) = (m.forward(&a).unwrap(), m.forward(&b).unwrap());
        assert_ne!(pa.logits, pb.logits);
        assert!(pa.input[6..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn missing_interpretation_is_an_error() {
        let m = model(AblationMode::Both);
        assert!(matches!(
            m.prepare_bytes("m", &png(), "x", None),
            Err(ModelError::MissingInterpretation { .. })
        ));
    }

    #[test]
    fn predictor_matches_classify_on_original_text() {
        let bytes = png();
        let m = model(AblationMode::Both);
        let s = m.prepare_bytes("m", &bytes, "overlay", Some("a cruel joke about people")).unwrap();
        let predict = m.text_predictor(&s.image, "overlay");
        let direct = m.classify(&s).unwrap().prob_hateful;
        assert!((predict("a cruel joke about people") - direct).abs() < 1e-12);
        assert!(predict("").is_finite());
    }
}
