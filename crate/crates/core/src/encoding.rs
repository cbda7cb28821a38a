//! CLS-style sentence and meme encoders.
//!
//! Both encoders are small, seeded, and trainable: the text encoder pools a
//! hashed token embedding table behind a learned CLS row and projects it
//! through a tanh layer; the vision-language encoder projects patch pixel
//! statistics and overlay-text embeddings into a shared space and mixes them
//! with an additive plus multiplicative interaction before the same tanh
//! projection. Each exposes a forward pass that keeps what the backward pass
//! needs, so they can be fine-tuned end to end with the fusion head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("cannot encode empty text")]
    EmptyText,
    #[error("tokenizer produced no tokens for {0:?}")]
    Tokenizer(String),
    #[error("undecodable image for meme {meme_id:?}: {message}")]
    Image { meme_id: String, message: String },
    #[error("unsupported encoder {0:?}: only tiny-* encoders ship with this build")]
    UnsupportedEncoder(String),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("encoder produced non-finite output")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EmbeddingSource {
    Mie,
    Vla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub meme_id: String,
    pub source: EmbeddingSource,
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Implemented by anything whose parameters are optimized as flat tensors.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

const CLS_ID: usize = 0;

/// Lowercased alphanumeric word pieces; apostrophes stay inside words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.trim_matches('\'').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

fn fnv1a(word: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for byte in word.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn token_ids(text: &str, vocab_size: usize, max_tokens: usize) -> Vec<usize> {
    tokenize(text)
        .iter()
        .take(max_tokens)
        .map(|w| 1 + (fnv1a(w) % (vocab_size as u64 - 1)) as usize)
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, len: usize, bound: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

/// `out += m · x` for row-major `m` of shape rows × x.len().
fn matvec_add(m: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (row, o) in m.chunks_exact(cols).zip(out.iter_mut()) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += mᵀ · g`.
fn matvec_t_add(m: &[f64], g: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (row, gi) in m.chunks_exact(cols).zip(g) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * gi;
        }
    }
}

/// `dm += g ⊗ x`.
fn outer_add(dm: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (row, gi) in dm.chunks_exact_mut(cols).zip(g) {
        for (d, xv) in row.iter_mut().zip(x) {
            *d += gi * xv;
        }
    }
}

fn mean_pool(table: &[f64], dim: usize, ids: &[usize]) -> Vec<f64> {
    let mut pooled = table[CLS_ID * dim..(CLS_ID + 1) * dim].to_vec();
    for &id in ids {
        for (p, v) in pooled.iter_mut().zip(&table[id * dim..(id + 1) * dim]) {
            *p += v;
        }
    }
    let n = (ids.len() + 1) as f64;
    pooled.iter_mut().for_each(|p| *p /= n);
    pooled
}

fn mean_pool_backward(grad_table: &mut [f64], dim: usize, ids: &[usize], g: &[f64]) {
    let n = (ids.len() + 1) as f64;
    for &id in std::iter::once(&CLS_ID).chain(ids) {
        for (d, gv) in grad_table[id * dim..(id + 1) * dim].iter_mut().zip(g) {
            *d += gv / n;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub name: String,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl TextEncoderConfig {
    pub fn tiny(hidden_dim: usize, seed: u64) -> Self {
        Self {
            name: format!("tiny-text-h{hidden_dim}"),
            vocab_size: 1024,
            embed_dim: 16,
            hidden_dim,
            max_tokens: 128,
            seed,
        }
    }

    /// Resolves an encoder by name. Only `tiny-text-h<dim>` is available;
    /// pretrained names are recognized and rejected.
    pub fn named(name: &str, seed: u64) -> Result<Self, EncodeError> {
        match name.strip_prefix("tiny-text-h").and_then(|d| d.parse().ok()) {
            Some(dim) => Ok(Self::tiny(dim, seed)),
            None => Err(EncodeError::UnsupportedEncoder(name.to_string())),
        }
    }

    fn validate(&self) -> Result<(), EncodeError> {
        if self.vocab_size < 2 || self.embed_dim == 0 || self.hidden_dim == 0 || self.max_tokens == 0 {
            return Err(EncodeError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Interpretation encoder; output is the CLS hidden state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    embeddings: Vec<f64>,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TextTrace {
    ids: Vec<usize>,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
}

impl TextTrace {
    pub fn output(&self) -> &[f64] {
        &self.hidden
    }
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig) -> Result<Self, EncodeError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7e47);
        let e = config.embed_dim;
        let embeddings = uniform(&mut rng, config.vocab_size * e, 1.0);
        let weight = uniform(&mut rng, config.hidden_dim * e, (3.0 / e as f64).sqrt());
        let bias = vec![0.0; config.hidden_dim];
        Ok(Self {
            config,
            embeddings,
            weight,
            bias,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Token ids after head-keeping truncation to `max_tokens`.
    pub fn token_ids(&self, text: &str) -> Result<Vec<usize>, EncodeError> {
        if text.trim().is_empty() {
            return Err(EncodeError::EmptyText);
        }
        let ids = token_ids(text, self.config.vocab_size, self.config.max_tokens);
        if ids.is_empty() {
            return Err(EncodeError::Tokenizer(text.to_string()));
        }
        Ok(ids)
    }

    pub fn forward_ids(&self, ids: &[usize]) -> TextTrace {
        let pooled = mean_pool(&self.embeddings, self.config.embed_dim, ids);
        let mut z = self.bias.clone();
        matvec_add(&self.weight, &pooled, &mut z);
        TextTrace {
            ids: ids.to_vec(),
            pooled,
            hidden: z.into_iter().map(f64::tanh).collect(),
        }
    }

    /// Accumulates parameter gradients into `grads` given dL/d(output).
    pub fn backward(&self, trace: &TextTrace, grad_out: &[f64], grads: &mut TextEncoder) {
        let g_pre: Vec<f64> = grad_out
            .iter()
            .zip(&trace.hidden)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        outer_add(&mut grads.weight, &g_pre, &trace.pooled);
        grads.bias.iter_mut().zip(&g_pre).for_each(|(b, g)| *b += g);
        let mut g_pooled = vec![0.0; self.config.embed_dim];
        matvec_t_add(&self.weight, &g_pre, &mut g_pooled);
        mean_pool_backward(&mut grads.embeddings, self.config.embed_dim, &trace.ids, &g_pooled);
    }

    pub fn encode(&self, meme_id: &str, text: &str) -> Result<Embedding, EncodeError> {
        let ids = self.token_ids(text)?;
        let vector = self.forward_ids(&ids).hidden;
        if !vector.iter().all(|v| v.is_finite()) {
            return Err(EncodeError::NonFinite);
        }
        Ok(Embedding {
            meme_id: meme_id.to_string(),
            source: EmbeddingSource::Mie,
            vector,
        })
    }
}

impl Parameters for TextEncoder {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.embeddings, &self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.embeddings, &mut self.weight, &mut self.bias]
    }
}

pub fn encode_interpretation(
    handle: &TextEncoder,
    meme_id: &str,
    interpretation_text: &str,
) -> Result<Embedding, EncodeError> {
    handle.encode(meme_id, interpretation_text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionLanguageEncoderConfig {
    pub name: String,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_text_tokens: usize,
    pub image_size: u32,
    pub patch_size: u32,
    pub seed: u64,
}

impl VisionLanguageEncoderConfig {
    pub fn tiny(hidden_dim: usize, seed: u64) -> Self {
        Self {
            name: format!("tiny-vl-h{hidden_dim}"),
            vocab_size: 1024,
            embed_dim: 16,
            hidden_dim,
            max_text_tokens: 64,
            image_size: 16,
            patch_size: 4,
            seed,
        }
    }

    pub fn named(name: &str, seed: u64) -> Result<Self, EncodeError> {
        match name.strip_prefix("tiny-vl-h").and_then(|d| d.parse().ok()) {
            Some(dim) => Ok(Self::tiny(dim, seed)),
            None => Err(EncodeError::UnsupportedEncoder(name.to_string())),
        }
    }

    fn grid(&self) -> u32 {
        self.image_size / self.patch_size
    }

    /// Length of the preprocessed image feature vector.
    pub fn image_feature_dim(&self) -> usize {
        let p = self.patch_size as usize;
        let g = self.grid() as usize;
        3 * (p * p + g * g)
    }

    fn validate(&self) -> Result<(), EncodeError> {
        if self.vocab_size < 2
            || self.embed_dim == 0
            || self.hidden_dim == 0
            || self.max_text_tokens == 0
            || self.patch_size == 0
            || self.image_size < self.patch_size
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return Err(EncodeError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Resized, normalized pixel statistics: the mean patch (every patch
/// position averaged over the grid) followed by the mean color of each patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures(pub Vec<f64>);

pub fn preprocess_image(
    config: &VisionLanguageEncoderConfig,
    meme_id: &str,
    bytes: &[u8],
) -> Result<ImageFeatures, EncodeError> {
    let img = image::load_from_memory(bytes).map_err(|e| EncodeError::Image {
        meme_id: meme_id.to_string(),
        message: e.to_string(),
    })?;
    let size = config.image_size;
    let rgb = img
        .resize_exact(size, size, image::imageops::FilterType::Triangle)
        .to_rgb8();
    let p = config.patch_size as usize;
    let g = config.grid() as usize;
    let mut mean_patch = vec![0.0; p * p * 3];
    let mut patch_colors = vec![0.0; g * g * 3];
    for (x, y, px) in rgb.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        let within = (y % p) * p + (x % p);
        let patch = (y / p) * g + (x / p);
        for c in 0..3 {
            let v = (f64::from(px[c]) / 255.0 - 0.5) / 0.5;
            mean_patch[within * 3 + c] += v;
            patch_colors[patch * 3 + c] += v;
        }
    }
    let n_patches = (g * g) as f64;
    let px_per_patch = (p * p) as f64;
    mean_patch.iter_mut().for_each(|v| *v /= n_patches);
    patch_colors.iter_mut().for_each(|v| *v /= px_per_patch);
    mean_patch.extend(patch_colors);
    Ok(ImageFeatures(mean_patch))
}

/// Meme encoder over (image, overlay text); output is the fused CLS state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionLanguageEncoder {
    pub config: VisionLanguageEncoderConfig,
    token_embeddings: Vec<f64>,
    patch_projection: Vec<f64>,
    w_image: Vec<f64>,
    w_text: Vec<f64>,
    w_mix: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct VisionLanguageTrace {
    features: Vec<f64>,
    ids: Vec<usize>,
    image: Vec<f64>,
    text: Vec<f64>,
    hidden: Vec<f64>,
}

impl VisionLanguageTrace {
    pub fn output(&self) -> &[f64] {
        &self.hidden
    }
}

impl VisionLanguageEncoder {
    pub fn new(config: VisionLanguageEncoderConfig) -> Result<Self, EncodeError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x71a);
        let e = config.embed_dim;
        let h = config.hidden_dim;
        let f = config.image_feature_dim();
        let layer = (3.0 / e as f64).sqrt();
        Ok(Self {
            token_embeddings: uniform(&mut rng, config.vocab_size * e, 1.0),
            patch_projection: uniform(&mut rng, e * f, (3.0 / f as f64).sqrt()),
            w_image: uniform(&mut rng, h * e, layer),
            w_text: uniform(&mut rng, h * e, layer),
            w_mix: uniform(&mut rng, h * e, layer),
            bias: vec![0.0; h],
            config,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Overlay text may be empty; the CLS row alone then represents it.
    pub fn token_ids(&self, overlay_text: &str) -> Vec<usize> {
        token_ids(overlay_text, self.config.vocab_size, self.config.max_text_tokens)
    }

    pub fn forward(&self, features: &ImageFeatures, ids: &[usize]) -> VisionLanguageTrace {
        let e = self.config.embed_dim;
        let mut image = vec![0.0; e];
        matvec_add(&self.patch_projection, &features.0, &mut image);
        let text = mean_pool(&self.token_embeddings, e, ids);
        let mix: Vec<f64> = image.iter().zip(&text).map(|(a, b)| a * b).collect();
        let mut z = self.bias.clone();
        matvec_add(&self.w_image, &image, &mut z);
        matvec_add(&self.w_text, &text, &mut z);
        matvec_add(&self.w_mix, &mix, &mut z);
        VisionLanguageTrace {
            features: features.0.clone(),
            ids: ids.to_vec(),
            image,
            text,
            hidden: z.into_iter().map(f64::tanh).collect(),
        }
    }

    pub fn backward(&self, trace: &VisionLanguageTrace, grad_out: &[f64], grads: &mut VisionLanguageEncoder) {
        let e = self.config.embed_dim;
        let g_pre: Vec<f64> = grad_out
            .iter()
            .zip(&trace.hidden)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        let mix: Vec<f64> = trace.image.iter().zip(&trace.text).map(|(a, b)| a * b).collect();
        outer_add(&mut grads.w_image, &g_pre, &trace.image);
        outer_add(&mut grads.w_text, &g_pre, &trace.text);
        outer_add(&mut grads.w_mix, &g_pre, &mix);
        grads.bias.iter_mut().zip(&g_pre).for_each(|(b, g)| *b += g);

        let mut g_mix = vec![0.0; e];
        matvec_t_add(&self.w_mix, &g_pre, &mut g_mix);
        let mut g_image = vec![0.0; e];
        matvec_t_add(&self.w_image, &g_pre, &mut g_image);
        let mut g_text = vec![0.0; e];
        matvec_t_add(&self.w_text, &g_pre, &mut g_text);
        for k in 0..e {
            g_image[k] += g_mix[k] * trace.text[k];
            g_text[k] += g_mix[k] * trace.image[k];
        }
        outer_add(&mut grads.patch_projection, &g_image, &trace.features);
        mean_pool_backward(&mut grads.token_embeddings, e, &trace.ids, &g_text);
    }

    pub fn encode(&self, meme_id: &str, image_bytes: &[u8], overlay_text: &str) -> Result<Embedding, EncodeError> {
        let features = preprocess_image(&self.config, meme_id, image_bytes)?;
        let vector = self.forward(&features, &self.token_ids(overlay_text)).hidden;
        if !vector.iter().all(|v| v.is_finite()) {
            return Err(EncodeError::NonFinite);
        }
        Ok(Embedding {
            meme_id: meme_id.to_string(),
            source: EmbeddingSource::Vla,
            vector,
        })
    }
}

impl Parameters for VisionLanguageEncoder {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            &self.token_embeddings,
            &self.patch_projection,
            &self.w_image,
            &self.w_text,
            &self.w_mix,
            &self.bias,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.token_embeddings,
            &mut self.patch_projection,
            &mut self.w_image,
            &mut self.w_text,
            &mut self.w_mix,
            &mut self.bias,
        ]
    }
}

pub fn encode_meme(
    handle: &VisionLanguageEncoder,
    meme_id: &str,
    image_bytes: &[u8],
    overlay_text: &str,
) -> Result<Embedding, EncodeError> {
    handle.encode(meme_id, image_bytes, overlay_text)
}

/// Batched interpretation encoding; identical to encoding one at a time.
pub fn encode_interpretations_batch(
    handle: &TextEncoder,
    items: &[(String, String)],
) -> Vec<Result<Embedding, EncodeError>> {
    use rayon::prelude::*;
    items
        .par_iter()
        .map(|(id, text)| handle.encode(id, text))
        .collect()
}
