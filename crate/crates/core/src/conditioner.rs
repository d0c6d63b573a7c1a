//! Conditioning signals: text token embeddings, projected subject-image
//! tokens, per-patch detail tokens, and their null counterparts.
//!
//! The text table, the patch embedder and the image projector are frozen and
//! fully determined by a seed. Only the detail MLP lives in the
//! [`ParamStore`] and can be trained.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::ImageTensor;
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, derived_rng, normal_vec, ParamStore};

pub const PAD_TOKEN: u32 = 0;
pub const DETAIL_PREFIX: &str = "detail.mlp";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionerConfig {
    /// Subject images are expected at `image_size x image_size`.
    pub image_size: usize,
    pub vocab_size: usize,
    pub max_text_tokens: usize,
    /// Token width shared by text, image and detail tokens.
    pub cond_width: usize,
    /// Number of projected image tokens `N`.
    pub image_tokens: usize,
    pub patch_size: usize,
    pub patch_width: usize,
    pub detail_hidden: usize,
    pub seed: u64,
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            vocab_size: 4096,
            max_text_tokens: 16,
            cond_width: 32,
            image_tokens: 16,
            patch_size: 8,
            patch_width: 64,
            detail_hidden: 64,
            seed: 7,
        }
    }
}

impl ConditionerConfig {
    pub fn detail_tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }
}

/// An `n x d` matrix of token embeddings.
#[derive(Debug, Clone)]
pub struct TokenSequence(Tensor);

impl TokenSequence {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return shape_err(format!("token sequence must be rank 2, got {:?}", t.dims()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.0.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    }

    pub fn is_finite(&self) -> Result<bool> {
        Ok(self.to_vec()?.iter().all(|v| v.is_finite()))
    }
}

/// All conditioning for one denoiser call.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub text: TokenSequence,
    pub image_tokens: TokenSequence,
    /// Detail tokens feed the refinement network; absent when the image
    /// modality is null.
    pub detail_tokens: Option<TokenSequence>,
    pub text_null: bool,
    pub image_null: bool,
}

/// Hash tokenizer: lowercase, whitespace split, FNV-1a plus a mixing step into the vocabulary.
pub fn tokenize(s: &str, vocab_size: usize, max_tokens: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = s
        .split_whitespace()
        .map(|w| w.to_lowercase().chars().filter(|c| c.is_alphanumeric() || *c == '*').collect::<String>())
        .filter(|w| !w.is_empty())
        .take(max_tokens)
        .map(|w| word_id(&w, vocab_size))
        .collect();
    ids.resize(max_tokens, PAD_TOKEN);
    ids
}

pub fn word_id(word: &str, vocab_size: usize) -> u32 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in word.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    // murmur3 finalizer; raw FNV collides on "two"/"green" at 4096
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51afd7ed558ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ceb9fe1a85ec53);
    h ^= h >> 33;
    1 + (h % (vocab_size as u64 - 1)) as u32
}

/// Splits an image into non-overlapping `p x p` patches, each flattened
/// `(dy, dx, c)`.
pub fn patchify(image: &ImageTensor, p: usize) -> Result<Vec<Vec<f32>>> {
    if image.height() % p != 0 || image.width() % p != 0 {
        return Err(Error::InvalidInput(format!(
            "image {}x{} not divisible into {p}x{p} patches",
            image.height(),
            image.width()
        )));
    }
    let mut out = Vec::new();
    for py in 0..image.height() / p {
        for px in 0..image.width() / p {
            let mut patch = Vec::with_capacity(p * p * 3);
            for dy in 0..p {
                for dx in 0..p {
                    patch.extend_from_slice(&image.pixel(py * p + dy, px * p + dx));
                }
            }
            out.push(patch);
        }
    }
    Ok(out)
}

pub struct Conditioner {
    cfg: ConditionerConfig,
    device: Device,
    dtype: DType,
    text_table: Tensor,
    text_pos: Tensor,
    patch_embed: Tensor,
    proj_w: Tensor,
    proj_b: Tensor,
    frozen_hash: String,
}

impl Conditioner {
    pub fn new(cfg: ConditionerConfig, device: &Device, dtype: DType) -> Result<Self> {
        if cfg.vocab_size < 2 || cfg.max_text_tokens == 0 || cfg.image_tokens == 0 || cfg.patch_size == 0 {
            return Err(Error::Config("degenerate conditioner dimensions".into()));
        }
        if cfg.image_size % cfg.patch_size != 0 {
            return Err(Error::Config("image_size must be a multiple of patch_size".into()));
        }
        let d = cfg.cond_width;
        let patch_in = cfg.patch_size * cfg.patch_size * 3;
        let mut rng = derived_rng(cfg.seed, "conditioner", 0);
        let table = normal_vec(&mut rng, cfg.vocab_size * d);
        let pos: Vec<f32> = normal_vec(&mut rng, cfg.max_text_tokens * d).into_iter().map(|v| v * 0.1).collect();
        let pe_scale = 1.0 / (patch_in as f32).sqrt();
        let patch: Vec<f32> = normal_vec(&mut rng, patch_in * cfg.patch_width).into_iter().map(|v| v * pe_scale).collect();
        let pr_scale = 1.0 / (cfg.patch_width as f32).sqrt();
        let proj_w: Vec<f32> = normal_vec(&mut rng, cfg.patch_width * cfg.image_tokens * d)
            .into_iter()
            .map(|v| v * pr_scale)
            .collect();
        let proj_b: Vec<f32> = normal_vec(&mut rng, cfg.image_tokens * d).into_iter().map(|v| v * 0.1).collect();

        let mut h = Sha256::new();
        for part in [&table, &pos, &patch, &proj_w, &proj_b] {
            for v in part.iter() {
                h.update(v.to_le_bytes());
            }
        }
        let frozen_hash = hex::encode(h.finalize());

        let mk = |v: Vec<f32>, shape: (usize, usize)| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
        };
        Ok(Self {
            text_table: mk(table, (cfg.vocab_size, d))?,
            text_pos: mk(pos, (cfg.max_text_tokens, d))?,
            patch_embed: mk(patch, (patch_in, cfg.patch_width))?,
            proj_w: mk(proj_w, (cfg.patch_width, cfg.image_tokens * d))?,
            proj_b: mk(proj_b, (1, cfg.image_tokens * d))?,
            frozen_hash,
            cfg,
            device: device.clone(),
            dtype,
        })
    }

    pub fn config(&self) -> &ConditionerConfig {
        &self.cfg
    }

    /// Hash over every frozen weight; stable across any training run.
    pub fn frozen_hash(&self) -> &str {
        &self.frozen_hash
    }

    pub fn tokenize(&self, s: &str) -> Vec<u32> {
        tokenize(s, self.cfg.vocab_size, self.cfg.max_text_tokens)
    }

    pub fn embed_text(&self, s: &str) -> Result<TokenSequence> {
        let ids = Tensor::new(self.tokenize(s).as_slice(), &self.device)?;
        let rows = self.text_table.index_select(&ids, 0)?;
        TokenSequence::new((rows + &self.text_pos)?)
    }

    pub fn null_text(&self) -> Result<TokenSequence> {
        self.embed_text("")
    }

    pub fn null_image_tokens(&self) -> Result<TokenSequence> {
        TokenSequence::new(Tensor::zeros((self.cfg.image_tokens, self.cfg.cond_width), self.dtype, &self.device)?)
    }

    fn check_resolution(&self, image: &ImageTensor) -> Result<()> {
        let s = self.cfg.image_size;
        if image.height() != s || image.width() != s {
            return Err(Error::InvalidInput(format!(
                "subject image is {}x{}, encoder expects {s}x{s}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Frozen per-patch features `(P, patch_width)`.
    pub fn patch_features(&self, image: &ImageTensor) -> Result<Tensor> {
        self.check_resolution(image)?;
        let patches = patchify(image, self.cfg.patch_size)?;
        let n = patches.len();
        let flat: Vec<f32> = patches.into_iter().flatten().collect();
        let x = Tensor::from_vec(flat, (n, self.cfg.patch_size * self.cfg.patch_size * 3), &self.device)?
            .to_dtype(self.dtype)?;
        Ok(x.matmul(&self.patch_embed)?)
    }

    /// `N` image tokens: mean-pooled patch features through the frozen
    /// projector.
    pub fn project_image(&self, image: &ImageTensor) -> Result<TokenSequence> {
        let pooled = self.patch_features(image)?.mean_keepdim(0)?;
        let tokens = nn::linear(&pooled, &self.proj_w, Some(&self.proj_b))?;
        TokenSequence::new(tokens.reshape((self.cfg.image_tokens, self.cfg.cond_width))?)
    }

    pub fn encode_detail(&self, store: &ParamStore, image: &ImageTensor) -> Result<TokenSequence> {
        let feats = self.patch_features(image)?;
        TokenSequence::new(DetailEncoder::forward(store, &feats)?)
    }

    pub fn null_bundle(&self) -> Result<ConditionBundle> {
        Ok(ConditionBundle {
            text: self.null_text()?,
            image_tokens: self.null_image_tokens()?,
            detail_tokens: None,
            text_null: true,
            image_null: true,
        })
    }

    /// Conditioning for an optional prompt and optional subject. A missing
    /// modality takes its null value.
    pub fn bundle(&self, store: Option<&ParamStore>, prompt: Option<&str>, subject: Option<&ImageTensor>) -> Result<ConditionBundle> {
        let (text, text_null) = match prompt {
            Some(p) => (self.embed_text(p)?, false),
            None => (self.null_text()?, true),
        };
        let (image_tokens, detail_tokens, image_null) = match subject {
            Some(img) => {
                let detail = match store {
                    Some(s) if DetailEncoder::is_registered(s) => Some(self.encode_detail(s, img)?),
                    _ => None,
                };
                (self.project_image(img)?, detail, false)
            }
            None => (self.null_image_tokens()?, None, true),
        };
        Ok(ConditionBundle { text, image_tokens, detail_tokens, text_null, image_null })
    }
}

/// Trainable two-layer MLP applied row-wise to frozen patch features.
pub struct DetailEncoder;

impl DetailEncoder {
    pub fn register(store: &mut ParamStore, cfg: &ConditionerConfig, rng: &mut ChaCha8Rng) -> Result<()> {
        let (i, h, o) = (cfg.patch_width, cfg.detail_hidden, cfg.cond_width);
        store.insert_normal(&format!("{DETAIL_PREFIX}.lin1.w"), &[i, h], 1.0 / (i as f64).sqrt(), rng)?;
        store.insert_const(&format!("{DETAIL_PREFIX}.lin1.b"), &[h], 0.0)?;
        store.insert_normal(&format!("{DETAIL_PREFIX}.lin2.w"), &[h, o], 1.0 / (h as f64).sqrt(), rng)?;
        store.insert_const(&format!("{DETAIL_PREFIX}.lin2.b"), &[o], 0.0)?;
        Ok(())
    }

    pub fn is_registered(store: &ParamStore) -> bool {
        store.contains(&format!("{DETAIL_PREFIX}.lin1.w"))
    }

    pub fn param_names() -> [String; 4] {
        ["lin1.w", "lin1.b", "lin2.w", "lin2.b"].map(|s| format!("{DETAIL_PREFIX}.{s}"))
    }

    /// `(.., P, patch_width) -> (.., P, cond_width)`.
    pub fn forward(store: &ParamStore, feats: &Tensor) -> Result<Tensor> {
        let g = |n: &str| store.get(&format!("{DETAIL_PREFIX}.{n}"));
        let h = nn::linear(feats, &g("lin1.w")?, Some(&g("lin1.b")?))?.gelu_erf()?;
        nn::linear(&h, &g("lin2.w")?, Some(&g("lin2.b")?))
    }
}
