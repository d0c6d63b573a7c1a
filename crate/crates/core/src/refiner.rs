//! Refinement network: a copy of the denoiser run on the noised subject
//! latent. Its decoder self-attention inputs become extra key/value tokens
//! for the main denoiser.

use candle_core::Tensor;

use crate::codec::{Codec, ImageTensor, LatentBundle, LatentTensor};
use crate::conditioner::{ConditionBundle, TokenSequence};
use crate::denoiser::{is_cross_attention_param, ModelConfig, UNet, UNetInput, MAIN_PREFIX};
use crate::error::{shape_err, Result};
use crate::model::InpaintModel;
use crate::nn::ParamStore;
use crate::sampler::{add_noise, NoiseSchedule, Timestep};

pub const REFINE_PREFIX: &str = "refine";

/// Decoder self-attention input features, one entry per decoder layer.
#[derive(Debug, Clone)]
pub struct FeatureStash {
    entries: Vec<(usize, TokenSequence)>,
    tensors: Vec<Tensor>,
}

impl FeatureStash {
    /// Builds a single-sample stash from `(1, n, C)` tensors.
    pub fn from_batch(stash: Vec<Tensor>) -> Result<Self> {
        let mut entries = Vec::with_capacity(stash.len());
        for (i, t) in stash.iter().enumerate() {
            if t.rank() != 3 || t.dims()[0] != 1 {
                return shape_err("stash entries must be single-sample (1, n, C)");
            }
            entries.push((i, TokenSequence::new(t.squeeze(0)?)?));
        }
        Ok(Self { entries, tensors: stash })
    }

    pub fn entries(&self) -> &[(usize, TokenSequence)] {
        &self.entries
    }

    /// `(1, n, C)` tensors in decoder order, ready for injection.
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct RefineNet {
    unet: UNet,
}

impl RefineNet {
    pub fn new(cfg: ModelConfig) -> Self {
        Self { unet: UNet::new(REFINE_PREFIX, cfg) }
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    /// Copies every main-denoiser weight under the refine prefix.
    pub fn init_from_main(store: &mut ParamStore) -> Result<usize> {
        store.clone_prefix(MAIN_PREFIX, REFINE_PREFIX)
    }

    /// Parameters trained in the second stage on this network.
    pub fn is_trainable_param(name: &str) -> bool {
        name.starts_with(&format!("{REFINE_PREFIX}.")) && is_cross_attention_param(name)
    }

    /// `[z; 0; 0]`: the subject latent with empty mask and source channels.
    pub fn input(z_obj_t: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = z_obj_t.dims4()?;
        let pad = Tensor::zeros((b, c + 1, h, w), z_obj_t.dtype(), z_obj_t.device())?;
        Ok(Tensor::cat(&[z_obj_t, &pad], 1)?)
    }

    /// Batched stash. `detail` is `(B, P, D)` and feeds the text slot; the
    /// image branch is absent, so only detail tokens are attended.
    pub fn stash_batch(&self, store: &ParamStore, z_obj_t: &Tensor, timesteps: &[usize], detail: &Tensor) -> Result<Vec<Tensor>> {
        let input = Self::input(z_obj_t)?;
        let out = self.unet.forward(
            store,
            &UNetInput { z_tilde: &input, timesteps, text: detail, image: None, beta: 0.0, injection: None },
        )?;
        Ok(out.stash)
    }

    /// Encodes `x_obj`, noises it to level `t` with `noise`, and records the
    /// decoder self-attention inputs. The noise prediction is discarded.
    #[allow(clippy::too_many_arguments)]
    pub fn stash_features(
        &self,
        store: &ParamStore,
        codec: &Codec,
        schedule: &NoiseSchedule,
        x_obj: &ImageTensor,
        t: usize,
        noise: &LatentTensor,
        detail: &TokenSequence,
    ) -> Result<FeatureStash> {
        let z_obj = codec.encode(x_obj)?;
        let z_t = add_noise(schedule, &z_obj, Timestep::Step(t), noise)?;
        let z = z_t.to_tensor(store.device(), store.dtype())?.unsqueeze(0)?;
        let d = detail.tensor().to_dtype(store.dtype())?.unsqueeze(0)?;
        FeatureStash::from_batch(self.stash_batch(store, &z, &[t], &d)?)
    }
}

/// Main-denoiser prediction with the subject branch. With the gate off, or
/// without a subject, this is the plain prediction.
#[allow(clippy::too_many_arguments)]
pub fn run_with_refine(
    model: &InpaintModel,
    bundle: &LatentBundle,
    t: usize,
    cond: &ConditionBundle,
    beta: f64,
    x_obj: Option<&ImageTensor>,
    noise: &LatentTensor,
    gate: bool,
) -> Result<LatentTensor> {
    let stash = match (gate, &model.refine, x_obj, &cond.detail_tokens) {
        (true, Some(r), Some(x), Some(d)) => {
            Some(r.stash_features(&model.store, &model.codec, &model.schedule, x, t, noise, d)?)
        }
        _ => None,
    };
    model.predict_noise(bundle, t, cond, beta, stash.as_ref().map(FeatureStash::tensors))
}
