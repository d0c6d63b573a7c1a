//! Noise-prediction network.
//!
//! A two-resolution encoder/decoder. Each resolution on each path has two
//! residual conv blocks, one self-attention block and one cross-attention
//! block. Cross-attention is decoupled: text keys/values and image
//! keys/values are attended separately with a shared query and fused as
//! `Z + beta * Z'`. Decoder self-attention blocks accept extra key/value
//! tokens from the refinement network.
//!
//! Spatial tokens carry learned positional embeddings, so the network is not
//! permutation equivariant over positions.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{LatentBundle, LatentTensor};
use crate::conditioner::{ConditionBundle, TokenSequence};
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, ParamStore, MASKED_LOGIT};

pub const MAIN_PREFIX: &str = "main";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `c`, channels of `z` and `z_s`.
    pub latent_channels: usize,
    /// Latent height and width `h = w`.
    pub latent_size: usize,
    /// Channel widths at full and half latent resolution.
    pub widths: [usize; 2],
    pub groups: usize,
    pub time_dim: usize,
    pub cond_width: usize,
    pub num_train_timesteps: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: 48,
            latent_size: 8,
            widths: [64, 128],
            groups: 8,
            time_dim: 64,
            cond_width: 32,
            num_train_timesteps: 1000,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn input_channels(&self) -> usize {
        2 * self.latent_channels + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_size % 2 != 0 || self.latent_size == 0 {
            return Err(Error::Config("latent_size must be even and positive".into()));
        }
        if self.widths.iter().any(|w| w % self.groups != 0) {
            return Err(Error::Config("widths must be divisible by groups".into()));
        }
        if self.num_train_timesteps == 0 {
            return Err(Error::Config("num_train_timesteps must be positive".into()));
        }
        Ok(())
    }

    /// Token count and width of each decoder self-attention layer, in
    /// execution order.
    pub fn decoder_attention_shapes(&self) -> Vec<(usize, usize)> {
        let s = self.latent_size;
        vec![((s / 2) * (s / 2), self.widths[1]), (s * s, self.widths[0])]
    }
}

/// Decoupled cross-attention weights for one layer.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_k_img: Tensor,
    pub w_v_img: Tensor,
    pub w_o: Tensor,
}

impl CrossAttention {
    pub const NAMES: [&'static str; 6] = ["W_q", "W_k", "W_v", "W_k_img", "W_v_img", "W_o"];

    pub fn register(store: &mut ParamStore, prefix: &str, width: usize, cond: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let sw = 1.0 / (width as f64).sqrt();
        let sc = 1.0 / (cond as f64).sqrt();
        store.insert_normal(&format!("{prefix}.W_q"), &[width, width], sw, rng)?;
        store.insert_normal(&format!("{prefix}.W_k"), &[cond, width], sc, rng)?;
        store.insert_normal(&format!("{prefix}.W_v"), &[cond, width], sc, rng)?;
        store.insert_normal(&format!("{prefix}.W_k_img"), &[cond, width], sc, rng)?;
        store.insert_normal(&format!("{prefix}.W_v_img"), &[cond, width], sc, rng)?;
        store.insert_normal(&format!("{prefix}.W_o"), &[width, width], 0.5 * sw, rng)?;
        Ok(())
    }

    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        let g = |n: &str| store.get(&format!("{prefix}.{n}"));
        Ok(Self {
            w_q: g("W_q")?,
            w_k: g("W_k")?,
            w_v: g("W_v")?,
            w_k_img: g("W_k_img")?,
            w_v_img: g("W_v_img")?,
            w_o: g("W_o")?,
        })
    }

    /// Text branch `Z` and, when image tokens are given, image branch `Z'`.
    pub fn branches(&self, x: &Tensor, text: &Tensor, image: Option<&Tensor>) -> Result<(Tensor, Option<Tensor>)> {
        let q = nn::linear(x, &self.w_q, None)?;
        let z = nn::attention(&q, &nn::linear(text, &self.w_k, None)?, &nn::linear(text, &self.w_v, None)?, None)?;
        let z_img = match image {
            Some(img) => Some(nn::attention(
                &q,
                &nn::linear(img, &self.w_k_img, None)?,
                &nn::linear(img, &self.w_v_img, None)?,
                None,
            )?),
            None => None,
        };
        Ok((z, z_img))
    }

    /// `Z + beta Z'`, or `Z` when the image branch is absent.
    pub fn fuse(&self, x: &Tensor, text: &Tensor, image: Option<&Tensor>, beta: f64) -> Result<Tensor> {
        if !beta.is_finite() {
            return Err(Error::InvalidInput(format!("beta {beta}")));
        }
        let (z, z_img) = self.branches(x, text, image)?;
        Ok(match z_img {
            Some(zi) => (z + (zi * beta)?)?,
            None => z,
        })
    }

    pub fn forward(&self, x: &Tensor, text: &Tensor, image: Option<&Tensor>, beta: f64) -> Result<Tensor> {
        nn::linear(&self.fuse(x, text, image, beta)?, &self.w_o, None)
    }
}

/// `Z + beta Z'` for one set of queries. Widths must match the layer.
pub fn decoupled_attention(
    layer: &CrossAttention,
    queries: &TokenSequence,
    text: &TokenSequence,
    image_tokens: &TokenSequence,
    beta: f64,
) -> Result<TokenSequence> {
    let width = layer.w_q.dims()[0];
    let cond = layer.w_k.dims()[0];
    if queries.width() != width || text.width() != cond || image_tokens.width() != cond {
        return shape_err(format!(
            "query width {} / text width {} / image width {} vs layer {width}/{cond}",
            queries.width(),
            text.width(),
            image_tokens.width()
        ));
    }
    TokenSequence::new(layer.fuse(queries.tensor(), text.tensor(), Some(image_tokens.tensor()), beta)?)
}

/// Self-attention whose keys and values may be extended with injected
/// tokens. Queries always come from the layer's own features.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub w_qs: Tensor,
    pub w_ks: Tensor,
    pub w_vs: Tensor,
    pub w_o: Tensor,
}

impl SelfAttention {
    pub const NAMES: [&'static str; 4] = ["W_qs", "W_ks", "W_vs", "W_o"];

    pub fn register(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let s = 1.0 / (width as f64).sqrt();
        store.insert_normal(&format!("{prefix}.W_qs"), &[width, width], s, rng)?;
        store.insert_normal(&format!("{prefix}.W_ks"), &[width, width], s, rng)?;
        store.insert_normal(&format!("{prefix}.W_vs"), &[width, width], s, rng)?;
        store.insert_normal(&format!("{prefix}.W_o"), &[width, width], 0.5 * s, rng)?;
        Ok(())
    }

    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        let g = |n: &str| store.get(&format!("{prefix}.{n}"));
        Ok(Self { w_qs: g("W_qs")?, w_ks: g("W_ks")?, w_vs: g("W_vs")?, w_o: g("W_o")? })
    }

    fn keys_values(&self, ctx: &Tensor, obj: Option<&Tensor>) -> Result<(Tensor, Tensor, Tensor)> {
        let q = nn::linear(ctx, &self.w_qs, None)?;
        let src = match obj {
            Some(o) => Tensor::cat(&[ctx, o], ctx.rank() - 2)?,
            None => ctx.clone(),
        };
        Ok((q, nn::linear(&src, &self.w_ks, None)?, nn::linear(&src, &self.w_vs, None)?))
    }

    pub fn probs(&self, ctx: &Tensor, obj: Option<&Tensor>, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let (q, k, _) = self.keys_values(ctx, obj)?;
        nn::attention_probs(&q, &k, key_bias)
    }

    /// `O_s = softmax(Q_s K_s^T / sqrt(d)) V_s`.
    pub fn attend(&self, ctx: &Tensor, obj: Option<&Tensor>, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let (q, k, v) = self.keys_values(ctx, obj)?;
        nn::attention(&q, &k, &v, key_bias)
    }

    pub fn forward(&self, ctx: &Tensor, obj: Option<&Tensor>, key_bias: Option<&Tensor>) -> Result<Tensor> {
        nn::linear(&self.attend(ctx, obj, key_bias)?, &self.w_o, None)
    }
}

pub fn injected_self_attention(layer: &SelfAttention, c_ctx: &TokenSequence, c_obj: Option<&TokenSequence>) -> Result<TokenSequence> {
    let width = layer.w_qs.dims()[0];
    if c_ctx.width() != width || c_obj.is_some_and(|o| o.width() != width) {
        return shape_err("self-attention token width mismatch");
    }
    TokenSequence::new(layer.attend(c_ctx.tensor(), c_obj.map(TokenSequence::tensor), None)?)
}

/// Extra key/value tokens for each decoder self-attention layer.
pub struct Injection<'a> {
    /// One `(B, n_i, C_i)` tensor per decoder self-attention layer.
    pub features: &'a [Tensor],
    /// Per-sample switch; samples set to `false` see no injected tokens.
    pub active: Option<&'a [bool]>,
}

pub struct UNetInput<'a> {
    /// `(B, 2c + 1, h, w)`.
    pub z_tilde: &'a Tensor,
    pub timesteps: &'a [usize],
    /// `(B, L, D)`; the refinement network passes detail tokens here.
    pub text: &'a Tensor,
    /// `(B, N, D)`; `None` removes the image branch entirely.
    pub image: Option<&'a Tensor>,
    pub beta: f64,
    pub injection: Option<Injection<'a>>,
}

pub struct UNetOutput {
    /// `(B, c, h, w)`.
    pub eps: Tensor,
    /// Input features of each decoder self-attention layer, execution order.
    pub stash: Vec<Tensor>,
}

/// The encoder/decoder network rooted at a parameter-name prefix.
#[derive(Debug, Clone)]
pub struct UNet {
    prefix: String,
    cfg: ModelConfig,
}

const STAGES: [(&str, usize); 4] = [("enc", 0), ("enc", 1), ("dec", 1), ("dec", 0)];

impl UNet {
    pub fn new(prefix: impl Into<String>, cfg: ModelConfig) -> Self {
        Self { prefix: prefix.into(), cfg }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn n(&self, rest: &str) -> String {
        format!("{}.{rest}", self.prefix)
    }

    /// Number of decoder self-attention layers (injection sites).
    pub fn decoder_attention_layers(&self) -> usize {
        2
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.cfg.validate()?;
        let c = &self.cfg;
        let [w0, w1] = c.widths;
        let cin = c.input_channels();
        conv3_params(store, &self.n("conv_in"), cin, w0, rng)?;
        store.insert_normal(&self.n("time.lin1.w"), &[c.time_dim, c.time_dim], 1.0 / (c.time_dim as f64).sqrt(), rng)?;
        store.insert_const(&self.n("time.lin1.b"), &[c.time_dim], 0.0)?;
        store.insert_normal(&self.n("time.lin2.w"), &[c.time_dim, c.time_dim], 1.0 / (c.time_dim as f64).sqrt(), rng)?;
        store.insert_const(&self.n("time.lin2.b"), &[c.time_dim], 0.0)?;
        for (stage, res) in STAGES {
            let width = c.widths[res];
            let site = self.n(&format!("{stage}.res{res}"));
            for b in 0..2 {
                self.register_resblock(store, &format!("{site}.block{b}"), width, rng)?;
            }
            let tokens = (c.latent_size >> res) * (c.latent_size >> res);
            store.insert_normal(&format!("{site}.pos"), &[tokens, width], 0.02, rng)?;
            norm_params(store, &format!("{site}.self_attn.norm"), width)?;
            SelfAttention::register(store, &format!("{site}.self_attn"), width, rng)?;
            norm_params(store, &format!("{site}.cross_attn.norm"), width)?;
            CrossAttention::register(store, &format!("{site}.cross_attn"), width, c.cond_width, rng)?;
        }
        store.insert_normal(&self.n("down.w"), &[w0, w1], 1.0 / (w0 as f64).sqrt(), rng)?;
        store.insert_const(&self.n("down.b"), &[w1], 0.0)?;
        store.insert_normal(&self.n("up.w"), &[w1, w0], 1.0 / (w1 as f64).sqrt(), rng)?;
        store.insert_const(&self.n("up.b"), &[w0], 0.0)?;
        norm_params(store, &self.n("out.norm"), w0)?;
        store.insert_const(&self.n("out.conv.w"), &[9 * w0, c.latent_channels], 0.0)?;
        store.insert_const(&self.n("out.conv.b"), &[c.latent_channels], 0.0)?;
        Ok(())
    }

    fn register_resblock(&self, store: &mut ParamStore, p: &str, width: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        norm_params(store, &format!("{p}.norm1"), width)?;
        conv3_params(store, &format!("{p}.conv1"), width, width, rng)?;
        store.insert_normal(&format!("{p}.temb.w"), &[self.cfg.time_dim, width], 1.0 / (self.cfg.time_dim as f64).sqrt(), rng)?;
        store.insert_const(&format!("{p}.temb.b"), &[width], 0.0)?;
        norm_params(store, &format!("{p}.norm2"), width)?;
        conv3_params(store, &format!("{p}.conv2"), width, width, rng)?;
        Ok(())
    }

    fn resblock(&self, store: &ParamStore, p: &str, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let g = |n: &str| store.get(&format!("{p}.{n}"));
        let groups = self.cfg.groups;
        let h = nn::group_norm(x, groups, &g("norm1.g")?, &g("norm1.b")?, 1e-5)?.silu()?;
        let h = nn::conv3x3(&h, &g("conv1.w")?, &g("conv1.b")?)?;
        let t = nn::linear(temb, &g("temb.w")?, Some(&g("temb.b")?))?;
        let h = h.broadcast_add(&t.unsqueeze(2)?.unsqueeze(3)?)?;
        let h = nn::group_norm(&h, groups, &g("norm2.g")?, &g("norm2.b")?, 1e-5)?.silu()?;
        let h = nn::conv3x3(&h, &g("conv2.w")?, &g("conv2.b")?)?;
        Ok((x + h)?)
    }

    /// Normalised spatial tokens with positional embedding.
    fn site_tokens(&self, store: &ParamStore, site: &str, block: &str, x: &Tensor) -> Result<Tensor> {
        let g = |n: &str| store.get(&format!("{site}.{block}.norm.{n}"));
        let h = nn::group_norm(x, self.cfg.groups, &g("g")?, &g("b")?, 1e-5)?;
        Ok(nn::to_tokens(&h)?.broadcast_add(&store.get(&format!("{site}.pos"))?)?)
    }

    pub fn forward(&self, store: &ParamStore, input: &UNetInput) -> Result<UNetOutput> {
        let c = &self.cfg;
        let (bsz, cin, h, w) = input.z_tilde.dims4()?;
        if cin != c.input_channels() {
            return shape_err(format!("denoiser input has {cin} channels, expected {}", c.input_channels()));
        }
        if h != c.latent_size || w != c.latent_size {
            return shape_err(format!("latent {h}x{w}, model built for {0}x{0}", c.latent_size));
        }
        if input.timesteps.len() != bsz {
            return shape_err("one timestep per batch element required");
        }
        if let Some(&t) = input.timesteps.iter().find(|&&t| t >= c.num_train_timesteps) {
            return Err(Error::Timestep { t, max: c.num_train_timesteps });
        }
        if let Some(inj) = &input.injection {
            let shapes = c.decoder_attention_shapes();
            if inj.features.len() != shapes.len() {
                return shape_err(format!("{} injected buffers for {} decoder layers", inj.features.len(), shapes.len()));
            }
            for (f, (_, width)) in inj.features.iter().zip(&shapes) {
                if f.rank() != 3 || f.dims()[0] != bsz || f.dims()[2] != *width {
                    return shape_err(format!("injected buffer {:?} does not match layer width {width}", f.dims()));
                }
            }
        }
        let dev = input.z_tilde.device();
        let dtype = store.dtype();
        let z_tilde = input.z_tilde.to_dtype(dtype)?;
        let g = |n: &str| store.get(&self.n(n));

        let temb = nn::timestep_embedding(input.timesteps, c.time_dim, dev, dtype)?;
        let temb = nn::linear(&temb, &g("time.lin1.w")?, Some(&g("time.lin1.b")?))?.silu()?;
        let temb = nn::linear(&temb, &g("time.lin2.w")?, Some(&g("time.lin2.b")?))?.silu()?;

        let mut x = nn::conv3x3(&z_tilde, &g("conv_in.w")?, &g("conv_in.b")?)?;
        let mut stash = Vec::with_capacity(2);
        let mut skip = None;
        let mut dec_index = 0usize;
        for (stage, res) in STAGES {
            let site = self.n(&format!("{stage}.res{res}"));
            if (stage, res) == ("enc", 1) {
                skip = Some(x.clone());
                let pooled = x.avg_pool2d(2)?;
                x = nn::conv1x1(&pooled, &g("down.w")?, &g("down.b")?)?;
            }
            if (stage, res) == ("dec", 0) {
                let (_, _, hh, ww) = x.dims4()?;
                let up = x.upsample_nearest2d(hh * 2, ww * 2)?;
                x = (nn::conv1x1(&up, &g("up.w")?, &g("up.b")?)? + skip.take().expect("skip set on the way down"))?;
            }
            for b in 0..2 {
                x = self.resblock(store, &format!("{site}.block{b}"), &x, &temb)?;
            }
            let (_, _, sh, sw) = x.dims4()?;

            let ctx = self.site_tokens(store, &site, "self_attn", &x)?;
            let sa = SelfAttention::load(store, &format!("{site}.self_attn"))?;
            let out = if stage == "dec" {
                stash.push(ctx.clone());
                match &input.injection {
                    Some(inj) => {
                        let obj = &inj.features[dec_index];
                        let bias = injection_bias(inj.active, ctx.dims()[1], obj.dims()[1], dev, dtype)?;
                        sa.forward(&ctx, Some(obj), bias.as_ref())?
                    }
                    None => sa.forward(&ctx, None, None)?,
                }
            } else {
                sa.forward(&ctx, None, None)?
            };
            if stage == "dec" {
                dec_index += 1;
            }
            x = (x + nn::from_tokens(&out, sh, sw)?)?;

            let q = self.site_tokens(store, &site, "cross_attn", &x)?;
            let ca = CrossAttention::load(store, &format!("{site}.cross_attn"))?;
            let out = ca.forward(&q, input.text, input.image, input.beta)?;
            x = (x + nn::from_tokens(&out, sh, sw)?)?;
        }
        let x = nn::group_norm(&x, c.groups, &g("out.norm.g")?, &g("out.norm.b")?, 1e-5)?.silu()?;
        let eps = nn::conv3x3(&x, &g("out.conv.w")?, &g("out.conv.b")?)?;
        Ok(UNetOutput { eps, stash })
    }

    /// Single-sample noise prediction over a [`LatentBundle`].
    pub fn predict_noise(
        &self,
        store: &ParamStore,
        bundle: &LatentBundle,
        t: usize,
        cond: &ConditionBundle,
        beta: f64,
        injected: Option<&[Tensor]>,
    ) -> Result<LatentTensor> {
        self.predict(store, bundle, t, &cond.text, Some(&cond.image_tokens), beta, injected)
    }

    /// As [`UNet::predict_noise`] with explicit token sequences; `image =
    /// None` removes the image branch.
    #[allow(clippy::too_many_arguments)]
    pub fn predict(
        &self,
        store: &ParamStore,
        bundle: &LatentBundle,
        t: usize,
        text: &TokenSequence,
        image: Option<&TokenSequence>,
        beta: f64,
        injected: Option<&[Tensor]>,
    ) -> Result<LatentTensor> {
        if bundle.z.channels() != self.cfg.latent_channels {
            return shape_err(format!(
                "latent has {} channels, model expects {}",
                bundle.z.channels(),
                self.cfg.latent_channels
            ));
        }
        let dev = store.device();
        let dtype = store.dtype();
        let z_tilde = bundle.z_tilde.to_tensor(dev, dtype)?.unsqueeze(0)?;
        let text = text.tensor().to_dtype(dtype)?.unsqueeze(0)?;
        let image = match image {
            Some(i) => Some(i.tensor().to_dtype(dtype)?.unsqueeze(0)?),
            None => None,
        };
        let out = self.forward(
            store,
            &UNetInput {
                z_tilde: &z_tilde,
                timesteps: &[t],
                text: &text,
                image: image.as_ref(),
                beta,
                injection: injected.map(|features| Injection { features, active: None }),
            },
        )?;
        LatentTensor::from_tensor(&out.eps)
    }
}

/// `(B, 1, n_ctx + n_obj)` logit bias hiding injected keys for inactive
/// samples; `None` when every sample is active.
fn injection_bias(active: Option<&[bool]>, n_ctx: usize, n_obj: usize, dev: &Device, dtype: DType) -> Result<Option<Tensor>> {
    let Some(active) = active else { return Ok(None) };
    if active.iter().all(|&a| a) {
        return Ok(None);
    }
    let mut data = Vec::with_capacity(active.len() * (n_ctx + n_obj));
    for &a in active {
        data.extend(std::iter::repeat_n(0.0f64, n_ctx));
        data.extend(std::iter::repeat_n(if a { 0.0 } else { MASKED_LOGIT }, n_obj));
    }
    Ok(Some(Tensor::from_vec(data, (active.len(), 1, n_ctx + n_obj), dev)?.to_dtype(dtype)?))
}

fn conv3_params(store: &mut ParamStore, p: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    store.insert_normal(&format!("{p}.w"), &[9 * cin, cout], 1.0 / ((9 * cin) as f64).sqrt(), rng)?;
    store.insert_const(&format!("{p}.b"), &[cout], 0.0)
}

fn norm_params(store: &mut ParamStore, p: &str, width: usize) -> Result<()> {
    store.insert_const(&format!("{p}.g"), &[width], 1.0)?;
    store.insert_const(&format!("{p}.b"), &[width], 0.0)
}

/// True for parameters that belong to a cross-attention layer.
pub fn is_cross_attention_param(name: &str) -> bool {
    name.contains(".cross_attn.")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::derived_rng;

    fn tokens(rows: usize, width: usize, seed: u64) -> Tensor {
        let mut rng = derived_rng(seed, "tok", 0);
        Tensor::from_vec(nn::normal_vec(&mut rng, rows * width), (rows, width), &Device::Cpu)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
    }

    fn layer_store(width: usize, cond: usize) -> ParamStore {
        let mut store = ParamStore::new(Device::Cpu, DType::F64);
        let mut rng = derived_rng(3, "layer", 0);
        CrossAttention::register(&mut store, "ca", width, cond, &mut rng).unwrap();
        SelfAttention::register(&mut store, "sa", width, &mut rng).unwrap();
        store
    }

    fn vec(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn beta_zero_is_text_branch() {
        let store = layer_store(4, 3);
        let ca = CrossAttention::load(&store, "ca").unwrap();
        let (x, txt, img) = (tokens(5, 4, 1), tokens(2, 3, 2), tokens(3, 3, 3));
        let fused = ca.fuse(&x, &txt, Some(&img), 0.0).unwrap();
        let (z, _) = ca.branches(&x, &txt, Some(&img)).unwrap();
        assert_eq!(vec(&fused), vec(&z));
    }

    #[test]
    fn single_key_attention_returns_value_rows() {
        let store = layer_store(4, 3);
        let ca = CrossAttention::load(&store, "ca").unwrap();
        let (x, txt, img) = (tokens(2, 4, 4), tokens(1, 3, 5), tokens(1, 3, 6));
        let beta = 0.7;
        let out = vec(&ca.fuse(&x, &txt, Some(&img), beta).unwrap());
        let v = vec(&txt.matmul(&ca.w_v).unwrap());
        let vi = vec(&img.matmul(&ca.w_v_img).unwrap());
        for row in 0..2 {
            for j in 0..4 {
                let expect = v[j] + beta * vi[j];
                assert!((out[row * 4 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_is_affine_in_beta() {
        let store = layer_store(4, 3);
        let ca = CrossAttention::load(&store, "ca").unwrap();
        let (x, txt, img) = (tokens(3, 4, 7), tokens(2, 3, 8), tokens(4, 3, 9));
        let at = |b: f64| vec(&ca.fuse(&x, &txt, Some(&img), b).unwrap());
        let (a0, a5, a1) = (at(0.0), at(0.5), at(1.0));
        let (_, zi) = ca.branches(&x, &txt, Some(&img)).unwrap();
        let slope = vec(&zi.unwrap());
        for i in 0..a0.len() {
            assert!((a5[i] - 0.5 * (a0[i] + a1[i])).abs() < 1e-10);
            assert!((a1[i] - a0[i] - slope[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn decoupled_attention_rejects_width_mismatch() {
        let store = layer_store(4, 3);
        let ca = CrossAttention::load(&store, "ca").unwrap();
        let q = TokenSequence::new(tokens(2, 5, 1)).unwrap();
        let t = TokenSequence::new(tokens(2, 3, 1)).unwrap();
        assert!(matches!(decoupled_attention(&ca, &q, &t, &t, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn self_attention_without_injection_is_plain() {
        let store = layer_store(4, 3);
        let sa = SelfAttention::load(&store, "sa").unwrap();
        let ctx = TokenSequence::new(tokens(5, 4, 10)).unwrap();
        let a = injected_self_attention(&sa, &ctx, None).unwrap();
        let q = ctx.tensor().matmul(&sa.w_qs).unwrap();
        let k = ctx.tensor().matmul(&sa.w_ks).unwrap();
        let v = ctx.tensor().matmul(&sa.w_vs).unwrap();
        let plain = nn::attention(&q, &k, &v, None).unwrap();
        assert_eq!(vec(a.tensor()), vec(&plain));
        let obj = TokenSequence::new(tokens(7, 4, 11)).unwrap();
        assert_eq!(injected_self_attention(&sa, &ctx, Some(&obj)).unwrap().len(), 5);
    }

    /// Appending a copy of context token `j` is the same as counting key `j`
    /// twice in a hand-rolled softmax.
    #[test]
    fn duplicate_injected_token_doubles_key_weight() {
        let store = layer_store(4, 3);
        let sa = SelfAttention::load(&store, "sa").unwrap();
        let ctx = tokens(3, 4, 12);
        let j = 1;
        let obj = ctx.narrow(0, j, 1).unwrap();
        let got = vec(&sa.attend(&ctx, Some(&obj), None).unwrap());

        let c = vec(&ctx);
        let mm = |m: &Tensor| vec(m);
        let (wq, wk, wv) = (mm(&sa.w_qs), mm(&sa.w_ks), mm(&sa.w_vs));
        let proj = |row: &[f64], w: &[f64]| -> Vec<f64> {
            (0..4).map(|o| (0..4).map(|i| row[i] * w[i * 4 + o]).sum()).collect()
        };
        for r in 0..3 {
            let q = proj(&c[r * 4..r * 4 + 4], &wq);
            let mut weights = Vec::new();
            let mut values = Vec::new();
            for k in 0..3 {
                let key = proj(&c[k * 4..k * 4 + 4], &wk);
                let logit: f64 = q.iter().zip(&key).map(|(a, b)| a * b).sum::<f64>() / 2.0;
                let mult = if k == j { 2.0 } else { 1.0 };
                weights.push(mult * logit.exp());
                values.push(proj(&c[k * 4..k * 4 + 4], &wv));
            }
            let total: f64 = weights.iter().sum();
            for o in 0..4 {
                let expect: f64 = weights.iter().zip(&values).map(|(w, v)| w * v[o]).sum::<f64>() / total;
                assert!((got[r * 4 + o] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let store = layer_store(4, 3);
        let sa = SelfAttention::load(&store, "sa").unwrap();
        let p = sa.probs(&tokens(6, 4, 13), Some(&tokens(2, 4, 14)), None).unwrap();
        for s in p.sum(1).unwrap().to_vec1::<f64>().unwrap() {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
