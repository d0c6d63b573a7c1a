//! Parameter storage and the small set of differentiable building blocks
//! the denoiser is assembled from. Everything is composed from primitive
//! candle ops so reverse-mode gradients are available for every block.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Additive logit bias that removes a key from a softmax exactly.
pub const MASKED_LOGIT: f64 = -1.0e9;

struct Param {
    var: Var,
    trainable: bool,
}

/// Named, ordered collection of model weights.
///
/// Forward passes fetch weights through [`ParamStore::get`], which detaches
/// frozen parameters. Gradients therefore never reach a frozen tensor.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType) -> Self {
        Self { device, dtype, params: IndexMap::new() }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        let tensor = tensor.to_dtype(self.dtype)?.to_device(&self.device)?;
        if self.params.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param { var: Var::from_tensor(&tensor)?, trainable: false });
        Ok(())
    }

    /// Inserts a tensor filled from a seeded normal draw scaled by `std`.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                v * std
            })
            .collect();
        self.insert(name, Tensor::from_vec(data, shape, &self.device)?)
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let t = (Tensor::ones(shape, DType::F64, &self.device)? * value)?;
        self.insert(name, t)
    }

    /// Weight as seen by a forward pass: attached when trainable, detached
    /// otherwise.
    pub fn get(&self, name: &str) -> Result<Tensor> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        Ok(if p.trainable { p.var.as_tensor().clone() } else { p.var.as_tensor().detach() })
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.params.get(name).map(|p| &p.var)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    /// Marks exactly the parameters selected by `pred` as trainable.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = pred(name);
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable(|_| false);
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect()
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        p.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Copies every parameter under `from` into a fresh entry under `to`.
    pub fn clone_prefix(&mut self, from: &str, to: &str) -> Result<usize> {
        let copies: Vec<(String, Tensor)> = self
            .params
            .iter()
            .filter_map(|(n, p)| {
                n.strip_prefix(from).map(|rest| (format!("{to}{rest}"), p.var.as_tensor().copy()))
            })
            .map(|(n, t)| t.map(|t| (n, t)))
            .collect::<candle_core::Result<_>>()?;
        let count = copies.len();
        for (n, t) in copies {
            self.insert(n, t)?;
        }
        Ok(count)
    }

    /// Host copy of every parameter as f32, in insertion order.
    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        self.params
            .iter()
            .map(|(n, p)| {
                let t = p.var.as_tensor();
                let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                Ok((n.clone(), t.dims().to_vec(), data))
            })
            .collect()
    }

    /// SHA-256 of one parameter's little-endian f32 bytes.
    pub fn hash_of(&self, name: &str) -> Result<String> {
        let t = self.get(name)?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(hash_f32(&data))
    }

    pub fn hashes(&self) -> Result<BTreeMap<String, String>> {
        self.params.keys().map(|n| Ok((n.clone(), self.hash_of(n)?))).collect()
    }
}

pub fn hash_f32(data: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in data {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Deterministic RNG for a named purpose under a master seed.
pub fn derived_rng(seed: u64, stream: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v: f32 = StandardNormal.sample(rng);
            v
        })
        .collect()
}

/// `x @ w (+ b)` over the last dimension; `x` may carry leading batch dims.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = x.broadcast_matmul(w)?;
    Ok(match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

/// 3x3 convolution, stride 1, zero padding 1, via im2col.
///
/// `x` is `(B, C, H, W)`, `w` is `(9 C, O)` with rows ordered
/// `(dy, dx, c)`, `b` is `(O)`.
pub fn conv3x3(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bsz, c, h, wd) = x.dims4()?;
    let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let mut cols = Vec::with_capacity(9);
    for dy in 0..3 {
        for dx in 0..3 {
            cols.push(padded.narrow(2, dy, h)?.narrow(3, dx, wd)?);
        }
    }
    let col = Tensor::cat(&cols, 1)?.permute((0, 2, 3, 1))?.reshape((bsz * h * wd, 9 * c))?;
    let y = col.matmul(w)?.broadcast_add(b)?;
    Ok(y.reshape((bsz, h, wd, ()))?.permute((0, 3, 1, 2))?.contiguous()?)
}

/// Per-pixel channel mixing: `(B, C, H, W) -> (B, O, H, W)`.
pub fn conv1x1(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bsz, c, h, wd) = x.dims4()?;
    let y = x.permute((0, 2, 3, 1))?.reshape((bsz * h * wd, c))?.matmul(w)?.broadcast_add(b)?;
    Ok(y.reshape((bsz, h, wd, ()))?.permute((0, 3, 1, 2))?.contiguous()?)
}

pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (bsz, c, h, w) = x.dims4()?;
    if c % groups != 0 {
        return Err(Error::Shape(format!("{c} channels not divisible into {groups} groups")));
    }
    let g = x.reshape((bsz, groups, (c / groups) * h * w))?;
    let mean = g.mean_keepdim(2)?;
    let centered = g.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?.reshape((bsz, c, h, w))?;
    let gamma = gamma.reshape((1, c, 1, 1))?;
    let beta = beta.reshape((1, c, 1, 1))?;
    Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Single-head scaled dot-product attention probabilities,
/// `softmax(q k^T / sqrt(d) + bias)`.
pub fn attention_probs(q: &Tensor, k: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    let logits = (q.matmul(&k.transpose(D::Minus2, D::Minus1)?.contiguous()?)? / (d as f64).sqrt())?;
    let logits = match key_bias {
        Some(b) => logits.broadcast_add(b)?,
        None => logits,
    };
    softmax_last(&logits)
}

pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
    Ok(attention_probs(q, k, key_bias)?.matmul(v)?)
}

/// `(B, C, H, W) -> (B, H W, C)`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `(B, H W, C) -> (B, C, H, W)`.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Sinusoidal embedding of integer timesteps, `(B) -> (B, dim)`.
pub fn timestep_embedding(ts: &[usize], dim: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn conv3x3_matches_scalar_convolution() {
        let (c, o, h, w) = (2usize, 3usize, 4usize, 5usize);
        let xs: Vec<f64> = (0..c * h * w).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.4).collect();
        let ws: Vec<f64> = (0..9 * c * o).map(|i| ((i * 5) % 13) as f64 / 13.0 - 0.5).collect();
        let bs = vec![0.1, -0.2, 0.3];
        let y = conv3x3(&t(xs.clone(), &[1, c, h, w]), &t(ws.clone(), &[9 * c, o]), &t(bs.clone(), &[o])).unwrap();
        let y = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for oc in 0..o {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = bs[oc];
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (sy, sx) = (yy as i64 + dy as i64 - 1, xx as i64 + dx as i64 - 1);
                            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                continue;
                            }
                            for ic in 0..c {
                                let wv = ws[((dy * 3 + dx) * c + ic) * o + oc];
                                acc += wv * xs[(ic * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    let got = y[(oc * h + yy) * w + xx];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0], &[2, 3]);
        let p = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for s in p {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_logit_removes_key_exactly() {
        let q = t(vec![0.3, -0.2], &[1, 1, 2]);
        let k = t(vec![1.0, 0.5, -0.3, 0.8, 0.9, 0.9], &[1, 3, 2]);
        let v = t(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 3, 2]);
        let bias = t(vec![0.0, 0.0, MASKED_LOGIT], &[1, 1, 3]);
        let masked = attention(&q, &k, &v, Some(&bias)).unwrap();
        let dropped = attention(&q, &k.narrow(1, 0, 2).unwrap(), &v.narrow(1, 0, 2).unwrap(), None).unwrap();
        assert_eq!(
            masked.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            dropped.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn frozen_parameters_are_detached() {
        let mut store = ParamStore::new(Device::Cpu, DType::F64);
        store.insert_const("a", &[2], 1.0).unwrap();
        store.insert_const("b", &[2], 2.0).unwrap();
        store.set_trainable(|n| n == "a");
        let loss = (store.get("a").unwrap() * store.get("b").unwrap()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(store.var("a").unwrap().as_tensor()).is_some());
        assert!(grads.get(store.var("b").unwrap().as_tensor()).is_none());
    }

    #[test]
    fn derived_rng_is_stream_separated() {
        use rand::Rng;
        let a: u64 = derived_rng(1, "x", 0).random();
        let b: u64 = derived_rng(1, "x", 0).random();
        let c: u64 = derived_rng(1, "y", 0).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
