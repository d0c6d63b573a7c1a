//! Denoising objective, condition dropout, Adam, and the two training
//! stages.
//!
//! Stage 1 trains every main-denoiser weight with the image branch at full
//! strength. Stage 2 attaches the refinement network, freezes everything
//! else, and trains only the refinement cross-attention layers and the
//! detail MLP with injection active.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointManifest};
use crate::conditioner::{ConditionBundle, Conditioner, DetailEncoder, DETAIL_PREFIX};
use crate::data_engine::Dataset;
use crate::denoiser::{Injection, UNetInput, MAIN_PREFIX};
use crate::error::{Error, Result};
use crate::model::{InpaintModel, ModelSpec};
use crate::nn::{derived_rng, normal_vec, ParamStore};
use crate::refiner::RefineNet;
use crate::sampler::Timestep;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Mean over the batch of each sample's root-sum-square error.
    L2,
    /// Mean squared error over every element.
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionField {
    Regional,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Image strength during training; 1.0 in stage 1 and 0.3 in stage 2
    /// when unset.
    pub beta_train: Option<f64>,
    pub p_text: f64,
    pub p_image: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub caption: CaptionField,
    pub adam: AdamConfig,
    /// Trailing window of the smoothed loss.
    pub smoothing_window: usize,
    /// Use only the first `n` samples of the dataset.
    pub max_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            batch_size: 8,
            steps: 2000,
            lr: 1e-3,
            beta_train: None,
            p_text: 0.1,
            p_image: 0.1,
            seed: 0,
            loss: LossKind::L2,
            caption: CaptionField::Regional,
            adam: AdamConfig::default(),
            smoothing_window: 50,
            max_samples: None,
        }
    }

    pub fn stage2() -> Self {
        Self { stage: 2, steps: 1000, ..Self::stage1() }
    }

    pub fn beta(&self) -> f64 {
        self.beta_train.unwrap_or(if self.stage == 1 { 1.0 } else { 0.3 })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !matches!(self.stage, 1 | 2) {
            return bad("stage must be 1 or 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if ![self.p_text, self.p_image].iter().all(|p| (0.0..=1.0).contains(p)) {
            return bad("dropout probabilities must lie in [0, 1]");
        }
        if !self.beta().is_finite() {
            return bad("beta_train must be finite");
        }
        if self.smoothing_window == 0 {
            return bad("smoothing_window must be positive");
        }
        Ok(())
    }
}

/// Batch loss between the true noise and the prediction, both `(B, ...)`.
pub fn denoising_loss(eps: &Tensor, pred: &Tensor, kind: LossKind) -> Result<Tensor> {
    if eps.dims() != pred.dims() {
        return Err(Error::Shape(format!("loss operands {:?} vs {:?}", eps.dims(), pred.dims())));
    }
    let sq = (pred - eps)?.sqr()?;
    Ok(match kind {
        LossKind::Mse => sq.mean_all()?,
        LossKind::L2 => sq.flatten_from(1)?.sum(1)?.sqrt()?.mean_all()?,
    })
}

/// Which modalities a dropout draw nulls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropDraw {
    pub text: bool,
    pub image: bool,
}

/// Independent Bernoulli draws, text first.
pub fn draw_dropout(rng: &mut ChaCha8Rng, p_text: f64, p_image: f64) -> Result<DropDraw> {
    if !(0.0..=1.0).contains(&p_text) || !(0.0..=1.0).contains(&p_image) {
        return Err(Error::Config(format!("dropout probabilities ({p_text}, {p_image}) outside [0, 1]")));
    }
    Ok(DropDraw { text: rng.random_bool(p_text), image: rng.random_bool(p_image) })
}

/// Nulls each modality of `cond` independently.
pub fn dropout_conditions(
    cond: &ConditionBundle,
    p_text: f64,
    p_image: f64,
    rng: &mut ChaCha8Rng,
    conditioner: &Conditioner,
) -> Result<ConditionBundle> {
    let d = draw_dropout(rng, p_text, p_image)?;
    let mut out = cond.clone();
    if d.text {
        out.text = conditioner.null_text()?;
        out.text_null = true;
    }
    if d.image {
        out.image_tokens = conditioner.null_image_tokens()?;
        out.detail_tokens = None;
        out.image_null = true;
    }
    Ok(out)
}

/// Adam with bias correction and no decay.
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    t: u64,
    moments: IndexMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig, lr: f64) -> Result<Self> {
        let mut moments = IndexMap::new();
        for name in store.trainable_names() {
            let z = store.get(&name)?.zeros_like()?;
            moments.insert(name, (z.clone(), z));
        }
        Ok(Self { cfg, lr, t: 0, moments })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update; parameters without a gradient see a zero gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, (m, v)) in self.moments.iter_mut() {
            let var = store.var(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.detach(),
                None => var.as_tensor().zeros_like()?,
            };
            *m = ((&*m * beta1)? + (&g * (1.0 - beta1))?)?.detach();
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            let m_hat = (&*m / c1)?;
            let v_hat = (&*v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
        }
        Ok(())
    }

    fn export(&self) -> Result<(Vec<String>, Vec<f32>)> {
        let mut names = Vec::new();
        let mut flat = Vec::new();
        for (n, (m, v)) in &self.moments {
            names.push(n.clone());
            flat.extend(m.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
            flat.extend(v.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
        }
        Ok((names, flat))
    }

    fn import(&mut self, names: &[String], flat: &[f32], t: u64) -> Result<()> {
        let ours: Vec<&String> = self.moments.keys().collect();
        if ours.len() != names.len() || ours.iter().zip(names).any(|(a, b)| *a != b) {
            return Err(Error::Checkpoint("optimizer state covers a different parameter set".into()));
        }
        let mut off = 0;
        for (m, v) in self.moments.values_mut() {
            let n = m.elem_count();
            let take = |off: usize| -> Result<Tensor> {
                let s = flat.get(off..off + n).ok_or_else(|| Error::Checkpoint("optimizer state truncated".into()))?;
                Ok(Tensor::from_vec(s.to_vec(), m.dims(), m.device())?.to_dtype(m.dtype())?)
            };
            let (nm, nv) = (take(off)?, take(off + n)?);
            *m = nm;
            *v = nv;
            off += 2 * n;
        }
        if off != flat.len() {
            return Err(Error::Checkpoint("optimizer state has trailing data".into()));
        }
        self.t = t;
        Ok(())
    }
}

/// Per-sample tensors computed once before training.
struct Prepared {
    z0: Tensor,
    z_s: Tensor,
    m_star: Tensor,
    text: Tensor,
    image: Tensor,
    z_obj: Tensor,
    patches: Tensor,
    null_text: Tensor,
}

impl Prepared {
    fn new(model: &InpaintModel, data: &Dataset, caption: CaptionField) -> Result<Self> {
        let dev = model.store.device();
        let dtype = model.store.dtype();
        let codec = &model.codec;
        let size = model.spec.image_size;
        let (mut z0, mut z_s, mut m, mut text, mut image, mut z_obj, mut patches) =
            (vec![], vec![], vec![], vec![], vec![], vec![], vec![]);
        for s in &data.samples {
            let q = &s.quad;
            if q.source.height() != size || q.source.width() != size {
                return Err(Error::Data(format!(
                    "sample {} is {}x{}, model trains at {size}x{size}",
                    s.id,
                    q.source.height(),
                    q.source.width()
                )));
            }
            z0.push(codec.encode(&q.source)?.to_tensor(dev, dtype)?);
            z_s.push(codec.encode_masked_source(&q.source, &q.mask)?.to_tensor(dev, dtype)?);
            m.push(codec.resize_mask(&q.mask)?.as_latent().to_tensor(dev, dtype)?);
            let prompt = match caption {
                CaptionField::Regional => &s.meta.caption_regional,
                CaptionField::Global => &s.meta.caption_global,
            };
            text.push(model.conditioner.embed_text(prompt)?.into_tensor());
            image.push(model.conditioner.project_image(&q.subject)?.into_tensor());
            z_obj.push(codec.encode(&q.subject)?.to_tensor(dev, dtype)?);
            patches.push(model.conditioner.patch_features(&q.subject)?);
        }
        let st = |v: Vec<Tensor>| -> Result<Tensor> { Ok(Tensor::stack(&v, 0)?.to_dtype(dtype)?) };
        Ok(Self {
            z0: st(z0)?,
            z_s: st(z_s)?,
            m_star: st(m)?,
            text: st(text)?,
            image: st(image)?,
            z_obj: st(z_obj)?,
            patches: st(patches)?,
            null_text: model.conditioner.null_text()?.into_tensor().to_dtype(dtype)?,
        })
    }

    fn len(&self) -> usize {
        self.z0.dims()[0]
    }
}

/// Everything drawn for one step, a pure function of `(seed, step)`.
#[derive(Debug, Clone)]
pub struct BatchDraw {
    pub indices: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub drops: Vec<DropDraw>,
    pub eps: Vec<f32>,
    pub eps_obj: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub adam_steps: u64,
    pub losses: Vec<f64>,
    pub optimizer_params: Vec<String>,
}

pub const TRAIN_STATE_FILE: &str = "train_state.json";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const LOSS_FILE: &str = "loss.csv";

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: InpaintModel,
    data: Prepared,
    adam: Adam,
    losses: Vec<f64>,
    step: usize,
    parent: Option<String>,
}

fn stage1_trainable(name: &str) -> bool {
    name.starts_with(&format!("{MAIN_PREFIX}."))
}

fn stage2_trainable(name: &str) -> bool {
    RefineNet::is_trainable_param(name) || name.starts_with(&format!("{DETAIL_PREFIX}."))
}

impl Trainer {
    /// Stage 1 from freshly initialised weights.
    pub fn stage1(cfg: TrainConfig, spec: ModelSpec, data: &Dataset) -> Result<Self> {
        Self::stage1_with_dtype(cfg, spec, data, DType::F32)
    }

    pub fn stage1_with_dtype(cfg: TrainConfig, spec: ModelSpec, data: &Dataset, dtype: DType) -> Result<Self> {
        if cfg.stage != 1 {
            return Err(Error::Config("stage-1 trainer needs stage = 1".into()));
        }
        let model = InpaintModel::init(spec, dtype)?;
        Self::build(cfg, model, data, None)
    }

    /// Stage 2 on top of a stage-1 model; `parent` is the stage-1
    /// checkpoint hash.
    pub fn stage2(cfg: TrainConfig, mut model: InpaintModel, parent: Option<String>, data: &Dataset) -> Result<Self> {
        if cfg.stage != 2 {
            return Err(Error::Config("stage-2 trainer needs stage = 2".into()));
        }
        if !model.use_image_branch {
            return Err(Error::Config("stage 2 needs a model with the image branch".into()));
        }
        model.attach_refine()?;
        Self::build(cfg, model, data, parent)
    }

    /// Stage 2 from a stage-1 checkpoint directory.
    pub fn stage2_from(cfg: TrainConfig, stage1: &Path, data: &Dataset) -> Result<Self> {
        let (model, manifest) = checkpoint::load(stage1)?;
        if manifest.stage != 1 {
            return Err(Error::Checkpoint(format!("{} is a stage-{} checkpoint, stage 2 needs stage 1", stage1.display(), manifest.stage)));
        }
        Self::stage2(cfg, model, Some(manifest.weights_sha256), data)
    }

    fn build(cfg: TrainConfig, mut model: InpaintModel, data: &Dataset, parent: Option<String>) -> Result<Self> {
        cfg.validate()?;
        let data = match cfg.max_samples {
            Some(n) => data.clone().truncated(n),
            None => data.clone(),
        };
        if data.is_empty() {
            return Err(Error::Data("training needs at least one sample".into()));
        }
        if cfg.stage == 1 {
            model.store.set_trainable(stage1_trainable);
        } else {
            model.store.set_trainable(stage2_trainable);
        }
        let prepared = Prepared::new(&model, &data, cfg.caption)?;
        let adam = Adam::new(&model.store, cfg.adam, cfg.lr)?;
        Ok(Self { cfg, model, data: prepared, adam, losses: Vec::new(), step: 0, parent })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn num_samples(&self) -> usize {
        self.data.len()
    }

    pub fn draw(&self, step: usize) -> Result<BatchDraw> {
        let mut rng = derived_rng(self.cfg.seed, "train.step", step as u64);
        let b = self.cfg.batch_size;
        let n = self.data.len();
        let t_max = self.model.schedule.len();
        let indices = (0..b).map(|_| rng.random_range(0..n)).collect();
        let timesteps = (0..b).map(|_| rng.random_range(0..t_max)).collect();
        let drops = (0..b).map(|_| draw_dropout(&mut rng, self.cfg.p_text, self.cfg.p_image)).collect::<Result<_>>()?;
        let numel = self.data.z0.elem_count() / n;
        let eps = normal_vec(&mut rng, b * numel);
        let eps_obj = if self.cfg.stage == 2 { normal_vec(&mut rng, b * numel) } else { Vec::new() };
        Ok(BatchDraw { indices, timesteps, drops, eps, eps_obj })
    }

    /// Loss of the batch drawn for `step` under the current weights.
    pub fn batch_loss(&self, draw: &BatchDraw) -> Result<Tensor> {
        let store = &self.model.store;
        let dev = store.device();
        let dtype = store.dtype();
        let d = &self.data;
        let b = draw.indices.len();
        let idx = Tensor::from_vec(draw.indices.iter().map(|&i| i as u32).collect::<Vec<_>>(), b, dev)?;
        let sel = |t: &Tensor| t.index_select(&idx, 0);
        let shape = d.z0.dims()[1..].to_vec();
        let mut bshape = vec![b];
        bshape.extend(&shape);

        let (sa, sb): (Vec<f64>, Vec<f64>) = draw
            .timesteps
            .iter()
            .map(|&t| {
                let ab = self.model.schedule.alpha_bar(Timestep::Step(t))?;
                Ok((ab.sqrt(), (1.0 - ab).sqrt()))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let col = |v: Vec<f64>| -> Result<Tensor> { Ok(Tensor::from_vec(v, (b, 1, 1, 1), dev)?.to_dtype(dtype)?) };
        let (sa, sb) = (col(sa)?, col(sb)?);
        let noised = |z0: &Tensor, e: &Tensor| -> Result<Tensor> { Ok((z0.broadcast_mul(&sa)? + e.broadcast_mul(&sb)?)?) };

        let eps = Tensor::from_vec(draw.eps.clone(), bshape.as_slice(), dev)?.to_dtype(dtype)?;
        let z_t = noised(&sel(&d.z0)?, &eps)?;
        let z_tilde = Tensor::cat(&[&z_t, &sel(&d.m_star)?, &sel(&d.z_s)?], 1)?;

        let keep = |f: fn(&DropDraw) -> bool| -> Result<Tensor> {
            let v: Vec<f64> = draw.drops.iter().map(|x| if f(x) { 0.0 } else { 1.0 }).collect();
            Ok(Tensor::from_vec(v, (b, 1, 1), dev)?.to_dtype(dtype)?)
        };
        let keep_text = keep(|x| x.text)?;
        let drop_text = (1.0 - &keep_text)?;
        let text = (sel(&d.text)?.broadcast_mul(&keep_text)? + d.null_text.unsqueeze(0)?.broadcast_mul(&drop_text)?)?;
        let image = if self.model.use_image_branch {
            Some(sel(&d.image)?.broadcast_mul(&keep(|x| x.image)?)?)
        } else {
            None
        };

        let active: Vec<bool> = draw.drops.iter().map(|x| !x.image).collect();
        let stash = if self.cfg.stage == 2 {
            let refine = self.model.refine.as_ref().ok_or_else(|| Error::Config("stage 2 without refinement network".into()))?;
            let eps_obj = Tensor::from_vec(draw.eps_obj.clone(), bshape.as_slice(), dev)?.to_dtype(dtype)?;
            let z_obj_t = noised(&sel(&d.z_obj)?, &eps_obj)?;
            let detail = DetailEncoder::forward(store, &sel(&d.patches)?)?;
            Some(refine.stash_batch(store, &z_obj_t, &draw.timesteps, &detail)?)
        } else {
            None
        };

        let out = self.model.main.forward(
            store,
            &UNetInput {
                z_tilde: &z_tilde,
                timesteps: &draw.timesteps,
                text: &text,
                image: image.as_ref(),
                beta: self.cfg.beta(),
                injection: stash.as_ref().map(|features| Injection { features, active: Some(&active) }),
            },
        )?;
        denoising_loss(&eps, &out.eps, self.cfg.loss)
    }

    /// One optimisation step; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let draw = self.draw(self.step)?;
        let loss = self.batch_loss(&draw)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step)));
        }
        let grads = loss.backward()?;
        self.adam.step(&self.model.store, &grads)?;
        self.losses.push(value);
        self.step += 1;
        Ok(value)
    }

    /// Runs until `self.cfg.steps` steps have been taken in total.
    pub fn run(&mut self, mut on_step: impl FnMut(usize, f64)) -> Result<()> {
        while self.step < self.cfg.steps {
            let l = self.step()?;
            on_step(self.step - 1, l);
        }
        Ok(())
    }

    /// Gradient L2 norm of every parameter for the batch of `step`, without
    /// updating. Parameters the graph never reaches report 0.
    pub fn gradient_norms(&self, step: usize) -> Result<BTreeMap<String, f64>> {
        let loss = self.batch_loss(&self.draw(step)?)?;
        let grads = loss.backward()?;
        let store = &self.model.store;
        let mut out = BTreeMap::new();
        for name in store.names() {
            let var = store.var(name).expect("listed parameter");
            let norm = match grads.get(var.as_tensor()) {
                Some(g) => g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?.sqrt(),
                None => 0.0,
            };
            out.insert(name.to_string(), norm);
        }
        Ok(out)
    }

    pub fn smoothed_losses(&self) -> Vec<f64> {
        smoothed(&self.losses, self.cfg.smoothing_window)
    }

    /// Writes the checkpoint, optimizer state and loss history.
    pub fn save(&self, dir: &Path, run: serde_json::Value) -> Result<CheckpointManifest> {
        let config = serde_json::json!({ "train": self.cfg, "run": run });
        let manifest = checkpoint::save(dir, &self.model, self.cfg.stage, config, self.parent.clone())?;
        let (names, flat) = self.adam.export()?;
        let state = TrainState { step: self.step, adam_steps: self.adam.steps_taken(), losses: self.losses.clone(), optimizer_params: names };
        std::fs::write(dir.join(TRAIN_STATE_FILE), serde_json::to_string_pretty(&state)?)?;
        let bytes: Vec<u8> = flat.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(dir.join(OPTIMIZER_FILE), bytes)?;
        write_loss_csv(&dir.join(LOSS_FILE), &self.losses, self.cfg.smoothing_window)?;
        Ok(manifest)
    }

    /// Continues a run saved with [`Trainer::save`]; `steps` may raise the
    /// step budget.
    pub fn resume(dir: &Path, data: &Dataset, steps: Option<usize>) -> Result<Self> {
        let (model, manifest) = checkpoint::load(dir)?;
        let mut cfg: TrainConfig = serde_json::from_value(manifest.config["train"].clone())
            .map_err(|e| Error::Checkpoint(format!("manifest has no training config: {e}")))?;
        if let Some(s) = steps {
            cfg.steps = s;
        }
        let state: TrainState = serde_json::from_str(&std::fs::read_to_string(dir.join(TRAIN_STATE_FILE))?)?;
        let mut trainer = Self::build(cfg, model, data, manifest.parent_sha256.clone())?;
        let bytes = std::fs::read(dir.join(OPTIMIZER_FILE))?;
        let flat: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        trainer.adam.import(&state.optimizer_params, &flat, state.adam_steps)?;
        trainer.losses = state.losses;
        trainer.step = state.step;
        Ok(trainer)
    }
}

/// Trailing-window mean of `losses`.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..losses.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Final over initial smoothed loss, where "initial" is the mean of the
/// first full window.
pub fn smoothed_ratio(losses: &[f64], window: usize) -> Option<f64> {
    if losses.len() < window || window == 0 {
        return None;
    }
    let s = smoothed(losses, window);
    Some(s[s.len() - 1] / s[window - 1])
}

pub fn write_loss_csv(path: &Path, losses: &[f64], window: usize) -> Result<()> {
    let mut out = String::from("step,loss,smoothed_loss\n");
    for (i, (l, s)) in losses.iter().zip(smoothed(losses, window)).enumerate() {
        out.push_str(&format!("{i},{l},{s}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;

    fn t(v: Vec<f64>, shape: (usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn loss_of_exact_prediction_is_zero() {
        let eps = t((0..12).map(|i| i as f64 * 0.3 - 1.0).collect(), (3, 4));
        for kind in [LossKind::L2, LossKind::Mse] {
            assert_eq!(denoising_loss(&eps, &eps, kind).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        }
    }

    #[test]
    fn unit_offset_gives_root_n() {
        let eps = t((0..2 * 9).map(|i| (i as f64).sin()).collect(), (2, 9));
        let pred = (&eps + 1.0).unwrap();
        let l2 = denoising_loss(&eps, &pred, LossKind::L2).unwrap().to_scalar::<f64>().unwrap();
        assert!((l2 - 3.0).abs() < 1e-12);
        let mse = denoising_loss(&eps, &pred, LossKind::Mse).unwrap().to_scalar::<f64>().unwrap();
        assert!((mse - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_extremes() {
        let c = Conditioner::new(Default::default(), &Device::Cpu, DType::F32).unwrap();
        let img = crate::codec::ImageTensor::filled(32, 32, 0.3).unwrap();
        let full = c.bundle(None, Some("a plain red circle"), Some(&img)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = dropout_conditions(&full, 0.0, 0.0, &mut rng, &c).unwrap();
        assert_eq!(same.text.to_vec().unwrap(), full.text.to_vec().unwrap());
        assert_eq!(same.image_tokens.to_vec().unwrap(), full.image_tokens.to_vec().unwrap());
        let null = dropout_conditions(&full, 1.0, 1.0, &mut rng, &c).unwrap();
        let expect = c.null_bundle().unwrap();
        assert_eq!(null.text.to_vec().unwrap(), expect.text.to_vec().unwrap());
        assert_eq!(null.image_tokens.to_vec().unwrap(), expect.image_tokens.to_vec().unwrap());
        assert!(null.text_null && null.image_null && null.detail_tokens.is_none());
        assert!(draw_dropout(&mut rng, 1.5, 0.0).is_err());
    }

    #[test]
    fn dropout_rates_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let (mut nt, mut ni, mut both) = (0usize, 0usize, 0usize);
        for _ in 0..n {
            let d = draw_dropout(&mut rng, 0.1, 0.1).unwrap();
            nt += usize::from(d.text);
            ni += usize::from(d.image);
            both += usize::from(d.text && d.image);
        }
        let f = |k: usize| k as f64 / n as f64;
        assert!((f(nt) - 0.1).abs() < 0.005);
        assert!((f(ni) - 0.1).abs() < 0.005);
        assert!((f(both) - 0.01).abs() < 0.002, "{}", f(both));
    }

    #[test]
    fn smoothing_window() {
        let s = smoothed(&[4.0, 2.0, 0.0, 2.0], 2);
        assert_eq!(s, vec![4.0, 3.0, 1.0, 1.0]);
        assert_eq!(smoothed_ratio(&[4.0, 2.0, 0.0, 2.0], 2), Some(1.0 / 3.0));
        assert_eq!(smoothed_ratio(&[1.0], 2), None);
    }

    #[test]
    fn stage_defaults() {
        assert_eq!(TrainConfig::stage1().beta(), 1.0);
        assert_eq!(TrainConfig::stage2().beta(), 0.3);
        assert!(TrainConfig { p_text: 2.0, ..TrainConfig::stage1() }.validate().is_err());
        let json = serde_json::to_value(TrainConfig::stage1()).unwrap();
        assert_eq!(json["loss"], "l2");
    }
}
