//! Forward process, classifier-free guidance, latent blending and the
//! deterministic sampling loop.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, CropWindow, ImageTensor, LatentMask, LatentTensor, MaskTensor};
use crate::error::{shape_err, Error, Result};
use crate::model::InpaintModel;
use crate::nn::{derived_rng, normal_vec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { num_train_timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// A point on the noise schedule. `Identity` is the clean end, where
/// `alpha_bar = 1`; it sits one step before index 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timestep {
    Identity,
    Step(usize),
}

/// Linear variance schedule with cumulative products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let n = cfg.num_train_timesteps;
        if n < 2 || !(0.0 < cfg.beta_start && cfg.beta_start < cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::Config(format!("invalid schedule {cfg:?}")));
        }
        let betas: Vec<f64> = (0..n)
            .map(|i| cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_cumprod })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn t_identity(&self) -> Timestep {
        Timestep::Identity
    }

    pub fn alpha_bar(&self, t: Timestep) -> Result<f64> {
        match t {
            Timestep::Identity => Ok(1.0),
            Timestep::Step(i) => self
                .alphas_cumprod
                .get(i)
                .copied()
                .ok_or(Error::Timestep { t: i, max: self.len() }),
        }
    }

    /// Descending sampling timesteps, evenly spaced and ending at index
    /// `T/steps - 1`; a single step starts at `T - 1`.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let n = self.len();
        if steps == 0 || steps > n {
            return Err(Error::Config(format!("sampling steps {steps} outside [1, {n}]")));
        }
        Ok((0..steps).rev().map(|k| ((k + 1) * n) / steps - 1).collect())
    }
}

/// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn add_noise(schedule: &NoiseSchedule, z0: &LatentTensor, t: Timestep, eps: &LatentTensor) -> Result<LatentTensor> {
    if !z0.same_shape(eps) {
        return shape_err("noise shape differs from latent");
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| (a * z as f64 + b * e as f64) as f32)
        .collect();
    LatentTensor::new(z0.channels(), z0.height(), z0.width(), data)
}

/// `eps_u + w (eps_c - eps_u)`, evaluated as `(1 - w) eps_u + w eps_c` so
/// that `w = 0` and `w = 1` return a branch exactly.
pub fn cfg_combine(eps_uncond: &LatentTensor, eps_cond: &LatentTensor, w: f64) -> Result<LatentTensor> {
    if !eps_uncond.same_shape(eps_cond) {
        return shape_err("guidance branches differ in shape");
    }
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(&u, &c)| ((1.0 - w) * u as f64 + w * c as f64) as f32)
        .collect();
    LatentTensor::new(eps_cond.channels(), eps_cond.height(), eps_cond.width(), data)
}

/// Keeps `z_t` under `m*` and takes the noised source elsewhere.
pub fn blend_step(z_t: &LatentTensor, z_s_t: &LatentTensor, m_star: &LatentMask) -> Result<LatentTensor> {
    if !z_t.same_shape(z_s_t) || z_t.height() != m_star.height() || z_t.width() != m_star.width() {
        return shape_err("blend operands differ in shape");
    }
    let plane = z_t.height() * z_t.width();
    let data = z_t
        .data()
        .iter()
        .zip(z_s_t.data())
        .enumerate()
        .map(|(i, (&g, &s))| if m_star.data()[i % plane] == 1 { g } else { s })
        .collect();
    LatentTensor::new(z_t.channels(), z_t.height(), z_t.width(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Classifier-free guidance scale `w`.
    pub cfg_scale: f64,
    /// Image control strength.
    pub beta: f64,
    pub steps: usize,
    pub blend: bool,
    pub composite: bool,
    pub refine: bool,
    pub seed: u64,
    /// Relative dilation of the mask box for the zoom-in crop.
    pub zoom_margin: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { cfg_scale: 7.5, beta: 0.3, steps: 50, blend: true, composite: true, refine: true, seed: 0, zoom_margin: 0.5 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Config(format!("guidance scale {} must be >= 0", self.cfg_scale)));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite".into()));
        }
        if self.steps == 0 || self.steps > schedule.len() {
            return Err(Error::Config(format!("steps {} outside [1, {}]", self.steps, schedule.len())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InpaintRequest {
    pub source: ImageTensor,
    pub mask: MaskTensor,
    pub subject: Option<ImageTensor>,
    pub prompt: Option<String>,
}

impl InpaintRequest {
    pub fn validate(&self) -> Result<()> {
        if self.source.height() != self.mask.height() || self.source.width() != self.mask.width() {
            return shape_err("mask and scene differ in size");
        }
        if self.mask.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(())
    }

    pub fn is_unconditional(&self) -> bool {
        self.subject.is_none() && self.prompt.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// Hooks into the sampling loop for instrumentation.
pub trait SampleObserver {
    /// Initial latent and the fixed noise used to noise the source latent.
    fn on_start(&mut self, _initial: &LatentTensor, _source_noise: &LatentTensor) {}
    fn on_model_call(&mut self, _step: usize, _branch: Branch) {}
    fn on_stash(&mut self, _step: usize) {}
    /// Latent after step `step`, sitting at noise level `level`.
    fn on_step(&mut self, _step: usize, _level: Timestep, _latent: &LatentTensor) {}
}

pub struct NoObserver;

impl SampleObserver for NoObserver {}

/// Counts model and stash calls.
#[derive(Debug, Default, Clone)]
pub struct CallCounter {
    pub conditional: usize,
    pub unconditional: usize,
    pub stashes: usize,
    pub steps: usize,
}

impl SampleObserver for CallCounter {
    fn on_model_call(&mut self, _step: usize, branch: Branch) {
        match branch {
            Branch::Conditional => self.conditional += 1,
            Branch::Unconditional => self.unconditional += 1,
        }
    }

    fn on_stash(&mut self, _step: usize) {
        self.stashes += 1;
    }

    fn on_step(&mut self, _step: usize, _level: Timestep, _latent: &LatentTensor) {
        self.steps += 1;
    }
}

/// Noise for a sampling run, drawn from the run's seed.
pub struct SamplerNoise {
    pub initial: LatentTensor,
    pub source: LatentTensor,
    refine_seed: u64,
}

impl SamplerNoise {
    pub fn new(seed: u64, channels: usize, size: usize) -> Result<Self> {
        let n = channels * size * size;
        let initial = LatentTensor::new(channels, size, size, normal_vec(&mut derived_rng(seed, "sample.init", 0), n))?;
        let source = LatentTensor::new(channels, size, size, normal_vec(&mut derived_rng(seed, "sample.source", 0), n))?;
        Ok(Self { initial, source, refine_seed: seed })
    }

    /// Independent draw for the subject branch at one step.
    pub fn refine(&self, step: usize, channels: usize, size: usize) -> Result<LatentTensor> {
        let mut rng: ChaCha8Rng = derived_rng(self.refine_seed, "sample.refine", step as u64);
        LatentTensor::new(channels, size, size, normal_vec(&mut rng, channels * size * size))
    }
}

/// Runs the full denoising loop for a request already at model resolution.
pub fn sample(req: &InpaintRequest, cfg: &GuidanceConfig, model: &InpaintModel, observer: &mut dyn SampleObserver) -> Result<ImageTensor> {
    req.validate()?;
    cfg.validate(&model.schedule)?;
    let res = model.spec.image_size;
    if req.source.height() != res || req.source.width() != res {
        return Err(Error::InvalidInput(format!(
            "scene is {}x{}, model samples at {res}x{res}; use inpaint() for other sizes",
            req.source.height(),
            req.source.width()
        )));
    }
    let codec = &model.codec;
    let c = codec.latent_channels();
    let size = model.spec.model.latent_size;
    let schedule = &model.schedule;

    let source_latent = codec.encode(&req.source)?;
    let z_s = codec.encode_masked_source(&req.source, &req.mask)?;
    let m_star = codec.resize_mask(&req.mask)?;

    let subject = match &req.subject {
        Some(s) => Some(s.resize(res, res)?),
        None => None,
    };
    let store = &model.store;
    let cond = model.conditioner.bundle(Some(store), req.prompt.as_deref(), subject.as_ref())?;
    let uncond = model.conditioner.null_bundle()?;
    let refine = match (&model.refine, &subject, &cond.detail_tokens) {
        (Some(r), Some(s), Some(d)) if cfg.refine && model.use_image_branch => Some((r, s, d)),
        _ => None,
    };

    let noise = SamplerNoise::new(cfg.seed, c, size)?;
    let timesteps = schedule.sampling_timesteps(cfg.steps)?;
    let mut z = noise.initial.clone();
    if cfg.blend {
        let start = Timestep::Step(timesteps[0]);
        z = blend_step(&z, &add_noise(schedule, &source_latent, start, &noise.source)?, &m_star)?;
    }
    observer.on_start(&z, &noise.source);

    for (i, &t) in timesteps.iter().enumerate() {
        let bundle = codec.assemble_input(&z, &m_star, &z_s)?;
        let injected = match refine {
            Some((r, subj, detail)) => {
                let obj_noise = noise.refine(i, c, size)?;
                observer.on_stash(i);
                Some(r.stash_features(store, codec, schedule, subj, t, &obj_noise, detail)?)
            }
            None => None,
        };
        observer.on_model_call(i, Branch::Conditional);
        let eps_c = model.predict_noise(&bundle, t, &cond, cfg.beta, injected.as_ref().map(|s| s.tensors()))?;
        observer.on_model_call(i, Branch::Unconditional);
        let eps_u = model.predict_noise(&bundle, t, &uncond, cfg.beta, None)?;
        let eps = cfg_combine(&eps_u, &eps_c, cfg.cfg_scale)?;
        if !eps.is_finite() {
            return Err(Error::NonFinite(format!("noise prediction at step {i}")));
        }

        let prev = match timesteps.get(i + 1) {
            Some(&p) => Timestep::Step(p),
            None => Timestep::Identity,
        };
        z = ddim_update(schedule, &z, &eps, Timestep::Step(t), prev)?;
        if cfg.blend {
            z = blend_step(&z, &add_noise(schedule, &source_latent, prev, &noise.source)?, &m_star)?;
        }
        observer.on_step(i, prev, &z);
    }

    let generated = codec.decode(&z)?;
    if cfg.composite {
        codec::composite(&req.source, &req.mask, &generated)
    } else {
        Ok(generated)
    }
}

/// Deterministic update from level `t` to level `prev`.
pub fn ddim_update(schedule: &NoiseSchedule, z: &LatentTensor, eps: &LatentTensor, t: Timestep, prev: Timestep) -> Result<LatentTensor> {
    if !z.same_shape(eps) {
        return shape_err("noise prediction shape differs from latent");
    }
    let ab_t = schedule.alpha_bar(t)?;
    let ab_p = schedule.alpha_bar(prev)?;
    let (st, nt) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sp, np) = (ab_p.sqrt(), (1.0 - ab_p).sqrt());
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&zv, &e)| {
            let x0 = (zv as f64 - nt * e as f64) / st;
            (sp * x0 + np * e as f64) as f32
        })
        .collect();
    LatentTensor::new(z.channels(), z.height(), z.width(), data)
}

/// Window actually sampled: the zoom window widened to at least the model
/// resolution where the scene allows it.
pub fn sampling_window(model: &InpaintModel, mask: &MaskTensor, margin: f64) -> Result<CropWindow> {
    let win = model.codec.zoom_window(mask, margin)?;
    let want = model.spec.image_size.min(mask.height()).min(mask.width());
    if win.side >= want {
        return Ok(win);
    }
    let bbox = mask.bbox().ok_or(Error::EmptyMask)?;
    let place = |lo: usize, len: usize, extent: usize| lo.saturating_sub((want - len) / 2).min(extent - want);
    Ok(CropWindow {
        x0: place(bbox.x0, bbox.width(), mask.width()),
        y0: place(bbox.y0, bbox.height(), mask.height()),
        side: want,
    })
}

/// Zoom-in inpainting for scenes of any size: crop around the mask, resize
/// to model resolution, sample, resize back, paste, and composite against
/// the untouched scene.
pub fn inpaint(req: &InpaintRequest, cfg: &GuidanceConfig, model: &InpaintModel, observer: &mut dyn SampleObserver) -> Result<(ImageTensor, CropWindow)> {
    req.validate()?;
    let res = model.spec.image_size;
    let win = sampling_window(model, &req.mask, cfg.zoom_margin)?;
    let crop_src = req.source.crop_window(&win)?.resize(res, res)?;
    let crop_mask = req.mask.crop(win.x0, win.y0, win.side, win.side)?.resize_nearest(res, res);
    if crop_mask.is_empty() {
        return Err(Error::InvalidInput("mask vanished after resizing the zoom window".into()));
    }
    let inner = InpaintRequest { source: crop_src, mask: crop_mask, subject: req.subject.clone(), prompt: req.prompt.clone() };
    let out = sample(&inner, cfg, model, observer)?;
    let back = out.resize(win.side, win.side)?;
    let mut pasted = req.source.clone();
    pasted.paste(&back, win.x0, win.y0)?;
    let result = if cfg.composite { codec::composite(&req.source, &req.mask, &pasted)? } else { pasted };
    Ok((result, win))
}

/// Writes one `.npy` file per step plus `index.json`.
pub struct LatentDumper {
    dir: PathBuf,
    entries: Vec<serde_json::Value>,
    error: Option<std::io::Error>,
}

impl LatentDumper {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), entries: Vec::new(), error: None })
    }

    pub fn finish(self) -> Result<()> {
        if let Some(e) = self.error {
            return Err(e.into());
        }
        let index = serde_json::json!({ "steps": self.entries });
        std::fs::write(self.dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }
}

impl SampleObserver for LatentDumper {
    fn on_step(&mut self, step: usize, level: Timestep, latent: &LatentTensor) {
        let file = format!("step_{step:04}.npy");
        if let Err(e) = write_npy(&self.dir.join(&file), latent) {
            self.error.get_or_insert(e);
        }
        let t = match level {
            Timestep::Identity => serde_json::Value::Null,
            Timestep::Step(t) => t.into(),
        };
        self.entries.push(serde_json::json!({ "step": step, "t": t, "file": file }));
    }
}

/// NPY v1.0, little-endian f32, C order, shape `(c, h, w)`.
pub fn write_npy(path: &Path, latent: &LatentTensor) -> std::io::Result<()> {
    let mut header = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}, {}), }}",
        latent.channels(),
        latent.height(),
        latent.width()
    );
    let total = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - total % 64) % 64));
    header.push('\n');
    let mut bytes = Vec::with_capacity(10 + header.len() + latent.data().len() * 4);
    bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in latent.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)
}

pub fn read_npy(path: &Path) -> Result<LatentTensor> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(Error::Data(format!("{} is not an npy file", path.display())));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(&bytes[10..10 + hlen]).map_err(|e| Error::Data(e.to_string()))?;
    let shape_str = header
        .split("'shape': (")
        .nth(1)
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| Error::Data("npy header without shape".into()))?;
    let dims: Vec<usize> = shape_str
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| Error::Data("bad npy shape".into())))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(Error::Data("npy latent must be rank 3".into()));
    }
    let data = bytes[10 + hlen..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    LatentTensor::new(dims[0], dims[1], dims[2], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn latent(seed: u64, c: usize, h: usize, w: usize) -> LatentTensor {
        LatentTensor::new(c, h, w, normal_vec(&mut derived_rng(seed, "lat", 0), c * h * w)).unwrap()
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::new(&ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn schedule_is_monotone() {
        let s = schedule();
        assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
        let abar: Vec<f64> = (0..s.len()).map(|t| s.alpha_bar(Timestep::Step(t)).unwrap()).collect();
        assert!(abar.windows(2).all(|w| w[0] > w[1]));
        assert!(abar[0] < 1.0);
        assert_eq!(s.alpha_bar(s.t_identity()).unwrap(), 1.0);
        assert!(matches!(s.alpha_bar(Timestep::Step(1000)), Err(Error::Timestep { t: 1000, max: 1000 })));
    }

    #[test]
    fn sampling_timesteps_cover_range() {
        let s = schedule();
        assert_eq!(s.sampling_timesteps(1).unwrap(), vec![999]);
        let ts = s.sampling_timesteps(50).unwrap();
        assert_eq!((ts.len(), ts[0], ts[49]), (50, 999, 19));
        assert!(s.sampling_timesteps(0).is_err());
    }

    #[test]
    fn add_noise_boundaries() {
        let s = schedule();
        let z0 = latent(1, 3, 2, 2);
        let eps = latent(2, 3, 2, 2);
        assert_eq!(add_noise(&s, &z0, s.t_identity(), &eps).unwrap(), z0);
        let zero = LatentTensor::zeros(3, 2, 2);
        let t = Timestep::Step(500);
        let scale = (1.0 - s.alpha_bar(t).unwrap()).sqrt();
        let out = add_noise(&s, &zero, t, &eps).unwrap();
        for (o, e) in out.data().iter().zip(eps.data()) {
            assert_eq!(*o, (scale * *e as f64) as f32);
        }
    }

    #[test]
    fn add_noise_monte_carlo_mean() {
        let s = schedule();
        let t = Timestep::Step(300);
        let ab = s.alpha_bar(t).unwrap();
        let z0 = LatentTensor::new(1, 1, 4, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let n = 10_000;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut sums = [0.0f64; 4];
        for _ in 0..n {
            let eps = LatentTensor::new(1, 1, 4, normal_vec(&mut rng, 4)).unwrap();
            for (s, v) in sums.iter_mut().zip(add_noise(&s, &z0, t, &eps).unwrap().data()) {
                *s += *v as f64;
            }
        }
        let sigma = (1.0 - ab).sqrt();
        let tol = 3.0 * sigma / (n as f64).sqrt();
        for (sum, &z) in sums.iter().zip(z0.data()) {
            let mean = sum / n as f64;
            assert!((mean - ab.sqrt() * z as f64).abs() < tol, "{mean} vs {}", ab.sqrt() * z as f64);
        }
    }

    #[test]
    fn cfg_combine_exact_branches() {
        let u = latent(3, 2, 3, 3);
        let c = latent(4, 2, 3, 3);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        let zero = LatentTensor::zeros(1, 2, 2);
        let one = LatentTensor::new(1, 2, 2, vec![1.0; 4]).unwrap();
        assert!(cfg_combine(&zero, &one, 7.5).unwrap().data().iter().all(|&v| v == 7.5));
        assert!(cfg_combine(&zero, &LatentTensor::zeros(2, 2, 2), 1.0).is_err());
    }

    #[test]
    fn blend_matches_scalar_select() {
        let a = latent(5, 3, 4, 4);
        let b = latent(6, 3, 4, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let m = LatentMask::new(4, 4, (0..16).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
        let out = blend_step(&a, &b, &m).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let expect = if m.get(y, x) { a.get(c, y, x) } else { b.get(c, y, x) };
                    assert_eq!(out.get(c, y, x), expect);
                }
            }
        }
        assert_eq!(blend_step(&a, &b, &LatentMask::new(4, 4, vec![1; 16]).unwrap()).unwrap(), a);
        assert_eq!(blend_step(&a, &b, &LatentMask::new(4, 4, vec![0; 16]).unwrap()).unwrap(), b);
    }

    #[test]
    fn ddim_to_identity_returns_x0_estimate() {
        let s = schedule();
        let z0 = latent(7, 2, 2, 2);
        let eps = latent(8, 2, 2, 2);
        let t = Timestep::Step(400);
        let zt = add_noise(&s, &z0, t, &eps).unwrap();
        let back = ddim_update(&s, &zt, &eps, t, Timestep::Identity).unwrap();
        for (a, b) in back.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn npy_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let z = latent(9, 3, 2, 5);
        let p = dir.path().join("z.npy");
        write_npy(&p, &z).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        assert_eq!(read_npy(&p).unwrap(), z);
    }
}
