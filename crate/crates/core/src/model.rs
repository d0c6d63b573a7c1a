//! The assembled inpainting model: codec, conditioner, weights, main
//! denoiser, optional refinement network and noise schedule.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, LatentBundle, LatentTensor};
use crate::conditioner::{ConditionBundle, Conditioner, ConditionerConfig, DetailEncoder};
use crate::denoiser::{ModelConfig, UNet, MAIN_PREFIX};
use crate::error::{Error, Result};
use crate::nn::{derived_rng, ParamStore};
use crate::refiner::RefineNet;
use crate::sampler::{NoiseSchedule, ScheduleConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub codec_factor: usize,
    pub image_size: usize,
    pub model: ModelConfig,
    pub conditioner: ConditionerConfig,
    pub schedule: ScheduleConfig,
    /// Whether the denoiser sees image tokens at all.
    pub use_image_branch: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            codec_factor: 4,
            image_size: 32,
            model: ModelConfig::default(),
            conditioner: ConditionerConfig::default(),
            schedule: ScheduleConfig::default(),
            use_image_branch: true,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let f = self.codec_factor;
        let bad = |m: String| Err(Error::Config(m));
        if f == 0 || self.image_size % f != 0 {
            return bad(format!("image_size {} not divisible by codec factor {f}", self.image_size));
        }
        if self.model.latent_channels != 3 * f * f {
            return bad(format!("latent_channels must be {} for factor {f}", 3 * f * f));
        }
        if self.model.latent_size != self.image_size / f {
            return bad(format!("latent_size must be {}", self.image_size / f));
        }
        if self.conditioner.image_size != self.image_size {
            return bad("conditioner image_size differs from model image_size".into());
        }
        if self.conditioner.cond_width != self.model.cond_width {
            return bad("conditioner and denoiser disagree on cond_width".into());
        }
        if self.schedule.num_train_timesteps != self.model.num_train_timesteps {
            return bad("schedule and denoiser disagree on num_train_timesteps".into());
        }
        self.model.validate()
    }
}

pub struct InpaintModel {
    pub spec: ModelSpec,
    pub codec: Codec,
    pub conditioner: Conditioner,
    pub schedule: NoiseSchedule,
    pub store: ParamStore,
    pub main: UNet,
    pub refine: Option<RefineNet>,
    pub use_image_branch: bool,
}

impl InpaintModel {
    /// Fresh weights from `spec.model.init_seed`.
    pub fn init(spec: ModelSpec, dtype: DType) -> Result<Self> {
        let mut model = Self::skeleton(spec, dtype)?;
        let mut rng = derived_rng(model.spec.model.init_seed, "init.main", 0);
        model.main.register(&mut model.store, &mut rng)?;
        let mut rng = derived_rng(model.spec.model.init_seed, "init.detail", 0);
        DetailEncoder::register(&mut model.store, &model.spec.conditioner, &mut rng)?;
        Ok(model)
    }

    /// Components without any weights.
    pub fn skeleton(spec: ModelSpec, dtype: DType) -> Result<Self> {
        spec.validate()?;
        let device = Device::Cpu;
        Ok(Self {
            codec: Codec::new(spec.codec_factor)?,
            conditioner: Conditioner::new(spec.conditioner.clone(), &device, dtype)?,
            schedule: NoiseSchedule::new(&spec.schedule)?,
            store: ParamStore::new(device, dtype),
            main: UNet::new(MAIN_PREFIX, spec.model.clone()),
            refine: None,
            use_image_branch: spec.use_image_branch,
            spec,
        })
    }

    /// Adds the refinement network, copying the current main weights.
    pub fn attach_refine(&mut self) -> Result<()> {
        if self.refine.is_some() {
            return Err(Error::Config("refinement network already attached".into()));
        }
        RefineNet::init_from_main(&mut self.store)?;
        self.refine = Some(RefineNet::new(self.spec.model.clone()));
        Ok(())
    }

    /// Noise prediction honouring `use_image_branch`.
    pub fn predict_noise(
        &self,
        bundle: &LatentBundle,
        t: usize,
        cond: &ConditionBundle,
        beta: f64,
        injected: Option<&[Tensor]>,
    ) -> Result<LatentTensor> {
        let image = self.use_image_branch.then_some(&cond.image_tokens);
        self.main.predict(&self.store, bundle, t, &cond.text, image, beta, injected)
    }

    /// Same weights with the image branch removed.
    pub fn without_image_branch(&self) -> Result<Self> {
        let mut m = self.try_clone()?;
        m.use_image_branch = false;
        m.spec.use_image_branch = false;
        Ok(m)
    }

    /// Deep copy of weights and components.
    pub fn try_clone(&self) -> Result<Self> {
        let mut m = Self::skeleton(self.spec.clone(), self.store.dtype())?;
        for name in self.store.names() {
            m.store.insert(name, self.store.get(name)?.copy()?)?;
        }
        m.store.set_trainable(|n| self.store.is_trainable(n));
        m.refine = self.refine.clone();
        m.use_image_branch = self.use_image_branch;
        Ok(m)
    }
}
