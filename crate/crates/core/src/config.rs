//! Flat run configuration: one JSON object whose keys cover every module.
//! Unknown keys are rejected; missing keys take built-in defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioner::ConditionerConfig;
use crate::data_engine::DataConfig;
use crate::denoiser::ModelConfig;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::sampler::{GuidanceConfig, ScheduleConfig};
use crate::trainer::{AdamConfig, CaptionField, LossKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Codec and model.
    pub image_size: usize,
    pub codec_factor: usize,
    pub widths: [usize; 2],
    pub groups: usize,
    pub time_dim: usize,
    pub cond_width: usize,
    pub num_train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub init_seed: u64,
    pub use_image_branch: bool,
    // Conditioner.
    pub encoder_seed: u64,
    pub vocab_size: usize,
    pub max_text_tokens: usize,
    pub image_tokens: usize,
    pub patch_size: usize,
    pub patch_width: usize,
    pub detail_hidden: usize,
    // Training.
    pub batch_size: usize,
    /// Defaults to 2000 in stage 1 and 1000 in stage 2.
    pub steps: Option<usize>,
    pub lr: f64,
    pub beta_train: Option<f64>,
    pub p_text: f64,
    pub p_image: f64,
    pub train_seed: u64,
    pub loss: LossKind,
    pub caption: CaptionField,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub smoothing_window: usize,
    pub max_samples: Option<usize>,
    // Sampling.
    pub cfg_scale: f64,
    pub beta: f64,
    pub sample_steps: usize,
    pub blend: bool,
    pub composite: bool,
    pub refine: bool,
    pub sample_seed: u64,
    pub zoom_margin: f64,
    // Data engine.
    pub stoplist: Vec<String>,
    pub min_area_ratio: f64,
    pub max_area_ratio: f64,
    pub max_skip_rate: f64,
    // Paths.
    pub data_root: Option<String>,
    pub bench_root: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let c = ConditionerConfig::default();
        let s = ScheduleConfig::default();
        let t = TrainConfig::stage1();
        let g = GuidanceConfig::default();
        let d = DataConfig::default();
        let spec = ModelSpec::default();
        Self {
            image_size: spec.image_size,
            codec_factor: spec.codec_factor,
            widths: m.widths,
            groups: m.groups,
            time_dim: m.time_dim,
            cond_width: m.cond_width,
            num_train_timesteps: s.num_train_timesteps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            init_seed: m.init_seed,
            use_image_branch: spec.use_image_branch,
            encoder_seed: c.seed,
            vocab_size: c.vocab_size,
            max_text_tokens: c.max_text_tokens,
            image_tokens: c.image_tokens,
            patch_size: c.patch_size,
            patch_width: c.patch_width,
            detail_hidden: c.detail_hidden,
            batch_size: t.batch_size,
            steps: None,
            lr: t.lr,
            beta_train: None,
            p_text: t.p_text,
            p_image: t.p_image,
            train_seed: t.seed,
            loss: t.loss,
            caption: t.caption,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            smoothing_window: t.smoothing_window,
            max_samples: None,
            cfg_scale: g.cfg_scale,
            beta: g.beta,
            sample_steps: g.steps,
            blend: g.blend,
            composite: g.composite,
            refine: g.refine,
            sample_seed: g.seed,
            zoom_margin: g.zoom_margin,
            stoplist: d.stoplist,
            min_area_ratio: d.min_area_ratio,
            max_area_ratio: d.max_area_ratio,
            max_skip_rate: d.max_skip_rate,
            data_root: None,
            bench_root: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let f = self.codec_factor;
        if f == 0 || self.image_size % f != 0 {
            return Err(Error::Config(format!("image_size {} not divisible by codec_factor {f}", self.image_size)));
        }
        let spec = ModelSpec {
            codec_factor: f,
            image_size: self.image_size,
            model: ModelConfig {
                latent_channels: 3 * f * f,
                latent_size: self.image_size / f,
                widths: self.widths,
                groups: self.groups,
                time_dim: self.time_dim,
                cond_width: self.cond_width,
                num_train_timesteps: self.num_train_timesteps,
                init_seed: self.init_seed,
            },
            conditioner: ConditionerConfig {
                image_size: self.image_size,
                vocab_size: self.vocab_size,
                max_text_tokens: self.max_text_tokens,
                cond_width: self.cond_width,
                image_tokens: self.image_tokens,
                patch_size: self.patch_size,
                patch_width: self.patch_width,
                detail_hidden: self.detail_hidden,
                seed: self.encoder_seed,
            },
            schedule: ScheduleConfig {
                num_train_timesteps: self.num_train_timesteps,
                beta_start: self.beta_start,
                beta_end: self.beta_end,
            },
            use_image_branch: self.use_image_branch,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self, stage: u8) -> Result<TrainConfig> {
        let base = if stage == 2 { TrainConfig::stage2() } else { TrainConfig::stage1() };
        let cfg = TrainConfig {
            stage,
            batch_size: self.batch_size,
            steps: self.steps.unwrap_or(base.steps),
            lr: self.lr,
            beta_train: self.beta_train,
            p_text: self.p_text,
            p_image: self.p_image,
            seed: self.train_seed,
            loss: self.loss,
            caption: self.caption,
            adam: AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps },
            smoothing_window: self.smoothing_window,
            max_samples: self.max_samples,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            cfg_scale: self.cfg_scale,
            beta: self.beta,
            steps: self.sample_steps,
            blend: self.blend,
            composite: self.composite,
            refine: self.refine,
            seed: self.sample_seed,
            zoom_margin: self.zoom_margin,
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            image_size: self.image_size,
            stoplist: self.stoplist.clone(),
            min_area_ratio: self.min_area_ratio,
            max_area_ratio: self.max_area_ratio,
            max_skip_rate: self.max_skip_rate,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_module_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.model_spec().unwrap(), ModelSpec::default());
        assert_eq!(c.train_config(1).unwrap(), TrainConfig::stage1());
        assert_eq!(c.train_config(2).unwrap(), TrainConfig::stage2());
        assert_eq!(c.guidance(), GuidanceConfig::default());
        assert_eq!(c.data_config(), DataConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"lr": 0.001}"#).unwrap().lr == 0.001);
        assert!(matches!(RunConfig::from_json(r#"{"learning_rate": 0.001}"#), Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig { steps: Some(7), beta: 0.9, ..Default::default() };
        let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
