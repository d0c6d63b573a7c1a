#![allow(dead_code)]

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use regionfill::codec::{BBox, ImageTensor, MaskTensor};
use regionfill::config::RunConfig;
use regionfill::model::{InpaintModel, ModelSpec};
use regionfill::nn::derived_rng;

/// Smallest configuration that keeps every mechanism in place.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        widths: [8, 16],
        groups: 4,
        time_dim: 16,
        cond_width: 8,
        patch_width: 16,
        detail_hidden: 16,
        batch_size: 4,
        ..Default::default()
    }
}

pub fn tiny_spec() -> ModelSpec {
    tiny_config().model_spec().unwrap()
}

/// Fresh model with every weight nudged off its initial value, so that
/// zero-initialised output layers do not hide differences.
pub fn jittered(spec: ModelSpec, dtype: DType, seed: u64) -> InpaintModel {
    let mut model = InpaintModel::init(spec, dtype).unwrap();
    model.attach_refine().unwrap();
    jitter(&model, seed);
    model
}

/// As [`jittered`] without the refinement network.
pub fn jittered_stage1(spec: ModelSpec, dtype: DType, seed: u64) -> InpaintModel {
    let model = InpaintModel::init(spec, dtype).unwrap();
    jitter(&model, seed);
    model
}

pub fn jitter(model: &InpaintModel, seed: u64) {
    let mut rng = derived_rng(seed, "test.jitter", 0);
    let names: Vec<String> = model.store.names().map(String::from).collect();
    for name in names {
        let cur = model.store.var(&name).unwrap().as_tensor().clone();
        let noise: Vec<f64> = (0..cur.elem_count()).map(|_| 0.05 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
        let noise = Tensor::from_vec(noise, cur.dims(), cur.device()).unwrap().to_dtype(cur.dtype()).unwrap();
        model.store.set(&name, &(cur + noise).unwrap()).unwrap();
    }
}

pub fn random_image(seed: u64, size: usize) -> ImageTensor {
    let mut rng = derived_rng(seed, "test.image", 0);
    ImageTensor::new(size, size, (0..size * size * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

pub fn rect_mask(size: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> MaskTensor {
    MaskTensor::rect(size, size, BBox { x0, y0, x1, y1 }).unwrap()
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().map(|v| v.to_bits()).collect()
}
