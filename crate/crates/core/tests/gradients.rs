//! Analytic gradients against central finite differences in f64.

use candle_core::{DType, Device, Tensor};
use rand_distr::{Distribution, StandardNormal};

use regionfill::conditioner::{ConditionerConfig, DetailEncoder, DETAIL_PREFIX};
use regionfill::denoiser::{CrossAttention, SelfAttention};
use regionfill::nn::{derived_rng, ParamStore};
use regionfill::trainer::{denoising_loss, LossKind};

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn randn(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = derived_rng(seed, "grad.test", 0);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

/// Relative error `|a - n| / max(|a|, |n|)` over every element of every
/// named parameter.
fn check(store: &ParamStore, names: &[String], loss: impl Fn(&ParamStore) -> Tensor) {
    let grads = loss(store).backward().unwrap();
    for name in names {
        let var = store.var(name).unwrap();
        let analytic: Vec<f64> = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no gradient for {name}")).flatten_all().unwrap().to_vec1().unwrap();
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let shape = var.as_tensor().dims().to_vec();
        let mut numeric = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let at = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                scalar(&loss(store))
            };
            let (plus, minus) = (at(H), at(-H));
            numeric.push((plus - minus) / (2.0 * H));
        }
        var.set(&Tensor::from_vec(base, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
        assert!(scale > 1e-8, "{name}: gradient vanishes");
        let rel = diff / scale;
        assert!(rel < TOL, "{name}: relative error {rel:e}");
    }
}

fn weighted_sum(out: &Tensor, seed: u64) -> Tensor {
    let r = randn(seed, out.dims());
    (out * r).unwrap().sum_all().unwrap()
}

#[test]
fn decoupled_cross_attention_matches_finite_differences() {
    let mut store = ParamStore::new(Device::Cpu, DType::F64);
    let mut rng = derived_rng(1, "grad.cross", 0);
    CrossAttention::register(&mut store, "ca", 4, 5, &mut rng).unwrap();
    store.set_trainable(|_| true);
    let x = randn(2, &[3, 4]);
    let text = randn(3, &[3, 5]);
    let image = randn(4, &[2, 5]);
    let names: Vec<String> = CrossAttention::NAMES.iter().map(|n| format!("ca.{n}")).collect();
    check(&store, &names, |s| {
        let layer = CrossAttention::load(s, "ca").unwrap();
        weighted_sum(&layer.forward(&x, &text, Some(&image), 0.7).unwrap(), 5)
    });
}

#[test]
fn injected_self_attention_matches_finite_differences() {
    let mut store = ParamStore::new(Device::Cpu, DType::F64);
    let mut rng = derived_rng(2, "grad.self", 0);
    SelfAttention::register(&mut store, "sa", 4, &mut rng).unwrap();
    // Injected tokens are a parameter here so the path into them is checked too.
    store.insert("obj", randn(6, &[2, 4])).unwrap();
    store.set_trainable(|_| true);
    let ctx = randn(7, &[3, 4]);
    let mut names: Vec<String> = SelfAttention::NAMES.iter().map(|n| format!("sa.{n}")).collect();
    names.push("obj".into());
    check(&store, &names, |s| {
        let layer = SelfAttention::load(s, "sa").unwrap();
        weighted_sum(&layer.forward(&ctx, Some(&s.get("obj").unwrap()), None).unwrap(), 8)
    });
}

#[test]
fn detail_encoder_matches_finite_differences() {
    let cfg = ConditionerConfig { patch_width: 6, detail_hidden: 5, cond_width: 4, ..Default::default() };
    let mut store = ParamStore::new(Device::Cpu, DType::F64);
    let mut rng = derived_rng(3, "grad.detail", 0);
    DetailEncoder::register(&mut store, &cfg, &mut rng).unwrap();
    // Non-zero biases so their gradients are exercised away from the origin.
    for b in ["lin1.b", "lin2.b"] {
        let name = format!("{DETAIL_PREFIX}.{b}");
        let n = store.get(&name).unwrap().elem_count();
        store.set(&name, &(randn(9, &[n]) * 0.3).unwrap()).unwrap();
    }
    store.set_trainable(|_| true);
    let feats = randn(10, &[3, 6]);
    check(&store, &DetailEncoder::param_names(), |s| weighted_sum(&DetailEncoder::forward(s, &feats).unwrap(), 11));
}

#[test]
fn denoising_loss_matches_finite_differences_on_mock_model() {
    for kind in [LossKind::L2, LossKind::Mse] {
        let mut store = ParamStore::new(Device::Cpu, DType::F64);
        store.insert("theta", randn(12, &[10])).unwrap();
        store.set_trainable(|_| true);
        let x = randn(13, &[3, 10]);
        let eps = randn(14, &[3, 10]);
        check(&store, &["theta".to_string()], |s| {
            let pred = x.broadcast_mul(&s.get("theta").unwrap()).unwrap().tanh().unwrap();
            denoising_loss(&eps, &pred, kind).unwrap()
        });
    }
}
