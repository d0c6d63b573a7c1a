mod common;

use candle_core::DType;

use common::{bits, jittered, jittered_stage1, random_image, rect_mask, tiny_config, tiny_spec};
use regionfill::data_engine::annotators::AnnotatorSuite;
use regionfill::data_engine::{build_dataset, load_dataset, Dataset};
use regionfill::denoiser::CrossAttention;
use regionfill::model::InpaintModel;
use regionfill::refiner::{run_with_refine, RefineNet, REFINE_PREFIX};
use regionfill::sampler::{sample, CallCounter, GuidanceConfig, InpaintRequest, SamplerNoise};
use regionfill::trainer::{TrainConfig, Trainer};

fn tiny_data(dir: &std::path::Path) -> Dataset {
    let cfg = tiny_config().data_config();
    build_dataset(8, 0, &AnnotatorSuite::oracle(), &cfg, dir).unwrap();
    load_dataset(dir).unwrap()
}

fn stash(model: &InpaintModel, t: usize, noise_seed: u64) -> Vec<Vec<u64>> {
    let cond = model.conditioner.bundle(Some(&model.store), Some("a red circle"), Some(&random_image(1, 32))).unwrap();
    let c = model.codec.latent_channels();
    let size = model.spec.model.latent_size;
    let noise = SamplerNoise::new(noise_seed, c, size).unwrap().initial;
    let r = model.refine.as_ref().unwrap();
    let s = r
        .stash_features(&model.store, &model.codec, &model.schedule, &random_image(1, 32), t, &noise, cond.detail_tokens.as_ref().unwrap())
        .unwrap();
    s.tensors().iter().map(bits).collect()
}

#[test]
fn stash_has_one_entry_per_decoder_attention_layer() {
    let model = jittered(tiny_spec(), DType::F32, 0);
    let r = model.refine.as_ref().unwrap();
    let cond = model.conditioner.bundle(Some(&model.store), None, Some(&random_image(1, 32))).unwrap();
    let noise = SamplerNoise::new(0, 48, 8).unwrap().initial;
    let s = r
        .stash_features(&model.store, &model.codec, &model.schedule, &random_image(1, 32), 500, &noise, cond.detail_tokens.as_ref().unwrap())
        .unwrap();
    assert_eq!(s.len(), model.main.decoder_attention_layers());
    let shapes = model.spec.model.decoder_attention_shapes();
    for ((_, seq), (n, w)) in s.entries().iter().zip(&shapes) {
        assert_eq!((seq.len(), seq.width()), (*n, *w));
    }
}

#[test]
fn stash_is_deterministic_and_depends_on_timestep() {
    let model = jittered(tiny_spec(), DType::F32, 0);
    assert_eq!(stash(&model, 300, 4), stash(&model, 300, 4));
    assert_ne!(stash(&model, 300, 4), stash(&model, 700, 4));
}

#[test]
fn refine_weights_start_as_a_copy_of_main() {
    let mut model = InpaintModel::init(tiny_spec(), DType::F32).unwrap();
    model.attach_refine().unwrap();
    let mut copied = 0;
    for name in model.store.names().filter(|n| n.starts_with("main.")) {
        let twin = format!("{REFINE_PREFIX}.{}", &name["main.".len()..]);
        assert_eq!(bits(&model.store.get(name).unwrap()), bits(&model.store.get(&twin).unwrap()), "{twin}");
        copied += 1;
    }
    assert!(copied > 0);
}

#[test]
fn gate_off_is_the_plain_prediction_and_gate_on_is_not() {
    let model = jittered(tiny_spec(), DType::F32, 1);
    let src = random_image(2, 32);
    let mask = rect_mask(32, 8, 8, 20, 24);
    let subject = random_image(3, 32);
    let codec = &model.codec;
    let z = SamplerNoise::new(9, 48, 8).unwrap().initial;
    let bundle = codec.assemble_input(&z, &codec.resize_mask(&mask).unwrap(), &codec.encode_masked_source(&src, &mask).unwrap()).unwrap();
    let cond = model.conditioner.bundle(Some(&model.store), Some("a red circle"), Some(&subject)).unwrap();
    let noise = SamplerNoise::new(10, 48, 8).unwrap().initial;

    let plain = model.predict_noise(&bundle, 400, &cond, 0.3, None).unwrap();
    let off = run_with_refine(&model, &bundle, 400, &cond, 0.3, Some(&subject), &noise, false).unwrap();
    assert_eq!(plain.data(), off.data());
    let no_subject = run_with_refine(&model, &bundle, 400, &cond, 0.3, None, &noise, true).unwrap();
    assert_eq!(plain.data(), no_subject.data());
    let on = run_with_refine(&model, &bundle, 400, &cond, 0.3, Some(&subject), &noise, true).unwrap();
    assert_ne!(plain.data(), on.data());
}

#[test]
fn sampling_stashes_once_per_step_when_refining() {
    let model = jittered(tiny_spec(), DType::F32, 2);
    let req = InpaintRequest {
        source: random_image(4, 32),
        mask: rect_mask(32, 4, 4, 16, 16),
        subject: Some(random_image(5, 32)),
        prompt: Some("a blue square".into()),
    };
    let cfg = GuidanceConfig { steps: 4, ..Default::default() };
    let mut counter = CallCounter::default();
    sample(&req, &cfg, &model, &mut counter).unwrap();
    assert_eq!((counter.stashes, counter.conditional, counter.unconditional, counter.steps), (4, 4, 4, 4));

    let mut counter = CallCounter::default();
    sample(&req, &GuidanceConfig { refine: false, ..cfg.clone() }, &model, &mut counter).unwrap();
    assert_eq!(counter.stashes, 0);

    let mut counter = CallCounter::default();
    sample(&InpaintRequest { subject: None, ..req }, &cfg, &model, &mut counter).unwrap();
    assert_eq!(counter.stashes, 0);
}

#[test]
fn stage_two_only_moves_refine_cross_attention_and_detail_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(&dir.path().join("d"));
    let model = jittered_stage1(tiny_spec(), DType::F32, 3);
    let before: Vec<(String, Vec<u64>)> = model.store.names().map(|n| (n.to_string(), bits(&model.store.get(n).unwrap()))).collect();

    let cfg = TrainConfig { steps: 3, batch_size: 4, ..TrainConfig::stage2() };
    let mut trainer = Trainer::stage2(cfg, model, None, &data).unwrap();
    // The refine copy is taken at stage-2 start, so snapshot it now.
    let store = &trainer.model.store;
    let refine_before: Vec<(String, Vec<u64>)> =
        store.names().filter(|n| n.starts_with(REFINE_PREFIX)).map(|n| (n.to_string(), bits(&store.get(n).unwrap()))).collect();

    let norms = trainer.gradient_norms(0).unwrap();
    for (name, norm) in &norms {
        if !trainer.model.store.is_trainable(name) {
            assert_eq!(*norm, 0.0, "frozen {name} has gradient {norm}");
        }
    }
    let reached: Vec<&String> = norms.iter().filter(|(_, v)| **v > 0.0).map(|(k, _)| k).collect();
    assert!(reached.iter().any(|n| n.starts_with("detail.mlp.")));
    for w in ["W_q", "W_k", "W_v", "W_o"] {
        assert!(reached.iter().any(|n| n.starts_with(REFINE_PREFIX) && n.ends_with(&format!("cross_attn.{w}"))), "{w} not reached");
    }

    trainer.run(|_, _| {}).unwrap();
    let store = &trainer.model.store;
    for (name, b) in before.iter().filter(|(n, _)| n.starts_with("main.")) {
        assert_eq!(&bits(&store.get(name).unwrap()), b, "{name} moved");
    }
    let mut moved = 0;
    for (name, b) in &refine_before {
        let now = bits(&store.get(name).unwrap());
        if RefineNet::is_trainable_param(name) {
            moved += usize::from(&now != b);
        } else {
            assert_eq!(&now, b, "{name} moved");
        }
    }
    assert!(moved > 0);
    assert!(CrossAttention::NAMES.iter().all(|w| store.names().any(|n| n.ends_with(w))));
}

#[test]
fn dropped_images_receive_no_injection_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(&dir.path().join("d"));
    let model = jittered_stage1(tiny_spec(), DType::F32, 4);
    let cfg = TrainConfig { steps: 1, batch_size: 4, p_image: 1.0, ..TrainConfig::stage2() };
    let trainer = Trainer::stage2(cfg, model, None, &data).unwrap();
    let norms = trainer.gradient_norms(0).unwrap();
    for (name, norm) in norms.iter().filter(|(n, _)| n.starts_with(REFINE_PREFIX) || n.starts_with("detail.")) {
        assert_eq!(*norm, 0.0, "{name}");
    }
}
