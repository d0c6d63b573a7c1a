//! `regionfill` command line: dataset building, two-stage training,
//! sampling, evaluation, beta sweeps and ablations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use regionfill::checkpoint;
use regionfill::config::RunConfig;
use regionfill::data_engine::annotators::{AnnotatorSuite, ReplayTransport};
use regionfill::data_engine::{build_dataset, load_dataset, record_replays};
use regionfill::evalbench::{self, EmbedderPair, VariantSpec};
use regionfill::io;
use regionfill::model::InpaintModel;
use regionfill::sampler::{inpaint, InpaintRequest, LatentDumper, NoObserver, SampleObserver};
use regionfill::trainer::Trainer;
use regionfill::Error;

#[derive(Parser)]
#[command(name = "regionfill", version, about = "Multimodal promptable inpainting at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate and annotate synthetic scenes into a quadruplet dataset.
    BuildData(BuildData),
    /// Write oracle annotations in replay format.
    RecordReplay(RecordReplay),
    /// Write a synthetic evaluation benchmark.
    BuildBench(BuildBench),
    /// Train stage 1 (denoiser) or stage 2 (refinement cross-attention).
    Train(Train),
    /// Inpaint one scene.
    Sample(Sample),
    /// Score a checkpoint on a benchmark.
    Eval(Eval),
    /// Score a checkpoint over a list of beta values.
    SweepBeta(SweepBeta),
    /// Score one checkpoint per ablation variant.
    Ablate(Ablate),
}

#[derive(Args)]
struct ConfigArg {
    /// Flat JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct BuildData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `oracle` or `replay:<dir>`.
    #[arg(long, default_value = "oracle")]
    annotators: String,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct RecordReplay {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct BuildBench {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    scenes: usize,
    #[arg(long, default_value_t = 3)]
    subjects: usize,
    #[arg(long, default_value_t = 5)]
    prompts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct Train {
    /// 1 trains the denoiser, 2 the refinement cross-attention.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Dataset directory written by build-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt_out: PathBuf,
    /// Stage-1 checkpoint; required for stage 2.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Continue the run saved in --ckpt-out.
    #[arg(long)]
    resume: bool,
    /// Step budget (default 2000 for stage 1, 1000 for stage 2).
    #[arg(long)]
    steps: Option<usize>,
    /// Training seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Batch size (default 8).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate (default 1e-3).
    #[arg(long)]
    lr: Option<f64>,
    /// Image control strength during training (default 1.0 in stage 1, 0.3 in stage 2).
    #[arg(long)]
    beta_train: Option<f64>,
    /// Train on the first N samples only.
    #[arg(long)]
    max_samples: Option<usize>,
    /// `l2` or `mse` (default l2).
    #[arg(long)]
    loss: Option<String>,
    /// `regional` or `global` (default regional).
    #[arg(long)]
    caption: Option<String>,
    /// Train without the image cross-attention branch.
    #[arg(long)]
    no_image_branch: bool,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct Guidance {
    /// Image control strength (default 0.3).
    #[arg(long)]
    beta: Option<f64>,
    /// Classifier-free guidance scale (default 7.5).
    #[arg(long)]
    cfg_scale: Option<f64>,
    /// Sampling steps (default 50).
    #[arg(long)]
    steps: Option<usize>,
    /// Keep the unmasked latent free instead of blending the noised source.
    #[arg(long)]
    no_blend: bool,
    /// Skip the refinement network.
    #[arg(long)]
    no_refine: bool,
    /// Return the decoded output without pasting the source back.
    #[arg(long)]
    no_composite: bool,
}

#[derive(Args)]
struct Sample {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    subject: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    /// Noise seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Write the latent after every step as .npy files.
    #[arg(long)]
    dump_latents: Option<PathBuf>,
    #[command(flatten)]
    guidance: Guidance,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Benchmark root with scenes/, subjects/ and prompts.txt.
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seed of the toy embedders.
    #[arg(long, default_value_t = 0)]
    embed_seed: u64,
    #[command(flatten)]
    guidance: Guidance,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    common: BenchArgs,
    #[arg(long, default_value = "eval")]
    variant: String,
}

#[derive(Args)]
struct SweepBeta {
    #[command(flatten)]
    common: BenchArgs,
    /// `start:end:step` (inclusive) or a comma list.
    #[arg(long, default_value = "0.1:1.0:0.1")]
    betas: String,
}

#[derive(Args)]
struct Ablate {
    /// `NAME=CKPT`, once per variant.
    #[arg(long = "variant", value_name = "NAME=CKPT")]
    variants: Vec<String>,
    /// Variants to score, in order.
    #[arg(long, default_value = "baseline,+locate,+assign,+refine")]
    order: String,
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    embed_seed: u64,
    /// Image control strength (default 0.3).
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// 2 usage, 3 data, 4 numeric.
fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Usage(_) => 2,
        CliError::Core(e) => match e {
            Error::Config(_) | Error::InvalidInput(_) | Error::Shape(_) | Error::EmptyMask | Error::Timestep { .. } => 2,
            Error::NonFinite(_) | Error::Candle(_) => 4,
            _ => 3,
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::BuildData(a) => cmd_build_data(a),
        Cmd::RecordReplay(a) => cmd_record_replay(a),
        Cmd::BuildBench(a) => cmd_build_bench(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Sample(a) => cmd_sample(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::SweepBeta(a) => cmd_sweep_beta(a),
        Cmd::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Core(c) => eprintln!("error: {c}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Defaults, then the config file, then flags.
fn resolve(config: &ConfigArg, flags: Map<String, Value>) -> CliResult<RunConfig> {
    let mut merged = match RunConfig::default().to_json()? {
        Value::Object(m) => m,
        _ => unreachable!("config serializes to an object"),
    };
    let mut file_keys = Vec::new();
    if let Some(path) = &config.config {
        // Parse once as a typed config so unknown keys are rejected.
        RunConfig::load(path)?;
        let text = std::fs::read_to_string(path)?;
        if let Value::Object(file) = serde_json::from_str::<Value>(&text)? {
            for (k, v) in file {
                file_keys.push(k.clone());
                merged.insert(k, v);
            }
        }
    }
    let flag_keys: Vec<String> = flags.keys().cloned().collect();
    merged.extend(flags);
    let cfg: RunConfig = serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))?;
    log::info!(
        "config: defaults <- {} [{}] <- flags [{}]",
        config.config.as_ref().map_or("no file".to_string(), |p| p.display().to_string()),
        file_keys.join(", "),
        flag_keys.join(", ")
    );
    Ok(cfg)
}

fn put<T: Into<Value>>(m: &mut Map<String, Value>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        m.insert(key.to_string(), v.into());
    }
}

fn guidance_flags(g: &Guidance, m: &mut Map<String, Value>) {
    put(m, "beta", g.beta);
    put(m, "cfg_scale", g.cfg_scale);
    put(m, "sample_steps", g.steps);
    if g.no_blend {
        m.insert("blend".into(), false.into());
    }
    if g.no_refine {
        m.insert("refine".into(), false.into());
    }
    if g.no_composite {
        m.insert("composite".into(), false.into());
    }
}

fn write_json(path: &Path, v: &Value) -> CliResult {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn load_model(dir: &Path) -> CliResult<(InpaintModel, checkpoint::CheckpointManifest)> {
    Ok(checkpoint::load(dir)?)
}

fn cmd_build_data(a: BuildData) -> CliResult {
    let cfg = resolve(&a.config, Map::new())?;
    let suite = match a.annotators.as_str() {
        "oracle" => AnnotatorSuite::oracle(),
        s => match s.strip_prefix("replay:") {
            Some(dir) if !dir.is_empty() => AnnotatorSuite::remote(ReplayTransport::new(dir)),
            _ => return Err(CliError::Usage(format!("--annotators must be `oracle` or `replay:<dir>`, got `{s}`"))),
        },
    };
    let manifest = build_dataset(a.num, a.seed, &suite, &cfg.data_config(), &a.out)?;
    let s = &manifest.stats;
    println!(
        "scenes {} candidates {} kept {} excluded_by_tag {} excluded_by_size {} skipped {}",
        manifest.scenes, s.candidates, s.kept, s.excluded_by_tag, s.excluded_by_size, s.skipped
    );
    Ok(())
}

fn cmd_record_replay(a: RecordReplay) -> CliResult {
    let cfg = resolve(&a.config, Map::new())?;
    record_replays(a.num, a.seed, &cfg.data_config(), &a.out)?;
    println!("recorded {} scenes", a.num);
    Ok(())
}

fn cmd_build_bench(a: BuildBench) -> CliResult {
    let cfg = resolve(&a.config, Map::new())?;
    evalbench::write_toy_benchmark(&a.out, a.scenes, a.subjects, a.prompts, a.seed, &cfg.data_config())?;
    let bench = evalbench::load_benchmark(&a.out)?;
    println!("benchmark with {} samples", bench.len());
    Ok(())
}

fn cmd_train(a: Train) -> CliResult {
    let mut flags = Map::new();
    put(&mut flags, "steps", a.steps);
    put(&mut flags, "train_seed", a.seed);
    put(&mut flags, "batch_size", a.batch_size);
    put(&mut flags, "lr", a.lr);
    put(&mut flags, "beta_train", a.beta_train);
    put(&mut flags, "max_samples", a.max_samples);
    put(&mut flags, "loss", a.loss.clone());
    put(&mut flags, "caption", a.caption.clone());
    if a.no_image_branch {
        flags.insert("use_image_branch".into(), false.into());
    }
    let cfg = resolve(&a.config, flags)?;
    let data = load_dataset(&a.data)?;
    let tc = cfg.train_config(a.stage)?;
    let run = json!({
        "config": cfg.to_json()?,
        "data": { "count": data.manifest.count, "seed": data.manifest.seed, "scenes": data.manifest.scenes },
    });

    let mut trainer = if a.resume {
        Trainer::resume(&a.ckpt_out, &data, a.steps)?
    } else if a.stage == 1 {
        if a.init_from.is_some() {
            return Err(CliError::Usage("--init-from only applies to stage 2".into()));
        }
        Trainer::stage1(tc, cfg.model_spec()?, &data)?
    } else {
        let init = a
            .init_from
            .as_ref()
            .ok_or_else(|| CliError::Usage("stage 2 requires --init-from <stage-1 checkpoint>".into()))?;
        Trainer::stage2_from(tc, init, &data)?
    };
    let total = trainer.cfg.steps;
    log::info!("stage {} on {} samples, {} steps", trainer.cfg.stage, trainer.num_samples(), total);
    trainer.run(|step, loss| {
        if step % 100 == 0 || step + 1 == total {
            log::info!("step {step} loss {loss:.5}");
        }
    })?;
    let manifest = trainer.save(&a.ckpt_out, run)?;
    println!("stage {} checkpoint {} weights {}", manifest.stage, a.ckpt_out.display(), manifest.weights_sha256);
    Ok(())
}

fn cmd_sample(a: Sample) -> CliResult {
    let mut flags = Map::new();
    guidance_flags(&a.guidance, &mut flags);
    put(&mut flags, "sample_seed", a.seed);
    let cfg = resolve(&a.config, flags)?;
    let (model, manifest) = load_model(&a.ckpt)?;
    let source = io::read_image(&a.scene)?;
    let mask = io::read_mask(&a.mask)?;
    if (source.height(), source.width()) != (mask.height(), mask.width()) {
        return Err(CliError::Usage(format!(
            "mask is {}x{} but scene is {}x{}",
            mask.height(),
            mask.width(),
            source.height(),
            source.width()
        )));
    }
    let subject = a.subject.as_deref().map(io::read_image).transpose()?;
    let req = InpaintRequest { source, mask, subject, prompt: a.prompt.clone() };
    if req.is_unconditional() {
        log::warn!("neither --subject nor --prompt given; running an unconditional fill");
    }
    let guidance = cfg.guidance();
    if guidance.refine && model.refine.is_none() {
        log::info!("checkpoint has no refinement network; sampling without it");
    }
    let mut dumper = a.dump_latents.as_deref().map(LatentDumper::new).transpose()?;
    let mut none = NoObserver;
    let observer: &mut dyn SampleObserver = match dumper.as_mut() {
        Some(d) => d,
        None => &mut none,
    };
    let (out, window) = inpaint(&req, &guidance, &model, observer)?;
    if let Some(d) = dumper {
        d.finish()?;
    }
    io::write_image(&a.out, &out)?;
    let sidecar = a.out.with_extension("json");
    write_json(
        &sidecar,
        &json!({ "config": cfg.to_json()?, "checkpoint": manifest.weights_sha256, "window": window }),
    )?;
    println!("wrote {}", a.out.display());
    Ok(())
}

struct BenchRun {
    cfg: RunConfig,
    model: InpaintModel,
    weights: String,
    bench: evalbench::Benchmark,
    emb: EmbedderPair,
}

fn prepare_bench(a: &BenchArgs) -> CliResult<BenchRun> {
    let mut flags = Map::new();
    guidance_flags(&a.guidance, &mut flags);
    let cfg = resolve(&a.config, flags)?;
    let (model, manifest) = load_model(&a.ckpt)?;
    let bench = evalbench::load_benchmark(&a.bench)?;
    if bench.is_empty() {
        return Err(Error::Data(format!("benchmark {} has no samples", a.bench.display())).into());
    }
    std::fs::create_dir_all(&a.out)?;
    Ok(BenchRun { cfg, model, weights: manifest.weights_sha256, bench, emb: EmbedderPair::toy(a.embed_seed) })
}

fn cmd_eval(a: Eval) -> CliResult {
    let r = prepare_bench(&a.common)?;
    let guidance = r.cfg.guidance();
    let rows = evalbench::evaluate(&r.bench, &r.model, &guidance, &a.variant, &r.emb)?;
    let summary = evalbench::summarize(guidance.beta, &rows);
    let out = &a.common.out;
    evalbench::write_results_csv(&out.join("results.csv"), &rows)?;
    evalbench::write_summary_csv(&out.join("summary.csv"), std::slice::from_ref(&summary))?;
    write_json(&out.join("config.json"), &json!({ "config": r.cfg.to_json()?, "checkpoint": r.weights, "embed_seed": a.common.embed_seed }))?;
    println!("{} samples clip_i {:.4} clip_t {:.4}", summary.n, summary.mean_clip_i, summary.mean_clip_t);
    Ok(())
}

fn cmd_sweep_beta(a: SweepBeta) -> CliResult {
    let betas = evalbench::parse_betas(&a.betas).map_err(|e| CliError::Usage(e.to_string()))?;
    let r = prepare_bench(&a.common)?;
    let (rows, summary) = evalbench::sweep_beta(&r.bench, &r.model, &betas, &r.cfg.guidance(), &r.emb)?;
    let out = &a.common.out;
    evalbench::write_results_csv(&out.join("results.csv"), &rows)?;
    evalbench::write_summary_csv(&out.join("summary.csv"), &summary)?;
    write_json(
        &out.join("config.json"),
        &json!({ "config": r.cfg.to_json()?, "checkpoint": r.weights, "embed_seed": a.common.embed_seed, "betas": betas }),
    )?;
    for s in &summary {
        println!("beta {} clip_i {:.4} clip_t {:.4}", s.beta, s.mean_clip_i, s.mean_clip_t);
    }
    Ok(())
}

fn cmd_ablate(a: Ablate) -> CliResult {
    let mut flags = Map::new();
    put(&mut flags, "beta", a.beta);
    put(&mut flags, "cfg_scale", a.cfg_scale);
    put(&mut flags, "sample_steps", a.steps);
    let cfg = resolve(&a.config, flags)?;

    let mut ckpts = std::collections::BTreeMap::new();
    for v in &a.variants {
        let (name, path) = v.split_once('=').ok_or_else(|| CliError::Usage(format!("--variant expects NAME=CKPT, got `{v}`")))?;
        ckpts.insert(name.to_string(), PathBuf::from(path));
    }
    let known = evalbench::standard_variants();
    let order: Vec<&str> = a.order.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let unknown: Vec<&str> = order.iter().copied().filter(|n| !known.iter().any(|k| k.name == *n)).collect();
    if !unknown.is_empty() {
        let names: Vec<&str> = known.iter().map(|k| k.name.as_str()).collect();
        return Err(CliError::Usage(format!("unknown variant(s) {}; known: {}", unknown.join(", "), names.join(", "))));
    }
    let missing: Vec<&str> = order.iter().copied().filter(|n| !ckpts.contains_key(*n)).collect();
    if !missing.is_empty() {
        return Err(CliError::Usage(format!("missing checkpoint for variant(s): {}", missing.join(", "))));
    }

    let bench = evalbench::load_benchmark(&a.bench)?;
    let mut loaded: Vec<(VariantSpec, InpaintModel, String)> = Vec::new();
    for name in &order {
        let spec = known.iter().find(|k| k.name == *name).expect("checked above").clone();
        let (model, manifest) = load_model(&ckpts[*name])?;
        loaded.push((spec, model, manifest.weights_sha256));
    }
    let pairs: Vec<(VariantSpec, &InpaintModel)> = loaded.iter().map(|(s, m, _)| (s.clone(), m)).collect();
    let emb = EmbedderPair::toy(a.embed_seed);
    let (rows, table) = evalbench::ablation_table(&bench, &pairs, &cfg.guidance(), &emb)?;
    std::fs::create_dir_all(&a.out)?;
    evalbench::write_results_csv(&a.out.join("results.csv"), &rows)?;
    evalbench::write_ablation_csv(&a.out.join("ablation.csv"), &table)?;
    let weights: Map<String, Value> = loaded.iter().map(|(s, _, w)| (s.name.clone(), Value::from(w.clone()))).collect();
    write_json(&a.out.join("config.json"), &json!({ "config": cfg.to_json()?, "checkpoints": weights, "embed_seed": a.embed_seed }))?;
    for r in &table {
        println!("{} clip_i {:.4} clip_t {:.4}", r.variant, r.mean_clip_i, r.mean_clip_t);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_file(text: &str) -> (tempfile::TempDir, ConfigArg) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, text).unwrap();
        (dir, ConfigArg { config: Some(path) })
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&CliError::Usage("x".into())), 2);
        assert_eq!(exit_code(&Error::Config("x".into()).into()), 2);
        assert_eq!(exit_code(&Error::EmptyMask.into()), 2);
        assert_eq!(exit_code(&Error::Data("x".into()).into()), 3);
        assert_eq!(exit_code(&Error::NonFinite("x".into()).into()), 4);
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let (_dir, arg) = config_file(r#"{"lr": 0.5, "batch_size": 3}"#);
        let mut flags = Map::new();
        put(&mut flags, "lr", Some(0.25));
        let cfg = resolve(&arg, flags).unwrap();
        assert_eq!(cfg.lr, 0.25);
        assert_eq!(cfg.batch_size, 3);
        assert_eq!(cfg.cfg_scale, RunConfig::default().cfg_scale);
    }

    #[test]
    fn unknown_file_key_is_rejected() {
        let (_dir, arg) = config_file(r#"{"learning_rate": 0.5}"#);
        let e = resolve(&arg, Map::new()).err().unwrap();
        assert_eq!(exit_code(&e), 2);
    }

    #[test]
    fn guidance_switches_map_to_config_keys() {
        let g = Guidance { beta: Some(0.7), cfg_scale: None, steps: Some(5), no_blend: true, no_refine: false, no_composite: true };
        let mut m = Map::new();
        guidance_flags(&g, &mut m);
        assert_eq!(m["beta"], 0.7);
        assert_eq!(m["sample_steps"], 5);
        assert_eq!(m["blend"], false);
        assert_eq!(m["composite"], false);
        assert!(!m.contains_key("refine") && !m.contains_key("cfg_scale"));
    }

    #[test]
    fn stage_outside_one_and_two_does_not_parse() {
        let base = ["regionfill", "train", "--data", "d", "--ckpt-out", "c", "--stage"];
        assert!(Cli::try_parse_from(base.iter().chain(&["2"])).is_ok());
        assert!(Cli::try_parse_from(base.iter().chain(&["3"])).is_err());
    }
}
