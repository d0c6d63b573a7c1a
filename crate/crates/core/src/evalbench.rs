//! Evaluation bench: scenes x subjects x prompt templates, image/text
//! similarity metrics over pluggable embedders, beta sweeps and the
//! component ablation.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{ImageTensor, MaskTensor};
use crate::data_engine::{background_free, scene, DataConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::model::InpaintModel;
use crate::nn::derived_rng;
use crate::sampler::{inpaint, GuidanceConfig, InpaintRequest, NoObserver};
use crate::trainer::CaptionField;

pub const PLACEHOLDER: &str = "S*";

/// Prompt templates for non-living subjects.
pub const DEFAULT_TEMPLATES: [&str; 10] = [
    "a S* on top of a white fabric",
    "a S* on top of a purple rug",
    "a S* nearby some books",
    "a S* on top of a wooden box",
    "a red S*",
    "a green S*",
    "a S*, and some sunflowers at around",
    "a S*, and some autumn leaves at around",
    "a S* nearby a ball",
    "a S* in front of a cube-shaped metal",
];

#[derive(Debug, Clone)]
pub struct BenchScene {
    pub name: String,
    pub image: ImageTensor,
    pub mask: MaskTensor,
}

#[derive(Debug, Clone)]
pub struct BenchSubject {
    pub name: String,
    pub image: ImageTensor,
    pub bg_free: ImageTensor,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchSample {
    pub id: String,
    pub scene: usize,
    pub subject: usize,
    pub template: usize,
    pub prompt: String,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub scenes: Vec<BenchScene>,
    pub subjects: Vec<BenchSubject>,
    pub templates: Vec<String>,
    pub samples: Vec<BenchSample>,
}

pub fn instantiate(template: &str, label: &str) -> Result<String> {
    if template.matches(PLACEHOLDER).count() != 1 {
        return Err(Error::Data(format!("template `{template}` must contain exactly one {PLACEHOLDER}")));
    }
    Ok(template.replacen(PLACEHOLDER, label, 1))
}

impl Benchmark {
    /// Full cross product, scene-major, then subject, then template.
    pub fn new(scenes: Vec<BenchScene>, subjects: Vec<BenchSubject>, templates: Vec<String>) -> Result<Self> {
        if scenes.is_empty() || subjects.is_empty() || templates.is_empty() {
            return Err(Error::Data("benchmark needs at least one scene, subject and prompt".into()));
        }
        for s in &scenes {
            if s.mask.height() != s.image.height() || s.mask.width() != s.image.width() {
                return Err(Error::Data(format!("scene {}: mask and image differ in size", s.name)));
            }
            if s.mask.is_empty() {
                return Err(Error::Data(format!("scene {}: empty mask", s.name)));
            }
        }
        let mut samples = Vec::with_capacity(scenes.len() * subjects.len() * templates.len());
        for (i, sc) in scenes.iter().enumerate() {
            for (j, su) in subjects.iter().enumerate() {
                for (k, t) in templates.iter().enumerate() {
                    samples.push(BenchSample {
                        id: format!("{}__{}__p{k:02}", sc.name, su.name),
                        scene: i,
                        subject: j,
                        template: k,
                        prompt: instantiate(t, &su.label)?,
                    });
                }
            }
        }
        Ok(Self { scenes, subjects, templates, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn read_templates(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Reads `scene_dir/<name>/{image,mask}.png`,
/// `subject_dir/<name>/{image,bg_free}.png` with `label.txt`, and one
/// template per line of `prompt_file`.
pub fn build_benchmark(scene_dir: &Path, subject_dir: &Path, prompt_file: &Path) -> Result<Benchmark> {
    let mut scenes = Vec::new();
    for d in sorted_dirs(scene_dir)? {
        scenes.push(BenchScene { name: dir_name(&d), image: io::read_image(&d.join("image.png"))?, mask: io::read_mask(&d.join("mask.png"))? });
    }
    let mut subjects = Vec::new();
    for d in sorted_dirs(subject_dir)? {
        let label = std::fs::read_to_string(d.join("label.txt"))
            .map_err(|e| Error::Data(format!("{}: {e}", d.join("label.txt").display())))?
            .trim()
            .to_string();
        subjects.push(BenchSubject {
            name: dir_name(&d),
            image: io::read_image(&d.join("image.png"))?,
            bg_free: io::read_image(&d.join("bg_free.png"))?,
            label,
        });
    }
    Benchmark::new(scenes, subjects, read_templates(prompt_file)?)
}

/// Benchmark stored under one root as `scenes/`, `subjects/` and
/// `prompts.txt`.
pub fn load_benchmark(root: &Path) -> Result<Benchmark> {
    build_benchmark(&root.join("scenes"), &root.join("subjects"), &root.join("prompts.txt"))
}

/// Writes a synthetic benchmark: scenes masked on their largest object,
/// subjects cut from other scenes, and the first `n_prompts` templates.
pub fn write_toy_benchmark(root: &Path, n_scenes: usize, n_subjects: usize, n_prompts: usize, seed: u64, cfg: &DataConfig) -> Result<()> {
    if n_prompts == 0 || n_prompts > DEFAULT_TEMPLATES.len() {
        return Err(Error::Config(format!("prompt count must lie in [1, {}]", DEFAULT_TEMPLATES.len())));
    }
    let size = cfg.image_size;
    let mut rng = derived_rng(seed, "bench", 0);
    let mut draw_object = |stream: &str| -> Result<(ImageTensor, scene::SceneObject)> {
        loop {
            let s_seed: u64 = rng.random();
            let (img, sc) = scene::generate_scene(s_seed, size)?;
            let best = sc
                .objects
                .iter()
                .filter(|o| crate::data_engine::filter_size(&o.bbox, size, size, cfg))
                .max_by_key(|o| o.bbox.area());
            if let Some(o) = best {
                log::debug!("{stream}: scene seed {s_seed}");
                return Ok((img, o.clone()));
            }
        }
    };
    for dir in ["scenes", "subjects"] {
        let p = root.join(dir);
        if p.exists() {
            std::fs::remove_dir_all(&p)?;
        }
    }
    for i in 0..n_scenes {
        let (img, obj) = draw_object("scene")?;
        let d = root.join("scenes").join(format!("scene{i:02}"));
        std::fs::create_dir_all(&d)?;
        io::write_image(&d.join("image.png"), &img)?;
        io::write_mask(&d.join("mask.png"), obj.mask())?;
    }
    for j in 0..n_subjects {
        let (img, obj) = draw_object("subject")?;
        let b = obj.bbox;
        let crop = img.crop(b.x0, b.y0, b.width(), b.height())?.resize(size, size)?;
        let d = root.join("subjects").join(format!("subject{j:02}"));
        std::fs::create_dir_all(&d)?;
        io::write_image(&d.join("image.png"), &crop)?;
        io::write_image(&d.join("bg_free.png"), &background_free(&img, obj.mask(), &b, size)?)?;
        std::fs::write(d.join("label.txt"), format!("{}\n", obj.shape.name()))?;
    }
    std::fs::write(root.join("prompts.txt"), DEFAULT_TEMPLATES[..n_prompts].join("\n") + "\n")?;
    Ok(())
}

pub trait ImageEmbedder {
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

pub trait TextEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

pub struct EmbedderPair {
    pub image: Box<dyn ImageEmbedder>,
    pub text: Box<dyn TextEmbedder>,
}

impl EmbedderPair {
    pub fn toy(seed: u64) -> Self {
        let space = ToySpace::new(seed);
        Self { image: Box::new(space.clone()), text: Box::new(space) }
    }
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::NonFinite("embedding with zero or non-finite norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Shared toy embedding space. Features are a color block (mean RGB for
/// images, named colors for text), a 4x4 spatial block (images only) and a
/// hashed word block (text only), sent through one seeded random
/// projection.
#[derive(Debug, Clone)]
pub struct ToySpace {
    projection: Vec<f64>,
    words: usize,
}

pub const TOY_DIM: usize = 64;
pub const TOY_INPUT: usize = 16;
const COLOR_WEIGHT: f64 = 4.0;
const SPATIAL: usize = 4 * 4 * 3;

impl ToySpace {
    pub fn new(seed: u64) -> Self {
        let words = 16;
        let cols = 3 + SPATIAL + words;
        let mut rng = derived_rng(seed, "toy.embed", 0);
        let scale = 1.0 / (TOY_DIM as f64).sqrt();
        let projection = (0..TOY_DIM * cols).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        Self { projection, words }
    }

    fn features_len(&self) -> usize {
        3 + SPATIAL + self.words
    }

    fn project(&self, f: &[f64]) -> Result<Vec<f64>> {
        let cols = self.features_len();
        normalize((0..TOY_DIM).map(|r| (0..cols).map(|c| self.projection[r * cols + c] * f[c]).sum()).collect())
    }

    pub fn image_features(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let img = image.resize(TOY_INPUT, TOY_INPUT)?;
        let mut f = vec![0.0; self.features_len()];
        let cell = TOY_INPUT / 4;
        for y in 0..TOY_INPUT {
            for x in 0..TOY_INPUT {
                let p = img.pixel(y, x);
                for c in 0..3 {
                    let v = p[c] as f64 - 0.5;
                    f[c] += COLOR_WEIGHT * v / (TOY_INPUT * TOY_INPUT) as f64;
                    f[3 + ((y / cell) * 4 + x / cell) * 3 + c] += v / (cell * cell) as f64;
                }
            }
        }
        // Keeps a flat mid-gray image away from the zero vector.
        f[3 + SPATIAL] = 0.05;
        Ok(f)
    }

    pub fn text_features(&self, text: &str) -> Result<Vec<f64>> {
        let words: Vec<String> = text
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(String::from)
            .collect();
        if words.is_empty() {
            return Err(Error::InvalidInput("cannot embed empty text".into()));
        }
        let mut f = vec![0.0; self.features_len()];
        let mut colors = 0usize;
        for w in &words {
            if let Some(c) = scene::COLORS.iter().find(|c| c.name == w) {
                for k in 0..3 {
                    f[k] += COLOR_WEIGHT * (c.rgb[k] as f64 / 255.0 - 0.5);
                }
                colors += 1;
            } else {
                let h = Sha256::digest(w.as_bytes());
                let slot = h[0] as usize % self.words;
                let sign = if h[1] & 1 == 0 { 1.0 } else { -1.0 };
                f[3 + SPATIAL + slot] += 0.25 * sign;
            }
        }
        if colors > 1 {
            f[..3].iter_mut().for_each(|v| *v /= colors as f64);
        }
        if f.iter().all(|&v| v == 0.0) {
            f[3 + SPATIAL] = 0.05;
        }
        Ok(f)
    }
}

impl ImageEmbedder for ToySpace {
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        self.project(&self.image_features(image)?)
    }
}

impl TextEmbedder for ToySpace {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.project(&self.text_features(text)?)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("embedding lengths {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::NonFinite("zero embedding".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mask-box crop of an output image, resized to the embedder input.
pub fn inpainted_region(output: &ImageTensor, mask: &MaskTensor) -> Result<ImageTensor> {
    let b = mask.bbox().ok_or(Error::EmptyMask)?;
    output.crop(b.x0, b.y0, b.width(), b.height())?.resize(TOY_INPUT, TOY_INPUT)
}

pub fn clip_i(region: &ImageTensor, subject_bg_free: &ImageTensor, emb: &EmbedderPair) -> Result<f64> {
    cosine(&emb.image.embed(region)?, &emb.image.embed(subject_bg_free)?)
}

pub fn clip_t(region: &ImageTensor, prompt: &str, emb: &EmbedderPair) -> Result<f64> {
    cosine(&emb.image.embed(region)?, &emb.text.embed(prompt)?)
}

/// Noise seed of a sample; shared across betas and variants.
pub fn sample_seed(id: &str) -> u64 {
    let h = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("digest is 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sample_id: String,
    pub beta: f64,
    pub clip_i: f64,
    pub clip_t: f64,
    pub variant: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub beta: f64,
    pub mean_clip_i: f64,
    pub mean_clip_t: f64,
    pub n: usize,
}

/// Inpaints and scores every sample of `bench` at `cfg.beta`.
pub fn evaluate(bench: &Benchmark, model: &InpaintModel, cfg: &GuidanceConfig, variant: &str, emb: &EmbedderPair) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::with_capacity(bench.len());
    for s in &bench.samples {
        let scene = &bench.scenes[s.scene];
        let subject = &bench.subjects[s.subject];
        let seed = sample_seed(&s.id);
        let req = InpaintRequest {
            source: scene.image.clone(),
            mask: scene.mask.clone(),
            subject: Some(subject.image.clone()),
            prompt: Some(s.prompt.clone()),
        };
        let run = GuidanceConfig { seed, ..cfg.clone() };
        let (out, _) = inpaint(&req, &run, model, &mut NoObserver)?;
        let region = inpainted_region(&out, &scene.mask)?;
        let ci = clip_i(&region, &subject.bg_free, emb)?;
        let ct = clip_t(&region, &s.prompt, emb)?;
        if !(ci.is_finite() && ct.is_finite()) {
            return Err(Error::NonFinite(format!("metrics for {}", s.id)));
        }
        rows.push(MetricRow { sample_id: s.id.clone(), beta: cfg.beta, clip_i: ci, clip_t: ct, variant: variant.to_string(), seed });
    }
    Ok(rows)
}

pub fn summarize(beta: f64, rows: &[MetricRow]) -> SummaryRow {
    let n = rows.len();
    let mean = |f: fn(&MetricRow) -> f64| if n == 0 { f64::NAN } else { rows.iter().map(f).sum::<f64>() / n as f64 };
    SummaryRow { beta, mean_clip_i: mean(|r| r.clip_i), mean_clip_t: mean(|r| r.clip_t), n }
}

/// One summary row per beta; every beta reuses the same per-sample seeds.
pub fn sweep_beta(bench: &Benchmark, model: &InpaintModel, betas: &[f64], cfg: &GuidanceConfig, emb: &EmbedderPair) -> Result<(Vec<MetricRow>, Vec<SummaryRow>)> {
    let mut all = Vec::new();
    let mut summary = Vec::with_capacity(betas.len());
    for &beta in betas {
        let rows = evaluate(bench, model, &GuidanceConfig { beta, ..cfg.clone() }, "sweep", emb)?;
        summary.push(summarize(beta, &rows));
        all.extend(rows);
    }
    Ok((all, summary))
}

/// `start:end:step`, inclusive, or a comma-separated list.
pub fn parse_betas(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("cannot parse beta list `{spec}`"));
    let parts: Vec<&str> = spec.split(':').collect();
    let out: Vec<f64> = if parts.len() == 3 {
        let [a, b, s] = [parts[0], parts[1], parts[2]].map(|p| p.trim().parse::<f64>());
        let (a, b, s) = (a.map_err(|_| bad())?, b.map_err(|_| bad())?, s.map_err(|_| bad())?);
        if !(s > 0.0) || b < a {
            return Err(bad());
        }
        let n = ((b - a) / s + 1e-9).floor() as usize + 1;
        (0..n).map(|i| ((a + i as f64 * s) * 1e9).round() / 1e9).collect()
    } else {
        spec.split(',').map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?
    };
    if out.is_empty() || out.iter().any(|b| !b.is_finite()) {
        return Err(bad());
    }
    Ok(out)
}

/// One cumulative ablation row: training flags plus sampling flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    pub caption: CaptionField,
    pub blend: bool,
    pub image: bool,
    pub refine: bool,
}

pub fn standard_variants() -> Vec<VariantSpec> {
    let v = |name: &str, caption, blend, image, refine| VariantSpec { name: name.into(), caption, blend, image, refine };
    vec![
        v("baseline", CaptionField::Global, false, false, false),
        v("+locate", CaptionField::Regional, true, false, false),
        v("+assign", CaptionField::Regional, true, true, false),
        v("+refine", CaptionField::Regional, true, true, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean_clip_i: f64,
    pub mean_clip_t: f64,
    pub n: usize,
}

/// Mean metrics per variant, in the given order.
pub fn ablation_table(
    bench: &Benchmark,
    variants: &[(VariantSpec, &InpaintModel)],
    cfg: &GuidanceConfig,
    emb: &EmbedderPair,
) -> Result<(Vec<MetricRow>, Vec<AblationRow>)> {
    let mut all = Vec::new();
    let mut table = Vec::new();
    for (spec, model) in variants {
        if spec.image != model.use_image_branch {
            return Err(Error::Config(format!("variant {} expects image branch = {}", spec.name, spec.image)));
        }
        if spec.refine && model.refine.is_none() {
            return Err(Error::Config(format!("variant {} needs a stage-2 checkpoint", spec.name)));
        }
        let run = GuidanceConfig { blend: spec.blend, refine: spec.refine, ..cfg.clone() };
        let rows = evaluate(bench, model, &run, &spec.name, emb)?;
        let s = summarize(cfg.beta, &rows);
        table.push(AblationRow { variant: spec.name.clone(), mean_clip_i: s.mean_clip_i, mean_clip_t: s.mean_clip_t, n: s.n });
        all.extend(rows);
    }
    Ok((all, table))
}

pub fn write_results_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::from("sample_id,beta,clip_i,clip_t,variant,seed\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.sample_id, r.beta, r.clip_i, r.clip_t, r.variant, r.seed));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut out = String::from("beta,mean_clip_i,mean_clip_t,n\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.beta, r.mean_clip_i, r.mean_clip_t, r.n));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = String::from("variant,mean_clip_i,mean_clip_t,n\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.variant, r.mean_clip_i, r.mean_clip_t, r.n));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::BBox;

    struct Fixed(Vec<f64>);
    impl ImageEmbedder for Fixed {
        fn embed(&self, _: &ImageTensor) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }
    impl TextEmbedder for Fixed {
        fn embed(&self, _: &str) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    /// Returns `v` for images whose first pixel is dark and `-v` otherwise.
    struct Signed(Vec<f64>);
    impl ImageEmbedder for Signed {
        fn embed(&self, img: &ImageTensor) -> Result<Vec<f64>> {
            let s = if img.pixel(0, 0)[0] < 0.5 { 1.0 } else { -1.0 };
            Ok(self.0.iter().map(|x| x * s).collect())
        }
    }

    fn random_image(seed: u64) -> ImageTensor {
        let mut rng = derived_rng(seed, "img", 0);
        ImageTensor::new(16, 16, (0..16 * 16 * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn parts(ns: usize, nj: usize, nt: usize) -> (Vec<BenchScene>, Vec<BenchSubject>, Vec<String>) {
        let img = ImageTensor::filled(8, 8, 0.5).unwrap();
        let mask = MaskTensor::rect(8, 8, BBox { x0: 2, y0: 2, x1: 5, y1: 5 }).unwrap();
        let scenes = (0..ns).map(|i| BenchScene { name: format!("s{i:02}"), image: img.clone(), mask: mask.clone() }).collect();
        let subjects = (0..nj)
            .map(|j| BenchSubject { name: format!("o{j:02}"), image: img.clone(), bg_free: img.clone(), label: format!("thing{j}") })
            .collect();
        let templates = (0..nt).map(|k| DEFAULT_TEMPLATES[k % 10].to_string()).collect();
        (scenes, subjects, templates)
    }

    #[test]
    fn cross_product_sizes() {
        for (ns, nj, nt, n) in [(20, 10, 10, 2000), (1, 1, 1, 1), (4, 3, 5, 60)] {
            let (s, j, t) = parts(ns, nj, nt);
            let b = Benchmark::new(s, j, t).unwrap();
            assert_eq!(b.len(), n);
            assert!(b.samples.iter().all(|s| !s.prompt.contains(PLACEHOLDER)));
        }
        let (s, j, _) = parts(1, 1, 1);
        assert!(Benchmark::new(s, j, vec!["no placeholder".into()]).is_err());
    }

    #[test]
    fn ordering_is_scene_major() {
        let (s, j, t) = parts(2, 2, 2);
        let b = Benchmark::new(s, j, t).unwrap();
        let order: Vec<(usize, usize, usize)> = b.samples.iter().map(|s| (s.scene, s.subject, s.template)).collect();
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(order, sorted);
        assert_eq!(b.samples[1].prompt, "a thing0 on top of a purple rug");
    }

    #[test]
    fn mock_embedder_extremes() {
        let v = vec![0.6, 0.8];
        let same = EmbedderPair { image: Box::new(Fixed(v.clone())), text: Box::new(Fixed(v.clone())) };
        let a = random_image(1);
        assert_eq!(clip_i(&a, &a, &same).unwrap(), 1.0);
        assert!((clip_t(&a, "x", &same).unwrap() - 1.0).abs() < 1e-15);
        let signed = EmbedderPair { image: Box::new(Signed(v.clone())), text: Box::new(Fixed(vec![-0.8, 0.6])) };
        let dark = ImageTensor::filled(4, 4, 0.0).unwrap();
        let light = ImageTensor::filled(4, 4, 1.0).unwrap();
        assert_eq!(clip_i(&dark, &light, &signed).unwrap(), -1.0);
        assert!(clip_t(&dark, "x", &signed).unwrap().abs() < 1e-15);
    }

    #[test]
    fn toy_embedders_are_unit_and_match_scalar_cosine() {
        let emb = EmbedderPair::toy(0);
        let space = ToySpace::new(0);
        let (a, b) = (random_image(2), random_image(3));
        let ea = emb.image.embed(&a).unwrap();
        let eb = emb.image.embed(&b).unwrap();
        for e in [&ea, &eb, &emb.text.embed("a red circle").unwrap()] {
            assert!((e.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Independent oracle: raw features, projection and cosine by hand.
        let proj = |f: Vec<f64>| -> Vec<f64> {
            let cols = f.len();
            (0..TOY_DIM).map(|r| (0..cols).map(|c| space.projection[r * cols + c] * f[c]).sum()).collect()
        };
        let (pa, pb) = (proj(space.image_features(&a).unwrap()), proj(space.image_features(&b).unwrap()));
        let dot: f64 = pa.iter().zip(&pb).map(|(x, y)| x * y).sum();
        let oracle = dot / (pa.iter().map(|x| x * x).sum::<f64>().sqrt() * pb.iter().map(|x| x * x).sum::<f64>().sqrt());
        assert!((clip_i(&a, &b, &emb).unwrap() - oracle).abs() < 1e-6);
        assert_eq!(clip_i(&a, &b, &emb).unwrap(), clip_i(&b, &a, &emb).unwrap());
        let pt = proj(space.text_features("a striped red circle").unwrap());
        let dot: f64 = pa.iter().zip(&pt).map(|(x, y)| x * y).sum();
        let oracle = dot / (pa.iter().map(|x| x * x).sum::<f64>().sqrt() * pt.iter().map(|x| x * x).sum::<f64>().sqrt());
        assert!((clip_t(&a, "a striped red circle", &emb).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn toy_space_prefers_matching_color() {
        let emb = EmbedderPair::toy(0);
        let red = ImageTensor::from_rgb8(2, 2, &[220, 30, 30].repeat(4)).unwrap();
        let red_t = clip_t(&red, "a red circle", &emb).unwrap();
        let blue_t = clip_t(&red, "a blue circle", &emb).unwrap();
        assert!(red_t > blue_t, "{red_t} {blue_t}");
    }

    #[test]
    fn beta_ranges() {
        let b = parse_betas("0.1:1.0:0.1").unwrap();
        assert_eq!(b.len(), 10);
        assert_eq!((b[0], b[2], b[9]), (0.1, 0.3, 1.0));
        assert_eq!(parse_betas("0.3, 1").unwrap(), vec![0.3, 1.0]);
        assert!(parse_betas("x").is_err());
    }

    #[test]
    fn seeds_depend_only_on_id() {
        assert_eq!(sample_seed("a"), sample_seed("a"));
        assert_ne!(sample_seed("a"), sample_seed("b"));
    }
}
