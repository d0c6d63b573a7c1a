//! Quadruplet factory: tag, localize, segment and caption scenes, then keep
//! the objects that pass the tag stoplist and the size window.

pub mod annotators;
pub mod scene;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{BBox, ImageTensor, MaskTensor};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::derived_rng;
use annotators::{AnnotatorSuite, SceneContext};
use rand::RngCore;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    /// Tags that name no entity.
    pub stoplist: Vec<String>,
    pub min_area_ratio: f64,
    pub max_area_ratio: f64,
    /// Fraction of failed scenes above which the build aborts.
    pub max_skip_rate: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            stoplist: ["sky", "nature", "skin"].map(String::from).to_vec(),
            min_area_ratio: 0.02,
            max_area_ratio: 0.50,
            max_skip_rate: 0.5,
        }
    }
}

pub fn filter_tags(tags: &[String], stoplist: &[String]) -> Vec<String> {
    tags.iter().filter(|t| !stoplist.contains(t)).cloned().collect()
}

/// Keeps boxes whose area ratio lies in `[min, max]`; zero-area boxes never
/// pass.
pub fn filter_size(bbox: &BBox, height: usize, width: usize, cfg: &DataConfig) -> bool {
    if bbox.area() == 0 || height * width == 0 {
        return false;
    }
    let ratio = bbox.area() as f64 / (height * width) as f64;
    (cfg.min_area_ratio..=cfg.max_area_ratio).contains(&ratio)
}

/// Source image, mask, subject and prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadruplet {
    pub source: ImageTensor,
    pub mask: MaskTensor,
    pub subject: ImageTensor,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub tag: String,
    pub bbox: BBox,
    pub caption_regional: String,
    pub caption_global: String,
    pub scene_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub quad: Quadruplet,
    pub meta: SampleMeta,
}

impl Sample {
    /// Subject pixels from the tight mask, with everything else set to mid
    /// gray, resized to `size`.
    pub fn background_free_subject(&self, size: usize) -> Result<ImageTensor> {
        background_free(&self.quad.source, &self.quad.mask, &self.meta.bbox, size)
    }
}

pub fn background_free(source: &ImageTensor, mask: &MaskTensor, bbox: &BBox, size: usize) -> Result<ImageTensor> {
    let mut out = source.crop(bbox.x0, bbox.y0, bbox.width(), bbox.height())?;
    for y in 0..bbox.height() {
        for x in 0..bbox.width() {
            if !mask.get(bbox.y0 + y, bbox.x0 + x) {
                out.set_pixel(y, x, [0.5; 3]);
            }
        }
    }
    out.resize(size, size)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub candidates: usize,
    pub kept: usize,
    pub excluded_by_tag: usize,
    pub excluded_by_size: usize,
    pub skipped: usize,
    pub failed_scenes: usize,
}

impl FilterStats {
    pub fn balanced(&self) -> bool {
        self.kept + self.excluded_by_tag + self.excluded_by_size + self.skipped == self.candidates
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub count: usize,
    pub seed: u64,
    pub scenes: usize,
    pub config: DataConfig,
    pub stats: FilterStats,
    pub samples: Vec<String>,
}

/// Seed of scene `index` under master seed `seed`; independent of build order.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    derived_rng(seed, "dataset.scene", index as u64).next_u64()
}

pub fn scene_id(index: usize) -> String {
    format!("scene{index:05}")
}

/// Writes oracle answers for the first `n` scenes of `seed` in replay
/// format, so that `build_dataset` with a replay transport reproduces the
/// oracle dataset.
pub fn record_replays(n: usize, seed: u64, cfg: &DataConfig, dir: &Path) -> Result<()> {
    for index in 0..n {
        let (_, scene) = scene::generate_scene(scene_seed(seed, index), cfg.image_size)?;
        annotators::record_replay(dir, &scene_id(index), &scene)?;
    }
    Ok(())
}

enum SceneOutcome {
    Kept(Sample),
    ExcludedByTag,
    ExcludedBySize,
    Skipped(Error),
}

fn annotate_scene(index: usize, seed: u64, suite: &AnnotatorSuite, cfg: &DataConfig) -> Result<Vec<SceneOutcome>> {
    let s_seed = scene_seed(seed, index);
    let (image, scene) = scene::generate_scene(s_seed, cfg.image_size)?;
    let scene_id = scene_id(index);
    let ctx = SceneContext { id: &scene_id, truth: Some(&scene) };
    let tags = suite.tagger.tag(&image, &ctx)?;
    let caption_global = suite.captioner.caption_global(&image, &ctx)?;
    let kept_tags = filter_tags(&tags, &cfg.stoplist);
    let mut out = Vec::with_capacity(tags.len());
    for (k, tag) in tags.iter().enumerate() {
        if !kept_tags.contains(tag) {
            out.push(SceneOutcome::ExcludedByTag);
            continue;
        }
        let step = || -> Result<Option<Sample>> {
            let bbox = suite.localizer.localize(&image, tag, &ctx)?;
            let mask = suite.segmenter.segment(&image, &bbox, &ctx)?;
            if !filter_size(&bbox, image.height(), image.width(), cfg) {
                return Ok(None);
            }
            let crop = image.crop(bbox.x0, bbox.y0, bbox.width(), bbox.height())?;
            let caption_regional = suite.captioner.caption_region(&crop, tag, &ctx)?;
            let subject = crop.resize(cfg.image_size, cfg.image_size)?;
            Ok(Some(Sample {
                id: format!("{scene_id}_{k}"),
                quad: Quadruplet { source: image.clone(), mask, subject, prompt: caption_regional.clone() },
                meta: SampleMeta { tag: tag.clone(), bbox, caption_regional, caption_global: caption_global.clone(), scene_seed: s_seed },
            }))
        };
        out.push(match step() {
            Ok(Some(s)) => SceneOutcome::Kept(s),
            Ok(None) => SceneOutcome::ExcludedBySize,
            Err(e) => SceneOutcome::Skipped(e),
        });
    }
    Ok(out)
}

/// Runs the pipeline over `n` scenes and returns the kept samples with
/// their accounting.
pub fn annotate(n: usize, seed: u64, suite: &AnnotatorSuite, cfg: &DataConfig) -> Result<(Vec<Sample>, FilterStats)> {
    if n == 0 {
        return Err(Error::Data("empty dataset requested".into()));
    }
    let mut stats = FilterStats::default();
    let mut samples = Vec::new();
    let mut first_error: Option<String> = None;
    for index in 0..n {
        match annotate_scene(index, seed, suite, cfg) {
            Ok(outcomes) => {
                let mut failed = false;
                for o in outcomes {
                    stats.candidates += 1;
                    match o {
                        SceneOutcome::Kept(s) => {
                            stats.kept += 1;
                            samples.push(s);
                        }
                        SceneOutcome::ExcludedByTag => stats.excluded_by_tag += 1,
                        SceneOutcome::ExcludedBySize => stats.excluded_by_size += 1,
                        SceneOutcome::Skipped(e) => {
                            log::warn!("scene {index}: {e}");
                            first_error.get_or_insert_with(|| e.to_string());
                            stats.skipped += 1;
                            failed = true;
                        }
                    }
                }
                stats.failed_scenes += usize::from(failed);
            }
            Err(e) => {
                // A scene that fails before tagging completes is one skipped candidate.
                log::warn!("scene {index}: {e}");
                first_error.get_or_insert_with(|| e.to_string());
                stats.candidates += 1;
                stats.skipped += 1;
                stats.failed_scenes += 1;
            }
        }
    }
    if stats.failed_scenes as f64 > cfg.max_skip_rate * n as f64 {
        let first = first_error.unwrap_or_default();
        return Err(Error::Data(format!("{} of {n} scenes failed annotation (first: {first})", stats.failed_scenes)));
    }
    Ok((samples, stats))
}

/// Builds and persists a dataset under `out`.
pub fn build_dataset(n: usize, seed: u64, suite: &AnnotatorSuite, cfg: &DataConfig, out: &Path) -> Result<DatasetManifest> {
    let (samples, stats) = annotate(n, seed, suite, cfg)?;
    prepare_output(out)?;
    let dir = out.join("samples");
    for s in &samples {
        let d = dir.join(&s.id);
        std::fs::create_dir_all(&d)?;
        io::write_image(&d.join("source.png"), &s.quad.source)?;
        io::write_mask(&d.join("mask.png"), &s.quad.mask)?;
        io::write_image(&d.join("subject.png"), &s.quad.subject)?;
        std::fs::write(d.join("meta.json"), serde_json::to_string_pretty(&s.meta)?)?;
    }
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        count: samples.len(),
        seed,
        scenes: n,
        config: cfg.clone(),
        stats,
        samples: samples.iter().map(|s| s.id.clone()).collect(),
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Accepts a missing or empty directory, or a previous dataset whose
/// samples are replaced.
fn prepare_output(out: &Path) -> Result<()> {
    if out.exists() {
        let nonempty = std::fs::read_dir(out)?.next().is_some();
        if nonempty && !out.join("manifest.json").exists() {
            return Err(Error::Data(format!("{} is not empty and holds no dataset", out.display())));
        }
        let samples = out.join("samples");
        if samples.exists() {
            std::fs::remove_dir_all(samples)?;
        }
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `n` samples.
    pub fn truncated(mut self, n: usize) -> Self {
        self.samples.truncate(n);
        self
    }
}

/// Loads a dataset and validates every sample.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Data(format!("dataset schema {} unsupported", manifest.schema_version)));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for id in &manifest.samples {
        let d = root.join("samples").join(id);
        let meta: SampleMeta = serde_json::from_str(&std::fs::read_to_string(d.join("meta.json"))?)?;
        let quad = Quadruplet {
            source: io::read_image(&d.join("source.png"))?,
            mask: io::read_mask(&d.join("mask.png"))?,
            subject: io::read_image(&d.join("subject.png"))?,
            prompt: meta.caption_regional.clone(),
        };
        let sample = Sample { id: id.clone(), quad, meta };
        validate_sample(&sample, &manifest.config)?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("dataset {} has no samples", root.display())));
    }
    Ok(Dataset { root: root.to_path_buf(), manifest, samples })
}

pub fn validate_sample(s: &Sample, cfg: &DataConfig) -> Result<()> {
    let q = &s.quad;
    let bad = |m: &str| Err(Error::Data(format!("sample {}: {m}", s.id)));
    if q.mask.height() != q.source.height() || q.mask.width() != q.source.width() {
        return bad("mask and source differ in size");
    }
    if q.subject.height() != cfg.image_size || q.subject.width() != cfg.image_size {
        return bad("subject not at model resolution");
    }
    match q.mask.bbox() {
        Some(b) if s.meta.bbox.contains(&b) => {}
        _ => return bad("mask empty or outside its box"),
    }
    if !filter_size(&s.meta.bbox, q.source.height(), q.source.width(), cfg) {
        return bad("box outside the size window");
    }
    if !q.prompt.contains(s.meta.tag.split(' ').next().unwrap_or_default()) {
        return bad("regional caption does not mention the tag");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stoplist_examples() {
        let stop = DataConfig::default().stoplist;
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(filter_tags(&v(&["sky", "red circle"]), &stop), v(&["red circle"]));
        assert!(filter_tags(&[], &stop).is_empty());
        assert!(filter_tags(&v(&["nature", "skin"]), &stop).is_empty());
    }

    #[test]
    fn size_window() {
        let cfg = DataConfig::default();
        let b = |x0, y0, x1, y1| BBox { x0, y0, x1, y1 };
        assert!(!filter_size(&b(0, 0, 64, 64), 64, 64, &cfg));
        assert!(!filter_size(&b(3, 3, 4, 4), 64, 64, &cfg));
        assert!(!filter_size(&b(3, 3, 3, 9), 64, 64, &cfg));
        // 256 / 4096 = 0.0625
        assert!(filter_size(&b(10, 10, 26, 26), 64, 64, &cfg));
    }

    #[test]
    fn accounting_balances_and_masks_are_exact() {
        let cfg = DataConfig::default();
        let (samples, stats) = annotate(40, 1, &AnnotatorSuite::oracle(), &cfg).unwrap();
        assert!(stats.balanced(), "{stats:?}");
        assert_eq!(stats.kept, samples.len());
        for s in &samples {
            let (_, scene) = scene::generate_scene(s.meta.scene_seed, cfg.image_size).unwrap();
            let truth = scene.object_by_tag(&s.meta.tag).unwrap();
            assert_eq!(s.quad.mask.intersection_over_union(truth.mask()).unwrap(), 1.0);
            assert_eq!(s.quad.prompt, truth.caption());
            validate_sample(s, &cfg).unwrap();
        }
        assert!(matches!(annotate(0, 1, &AnnotatorSuite::oracle(), &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn background_free_keeps_only_subject() {
        let src = ImageTensor::filled(8, 8, 1.0).unwrap();
        let bbox = BBox { x0: 2, y0: 2, x1: 6, y1: 6 };
        let mut mask = MaskTensor::zeros(8, 8);
        mask.set(3, 3, true);
        let out = background_free(&src, &mask, &bbox, 4).unwrap();
        assert_eq!(out.pixel(1, 1), [1.0; 3]);
        assert_eq!(out.pixel(0, 0), [0.5; 3]);
    }
}
