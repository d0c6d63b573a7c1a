//! The four annotation stages and their implementations: exact oracles over
//! synthetic scenes, and remote clients with an offline replay transport.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::scene::SyntheticScene;
use crate::codec::{BBox, ImageTensor, MaskTensor};
use crate::error::{Error, Result};

/// What a stage may know about the image besides its pixels. Oracles read
/// `truth`; remote clients only use `id`.
#[derive(Debug, Clone, Copy)]
pub struct SceneContext<'a> {
    pub id: &'a str,
    pub truth: Option<&'a SyntheticScene>,
}

pub trait Tagger {
    fn tag(&self, image: &ImageTensor, ctx: &SceneContext) -> Result<Vec<String>>;
}

pub trait Localizer {
    fn localize(&self, image: &ImageTensor, tag: &str, ctx: &SceneContext) -> Result<BBox>;
}

pub trait Segmenter {
    fn segment(&self, image: &ImageTensor, bbox: &BBox, ctx: &SceneContext) -> Result<MaskTensor>;
}

pub trait Captioner {
    /// Caption of the object crop.
    fn caption_region(&self, crop: &ImageTensor, tag: &str, ctx: &SceneContext) -> Result<String>;
    /// Caption of the whole image.
    fn caption_global(&self, image: &ImageTensor, ctx: &SceneContext) -> Result<String>;
}

pub struct AnnotatorSuite {
    pub tagger: Box<dyn Tagger>,
    pub localizer: Box<dyn Localizer>,
    pub segmenter: Box<dyn Segmenter>,
    pub captioner: Box<dyn Captioner>,
}

impl AnnotatorSuite {
    pub fn oracle() -> Self {
        Self {
            tagger: Box::new(OracleAnnotator),
            localizer: Box::new(OracleAnnotator),
            segmenter: Box::new(OracleAnnotator),
            captioner: Box::new(OracleAnnotator),
        }
    }

    /// Remote clients sharing one transport.
    pub fn remote<T: Transport + Clone + 'static>(transport: T) -> Self {
        Self {
            tagger: Box::new(RemoteAnnotator(transport.clone())),
            localizer: Box::new(RemoteAnnotator(transport.clone())),
            segmenter: Box::new(RemoteAnnotator(transport.clone())),
            captioner: Box::new(RemoteAnnotator(transport)),
        }
    }
}

fn stage_err(stage: &str, message: impl Into<String>) -> Error {
    Error::Annotator { stage: stage.to_string(), message: message.into() }
}

/// Exact answers read from the scene's ground truth.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleAnnotator;

fn truth<'a>(ctx: &SceneContext<'a>, stage: &str) -> Result<&'a SyntheticScene> {
    ctx.truth.ok_or_else(|| stage_err(stage, format!("no ground truth for scene {}", ctx.id)))
}

impl Tagger for OracleAnnotator {
    fn tag(&self, _image: &ImageTensor, ctx: &SceneContext) -> Result<Vec<String>> {
        let scene = truth(ctx, "tag")?;
        let mut tags: Vec<String> = scene.objects.iter().map(|o| o.tag()).collect();
        tags.extend(scene.extra_tags.iter().cloned());
        Ok(tags)
    }
}

impl Localizer for OracleAnnotator {
    fn localize(&self, _image: &ImageTensor, tag: &str, ctx: &SceneContext) -> Result<BBox> {
        let scene = truth(ctx, "localize")?;
        scene
            .object_by_tag(tag)
            .map(|o| o.bbox)
            .ok_or_else(|| stage_err("localize", format!("tag `{tag}` not found")))
    }
}

impl Segmenter for OracleAnnotator {
    fn segment(&self, _image: &ImageTensor, bbox: &BBox, ctx: &SceneContext) -> Result<MaskTensor> {
        let scene = truth(ctx, "segment")?;
        scene
            .objects
            .iter()
            .find(|o| o.bbox == *bbox)
            .map(|o| o.mask().clone())
            .ok_or_else(|| stage_err("segment", format!("no object in box {bbox:?}")))
    }
}

impl Captioner for OracleAnnotator {
    fn caption_region(&self, _crop: &ImageTensor, tag: &str, ctx: &SceneContext) -> Result<String> {
        let scene = truth(ctx, "caption")?;
        scene
            .object_by_tag(tag)
            .map(|o| o.caption())
            .ok_or_else(|| stage_err("caption", format!("unknown tag `{tag}`")))
    }

    fn caption_global(&self, _image: &ImageTensor, ctx: &SceneContext) -> Result<String> {
        Ok(truth(ctx, "caption")?.global_caption())
    }
}

/// Request sent to a remote annotator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteRequest {
    pub scene_id: String,
    pub stage: String,
    /// Lookup key within the stage: the tag, the box, or empty.
    pub key: String,
    /// Base64 PNG bytes.
    pub image_png: String,
    pub inputs: Value,
}

/// Carries requests to a remote model and returns its JSON product.
pub trait Transport {
    fn call(&self, request: &RemoteRequest) -> Result<Value>;
}

/// Offline transport: answers come from `<dir>/<scene_id>/<stage>.json`,
/// an object mapping request keys to responses.
#[derive(Debug, Clone)]
pub struct ReplayTransport {
    dir: PathBuf,
}

impl ReplayTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl Transport for ReplayTransport {
    fn call(&self, request: &RemoteRequest) -> Result<Value> {
        let path = self.dir.join(&request.scene_id).join(format!("{}.json", request.stage));
        let text = std::fs::read_to_string(&path)
            .map_err(|e| stage_err(&request.stage, format!("replay file {}: {e}", path.display())))?;
        let mut table: BTreeMap<String, Value> = serde_json::from_str(&text)
            .map_err(|e| stage_err(&request.stage, format!("replay file {}: {e}", path.display())))?;
        table
            .remove(&request.key)
            .ok_or_else(|| stage_err(&request.stage, format!("no replay entry for key `{}`", request.key)))
    }
}

/// Client for any [`Transport`].
#[derive(Debug, Clone)]
pub struct RemoteAnnotator<T>(pub T);

impl<T: Transport> RemoteAnnotator<T> {
    fn request(&self, stage: &str, key: String, image: &ImageTensor, inputs: Value, ctx: &SceneContext) -> Result<Value> {
        let png = crate::io::encode_png(image)?;
        let request = RemoteRequest {
            scene_id: ctx.id.to_string(),
            stage: stage.to_string(),
            key,
            image_png: base64::engine::general_purpose::STANDARD.encode(png),
            inputs,
        };
        self.0.call(&request)
    }
}

fn bbox_key(b: &BBox) -> String {
    format!("{},{},{},{}", b.x0, b.y0, b.x1, b.y1)
}

impl<T: Transport> Tagger for RemoteAnnotator<T> {
    fn tag(&self, image: &ImageTensor, ctx: &SceneContext) -> Result<Vec<String>> {
        let v = self.request("tag", String::new(), image, json!({}), ctx)?;
        serde_json::from_value(v["tags"].clone()).map_err(|e| stage_err("tag", e.to_string()))
    }
}

impl<T: Transport> Localizer for RemoteAnnotator<T> {
    fn localize(&self, image: &ImageTensor, tag: &str, ctx: &SceneContext) -> Result<BBox> {
        let v = self.request("localize", tag.to_string(), image, json!({ "tag": tag }), ctx)?;
        let b: BBox = serde_json::from_value(v["bbox"].clone()).map_err(|e| stage_err("localize", e.to_string()))?;
        if b.x1 > image.width() || b.y1 > image.height() || b.x0 >= b.x1 || b.y0 >= b.y1 {
            return Err(stage_err("localize", format!("box {b:?} outside image")));
        }
        Ok(b)
    }
}

/// Wire form of a mask: dimensions plus base64 of one 0/1 byte per pixel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireMask {
    pub height: usize,
    pub width: usize,
    pub bits: String,
}

impl WireMask {
    pub fn from_mask(m: &MaskTensor) -> Self {
        Self { height: m.height(), width: m.width(), bits: base64::engine::general_purpose::STANDARD.encode(m.data()) }
    }

    pub fn to_mask(&self) -> Result<MaskTensor> {
        let data = base64::engine::general_purpose::STANDARD
            .decode(&self.bits)
            .map_err(|e| stage_err("segment", e.to_string()))?;
        MaskTensor::new(self.height, self.width, data)
    }
}

impl<T: Transport> Segmenter for RemoteAnnotator<T> {
    fn segment(&self, image: &ImageTensor, bbox: &BBox, ctx: &SceneContext) -> Result<MaskTensor> {
        let v = self.request("segment", bbox_key(bbox), image, json!({ "bbox": bbox }), ctx)?;
        let wire: WireMask = serde_json::from_value(v["mask"].clone()).map_err(|e| stage_err("segment", e.to_string()))?;
        let m = wire.to_mask()?;
        if m.height() != image.height() || m.width() != image.width() {
            return Err(stage_err("segment", "mask size differs from image"));
        }
        Ok(m)
    }
}

impl<T: Transport> Captioner for RemoteAnnotator<T> {
    fn caption_region(&self, crop: &ImageTensor, tag: &str, ctx: &SceneContext) -> Result<String> {
        let v = self.request("caption", tag.to_string(), crop, json!({ "tag": tag }), ctx)?;
        v["caption"].as_str().map(str::to_string).ok_or_else(|| stage_err("caption", "response without caption"))
    }

    fn caption_global(&self, image: &ImageTensor, ctx: &SceneContext) -> Result<String> {
        let v = self.request("caption", String::new(), image, json!({}), ctx)?;
        v["caption"].as_str().map(str::to_string).ok_or_else(|| stage_err("caption", "response without caption"))
    }
}

/// Writes oracle answers for one scene in replay format.
pub fn record_replay(dir: &Path, id: &str, scene: &SyntheticScene) -> Result<()> {
    let out = dir.join(id);
    std::fs::create_dir_all(&out)?;
    let mut tags = scene.objects.iter().map(|o| o.tag()).collect::<Vec<_>>();
    tags.extend(scene.extra_tags.iter().cloned());
    let mut localize = BTreeMap::new();
    let mut segment = BTreeMap::new();
    let mut caption = BTreeMap::new();
    caption.insert(String::new(), json!({ "caption": scene.global_caption() }));
    for o in &scene.objects {
        localize.insert(o.tag(), json!({ "bbox": o.bbox }));
        segment.insert(bbox_key(&o.bbox), json!({ "mask": WireMask::from_mask(o.mask()) }));
        caption.insert(o.tag(), json!({ "caption": o.caption() }));
    }
    let tag_table = BTreeMap::from([(String::new(), json!({ "tags": tags }))]);
    for (stage, table) in [("tag", tag_table), ("localize", localize), ("segment", segment), ("caption", caption)] {
        std::fs::write(out.join(format!("{stage}.json")), serde_json::to_string_pretty(&table)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_engine::scene::generate_scene;

    #[test]
    fn replay_reproduces_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let (img, scene) = generate_scene(3, 32).unwrap();
        record_replay(dir.path(), "s0", &scene).unwrap();
        let oracle = AnnotatorSuite::oracle();
        let remote = AnnotatorSuite::remote(ReplayTransport::new(dir.path()));
        let with_truth = SceneContext { id: "s0", truth: Some(&scene) };
        let blind = SceneContext { id: "s0", truth: None };
        let tags = oracle.tagger.tag(&img, &with_truth).unwrap();
        assert_eq!(tags, remote.tagger.tag(&img, &blind).unwrap());
        for o in &scene.objects {
            let tag = o.tag();
            let b = remote.localizer.localize(&img, &tag, &blind).unwrap();
            assert_eq!(b, oracle.localizer.localize(&img, &tag, &with_truth).unwrap());
            assert_eq!(&remote.segmenter.segment(&img, &b, &blind).unwrap(), o.mask());
            assert_eq!(remote.captioner.caption_region(&img, &tag, &blind).unwrap(), o.caption());
        }
        assert_eq!(remote.captioner.caption_global(&img, &blind).unwrap(), scene.global_caption());
    }

    #[test]
    fn missing_replay_names_stage() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = generate_scene(3, 32).unwrap();
        let remote = AnnotatorSuite::remote(ReplayTransport::new(dir.path()));
        let err = remote.tagger.tag(&img, &SceneContext { id: "nope", truth: None }).unwrap_err();
        assert!(matches!(&err, Error::Annotator { stage, .. } if stage == "tag"), "{err}");
    }

    #[test]
    fn oracle_without_truth_fails() {
        let (img, _) = generate_scene(3, 32).unwrap();
        assert!(OracleAnnotator.tag(&img, &SceneContext { id: "x", truth: None }).is_err());
    }
}
