//! Synthetic scenes: flat shapes on gray or gradient backgrounds, rendered
//! together with exact ground truth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{BBox, ImageTensor, MaskTensor};
use crate::error::{Error, Result};
use crate::nn::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColorSpec {
    pub name: &'static str,
    pub rgb: [u8; 3],
}

/// Saturated colors; none has equal channels, so no object pixel can match
/// a gray background pixel.
pub const COLORS: [ColorSpec; 8] = [
    ColorSpec { name: "red", rgb: [220, 30, 30] },
    ColorSpec { name: "green", rgb: [30, 180, 60] },
    ColorSpec { name: "blue", rgb: [40, 70, 220] },
    ColorSpec { name: "yellow", rgb: [230, 210, 40] },
    ColorSpec { name: "magenta", rgb: [210, 40, 200] },
    ColorSpec { name: "cyan", rgb: [40, 200, 210] },
    ColorSpec { name: "orange", rgb: [240, 140, 30] },
    ColorSpec { name: "purple", rgb: [130, 50, 200] },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the pixel centre at offset `(dx, dy)` inside an `s x s` box
    /// is covered.
    fn covers(self, dx: usize, dy: usize, s: usize) -> bool {
        let (px, py, s) = (dx as f64 + 0.5, dy as f64 + 0.5, s as f64);
        match self {
            Shape::Square => true,
            Shape::Circle => {
                let r = s / 2.0;
                (px - r).powi(2) + (py - r).powi(2) <= r * r
            }
            // Apex at top centre, base along the bottom edge.
            Shape::Triangle => (px - s / 2.0).abs() <= py / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Plain,
    Striped,
}

pub const TEXTURES: [Texture; 2] = [Texture::Plain, Texture::Striped];

impl Texture {
    pub fn name(self) -> &'static str {
        match self {
            Texture::Plain => "plain",
            Texture::Striped => "striped",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Background {
    Solid { level: u8 },
    /// Vertical gray ramp from `top` to `bottom`.
    Gradient { top: u8, bottom: u8 },
}

impl Background {
    pub fn name(&self) -> &'static str {
        match self {
            Background::Solid { .. } => "gray",
            Background::Gradient { .. } => "gradient",
        }
    }

    fn level(&self, y: usize, height: usize) -> u8 {
        match *self {
            Background::Solid { level } => level,
            Background::Gradient { top, bottom } => {
                let f = if height > 1 { y as f64 / (height - 1) as f64 } else { 0.0 };
                (top as f64 + (bottom as f64 - top as f64) * f).round() as u8
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: String,
    pub texture: Texture,
    /// Tight box around `mask`.
    pub bbox: BBox,
    #[serde(skip)]
    pub mask: Option<MaskTensor>,
}

impl SceneObject {
    /// Entity tag, e.g. `"red circle"`.
    pub fn tag(&self) -> String {
        format!("{} {}", self.color, self.shape.name())
    }

    /// Regional caption template.
    pub fn caption(&self) -> String {
        format!("a {} {} {}", self.texture.name(), self.color, self.shape.name())
    }

    pub fn mask(&self) -> &MaskTensor {
        self.mask.as_ref().expect("rendered objects carry their mask")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub background: Background,
    pub objects: Vec<SceneObject>,
    /// Non-entity tags a tagger would also report.
    pub extra_tags: Vec<String>,
}

impl SyntheticScene {
    /// Whole-scene caption; describes the layout but names no colors.
    pub fn global_caption(&self) -> String {
        let count = ["one", "two", "three"].get(self.objects.len().saturating_sub(1)).copied().unwrap_or("several");
        let noun = if self.objects.len() == 1 { "shape" } else { "shapes" };
        format!("a picture of {count} {noun} on a {} background", self.background.name())
    }

    pub fn object_by_tag(&self, tag: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.tag() == tag)
    }
}

/// Tags from the scene surroundings that are not entities.
pub const SCENE_TAGS: [&str; 3] = ["sky", "nature", "skin"];

/// Every word any caption can contain.
pub fn caption_vocabulary() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = vec![
        "a", "picture", "of", "one", "two", "three", "shape", "shapes", "on", "background", "gray", "gradient",
    ];
    v.extend(TEXTURES.iter().map(|t| t.name()));
    v.extend(COLORS.iter().map(|c| c.name));
    v.extend(SHAPES.iter().map(|s| s.name()));
    v.sort_unstable();
    v.dedup();
    v
}

fn color_rgb(name: &str) -> Option<[u8; 3]> {
    COLORS.iter().find(|c| c.name == name).map(|c| c.rgb)
}

/// Object pixel color; stripes alternate the color with its half-intensity
/// shade every two rows.
fn object_rgb(rgb: [u8; 3], texture: Texture, y: usize) -> [u8; 3] {
    match texture {
        Texture::Striped if (y / 2) % 2 == 1 => rgb.map(|v| v / 2),
        _ => rgb,
    }
}

fn render_background(bg: &Background, height: usize, width: usize) -> Vec<u8> {
    let mut buf = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        let l = bg.level(y, height);
        buf.extend(std::iter::repeat_n(l, width * 3));
    }
    buf
}

/// Draws a scene of `size x size` pixels from `seed`.
pub fn generate_scene(seed: u64, size: usize) -> Result<(ImageTensor, SyntheticScene)> {
    if size < 8 {
        return Err(Error::Config(format!("scene size {size} too small")));
    }
    let mut rng = derived_rng(seed, "scene", 0);
    let background = if rng.random_bool(0.5) {
        Background::Solid { level: rng.random_range(90..=170) }
    } else {
        let top = rng.random_range(40..=120);
        Background::Gradient { top, bottom: rng.random_range(150..=220) }
    };
    let target = rng.random_range(1..=3usize);
    let (smin, smax) = ((size / 10).max(2), size * 3 / 4);
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut boxes: Vec<BBox> = Vec::new();
    for _ in 0..60 {
        if objects.len() == target {
            break;
        }
        let s = rng.random_range(smin..=smax);
        let x0 = rng.random_range(0..=size - s);
        let y0 = rng.random_range(0..=size - s);
        let outer = BBox { x0, y0, x1: x0 + s, y1: y0 + s };
        if boxes.iter().any(|b| b.intersects(&outer)) {
            continue;
        }
        let shape = SHAPES[rng.random_range(0..SHAPES.len())];
        let color = COLORS[rng.random_range(0..COLORS.len())];
        let texture = TEXTURES[rng.random_range(0..TEXTURES.len())];
        // One object per tag keeps tags unambiguous within a scene.
        if objects.iter().any(|o| o.color == color.name && o.shape == shape) {
            continue;
        }
        let mut mask = MaskTensor::zeros(size, size);
        for dy in 0..s {
            for dx in 0..s {
                if shape.covers(dx, dy, s) {
                    mask.set(y0 + dy, x0 + dx, true);
                }
            }
        }
        let Some(bbox) = mask.bbox() else { continue };
        boxes.push(outer);
        objects.push(SceneObject { shape, color: color.name.to_string(), texture, bbox, mask: Some(mask) });
    }
    let mut extra_tags = Vec::new();
    for tag in SCENE_TAGS {
        if rng.random_bool(0.3) {
            extra_tags.push(tag.to_string());
        }
    }
    let scene = SyntheticScene { seed, height: size, width: size, background, objects, extra_tags };
    let image = render(&scene)?;
    Ok((image, scene))
}

/// Renders a scene; objects are painted exactly on their mask pixels.
pub fn render(scene: &SyntheticScene) -> Result<ImageTensor> {
    let (h, w) = (scene.height, scene.width);
    let mut buf = render_background(&scene.background, h, w);
    for obj in &scene.objects {
        let rgb = color_rgb(&obj.color).ok_or_else(|| Error::Data(format!("unknown color {}", obj.color)))?;
        let mask = obj.mask.as_ref().ok_or_else(|| Error::Data("object without mask".into()))?;
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    let i = (y * w + x) * 3;
                    buf[i..i + 3].copy_from_slice(&object_rgb(rgb, obj.texture, y));
                }
            }
        }
    }
    ImageTensor::from_rgb8(h, w, &buf)
}

/// Background alone, as drawn under the scene.
pub fn render_background_only(scene: &SyntheticScene) -> Result<ImageTensor> {
    ImageTensor::from_rgb8(scene.height, scene.width, &render_background(&scene.background, scene.height, scene.width))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_pixels() {
        let (a, sa) = generate_scene(5, 32).unwrap();
        let (b, sb) = generate_scene(5, 32).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_ne!(a, generate_scene(6, 32).unwrap().0);
    }

    #[test]
    fn masks_equal_pixel_difference_from_background() {
        for seed in 0..200 {
            let (img, scene) = generate_scene(seed, 32).unwrap();
            assert!((1..=3).contains(&scene.objects.len()), "seed {seed}");
            let bg = render_background_only(&scene).unwrap();
            let mut union = MaskTensor::zeros(32, 32);
            for o in &scene.objects {
                assert_eq!(o.mask().bbox(), Some(o.bbox));
                for y in 0..32 {
                    for x in 0..32 {
                        if o.mask().get(y, x) {
                            assert!(!union.get(y, x), "objects overlap at seed {seed}");
                            union.set(y, x, true);
                        }
                    }
                }
            }
            for y in 0..32 {
                for x in 0..32 {
                    assert_eq!(img.pixel(y, x) != bg.pixel(y, x), union.get(y, x), "seed {seed} ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn captions_follow_template() {
        let o = SceneObject {
            shape: Shape::Circle,
            color: "red".into(),
            texture: Texture::Striped,
            bbox: BBox { x0: 0, y0: 0, x1: 1, y1: 1 },
            mask: None,
        };
        assert_eq!(o.caption(), "a striped red circle");
        assert_eq!(o.tag(), "red circle");
    }

    #[test]
    fn global_caption_uses_vocabulary_and_no_colors() {
        let vocab = caption_vocabulary();
        for seed in 0..50 {
            let (_, scene) = generate_scene(seed, 32).unwrap();
            let g = scene.global_caption();
            assert!(g.split(' ').all(|w| vocab.contains(&w)), "{g}");
            assert!(COLORS.iter().all(|c| !g.contains(c.name)));
            for o in &scene.objects {
                assert!(o.caption().split(' ').all(|w| vocab.contains(&w)));
            }
        }
    }
}
