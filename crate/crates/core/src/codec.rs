//! Pixel/latent plumbing for the masked-latent conditioning path.
//!
//! The codec is an exact space-to-depth rearrangement: every `f x f x 3`
//! pixel patch becomes one latent cell with `3 f^2` channels. It is linear
//! and bit-exactly invertible, so background preservation can be checked
//! with equality rather than tolerances.

use candle_core::{DType, Device, Tensor};
use image::{imageops, ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// RGB image, values in `[0, 1]`, stored row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("image has zero extent".into()));
        }
        if data.len() != height * width * 3 {
            return shape_err(format!(
                "image buffer has {} values, expected {}x{}x3",
                data.len(),
                height,
                width
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    /// Builds an image from 8-bit RGB values; exact on the 1/255 grid.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || x0 + width > self.width || y0 + height > self.height {
            return Err(Error::InvalidInput(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(Self { height, width, data })
    }

    pub fn crop_window(&self, window: &CropWindow) -> Result<Self> {
        self.crop(window.x0, window.y0, window.side, window.side)
    }

    /// Bilinear resize. Returns a clone when the size is unchanged.
    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("resize to zero extent".into()));
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .ok_or_else(|| Error::Shape("image buffer size".into()))?;
        let out = imageops::resize(&buf, width as u32, height as u32, imageops::FilterType::Triangle);
        let data = out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(height, width, data)
    }

    /// Writes `patch` into this image at `(x0, y0)`.
    pub fn paste(&mut self, patch: &ImageTensor, x0: usize, y0: usize) -> Result<()> {
        if x0 + patch.width > self.width || y0 + patch.height > self.height {
            return shape_err("paste target outside image");
        }
        for y in 0..patch.height {
            let dst = ((y0 + y) * self.width + x0) * 3;
            let src = y * patch.width * 3;
            self.data[dst..dst + patch.width * 3]
                .copy_from_slice(&patch.data[src..src + patch.width * 3]);
        }
        Ok(())
    }
}

/// Binary mask, 1 marks the region to inpaint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTensor {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskTensor {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("mask has zero extent".into()));
        }
        if data.len() != height * width {
            return shape_err(format!(
                "mask buffer has {} values, expected {}x{}",
                data.len(),
                height,
                width
            ));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("mask must be binary".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    /// Mask set on the half-open rectangle `[x0, x1) x [y0, y1)`.
    pub fn rect(height: usize, width: usize, bbox: BBox) -> Result<Self> {
        if bbox.x1 > width || bbox.y1 > height {
            return shape_err("rectangle outside mask");
        }
        let mut m = Self::zeros(height, width);
        for y in bbox.y0..bbox.y1 {
            for x in bbox.x0..bbox.x1 {
                m.set(y, x, true);
            }
        }
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Tight bounding box of the set pixels, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let mut bb: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    let b = bb.get_or_insert(BBox { x0: x, y0: y, x1: x + 1, y1: y + 1 });
                    b.x0 = b.x0.min(x);
                    b.y0 = b.y0.min(y);
                    b.x1 = b.x1.max(x + 1);
                    b.y1 = b.y1.max(y + 1);
                }
            }
        }
        bb
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || x0 + width > self.width || y0 + height > self.height {
            return Err(Error::InvalidInput("mask crop outside mask".into()));
        }
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            let start = y * self.width + x0;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        Ok(Self { height, width, data })
    }

    /// Nearest-neighbour resize, keeps the mask binary.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let mut out = Self::zeros(height, width);
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                let sx = (x * self.width) / width;
                out.data[y * width + x] = self.data[sy * self.width + sx];
            }
        }
        out
    }

    pub fn intersection_over_union(&self, other: &MaskTensor) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return shape_err("IoU of masks with different sizes");
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

/// Latent feature map stored CHW.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl LatentTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return shape_err(format!(
                "latent buffer has {} values, expected {channels}x{height}x{width}",
                data.len()
            ));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Channels `[start, start + len)`.
    pub fn channel_slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.channels {
            return shape_err("channel slice out of range");
        }
        let plane = self.height * self.width;
        let data = self.data[start * plane..(start + len) * plane].to_vec();
        Self::new(len, self.height, self.width, data)
    }

    pub fn same_shape(&self, other: &LatentTensor) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.channels, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `(c, h, w)` or `(1, c, h, w)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return shape_err(format!("latent tensor of rank {r}")),
        };
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(c, h, w, data)
    }
}

/// Latent-resolution binary mask `m*`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LatentMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width || data.iter().any(|&v| v > 1) {
            return shape_err("latent mask must be binary h x w");
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn as_latent(&self) -> LatentTensor {
        LatentTensor {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// The denoiser input `[z; m*; z_s]` together with its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBundle {
    pub z: LatentTensor,
    pub m_star: LatentMask,
    pub z_s: LatentTensor,
    pub z_tilde: LatentTensor,
}

/// Square crop used by the zoom-in strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
}

impl CropWindow {
    pub fn bbox(&self) -> BBox {
        BBox { x0: self.x0, y0: self.y0, x1: self.x0 + self.side, y1: self.y0 + self.side }
    }
}

/// Space-to-depth codec with patch factor `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codec {
    factor: usize,
}

impl Default for Codec {
    fn default() -> Self {
        Self { factor: 4 }
    }
}

impl Codec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidInput("codec factor must be positive".into()));
        }
        Ok(Self { factor })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Latent channel count `3 f^2`.
    pub fn latent_channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        if height % self.factor != 0 || width % self.factor != 0 {
            return Err(Error::InvalidInput(format!(
                "image {height}x{width} not divisible by codec factor {}",
                self.factor
            )));
        }
        Ok(())
    }

    pub fn encode(&self, image: &ImageTensor) -> Result<LatentTensor> {
        self.check_dims(image.height, image.width)?;
        let f = self.factor;
        let (h, w) = (image.height / f, image.width / f);
        let c = self.latent_channels();
        let mut data = vec![0.0f32; c * h * w];
        for i in 0..h {
            for j in 0..w {
                for dy in 0..f {
                    for dx in 0..f {
                        let px = ((i * f + dy) * image.width + j * f + dx) * 3;
                        for ch in 0..3 {
                            let k = (dy * f + dx) * 3 + ch;
                            data[(k * h + i) * w + j] = image.data[px + ch];
                        }
                    }
                }
            }
        }
        LatentTensor::new(c, h, w, data)
    }

    /// Inverse of [`Codec::encode`]. Values are clamped into `[0, 1]`, which
    /// is the identity on anything `encode` produced.
    pub fn decode(&self, latent: &LatentTensor) -> Result<ImageTensor> {
        if latent.channels != self.latent_channels() {
            return shape_err(format!(
                "latent has {} channels, codec expects {}",
                latent.channels,
                self.latent_channels()
            ));
        }
        let f = self.factor;
        let (h, w) = (latent.height, latent.width);
        let (height, width) = (h * f, w * f);
        let mut data = vec![0.0f32; height * width * 3];
        for i in 0..h {
            for j in 0..w {
                for dy in 0..f {
                    for dx in 0..f {
                        let px = ((i * f + dy) * width + j * f + dx) * 3;
                        for ch in 0..3 {
                            let k = (dy * f + dx) * 3 + ch;
                            let v = latent.data[(k * h + i) * w + j];
                            data[px + ch] = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                        }
                    }
                }
            }
        }
        ImageTensor::new(height, width, data)
    }

    /// `Enc(x_s * (1 - m))`.
    pub fn encode_masked_source(&self, source: &ImageTensor, mask: &MaskTensor) -> Result<LatentTensor> {
        check_image_mask(source, mask)?;
        let mut masked = source.clone();
        for (p, &m) in masked.data.chunks_exact_mut(3).zip(&mask.data) {
            if m == 1 {
                p.fill(0.0);
            }
        }
        self.encode(&masked)
    }

    /// Max-pool downsampling: a cell is set iff any covered pixel is set.
    pub fn resize_mask(&self, mask: &MaskTensor) -> Result<LatentMask> {
        self.check_dims(mask.height, mask.width)?;
        let f = self.factor;
        let (h, w) = (mask.height / f, mask.width / f);
        let mut data = vec![0u8; h * w];
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(y, x) {
                    data[(y / f) * w + x / f] = 1;
                }
            }
        }
        LatentMask::new(h, w, data)
    }

    /// Concatenates `[z; m*; z_s]` along channels.
    pub fn assemble_input(&self, z: &LatentTensor, m_star: &LatentMask, z_s: &LatentTensor) -> Result<LatentBundle> {
        assemble_input(z, m_star, z_s)
    }

    /// Square window around the mask's bounding box.
    ///
    /// The box's longer side is dilated by `margin` (relative), rounded up to
    /// a multiple of `f`, capped at the image's shorter side, centred on the
    /// box and shifted back inside the image if it pokes out.
    pub fn zoom_window(&self, mask: &MaskTensor, margin: f64) -> Result<CropWindow> {
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(Error::InvalidInput(format!("zoom margin {margin}")));
        }
        let bbox = mask.bbox().ok_or(Error::EmptyMask)?;
        let f = self.factor;
        let longest = bbox.width().max(bbox.height());
        let dilated = (longest as f64 * (1.0 + margin)).ceil() as usize;
        let mut side = dilated.div_ceil(f) * f;
        let limit = mask.height.min(mask.width);
        if side > limit {
            side = limit;
        }
        if side < longest {
            return Err(Error::InvalidInput(format!(
                "mask bounding box side {longest} exceeds the largest square window {limit}"
            )));
        }
        let place = |lo: usize, len: usize, extent: usize| -> usize {
            let start = lo.saturating_sub((side - len) / 2);
            start.min(extent - side)
        };
        Ok(CropWindow {
            x0: place(bbox.x0, bbox.width(), mask.width),
            y0: place(bbox.y0, bbox.height(), mask.height),
            side,
        })
    }
}

pub fn assemble_input(z: &LatentTensor, m_star: &LatentMask, z_s: &LatentTensor) -> Result<LatentBundle> {
    if !z.same_shape(z_s) {
        return shape_err("z and z_s differ in shape");
    }
    if z.height != m_star.height || z.width != m_star.width {
        return shape_err("m* resolution differs from latent");
    }
    let c = z.channels;
    let mut data = Vec::with_capacity((2 * c + 1) * z.height * z.width);
    data.extend_from_slice(&z.data);
    data.extend(m_star.data.iter().map(|&v| v as f32));
    data.extend_from_slice(&z_s.data);
    let z_tilde = LatentTensor::new(2 * c + 1, z.height, z.width, data)?;
    Ok(LatentBundle { z: z.clone(), m_star: m_star.clone(), z_s: z_s.clone(), z_tilde })
}

/// `x_s * (1 - m) + generated * m`; unmasked pixels are copied from `x_s`.
pub fn composite(source: &ImageTensor, mask: &MaskTensor, generated: &ImageTensor) -> Result<ImageTensor> {
    check_image_mask(source, mask)?;
    if source.height != generated.height || source.width != generated.width {
        return shape_err("generated image differs from source in size");
    }
    let mut out = source.clone();
    for ((o, g), &m) in out.data.chunks_exact_mut(3).zip(generated.data.chunks_exact(3)).zip(&mask.data) {
        if m == 1 {
            o.copy_from_slice(g);
        }
    }
    Ok(out)
}

fn check_image_mask(image: &ImageTensor, mask: &MaskTensor) -> Result<()> {
    if image.height != mask.height || image.width != mask.width {
        return shape_err(format!(
            "image {}x{} vs mask {}x{}",
            image.height, image.width, mask.height, mask.width
        ));
    }
    Ok(())
}
