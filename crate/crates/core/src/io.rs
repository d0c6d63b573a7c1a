//! PNG reading and writing for images and masks.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::codec::{ImageTensor, MaskTensor};
use crate::error::{Error, Result};

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?.to_rgb8();
    ImageTensor::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
}

pub fn write_image(path: &Path, image: &ImageTensor) -> Result<()> {
    let buf = RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
        .ok_or_else(|| Error::Data("image buffer size mismatch".into()))?;
    buf.save(path)?;
    Ok(())
}

/// Masks are stored as 8-bit gray, 0 or 255; anything >= 128 reads as set.
pub fn read_mask(path: &Path) -> Result<MaskTensor> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?.to_luma8();
    let data = img.as_raw().iter().map(|&v| u8::from(v >= 128)).collect();
    MaskTensor::new(img.height() as usize, img.width() as usize, data)
}

pub fn write_mask(path: &Path, mask: &MaskTensor) -> Result<()> {
    let data = mask.data().iter().map(|&v| v * 255).collect();
    let buf = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, data)
        .ok_or_else(|| Error::Data("mask buffer size mismatch".into()))?;
    buf.save(path)?;
    Ok(())
}

/// PNG bytes of an image, as sent to remote annotators.
pub fn encode_png(image: &ImageTensor) -> Result<Vec<u8>> {
    let buf = RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
        .ok_or_else(|| Error::Data("image buffer size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::BBox;

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..4 * 6 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = ImageTensor::from_rgb8(4, 6, &bytes).unwrap();
        let p = dir.path().join("a.png");
        write_image(&p, &img).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);

        let mask = MaskTensor::rect(5, 7, BBox { x0: 1, y0: 2, x1: 4, y1: 5 }).unwrap();
        let q = dir.path().join("m.png");
        write_mask(&q, &mask).unwrap();
        assert_eq!(read_mask(&q).unwrap(), mask);
        assert_eq!(&encode_png(&img).unwrap()[1..4], b"PNG");
    }
}
