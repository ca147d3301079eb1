//! Conversions between `[C,H,W]` tensors in `[-1,1]` and 8-bit RGB images,
//! plus PNG save/load and the horizontal strip used to lay out per-word
//! sequences.

use std::path::Path;

use image::{ImageBuffer, ImageReader, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::fsio;
use crate::tensor::Tensor;

/// `[3,H,W]` tensor in `[-1,1]` to an RGB image; values are clamped before
/// quantization.
pub fn tensor_to_rgb(image: &Tensor) -> Result<RgbImage> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("expected [3,H,W] image tensor, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let data = image.data();
    let plane = h * w;
    let mut out: RgbImage = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| {
                let v = data[c * plane + y * w + x].clamp(-1.0, 1.0);
                ((v + 1.0) * 127.5).round() as u8
            };
            out.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    Ok(out)
}

/// RGB image to a `[3,H,W]` tensor scaled from `[0,255]` to `[-1,1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * plane + y * w + x] = f64::from(px.0[c]) / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Saves an image tensor as PNG, atomically.
pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let rgb = tensor_to_rgb(image)?;
    fsio::atomic_write_with(path, |tmp| {
        rgb.save_with_format(tmp, image::ImageFormat::Png)?;
        Ok(())
    })
}

/// Decodes any supported image file, resizes bilinearly to
/// `extent x extent`, and maps to `[-1,1]`.
pub fn load_as_tensor(path: &Path, extent: usize) -> Result<Tensor> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .decode()?
        .to_rgb8();
    let resized = if img.width() as usize == extent && img.height() as usize == extent {
        img
    } else {
        image::imageops::resize(
            &img,
            extent as u32,
            extent as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    rgb_to_tensor(&resized)
}

/// Concatenates equally-sized `[3,H,W]` images left to right.
pub fn horizontal_strip(images: &[Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::arg("strip of zero images".to_string()));
    }
    let s = images[0].shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected [C,H,W] images, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    for img in images {
        if img.shape() != s.as_slice() {
            return Err(Error::shape(format!(
                "strip images disagree: {:?} vs {s:?}",
                img.shape()
            )));
        }
    }
    let n = images.len();
    let mut data = vec![0.0; c * h * w * n];
    let out_w = w * n;
    for (k, img) in images.iter().enumerate() {
        let src = img.data();
        for ch in 0..c {
            for y in 0..h {
                let dst = &mut data[(ch * h + y) * out_w + k * w..][..w];
                dst.copy_from_slice(&src[(ch * h + y) * w..][..w]);
            }
        }
    }
    Tensor::new(vec![c, h, out_w], data)
}
