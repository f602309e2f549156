//! PNG input/output and pixel normalization.
//!
//! Images move through the pipeline in channelwise-normalized space:
//! `(v/255 - mean) / std` with the standard ImageNet constants. The valid
//! normalized range per channel is therefore `[(0-mean)/std, (1-mean)/std]`.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::mask::AnomalyMask;
use crate::tensor::Tensor;

/// Channelwise normalization constants (ImageNet convention).
pub const NORM_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const NORM_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Lower bound of the valid normalized range per channel.
pub fn valid_lo() -> [f64; 3] {
    [0, 1, 2].map(|c| (0.0 - NORM_MEAN[c]) / NORM_STD[c])
}

/// Upper bound of the valid normalized range per channel.
pub fn valid_hi() -> [f64; 3] {
    [0, 1, 2].map(|c| (1.0 - NORM_MEAN[c]) / NORM_STD[c])
}

/// `[0,1]` pixel value -> normalized space.
pub fn normalize_value(v: f64, channel: usize) -> f64 {
    (v - NORM_MEAN[channel]) / NORM_STD[channel]
}

/// Normalized value -> `[0,1]` pixel space (unclamped).
pub fn denormalize_value(v: f64, channel: usize) -> f64 {
    v * NORM_STD[channel] + NORM_MEAN[channel]
}

/// Normalize an `[h,w,3]` tensor of `[0,1]` values in place conventions.
pub fn normalize_image(unit: &Tensor) -> Result<Tensor> {
    if unit.rank() != 3 || unit.shape()[2] != 3 {
        return Err(Error::shape("normalize_image", format!("expected [h,w,3], got {:?}", unit.shape())));
    }
    let data = unit
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| normalize_value(v, i % 3))
        .collect();
    Tensor::new(unit.shape().to_vec(), data)
}

/// Load an RGB PNG into normalized space.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = ImageReader::open(path)?.decode()?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((h * w * 3) as usize);
    for px in img.pixels() {
        for c in 0..3 {
            data.push(normalize_value(px.0[c] as f64 / 255.0, c));
        }
    }
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// Save a normalized image, denormalizing and clamping to 8-bit.
pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    if t.rank() != 3 || t.shape()[2] != 3 {
        return Err(Error::shape("save_image", format!("expected [h,w,3], got {:?}", t.shape())));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut img = RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = denormalize_value(t.at3(i, j, c), c);
                px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Save a binary mask as a 0/255 grayscale PNG.
pub fn save_mask(path: &Path, mask: &AnomalyMask) -> Result<()> {
    let mut img = GrayImage::new(mask.width() as u32, mask.height() as u32);
    for i in 0..mask.height() {
        for j in 0..mask.width() {
            img.put_pixel(j as u32, i as u32, image::Luma([if mask.get(i, j) { 255 } else { 0 }]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Load a 0/255 (or any nonzero) grayscale PNG as a mask.
pub fn load_mask(path: &Path) -> Result<AnomalyMask> {
    let img = ImageReader::open(path)?.decode()?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(AnomalyMask::from_fn(h as usize, w as usize, |i, j| {
        img.get_pixel(j as u32, i as u32).0[0] > 127
    }))
}

/// Save a score field as a grayscale heatmap, min-max scaled to 8 bits.
pub fn save_heatmap(path: &Path, scores: &Tensor) -> Result<()> {
    if scores.rank() != 2 {
        return Err(Error::shape("save_heatmap", format!("expected [h,w], got {:?}", scores.shape())));
    }
    let (h, w) = (scores.shape()[0], scores.shape()[1]);
    let lo = scores.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let v = ((scores.at2(i, j) - lo) / span * 255.0).round() as u8;
            img.put_pixel(j as u32, i as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}
