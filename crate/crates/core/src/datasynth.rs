//! Cut-paste synthetic-defect generation with exact ground truth, plus the
//! piecewise-constant texture categories used for the synthetic suites.
//!
//! Pixels under the pasted mask are forced to stay at least `contrast_min`
//! (normalized L2 over channels) away from the original, so the ground-truth
//! mask is exactly the support of `x_gen - n_orig`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::{normalize_value, valid_hi, valid_lo};
use crate::mask::AnomalyMask;
use crate::tensor::Tensor;

/// Where anomalous pixel values come from.
#[derive(Debug, Clone)]
pub enum AnomalySource {
    /// A single random color drawn per sample.
    RandomColor,
    /// Pixels mirrored from a second normal image (structural anomalies).
    PatchFrom(Tensor),
}

/// Generation parameters for one sample.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    /// Canonical blob shape to paste, resized and placed randomly.
    pub mask_source: AnomalyMask,
    /// Uniform scale-factor range applied to the mask source.
    pub resize_range: (f64, f64),
    pub source: AnomalySource,
    /// Minimum normalized distance between generated and original pixels.
    pub contrast_min: f64,
    pub seed: u64,
}

fn resize_mask(mask: &AnomalyMask, factor: f64) -> AnomalyMask {
    let nh = ((mask.height() as f64 * factor).round() as usize).max(1);
    let nw = ((mask.width() as f64 * factor).round() as usize).max(1);
    AnomalyMask::from_fn(nh, nw, |i, j| {
        let si = ((i as f64 + 0.5) / factor) as usize;
        let sj = ((j as f64 + 0.5) / factor) as usize;
        si < mask.height() && sj < mask.width() && mask.get(si, sj)
    })
}

/// Paste the spec's mask source into `n_orig` (normalized space), returning
/// the defective image and the exact ground-truth mask.
pub fn generate(n_orig: &Tensor, spec: &SynthSpec) -> Result<(Tensor, AnomalyMask)> {
    if n_orig.rank() != 3 || n_orig.shape()[2] != 3 {
        return Err(Error::shape("generate", format!("expected [h,w,3], got {:?}", n_orig.shape())));
    }
    if spec.contrast_min <= 0.0 {
        return Err(Error::invalid("generate", "contrast_min must be > 0"));
    }
    if spec.resize_range.0 <= 0.0 || spec.resize_range.1 < spec.resize_range.0 {
        return Err(Error::invalid("generate", "bad resize range"));
    }
    let (h, w) = (n_orig.shape()[0], n_orig.shape()[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    if spec.mask_source.is_clear() {
        // Nothing to paste: the sample is the original with empty GT.
        return Ok((n_orig.clone(), AnomalyMask::empty(h, w)));
    }

    // Resize and place, retrying a degenerate draw a bounded number of times.
    let mut placed: Option<AnomalyMask> = None;
    for _attempt in 0..10 {
        let factor = rng.gen_range(spec.resize_range.0..=spec.resize_range.1);
        let resized = resize_mask(&spec.mask_source, factor);
        if resized.is_clear() || resized.height() > h || resized.width() > w {
            continue;
        }
        let oi = rng.gen_range(0..=h - resized.height());
        let oj = rng.gen_range(0..=w - resized.width());
        let mut m = AnomalyMask::empty(h, w);
        for i in 0..resized.height() {
            for j in 0..resized.width() {
                if resized.get(i, j) {
                    m.set(oi + i, oj + j, true);
                }
            }
        }
        placed = Some(m);
        break;
    }
    let gt = placed.ok_or_else(|| {
        Error::invalid("generate", "mask source never produced a non-empty placement in 10 draws")
    })?;

    let color: [f64; 3] = match &spec.source {
        AnomalySource::RandomColor => {
            let mut c = [0.0; 3];
            for (ch, v) in c.iter_mut().enumerate() {
                *v = normalize_value(rng.gen_range(0.0..1.0), ch);
            }
            c
        }
        AnomalySource::PatchFrom(_) => [0.0; 3],
    };

    let lo = valid_lo();
    let hi = valid_hi();
    let mut data = n_orig.data().to_vec();
    for i in 0..h {
        for j in 0..w {
            if !gt.get(i, j) {
                continue;
            }
            let base = (i * w + j) * 3;
            let orig = [data[base], data[base + 1], data[base + 2]];
            let mut px = match &spec.source {
                AnomalySource::RandomColor => color,
                AnomalySource::PatchFrom(other) => {
                    // Mirror across the vertical axis of the donor image.
                    let sj = w - 1 - j;
                    [other.at3(i, sj, 0), other.at3(i, sj, 1), other.at3(i, sj, 2)]
                }
            };
            let dist = |p: &[f64; 3]| {
                ((p[0] - orig[0]).powi(2) + (p[1] - orig[1]).powi(2) + (p[2] - orig[2]).powi(2))
                    .sqrt()
            };
            if dist(&px) < spec.contrast_min {
                // Push the pixel away from the original along their
                // difference; if the direction is degenerate or clamping eats
                // the gain, shift channelwise toward the farther range edge.
                let d = [px[0] - orig[0], px[1] - orig[1], px[2] - orig[2]];
                let norm = dist(&px);
                if norm > 1e-9 {
                    let s = spec.contrast_min / norm;
                    for ch in 0..3 {
                        px[ch] = (orig[ch] + d[ch] * s).clamp(lo[ch], hi[ch]);
                    }
                }
                if dist(&px) < spec.contrast_min {
                    let step = spec.contrast_min / 3f64.sqrt();
                    for ch in 0..3 {
                        let up = hi[ch] - orig[ch];
                        let down = orig[ch] - lo[ch];
                        px[ch] = if up >= down { orig[ch] + step } else { orig[ch] - step };
                    }
                }
            }
            debug_assert!(dist(&px) >= spec.contrast_min - 1e-12);
            data[base..base + 3].copy_from_slice(&px);
        }
    }
    Ok((Tensor::new(vec![h, w, 3], data)?, gt))
}

/// Canonical blob shape built from a couple of overlapping ellipses on a
/// 32x32 canvas; used as the mask source for synthetic categories.
pub fn random_blob_mask(seed: u64) -> AnomalyMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 32usize;
    let count = rng.gen_range(1..=3usize);
    let mut m = AnomalyMask::empty(side, side);
    for _ in 0..count {
        let cx = rng.gen_range(10.0..22.0);
        let cy = rng.gen_range(10.0..22.0);
        let rx = rng.gen_range(4.0..10.0);
        let ry = rng.gen_range(4.0..10.0);
        let rot: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (s, c) = rot.sin_cos();
        for i in 0..side {
            for j in 0..side {
                let dx = j as f64 - cx;
                let dy = i as f64 - cy;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                    m.set(i, j, true);
                }
            }
        }
    }
    m
}

/// A piecewise-constant texture category: a fixed layout of colored
/// rectangles over a background, with small per-image color jitter and
/// per-pixel noise.
#[derive(Debug, Clone)]
pub struct TextureCategory {
    h: usize,
    w: usize,
    palette: Vec<[f64; 3]>,
    /// (i0, j0, i1, j1, palette index)
    rects: Vec<(usize, usize, usize, usize, usize)>,
    jitter: f64,
    noise: f64,
}

impl TextureCategory {
    /// Deterministic layout from the category seed.
    pub fn new(h: usize, w: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let colors = rng.gen_range(3..=5usize);
        let mut palette = Vec::with_capacity(colors);
        for _ in 0..colors {
            palette.push([
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
            ]);
        }
        let regions = rng.gen_range(5..=8usize);
        let mut rects = Vec::with_capacity(regions);
        for _ in 0..regions {
            let i0 = rng.gen_range(0..h - h / 4);
            let j0 = rng.gen_range(0..w - w / 4);
            let i1 = (i0 + rng.gen_range(h / 6..h / 2)).min(h);
            let j1 = (j0 + rng.gen_range(w / 6..w / 2)).min(w);
            let color = rng.gen_range(1..colors);
            rects.push((i0, j0, i1, j1, color));
        }
        TextureCategory { h, w, palette, rects, jitter: 0.015, noise: 0.006 }
    }

    /// Render one normal image (normalized space); per-image variation comes
    /// entirely from `image_seed`.
    pub fn render(&self, image_seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
        let jittered: Vec<[f64; 3]> = self
            .palette
            .iter()
            .map(|c| {
                let mut out = *c;
                for v in out.iter_mut() {
                    *v = (*v + rng.gen_range(-self.jitter..self.jitter)).clamp(0.0, 1.0);
                }
                out
            })
            .collect();
        let mut unit = vec![0.0; self.h * self.w * 3];
        for i in 0..self.h {
            for j in 0..self.w {
                let base = (i * self.w + j) * 3;
                unit[base..base + 3].copy_from_slice(&jittered[0]);
            }
        }
        for &(i0, j0, i1, j1, color) in &self.rects {
            for i in i0..i1 {
                for j in j0..j1 {
                    let base = (i * self.w + j) * 3;
                    unit[base..base + 3].copy_from_slice(&jittered[color]);
                }
            }
        }
        let data = unit
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let noisy = (v + rng.gen_range(-self.noise..self.noise)).clamp(0.0, 1.0);
                normalize_value(noisy, idx % 3)
            })
            .collect();
        Tensor::from_op("texture-render", vec![self.h, self.w, 3], data)
    }
}
