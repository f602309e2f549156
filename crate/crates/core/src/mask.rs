//! Binary anomaly masks, morphology, score thresholding, and the bilinear
//! score upsampling used to lift backend grids to the pixel grid.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// H x W binary mask; `true` marks an anomalous pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnomalyMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl AnomalyMask {
    pub fn empty(h: usize, w: usize) -> Self {
        AnomalyMask { h, w, data: vec![false; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(f(i, j));
            }
        }
        AnomalyMask { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.w + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.w + j] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_clear(&self) -> bool {
        self.data.iter().all(|&v| !v)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    /// Row-major list of set pixels.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.h {
            for j in 0..self.w {
                if self.get(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn union(&self, other: &AnomalyMask) -> AnomalyMask {
        assert_eq!((self.h, self.w), (other.h, other.w));
        AnomalyMask {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect(),
        }
    }

    pub fn contains(&self, other: &AnomalyMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a || !b)
    }
}

fn dilate_axis(mask: &AnomalyMask, radius: usize, rows: bool) -> AnomalyMask {
    let (h, w) = (mask.h, mask.w);
    let mut out = AnomalyMask::empty(h, w);
    for i in 0..h {
        for j in 0..w {
            if !mask.get(i, j) {
                continue;
            }
            if rows {
                let lo = i.saturating_sub(radius);
                let hi = (i + radius).min(h - 1);
                for ii in lo..=hi {
                    out.set(ii, j, true);
                }
            } else {
                let lo = j.saturating_sub(radius);
                let hi = (j + radius).min(w - 1);
                for jj in lo..=hi {
                    out.set(i, jj, true);
                }
            }
        }
    }
    out
}

/// Binary dilation with a square structuring element of side `2*radius + 1`.
pub fn dilate(mask: &AnomalyMask, radius: usize) -> AnomalyMask {
    if radius == 0 {
        return mask.clone();
    }
    // A square element separates into a row pass and a column pass.
    dilate_axis(&dilate_axis(mask, radius, true), radius, false)
}

/// Binary erosion with a square structuring element of side `2*radius + 1`.
/// Pixels whose window leaves the image erode away.
pub fn erode(mask: &AnomalyMask, radius: usize) -> AnomalyMask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.h, mask.w);
    let mut out = AnomalyMask::empty(h, w);
    for i in 0..h {
        for j in 0..w {
            if i < radius || j < radius || i + radius >= h || j + radius >= w {
                continue;
            }
            let mut all = true;
            'win: for ii in i - radius..=i + radius {
                for jj in j - radius..=j + radius {
                    if !mask.get(ii, jj) {
                        all = false;
                        break 'win;
                    }
                }
            }
            out.set(i, j, all);
        }
    }
    out
}

/// Morphological opening (erosion then dilation) with a k x k element;
/// `k` must be odd.
pub fn morph_open(mask: &AnomalyMask, k: usize) -> Result<AnomalyMask> {
    if k % 2 == 0 {
        return Err(Error::invalid("morph_open", format!("element side {k} must be odd")));
    }
    let radius = k / 2;
    Ok(dilate(&erode(mask, radius), radius))
}

/// Threshold the anomalous part: a pixel is masked when the L2 norm of its
/// channel vector exceeds `tau`.
pub fn extract_mask(a: &Tensor, tau: f64) -> Result<AnomalyMask> {
    if a.rank() != 3 {
        return Err(Error::shape("extract_mask", format!("expected [h,w,c], got {:?}", a.shape())));
    }
    if tau <= 0.0 {
        return Err(Error::invalid("extract_mask", format!("tau {tau} must be > 0")));
    }
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    Ok(AnomalyMask::from_fn(h, w, |i, j| {
        let mut s = 0.0;
        for ch in 0..c {
            let v = a.at3(i, j, ch);
            s += v * v;
        }
        s.sqrt() > tau
    }))
}

/// How the initial mask is binarized from the per-pixel score field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMaskMode {
    /// Exhaustive threshold search maximizing F1 against ground truth
    /// (evaluation only).
    MaxF1,
    /// Mark the top `(100 - q)` percent of pixels by score, ties broken by
    /// stable index order. Deployment default q = 98.
    Percentile(f64),
}

/// Binarize a pixel-level score field into the initial mask. Returns the
/// mask plus a flag that is true when the mask came out empty.
pub fn initial_mask(
    scores: &Tensor,
    mode: InitMaskMode,
    gt: Option<&AnomalyMask>,
) -> Result<(AnomalyMask, bool)> {
    if scores.rank() != 2 {
        return Err(Error::shape(
            "initial_mask",
            format!("scores must be [h,w], got {:?}", scores.shape()),
        ));
    }
    let (h, w) = (scores.shape()[0], scores.shape()[1]);
    let mask = match mode {
        InitMaskMode::Percentile(q) => {
            if !(0.0..=100.0).contains(&q) {
                return Err(Error::invalid("initial_mask", format!("percentile {q} outside [0,100]")));
            }
            let n = h * w;
            let keep = ((n as f64) * (100.0 - q) / 100.0).ceil() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            // Stable: sort by descending score, index ascending on ties.
            order.sort_by(|&a, &b| {
                scores.data()[b]
                    .partial_cmp(&scores.data()[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut m = AnomalyMask::empty(h, w);
            for &p in order.iter().take(keep.min(n)) {
                m.data[p] = true;
            }
            m
        }
        InitMaskMode::MaxF1 => {
            let gt = gt.ok_or_else(|| {
                Error::invalid("initial_mask", "max-F1 mode requires a ground-truth mask")
            })?;
            if (gt.h, gt.w) != (h, w) {
                return Err(Error::shape(
                    "initial_mask",
                    format!("gt dims {}x{} vs scores {h}x{w}", gt.h, gt.w),
                ));
            }
            let t = max_f1_threshold(scores.data(), gt.as_slice());
            let mut m = AnomalyMask::empty(h, w);
            for (p, &s) in scores.data().iter().enumerate() {
                m.data[p] = s >= t;
            }
            m
        }
    };
    let empty = mask.is_clear();
    Ok((mask, empty))
}

/// Threshold over `mask = scores >= t` maximizing F1 against `gt`. Scanning
/// the sorted scores visits every distinct thresholding; the highest
/// threshold among F1 ties wins.
pub fn max_f1_threshold(scores: &[f64], gt: &[bool]) -> f64 {
    debug_assert_eq!(scores.len(), gt.len());
    let total_pos = gt.iter().filter(|&&v| v).count() as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut best_f1 = -1.0;
    let mut best_t = f64::INFINITY;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        // Take all pixels with score >= t (ties enter together).
        while i < order.len() && scores[order[i]] == t {
            if gt[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + (total_pos - tp)) };
        if f1 > best_f1 {
            best_f1 = f1;
            best_t = t;
        }
    }
    best_t
}

/// Bilinear upsampling of a `[hk, wk]` score grid to `[h, w]`, treating cell
/// values as samples at cell centers.
pub fn bilinear_upsample(scores: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if scores.rank() != 2 {
        return Err(Error::shape(
            "bilinear_upsample",
            format!("expected [hk,wk], got {:?}", scores.shape()),
        ));
    }
    let (hk, wk) = (scores.shape()[0], scores.shape()[1]);
    let mut out = vec![0.0; h * w];
    let sy = hk as f64 / h as f64;
    let sx = wk as f64 / w as f64;
    for i in 0..h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (hk - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(hk - 1);
        let ty = fy - y0 as f64;
        for j in 0..w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (wk - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(wk - 1);
            let tx = fx - x0 as f64;
            let v00 = scores.at2(y0, x0);
            let v01 = scores.at2(y0, x1);
            let v10 = scores.at2(y1, x0);
            let v11 = scores.at2(y1, x1);
            out[i * w + j] =
                v00 * (1.0 - ty) * (1.0 - tx) + v01 * (1.0 - ty) * tx + v10 * ty * (1.0 - tx) + v11 * ty * tx;
        }
    }
    Ok(Tensor::from_op("bilinear_upsample", vec![h, w], out))
}
