//! Harmonic inpainting: masked pixels solve the discrete Laplace equation
//! with boundary data from the unmasked pixels, iterated with Jacobi sweeps.
//! Good enough for a rough initial reconstruction.

use crate::error::{Error, Result};
use crate::mask::AnomalyMask;
use crate::tensor::Tensor;

const JACOBI_TOL: f64 = 1e-6;
const JACOBI_MAX_ITERS: usize = 10_000;

/// Fill the pixels under `mask` harmonically; unmasked pixels are copied
/// from `x`. An empty mask returns `x` unchanged; a mask covering the whole
/// image has no boundary data and errors.
pub fn inpaint_init(x: &Tensor, mask: &AnomalyMask) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::shape("inpaint_init", format!("expected [h,w,c], got {:?}", x.shape())));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::shape(
            "inpaint_init",
            format!("mask {}x{} vs image {h}x{w}", mask.height(), mask.width()),
        ));
    }
    if mask.is_clear() {
        return Ok(x.clone());
    }
    let holes = mask.pixels();
    if holes.len() == h * w {
        return Err(Error::invalid("inpaint_init", "mask covers the entire image; no boundary data"));
    }

    // Start holes from the mean of the unmasked pixels per channel.
    let mut cur = x.data().to_vec();
    let mut seed = vec![0.0; c];
    let mut count = 0.0;
    for i in 0..h {
        for j in 0..w {
            if !mask.get(i, j) {
                for ch in 0..c {
                    seed[ch] += x.at3(i, j, ch);
                }
                count += 1.0;
            }
        }
    }
    for v in seed.iter_mut() {
        *v /= count;
    }
    for &(i, j) in &holes {
        cur[(i * w + j) * c..(i * w + j) * c + c].copy_from_slice(&seed);
    }

    let mut next = cur.clone();
    for _ in 0..JACOBI_MAX_ITERS {
        let mut max_update = 0.0f64;
        for &(i, j) in &holes {
            let mut acc = vec![0.0; c];
            let mut nb = 0.0;
            let add = |ii: usize, jj: usize, acc: &mut [f64], nb: &mut f64| {
                let base = (ii * w + jj) * c;
                for ch in 0..c {
                    acc[ch] += cur[base + ch];
                }
                *nb += 1.0;
            };
            if i > 0 {
                add(i - 1, j, &mut acc, &mut nb);
            }
            if i + 1 < h {
                add(i + 1, j, &mut acc, &mut nb);
            }
            if j > 0 {
                add(i, j - 1, &mut acc, &mut nb);
            }
            if j + 1 < w {
                add(i, j + 1, &mut acc, &mut nb);
            }
            let base = (i * w + j) * c;
            for ch in 0..c {
                let v = acc[ch] / nb;
                max_update = max_update.max((v - cur[base + ch]).abs());
                next[base + ch] = v;
            }
        }
        for &(i, j) in &holes {
            let base = (i * w + j) * c;
            cur[base..base + c].copy_from_slice(&next[base..base + c]);
        }
        if max_update < JACOBI_TOL {
            break;
        }
    }
    Ok(Tensor::from_op("inpaint_init", vec![h, w, c], cur))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_mask_is_identity() {
        let x = Tensor::full(vec![4, 4, 3], 0.25).unwrap();
        let m = AnomalyMask::empty(4, 4);
        assert_eq!(inpaint_init(&x, &m).unwrap().data(), x.data());
    }

    #[test]
    fn constant_image_any_mask_returns_x() {
        let x = Tensor::full(vec![6, 6, 3], 0.6).unwrap();
        let m = AnomalyMask::from_fn(6, 6, |i, j| (2..4).contains(&i) && (2..4).contains(&j));
        let out = inpaint_init(&x, &m).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn single_hole_is_neighbor_average() {
        let mut x = Tensor::zeros(vec![3, 3, 1]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        let m = AnomalyMask::from_fn(3, 3, |i, j| i == 1 && j == 1);
        let out = inpaint_init(&x, &m).unwrap();
        // Neighbors of the center: 1, 3, 5, 7 -> mean 4.
        assert!((out.at3(1, 1, 0) - 4.0).abs() < 1e-6);
        // Everything else untouched.
        assert_eq!(out.at3(0, 0, 0), 0.0);
        assert_eq!(out.at3(2, 2, 0), 8.0);
    }

    #[test]
    fn full_mask_errors() {
        let x = Tensor::full(vec![3, 3, 1], 1.0).unwrap();
        let m = AnomalyMask::from_fn(3, 3, |_, _| true);
        assert!(inpaint_init(&x, &m).is_err());
    }
}
