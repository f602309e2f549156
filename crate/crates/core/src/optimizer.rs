//! Pixel-field solver: bilateral gradient sharing, adaptive per-pixel step
//! sizes, and Adan-style adaptive Nesterov momentum updates.
//!
//! Early-stopped pixels borrow descent directions from similar neighbors
//! (weights fixed from the input image), the step of each pixel scales
//! inversely with its current anomalous magnitude, and the resulting
//! directions drive Adan recurrences with the reference momenta.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel normalized weight stencil over offsets in `[-ks, ks]^2`,
/// computed once from the input image and frozen.
#[derive(Debug, Clone)]
pub struct SharingKernel {
    h: usize,
    w: usize,
    ks: usize,
    weights: Vec<f64>,
}

impl SharingKernel {
    pub fn ks(&self) -> usize {
        self.ks
    }

    /// Weight of offset (di, dj) for pixel (i, j).
    pub fn weight(&self, i: usize, j: usize, di: isize, dj: isize) -> f64 {
        let side = 2 * self.ks + 1;
        let oi = (di + self.ks as isize) as usize;
        let oj = (dj + self.ks as isize) as usize;
        self.weights[((i * self.w + j) * side + oi) * side + oj]
    }
}

/// Build the stencil: spatial Gaussian times color-affinity Gaussian on the
/// input image, zero outside the image, normalized to sum 1 per pixel.
pub fn build_sharing_kernel(x: &Tensor, ks: usize, sigma0: f64, sigma1: f64) -> Result<SharingKernel> {
    if x.rank() != 3 {
        return Err(Error::shape("build_sharing_kernel", format!("expected [h,w,c], got {:?}", x.shape())));
    }
    if sigma0 <= 0.0 || sigma1 <= 0.0 {
        return Err(Error::invalid("build_sharing_kernel", "sigma0 and sigma1 must be > 0"));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let side = 2 * ks + 1;
    // Spatial term only depends on the offset.
    let mut spatial = vec![0.0; side * side];
    for di in -(ks as isize)..=ks as isize {
        for dj in -(ks as isize)..=ks as isize {
            let o = ((di + ks as isize) as usize) * side + (dj + ks as isize) as usize;
            spatial[o] = (-((di * di + dj * dj) as f64) / sigma0).exp();
        }
    }
    let mut weights = vec![0.0; h * w * side * side];
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * side * side;
            let ctr = &x.data()[(i * w + j) * c..(i * w + j) * c + c];
            let mut total = 0.0;
            for di in -(ks as isize)..=ks as isize {
                let ii = i as isize + di;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in -(ks as isize)..=ks as isize {
                    let jj = j as isize + dj;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let nb = &x.data()[((ii as usize) * w + jj as usize) * c..][..c];
                    let mut col = 0.0;
                    for k in 0..c {
                        let d = nb[k] - ctr[k];
                        col += d * d;
                    }
                    let o = ((di + ks as isize) as usize) * side + (dj + ks as isize) as usize;
                    let wgt = spatial[o] * (-col / sigma1).exp();
                    weights[base + o] = wgt;
                    total += wgt;
                }
            }
            for o in 0..side * side {
                weights[base + o] /= total;
            }
        }
    }
    Ok(SharingKernel { h, w, ks, weights })
}

/// Shared descent directions: each pixel's gradient is replaced by the
/// stencil-weighted average of its neighborhood's gradients, then every
/// component is clipped to `[-clip, clip]`.
pub fn share_gradients(kernel: &SharingKernel, grad: &Tensor, clip: f64) -> Result<Tensor> {
    share_gradients_at(kernel, grad, clip, None)
}

/// [`share_gradients`] computed only at the listed pixels; everything else
/// stays zero. The solver uses this to skip frozen pixels.
pub fn share_gradients_at(
    kernel: &SharingKernel,
    grad: &Tensor,
    clip: f64,
    pixels: Option<&[(usize, usize)]>,
) -> Result<Tensor> {
    let (h, w, c) = (grad.shape()[0], grad.shape()[1], grad.shape()[2]);
    if (h, w) != (kernel.h, kernel.w) {
        return Err(Error::shape(
            "share_gradients",
            format!("gradient {h}x{w} vs kernel {}x{}", kernel.h, kernel.w),
        ));
    }
    let ks = kernel.ks as isize;
    let side = 2 * kernel.ks + 1;
    let mut out = vec![0.0; h * w * c];
    let share_one = |i: usize, j: usize, out: &mut [f64]| {
        let base = (i * w + j) * side * side;
        let dst = &mut out[(i * w + j) * c..(i * w + j) * c + c];
        for di in -ks..=ks {
            let ii = i as isize + di;
            if ii < 0 || ii >= h as isize {
                continue;
            }
            let wrow = &kernel.weights[base + ((di + ks) as usize) * side..][..side];
            for (o, &wgt) in wrow.iter().enumerate() {
                if wgt == 0.0 {
                    continue;
                }
                let jj = j as isize + o as isize - ks;
                debug_assert!(jj >= 0 && jj < w as isize);
                let src = &grad.data()[((ii as usize) * w + jj as usize) * c..][..c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wgt * s;
                }
            }
        }
        for v in dst.iter_mut() {
            *v = v.clamp(-clip, clip);
        }
    };
    match pixels {
        Some(list) => {
            for &(i, j) in list {
                share_one(i, j, &mut out);
            }
        }
        None => {
            for i in 0..h {
                for j in 0..w {
                    share_one(i, j, &mut out);
                }
            }
        }
    }
    Ok(Tensor::from_op("share_gradients", vec![h, w, c], out))
}

/// Per-pixel-per-channel step sizes `gamma0 / max(|x - n|, floor)`,
/// recomputed every iteration.
pub fn adaptive_steps(x: &Tensor, n: &Tensor, gamma0: f64, floor: f64) -> Result<Tensor> {
    if x.shape() != n.shape() {
        return Err(Error::shape(
            "adaptive_steps",
            format!("{:?} vs {:?}", x.shape(), n.shape()),
        ));
    }
    if gamma0 <= 0.0 || floor <= 0.0 {
        return Err(Error::invalid("adaptive_steps", "gamma0 and floor must be > 0"));
    }
    let data = x
        .data()
        .iter()
        .zip(n.data())
        .map(|(&xv, &nv)| gamma0 / (xv - nv).abs().max(floor))
        .collect();
    Ok(Tensor::from_op("adaptive_steps", x.shape().to_vec(), data))
}

/// Adan momenta; reference recommended values.
#[derive(Debug, Clone, Copy)]
pub struct AdanParams {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub eps: f64,
}

impl Default for AdanParams {
    fn default() -> Self {
        AdanParams { beta1: 0.98, beta2: 0.92, beta3: 0.99, eps: 1e-8 }
    }
}

/// Solver state: the iterate plus Adan moment buffers and the previous
/// shared gradient (zero field before the first step).
#[derive(Debug, Clone)]
pub struct SolverState {
    pub n: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    n2: Vec<f64>,
    g_prev: Vec<f64>,
    step: u64,
    pub loss_history: Vec<f64>,
}

impl SolverState {
    pub fn new(n0: Tensor) -> Self {
        let len = n0.numel();
        SolverState {
            n: n0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            n2: vec![0.0; len],
            g_prev: vec![0.0; len],
            step: 0,
            loss_history: Vec::new(),
        }
    }

    pub fn iterations(&self) -> u64 {
        self.step
    }
}

/// One Adan update `n <- n - gamma .* (m_hat + beta2 * v_hat) /
/// (sqrt(n2_hat) + eps)` with bias-corrected exponential moving averages of
/// the gradient, the gradient difference, and the squared Nesterov-corrected
/// gradient. `active` restricts updates to the listed flat pixel indices
/// (all elements when `None`).
pub fn adan_step(
    state: &mut SolverState,
    g: &Tensor,
    gamma: &Tensor,
    params: &AdanParams,
    active: Option<&[usize]>,
) -> Result<()> {
    if g.shape() != state.n.shape() || gamma.shape() != state.n.shape() {
        return Err(Error::shape("adan_step", "direction/step shapes differ from iterate"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - params.beta1.powi(t);
    let bc2 = 1.0 - params.beta2.powi(t);
    let bc3 = 1.0 - params.beta3.powi(t);
    let gd = g.data();
    let sd = gamma.data();
    let nd = state.n.data_mut();

    let mut apply = |e: usize| -> Result<()> {
        let gv = gd[e];
        let diff = gv - state.g_prev[e];
        state.m[e] = params.beta1 * state.m[e] + (1.0 - params.beta1) * gv;
        state.v[e] = params.beta2 * state.v[e] + (1.0 - params.beta2) * diff;
        let u = gv + params.beta2 * diff;
        state.n2[e] = params.beta3 * state.n2[e] + (1.0 - params.beta3) * u * u;
        let denom = (state.n2[e] / bc3).sqrt() + params.eps;
        let dir = (state.m[e] / bc1 + params.beta2 * state.v[e] / bc2) / denom;
        let upd = sd[e] * dir;
        if !upd.is_finite() {
            return Err(Error::numerical(
                "adan_step",
                format!("non-finite update at flat index {e} (step {t})"),
            ));
        }
        nd[e] -= upd;
        state.g_prev[e] = gv;
        Ok(())
    };

    match active {
        Some(list) => {
            for &e in list {
                apply(e)?;
            }
        }
        None => {
            for e in 0..gd.len() {
                apply(e)?;
            }
        }
    }
    Ok(())
}

/// Everything `solve` needs besides the objective itself.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Stop once the loss decrease between subsequent iterations drops
    /// below this.
    pub stop_decrease: f64,
    pub max_iters: usize,
    pub clip: f64,
    pub gamma0: f64,
    pub gamma_floor: f64,
    /// Per-channel valid range the iterate is projected into after each step.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub adan: AdanParams,
}

/// Result of a solve: final iterate and the loss trajectory (first entry is
/// the loss at the initial iterate).
#[derive(Debug)]
pub struct SolveResult {
    pub n: Tensor,
    pub loss_history: Vec<f64>,
    pub iterations: usize,
}

/// Iterate share -> adaptive steps -> Adan update -> projection until the
/// loss stalls or the iteration cap is hit. `active` lists the pixels
/// allowed to move; pixels outside it are never touched. The objective must
/// return the scalar loss and the full pixel-gradient field (already zeroed
/// outside the active region).
pub fn solve(
    objective: &mut dyn FnMut(&Tensor) -> Result<(f64, Tensor)>,
    n0: Tensor,
    x: &Tensor,
    kernel: &SharingKernel,
    active: Option<&[(usize, usize)]>,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    let channels = *x.shape().last().unwrap();
    let w = x.shape()[1];
    if opts.lo.len() != channels || opts.hi.len() != channels {
        return Err(Error::invalid("solve", "projection bounds must have one entry per channel"));
    }
    let active_flat: Option<Vec<usize>> = active.map(|list| {
        let mut flat = Vec::with_capacity(list.len() * channels);
        for &(i, j) in list {
            for ch in 0..channels {
                flat.push((i * w + j) * channels + ch);
            }
        }
        flat
    });
    let active_flat = active_flat.as_deref();

    let mut state = SolverState::new(n0);
    let (mut loss, mut grad) =
        objective(&state.n).map_err(|e| Error::Objective { iteration: 0, source: Box::new(e) })?;
    state.loss_history.push(loss);

    let mut iterations = 0;
    for iter in 1..=opts.max_iters {
        let g = share_gradients_at(kernel, &grad, opts.clip, active)?;
        let gamma = adaptive_steps(x, &state.n, opts.gamma0, opts.gamma_floor)?;
        adan_step(&mut state, &g, &gamma, &opts.adan, active_flat)?;

        // Project pixel values back into the valid normalized range.
        match active_flat {
            Some(list) => {
                let nd = state.n.data_mut();
                for &e in list {
                    let ch = e % channels;
                    nd[e] = nd[e].clamp(opts.lo[ch], opts.hi[ch]);
                }
            }
            None => {
                let nd = state.n.data_mut();
                for (e, v) in nd.iter_mut().enumerate() {
                    let ch = e % channels;
                    *v = v.clamp(opts.lo[ch], opts.hi[ch]);
                }
            }
        }

        let (new_loss, new_grad) = objective(&state.n)
            .map_err(|e| Error::Objective { iteration: iter, source: Box::new(e) })?;
        state.loss_history.push(new_loss);
        iterations = iter;
        let decrease = loss - new_loss;
        loss = new_loss;
        grad = new_grad;
        if decrease < opts.stop_decrease {
            break;
        }
    }

    Ok(SolveResult { n: state.n, loss_history: state.loss_history, iterations })
}
