//! End-to-end decomposition pipeline: initial mask, dilation, harmonic
//! initialization, penalized-regression solve over the active region, mask
//! extraction with morphological cleanup, and the final re-estimation solve
//! without the sparsity term.

use std::sync::Arc;
use std::time::Instant;

use crate::autodiff::Graph;
use crate::backends::{Backend, PreparedBackend};
use crate::error::{Error, Result};
use crate::extractor::Extractor;
use crate::imageio::{valid_hi, valid_lo};
use crate::inpaint::inpaint_init;
use crate::mask::{
    bilinear_upsample, dilate, extract_mask, initial_mask, morph_open, AnomalyMask, InitMaskMode,
};
use crate::optimizer::{build_sharing_kernel, solve, AdanParams, SolveOptions};
use crate::regularizers::{
    log_penalty_masked, mog_prior_energy_masked, tv_energy_masked, MogPrior,
};
use crate::tensor::Tensor;

/// All tuning parameters of the pipeline.
#[derive(Debug, Clone)]
pub struct F2PADConfig {
    /// Weight of the pixel-prior energy.
    pub alpha1: f64,
    /// Weight of the TV energy.
    pub alpha2: f64,
    /// Sparsity scale; the effective weight is `beta0 / |initial mask|`.
    pub beta0: f64,
    /// LOG penalty epsilon.
    pub eps: f64,
    /// Base step size of the adaptive per-pixel steps.
    pub gamma0: f64,
    /// Floor on `|x - n|` in the step-size rule.
    pub gamma_floor: f64,
    /// Gradient-sharing neighborhood radius.
    pub ks: usize,
    /// Spatial bandwidth of the sharing weights.
    pub sigma0: f64,
    /// Color bandwidth of the sharing weights.
    pub sigma1: f64,
    /// Component clip applied to shared directions.
    pub clip: f64,
    /// Stop threshold on the per-iteration loss decrease (Gaussian backend).
    pub stop_gaussian: f64,
    /// Stop threshold for the other backends.
    pub stop_other: f64,
    /// Iteration cap of the main solve.
    pub max_iters: usize,
    /// Iteration cap of the re-estimation solve.
    pub refine_max_iters: usize,
    /// Mask-extraction threshold on the per-pixel anomaly norm.
    pub tau_a: f64,
    /// Dilation radius applied to the initial mask.
    pub dilation_radius: usize,
    /// Morphological-open element side for the final mask.
    pub open_k: usize,
    /// Mixture components fitted for the pixel prior.
    pub mog_components: usize,
    /// Nearest-neighbor candidate-set size for the memory-bank loss.
    pub candidate_size: usize,
    /// Percentile for the deployment initial-mask mode.
    pub percentile_q: f64,
    /// TV smoothing constant.
    pub smooth_eps: f64,
}

impl Default for F2PADConfig {
    fn default() -> Self {
        F2PADConfig {
            alpha1: 0.5,
            alpha2: 1e-4,
            beta0: 300.0,
            eps: 1e-4,
            gamma0: 1.0,
            gamma_floor: 0.01,
            ks: 5,
            sigma0: 1.1,
            sigma1: 3.0,
            clip: 0.03,
            stop_gaussian: 0.1,
            stop_other: 0.05,
            max_iters: 1200,
            refine_max_iters: 1200,
            tau_a: 0.1,
            dilation_radius: 8,
            open_k: 3,
            mog_components: 3,
            candidate_size: 50,
            percentile_q: 98.0,
            smooth_eps: 1e-12,
        }
    }
}

/// Ablation and mode switches for a run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Drop the pixel prior (`alpha1 = 0`).
    pub no_prior: bool,
    /// Drop the sparsity penalty (`beta = 0` throughout).
    pub no_sparsity: bool,
    /// Stop after initialization; the mask comes from thresholding `x - n0`.
    pub init_only: bool,
    /// Disable gradient sharing (`ks = 0`).
    pub no_sharing: bool,
    /// Initial-mask binarization; `None` uses percentile mode with the
    /// config's q.
    pub init_mode: Option<InitMaskMode>,
}

/// Pixels allowed to move plus the score cells their receptive fields touch.
pub struct ActiveRegion {
    /// The optimizable pixel set (the dilated initial mask).
    pub pixels: AnomalyMask,
    /// Boolean grid over the backend's score cells.
    pub affected: Vec<bool>,
    pub grid: (usize, usize),
}

/// Score cells whose receptive fields intersect the active pixel set.
pub fn active_region(pixels: &AnomalyMask, extractor: &Extractor) -> Result<ActiveRegion> {
    let affected = extractor.affected_concat_cells(pixels)?;
    let grid = extractor.tap_grid(pixels.height(), pixels.width(), 0)?;
    Ok(ActiveRegion { pixels: pixels.clone(), affected, grid })
}

impl ActiveRegion {
    fn score_mask_tensor(&self) -> Tensor {
        let data = self.affected.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::from_op("score_mask", vec![self.grid.0, self.grid.1], data)
    }

    fn affected_count(&self) -> usize {
        self.affected.iter().filter(|&&b| b).count()
    }
}

/// Loss component values of one objective evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct ObjectiveParts {
    pub feature: f64,
    pub prior: f64,
    pub tv: f64,
    pub sparsity: f64,
}

/// The assembled objective `F(n) = l_n(n) + a1*prior + a2*tv +
/// beta*sparsity(x - n)` restricted to an active region.
pub struct PixelObjective<'a> {
    extractor: &'a Extractor,
    backend: PreparedBackend<'a>,
    prior: Option<&'a MogPrior>,
    x: &'a Tensor,
    score_mask: Option<Arc<Tensor>>,
    active_list: Option<Vec<(usize, usize)>>,
    active_bits: Option<Vec<bool>>,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    pub eps: f64,
    pub smooth_eps: f64,
    pub last_parts: ObjectiveParts,
}

/// Build the objective closure state for an image. `region = None` treats
/// every pixel as active and every score cell as affected.
pub fn f2pad_objective<'a>(
    extractor: &'a Extractor,
    backend: PreparedBackend<'a>,
    prior: Option<&'a MogPrior>,
    x: &'a Tensor,
    region: Option<&ActiveRegion>,
    alpha1: f64,
    alpha2: f64,
    beta: f64,
    cfg: &F2PADConfig,
) -> PixelObjective<'a> {
    PixelObjective {
        extractor,
        backend,
        prior,
        x,
        score_mask: region.map(|r| Arc::new(r.score_mask_tensor())),
        active_list: region.map(|r| r.pixels.pixels()),
        active_bits: region.map(|r| r.pixels.as_slice().to_vec()),
        alpha1,
        alpha2,
        beta,
        eps: cfg.eps,
        smooth_eps: cfg.smooth_eps,
        last_parts: ObjectiveParts::default(),
    }
}

impl PixelObjective<'_> {
    /// Scalar loss and its pixel gradient at `n`; gradients outside the
    /// active pixel set are forced to zero.
    pub fn eval(&mut self, n: &Tensor) -> Result<(f64, Tensor)> {
        let mut graph = Graph::new();
        let leaf = graph.leaf(n.clone(), true);
        let stack = self.extractor.extract_graph(&mut graph, leaf)?;
        let loss_node = self.backend.loss_node(&mut graph, &stack, self.score_mask.clone())?;
        let feature = graph.value(loss_node).item();
        let grads = graph.backward(loss_node)?;
        let mut grad = grads.wrt_or_zeros(leaf, n.shape());

        let mut parts = ObjectiveParts { feature, ..Default::default() };
        let mut total = feature;

        if self.alpha1 != 0.0 {
            let prior = self.prior.ok_or_else(|| {
                Error::invalid("f2pad_objective", "pixel prior requested but none was fitted")
            })?;
            let (e, g) = match &self.active_list {
                Some(list) => mog_prior_energy_masked(prior, n, list)?,
                None => crate::regularizers::mog_prior_energy(prior, n)?,
            };
            parts.prior = e;
            total += self.alpha1 * e;
            axpy(&mut grad, self.alpha1, &g);
        }

        if self.alpha2 != 0.0 {
            let (e, g) = match &self.active_bits {
                Some(bits) => tv_energy_masked(n, self.smooth_eps, bits)?,
                None => crate::regularizers::tv_energy(n, self.smooth_eps)?,
            };
            parts.tv = e;
            total += self.alpha2 * e;
            axpy(&mut grad, self.alpha2, &g);
        }

        if self.beta != 0.0 {
            let a = Tensor::from_op(
                "anomalous-part",
                n.shape().to_vec(),
                self.x.data().iter().zip(n.data()).map(|(&xv, &nv)| xv - nv).collect(),
            );
            let (e, g) = match &self.active_list {
                Some(list) => log_penalty_masked(&a, self.eps, list)?,
                None => crate::regularizers::log_penalty(&a, self.eps)?,
            };
            parts.sparsity = e;
            total += self.beta * e;
            // d/dn l_a(x - n) = -grad_a.
            axpy(&mut grad, -self.beta, &g);
        }

        if let Some(bits) = &self.active_bits {
            let c = n.shape()[2];
            let gd = grad.data_mut();
            for (p, &on) in bits.iter().enumerate() {
                if !on {
                    gd[p * c..(p + 1) * c].fill(0.0);
                }
            }
        }

        self.last_parts = parts;
        Ok((total, grad))
    }
}

fn axpy(acc: &mut Tensor, scale: f64, add: &Tensor) {
    debug_assert_eq!(acc.shape(), add.shape());
    for (a, &b) in acc.data_mut().iter_mut().zip(add.data()) {
        *a += scale * b;
    }
}

/// Timings and trajectories of one pipeline run.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub loss_history: Vec<f64>,
    pub refine_loss_history: Vec<f64>,
    pub beta: f64,
    pub active_pixels: usize,
    pub affected_cells: usize,
    pub solve_iterations: usize,
    pub stage_seconds: Vec<(&'static str, f64)>,
    pub warned_empty_initial_mask: bool,
}

/// Everything a run produces.
pub struct RunResult {
    /// Final anomaly mask.
    pub mask: AnomalyMask,
    /// Re-estimated non-defective image.
    pub n_star: Tensor,
    /// Anomalous part `x - n_star`.
    pub a_star: Tensor,
    /// Initial mask from the backend scores.
    pub initial_mask: AnomalyMask,
    /// Backend scores lifted to the pixel grid.
    pub pixel_scores: Tensor,
    /// Initial estimate from inpainting.
    pub n0: Tensor,
    /// Solution of the main solve, before re-estimation.
    pub n_solve: Tensor,
    pub diagnostics: Diagnostics,
}

fn solve_options(cfg: &F2PADConfig, stop: f64, max_iters: usize, no_sharing: bool) -> SolveOptions {
    let _ = no_sharing;
    SolveOptions {
        stop_decrease: stop,
        max_iters,
        clip: cfg.clip,
        gamma0: cfg.gamma0,
        gamma_floor: cfg.gamma_floor,
        lo: valid_lo().to_vec(),
        hi: valid_hi().to_vec(),
        adan: AdanParams::default(),
    }
}

/// Run the full pipeline on a normalized image. `gt` is only consulted by
/// the max-F1 initial-mask mode.
pub fn run(
    x: &Tensor,
    extractor: &Extractor,
    backend: &Backend,
    prior: Option<&MogPrior>,
    cfg: &F2PADConfig,
    opts: &RunOptions,
    gt: Option<&AnomalyMask>,
) -> Result<RunResult> {
    let mut diag = Diagnostics::default();
    let (h, w) = (x.shape()[0], x.shape()[1]);

    // Initial scores and mask.
    let t0 = Instant::now();
    let stack_x = extractor.extract(x).map_err(|e| e.in_stage("initial-scores"))?;
    let scores = backend.score_map(&stack_x).map_err(|e| e.in_stage("initial-scores"))?;
    let pixel_scores = bilinear_upsample(&scores, h, w).map_err(|e| e.in_stage("initial-scores"))?;
    let mode = opts.init_mode.unwrap_or(InitMaskMode::Percentile(cfg.percentile_q));
    let (m0, empty) =
        initial_mask(&pixel_scores, mode, gt).map_err(|e| e.in_stage("initial-mask"))?;
    diag.stage_seconds.push(("initial-mask", t0.elapsed().as_secs_f64()));

    if empty {
        log::warn!("initial mask is empty; returning the all-normal decomposition");
        diag.warned_empty_initial_mask = true;
        return Ok(RunResult {
            mask: AnomalyMask::empty(h, w),
            n_star: x.clone(),
            a_star: Tensor::zeros(x.shape().to_vec()),
            initial_mask: m0,
            pixel_scores,
            n0: x.clone(),
            n_solve: x.clone(),
            diagnostics: diag,
        });
    }

    // Initialization: dilate for the active region, inpaint under m0.
    let t0 = Instant::now();
    let dilated = dilate(&m0, cfg.dilation_radius);
    let n0 = inpaint_init(x, &m0).map_err(|e| e.in_stage("initialization"))?;
    diag.stage_seconds.push(("initialization", t0.elapsed().as_secs_f64()));

    if opts.init_only {
        let a0 = sub(x, &n0);
        let mask = morph_open(&extract_mask(&a0, cfg.tau_a)?, cfg.open_k)
            .map_err(|e| e.in_stage("mask-extraction"))?;
        return Ok(RunResult {
            mask,
            n_star: n0.clone(),
            a_star: a0,
            initial_mask: m0,
            pixel_scores,
            n0: n0.clone(),
            n_solve: n0,
            diagnostics: diag,
        });
    }

    // Acceleration state: candidate sets (memory-bank backend), active
    // region, sharing kernel.
    let t0 = Instant::now();
    let stack0 = extractor.extract(&n0).map_err(|e| e.in_stage("preparation"))?;
    let prepared =
        backend.prepare(&stack0, cfg.candidate_size).map_err(|e| e.in_stage("preparation"))?;
    let region = active_region(&dilated, extractor).map_err(|e| e.in_stage("preparation"))?;
    let ks = if opts.no_sharing { 0 } else { cfg.ks };
    let kernel = build_sharing_kernel(x, ks, cfg.sigma0, cfg.sigma1)
        .map_err(|e| e.in_stage("preparation"))?;
    diag.active_pixels = region.pixels.count();
    diag.affected_cells = region.affected_count();
    diag.stage_seconds.push(("preparation", t0.elapsed().as_secs_f64()));

    // Main solve of the penalized regression.
    let t0 = Instant::now();
    let beta = if opts.no_sparsity { 0.0 } else { cfg.beta0 / m0.count() as f64 };
    let alpha1 = if opts.no_prior { 0.0 } else { cfg.alpha1 };
    diag.beta = beta;
    let stop = match backend {
        Backend::Gaussian(_) => cfg.stop_gaussian,
        _ => cfg.stop_other,
    };
    let mut objective =
        f2pad_objective(extractor, prepared, prior, x, Some(&region), alpha1, cfg.alpha2, beta, cfg);
    let active_px = region.pixels.pixels();
    let sopts = solve_options(cfg, stop, cfg.max_iters, opts.no_sharing);
    let result = solve(
        &mut |n| objective.eval(n),
        n0.clone(),
        x,
        &kernel,
        Some(&active_px),
        &sopts,
    )
    .map_err(|e| e.in_stage("solve"))?;
    diag.loss_history = result.loss_history.clone();
    diag.solve_iterations = result.iterations;
    diag.stage_seconds.push(("solve", t0.elapsed().as_secs_f64()));

    // Mask extraction with cleanup.
    let t0 = Instant::now();
    let a1 = sub(x, &result.n);
    let mask = morph_open(&extract_mask(&a1, cfg.tau_a)?, cfg.open_k)
        .map_err(|e| e.in_stage("mask-extraction"))?;
    diag.stage_seconds.push(("mask-extraction", t0.elapsed().as_secs_f64()));

    // Re-estimation: solve again with beta = 0 inside the final mask only;
    // outside the mask the recovered image is the input itself.
    let t0 = Instant::now();
    let n_star = if mask.is_clear() {
        x.clone()
    } else {
        let mut n_init = x.clone();
        {
            let nd = n_init.data_mut();
            for (i, j) in mask.pixels() {
                let base = (i * w + j) * 3;
                for c in 0..3 {
                    nd[base + c] = result.n.data()[base + c];
                }
            }
        }
        let stack_r = extractor.extract(&n_init).map_err(|e| e.in_stage("re-estimation"))?;
        let prepared_r =
            backend.prepare(&stack_r, cfg.candidate_size).map_err(|e| e.in_stage("re-estimation"))?;
        let region_r = active_region(&mask, extractor).map_err(|e| e.in_stage("re-estimation"))?;
        let mut objective_r = f2pad_objective(
            extractor, prepared_r, prior, x, Some(&region_r), alpha1, cfg.alpha2, 0.0, cfg,
        );
        let active_r = mask.pixels();
        let sopts_r = solve_options(cfg, stop, cfg.refine_max_iters, opts.no_sharing);
        let refined = solve(
            &mut |n| objective_r.eval(n),
            n_init,
            x,
            &kernel,
            Some(&active_r),
            &sopts_r,
        )
        .map_err(|e| e.in_stage("re-estimation"))?;
        diag.refine_loss_history = refined.loss_history.clone();
        refined.n
    };
    diag.stage_seconds.push(("re-estimation", t0.elapsed().as_secs_f64()));

    let a_star = sub(x, &n_star);
    Ok(RunResult {
        mask,
        n_star,
        a_star,
        initial_mask: m0,
        pixel_scores,
        n0,
        n_solve: result.n,
        diagnostics: diag,
    })
}

fn sub(x: &Tensor, n: &Tensor) -> Tensor {
    Tensor::from_op(
        "sub",
        x.shape().to_vec(),
        x.data().iter().zip(n.data()).map(|(&a, &b)| a - b).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let cfg = F2PADConfig::default();
        assert_eq!(cfg.alpha2, 1e-4);
        assert_eq!(cfg.eps, 1e-4);
        assert_eq!(cfg.gamma0, 1.0);
        assert_eq!(cfg.ks, 5);
        assert_eq!(cfg.sigma0, 1.1);
        assert_eq!(cfg.sigma1, 3.0);
        assert_eq!(cfg.clip, 0.03);
        assert_eq!(cfg.max_iters, 1200);
        assert_eq!(cfg.candidate_size, 50);
        assert_eq!(cfg.stop_gaussian, 0.1);
        assert_eq!(cfg.stop_other, 0.05);
        assert_eq!(cfg.open_k, 3);
        assert_eq!(cfg.gamma_floor, 0.01);
    }

    #[test]
    fn beta_is_beta0_over_initial_mask_area() {
        // With sum(m0) = 100 and beta0 = 50, beta = 0.5. Exercised through
        // the same arithmetic the pipeline uses.
        let beta0: f64 = 50.0;
        let count = 100usize;
        assert_eq!(beta0 / count as f64, 0.5);
    }
}
