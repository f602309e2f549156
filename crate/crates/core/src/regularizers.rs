//! The three penalty terms of the pixel-space objective: a nonconvex LOG
//! sparsity penalty on the anomalous part, a mixture-of-Gaussians pixel
//! prior on the recovered image, and total-variation smoothness. All three
//! come with analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Sum with a Neumaier compensation term; the EM monotonicity check needs
/// log-likelihoods stable to ~1e-12 over 1e5-term sums.
pub(crate) fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

// ---------------------------------------------------------------------------
// LOG sparsity penalty
// ---------------------------------------------------------------------------

/// `sum_{i,j} log(sqrt(||a_ij||^2 + eps) + ||a_ij||)` over the pixel grid,
/// with its gradient w.r.t. `a`. The gradient at the origin is zero by
/// symmetry; elsewhere it is finite because `eps > 0`.
pub fn log_penalty(a: &Tensor, eps: f64) -> Result<(f64, Tensor)> {
    if a.rank() != 3 {
        return Err(Error::shape("log_penalty", format!("expected [h,w,c], got {:?}", a.shape())));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("log_penalty", format!("eps {eps} must be > 0")));
    }
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut grad = vec![0.0; h * w * c];
    let mut total = 0.0;
    for loc in 0..h * w {
        let px = &a.data()[loc * c..loc * c + c];
        let nsq: f64 = px.iter().map(|&v| v * v).sum();
        let norm = nsq.sqrt();
        let root = (nsq + eps).sqrt();
        total += (root + norm).ln();
        if norm > 0.0 {
            let coeff = (1.0 / root + 1.0 / norm) / (root + norm);
            for (k, &v) in px.iter().enumerate() {
                grad[loc * c + k] = coeff * v;
            }
        }
    }
    Ok((total, Tensor::from_op("log_penalty-grad", vec![h, w, c], grad)))
}

/// Same penalty restricted to the listed pixels (odd pixels contribute a
/// constant and are skipped entirely).
pub fn log_penalty_masked(
    a: &Tensor,
    eps: f64,
    pixels: &[(usize, usize)],
) -> Result<(f64, Tensor)> {
    if a.rank() != 3 {
        return Err(Error::shape("log_penalty", format!("expected [h,w,c], got {:?}", a.shape())));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("log_penalty", format!("eps {eps} must be > 0")));
    }
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut grad = vec![0.0; h * w * c];
    let mut total = 0.0;
    for &(i, j) in pixels {
        let loc = i * w + j;
        let px = &a.data()[loc * c..loc * c + c];
        let nsq: f64 = px.iter().map(|&v| v * v).sum();
        let norm = nsq.sqrt();
        let root = (nsq + eps).sqrt();
        total += (root + norm).ln();
        if norm > 0.0 {
            let coeff = (1.0 / root + 1.0 / norm) / (root + norm);
            for (k, &v) in px.iter().enumerate() {
                grad[loc * c + k] = coeff * v;
            }
        }
    }
    Ok((total, Tensor::from_op("log_penalty-grad", vec![h, w, c], grad)))
}

// ---------------------------------------------------------------------------
// Mixture-of-Gaussians pixel prior
// ---------------------------------------------------------------------------

/// Fitted RGB mixture: weights, means, covariances, plus cached factors
/// `U_q` with `U_q U_q^T = covariance_q^-1` for the energy evaluation.
#[derive(Debug, Clone)]
pub struct MogPrior {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 3]>,
    pub covs: Vec<[f64; 9]>,
    prec_factors: Vec<[f64; 9]>,
}

const COV_FLOOR: f64 = 1e-6;

fn floored_factor(cov: &[f64; 9]) -> Result<[f64; 9]> {
    // Clip eigenvalues at the floor only when needed, keeping plain EM exact
    // on healthy data.
    let mut c = *cov;
    let needs_floor = linalg::cholesky(&c, 3)
        .map(|g| (0..3).any(|i| g[i * 3 + i] * g[i * 3 + i] < COV_FLOOR))
        .unwrap_or(true);
    if needs_floor {
        let (w, v) = linalg::sym_eigen(&c, 3);
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += v[i * 3 + k] * w[k].max(COV_FLOOR) * v[j * 3 + k];
                }
                c[i * 3 + j] = s;
            }
        }
    }
    let g = linalg::cholesky(&c, 3)
        .map_err(|e| Error::numerical("fit_mog", format!("covariance not PD after floor: {e}")))?;
    let u = linalg::inverse_factor(&g, 3);
    let mut out = [0.0; 9];
    out.copy_from_slice(&u);
    Ok(out)
}

impl MogPrior {
    pub fn from_parts(weights: Vec<f64>, means: Vec<[f64; 3]>, covs: Vec<[f64; 9]>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::Format("inconsistent mixture component counts".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 || weights.iter().any(|&r| r <= 0.0) {
            return Err(Error::Format("mixture weights must be positive and sum to 1".into()));
        }
        let prec_factors = covs.iter().map(floored_factor).collect::<Result<Vec<_>>>()?;
        Ok(MogPrior { weights, means, covs, prec_factors })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

}

#[inline]
fn quad_form(u: &[f64; 9], d: &[f64; 3]) -> f64 {
    // ||U^T d||^2 with U row-major 3x3.
    let y0 = u[0] * d[0] + u[3] * d[1] + u[6] * d[2];
    let y1 = u[1] * d[0] + u[4] * d[1] + u[7] * d[2];
    let y2 = u[2] * d[0] + u[5] * d[1] + u[8] * d[2];
    y0 * y0 + y1 * y1 + y2 * y2
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-iteration trace of an EM fit, for the monotonicity checks.
#[derive(Debug, Clone, Default)]
pub struct EmTrace {
    pub log_likelihoods: Vec<f64>,
}

/// Fit a q-component RGB mixture by EM with k-means++ initialization.
/// Stops when the total log-likelihood gain drops below 1e-7 or after 500
/// iterations; covariances are floored at 1e-6 * I.
pub fn fit_mog(pixels: &[[f64; 3]], q: usize, seed: u64) -> Result<MogPrior> {
    fit_mog_traced(pixels, q, seed).map(|(p, _)| p)
}

/// [`fit_mog`] that also returns the log-likelihood trace.
pub fn fit_mog_traced(pixels: &[[f64; 3]], q: usize, seed: u64) -> Result<(MogPrior, EmTrace)> {
    if q == 0 {
        return Err(Error::invalid("fit_mog", "need at least one component"));
    }
    if pixels.len() < 10 * q {
        return Err(Error::invalid(
            "fit_mog",
            format!("sample size {} below 10*q = {}", pixels.len(), 10 * q),
        ));
    }
    let n = pixels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut means: Vec<[f64; 3]> = Vec::with_capacity(q);
    means.push(pixels[rng.gen_range(0..n)]);
    let mut d2: Vec<f64> = pixels.iter().map(|p| dist2_3(p, &means[0])).collect();
    while means.len() < q {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        means.push(pixels[next]);
        for (i, p) in pixels.iter().enumerate() {
            let d = dist2_3(p, means.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    // Start from uniform weights and the global covariance.
    let global_mean = {
        let mut m = [0.0; 3];
        for p in pixels {
            for k in 0..3 {
                m[k] += p[k];
            }
        }
        for v in m.iter_mut() {
            *v /= n as f64;
        }
        m
    };
    let mut global_cov = [0.0; 9];
    for p in pixels {
        let d = [p[0] - global_mean[0], p[1] - global_mean[1], p[2] - global_mean[2]];
        for i in 0..3 {
            for j in 0..3 {
                global_cov[i * 3 + j] += d[i] * d[j];
            }
        }
    }
    for v in global_cov.iter_mut() {
        *v /= n as f64;
    }

    let covs = vec![global_cov; q];
    let mut prior = MogPrior {
        weights: vec![1.0 / q as f64; q],
        means,
        prec_factors: covs.iter().map(floored_factor).collect::<Result<Vec<_>>>()?,
        covs,
    };

    let mut trace = EmTrace::default();
    let mut resp = vec![0.0; n * q];
    let mut prev_ll = f64::NEG_INFINITY;
    for _iter in 0..500 {
        // E-step: responsibilities and the data log-likelihood.
        let mut comp_log = vec![0.0; q];
        let ll = compensated_sum(pixels.iter().enumerate().map(|(i, p)| {
            for k in 0..q {
                let u = &prior.prec_factors[k];
                let mu = &prior.means[k];
                let d = [p[0] - mu[0], p[1] - mu[1], p[2] - mu[2]];
                let logdet_u = (u[0] * u[4] * u[8]).abs().ln();
                comp_log[k] = prior.weights[k].ln() - 1.5 * (2.0 * std::f64::consts::PI).ln()
                    + logdet_u
                    - 0.5 * quad_form(u, &d);
            }
            let lse = log_sum_exp(&comp_log);
            for k in 0..q {
                resp[i * q + k] = (comp_log[k] - lse).exp();
            }
            lse
        }));
        trace.log_likelihoods.push(ll);
        if (ll - prev_ll).abs() < 1e-7 && prev_ll != f64::NEG_INFINITY {
            break;
        }
        prev_ll = ll;

        // M-step.
        let mut nk = vec![0.0; q];
        for i in 0..n {
            for k in 0..q {
                nk[k] += resp[i * q + k];
            }
        }
        for k in 0..q {
            if !(nk[k] > 1e-6) {
                // Reseed a starved component from the point farthest from the
                // other component means.
                let far = pixels_farthest(pixels, &prior.means, k);
                prior.means[k] = pixels[far];
                prior.covs[k] = global_cov;
                prior.prec_factors[k] = floored_factor(&global_cov)?;
                prior.weights[k] = 1.0 / q as f64;
                nk[k] = 1.0;
                continue;
            }
            let mut mu = [0.0; 3];
            for (i, p) in pixels.iter().enumerate() {
                let r = resp[i * q + k];
                for t in 0..3 {
                    mu[t] += r * p[t];
                }
            }
            for v in mu.iter_mut() {
                *v /= nk[k];
            }
            let mut cov = [0.0; 9];
            for (i, p) in pixels.iter().enumerate() {
                let r = resp[i * q + k];
                let d = [p[0] - mu[0], p[1] - mu[1], p[2] - mu[2]];
                for a in 0..3 {
                    for b in 0..3 {
                        cov[a * 3 + b] += r * d[a] * d[b];
                    }
                }
            }
            for v in cov.iter_mut() {
                *v /= nk[k];
            }
            prior.means[k] = mu;
            prior.covs[k] = cov;
            prior.prec_factors[k] = floored_factor(&cov)?;
            prior.weights[k] = nk[k] / n as f64;
        }
        let wsum: f64 = prior.weights.iter().sum();
        for w in prior.weights.iter_mut() {
            *w /= wsum;
        }
    }
    Ok((prior, trace))
}

/// Uniformly sample pixel vectors from a set of training images (seeded),
/// for fitting the prior.
pub fn sample_training_pixels(images: &[Tensor], count: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    if images.is_empty() {
        return out;
    }
    for _ in 0..count {
        let img = &images[rng.gen_range(0..images.len())];
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let i = rng.gen_range(0..h);
        let j = rng.gen_range(0..w);
        out.push([img.at3(i, j, 0), img.at3(i, j, 1), img.at3(i, j, 2)]);
    }
    out
}

fn dist2_3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn pixels_farthest(pixels: &[[f64; 3]], means: &[[f64; 3]], skip: usize) -> usize {
    let mut best = 0;
    let mut best_d = -1.0;
    for (i, p) in pixels.iter().enumerate() {
        let d = means
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != skip)
            .map(|(_, m)| dist2_3(p, m))
            .fold(f64::INFINITY, f64::min);
        if d > best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// `sum_{i,j} min_q (n_ij - mu_q)^T cov_q^-1 (n_ij - mu_q)` with gradient.
/// The mixture weights are deliberately ignored; only the best component
/// counts, ties resolved to the lowest component index.
pub fn mog_prior_energy(prior: &MogPrior, n: &Tensor) -> Result<(f64, Tensor)> {
    mog_prior_energy_impl(prior, n, None)
}

/// [`mog_prior_energy`] restricted to the listed pixels.
pub fn mog_prior_energy_masked(
    prior: &MogPrior,
    n: &Tensor,
    pixels: &[(usize, usize)],
) -> Result<(f64, Tensor)> {
    mog_prior_energy_impl(prior, n, Some(pixels))
}

fn mog_prior_energy_impl(
    prior: &MogPrior,
    n: &Tensor,
    pixels: Option<&[(usize, usize)]>,
) -> Result<(f64, Tensor)> {
    if n.rank() != 3 || n.shape()[2] != 3 {
        return Err(Error::shape("mog_prior_energy", format!("expected [h,w,3], got {:?}", n.shape())));
    }
    let (h, w) = (n.shape()[0], n.shape()[1]);
    let mut grad = vec![0.0; h * w * 3];
    let mut total = 0.0;
    let mut eval = |loc: usize| {
        let px = &n.data()[loc * 3..loc * 3 + 3];
        let x = [px[0], px[1], px[2]];
        let mut best = f64::INFINITY;
        let mut best_k = 0;
        for k in 0..prior.components() {
            let mu = &prior.means[k];
            let d = [x[0] - mu[0], x[1] - mu[1], x[2] - mu[2]];
            let qf = quad_form(&prior.prec_factors[k], &d);
            if qf < best {
                best = qf;
                best_k = k;
            }
        }
        total += best;
        // grad = 2 * U (U^T d) for the winning component.
        let u = &prior.prec_factors[best_k];
        let mu = &prior.means[best_k];
        let d = [x[0] - mu[0], x[1] - mu[1], x[2] - mu[2]];
        let y0 = u[0] * d[0] + u[3] * d[1] + u[6] * d[2];
        let y1 = u[1] * d[0] + u[4] * d[1] + u[7] * d[2];
        let y2 = u[2] * d[0] + u[5] * d[1] + u[8] * d[2];
        grad[loc * 3] = 2.0 * (u[0] * y0 + u[1] * y1 + u[2] * y2);
        grad[loc * 3 + 1] = 2.0 * (u[3] * y0 + u[4] * y1 + u[5] * y2);
        grad[loc * 3 + 2] = 2.0 * (u[6] * y0 + u[7] * y1 + u[8] * y2);
    };
    match pixels {
        Some(list) => {
            for &(i, j) in list {
                eval(i * w + j);
            }
        }
        None => {
            for loc in 0..h * w {
                eval(loc);
            }
        }
    }
    Ok((total, Tensor::from_op("mog_prior-grad", vec![h, w, 3], grad)))
}

// ---------------------------------------------------------------------------
// Total variation
// ---------------------------------------------------------------------------

/// Isotropic TV over 4-neighbor differences: `sum ||n_{i+1,j} - n_ij|| +
/// ||n_{i,j+1} - n_ij||` with out-of-range pairs omitted. Each norm is
/// computed as `sqrt(||.||^2 + smooth_eps)` so the gradient stays finite at
/// zero differences; `smooth_eps = 0` reproduces the exact energy.
pub fn tv_energy(n: &Tensor, smooth_eps: f64) -> Result<(f64, Tensor)> {
    tv_energy_impl(n, smooth_eps, None)
}

/// [`tv_energy`] keeping only pair terms that touch a listed pixel, with
/// gradient contributions restricted to listed pixels.
pub fn tv_energy_masked(
    n: &Tensor,
    smooth_eps: f64,
    active: &[bool],
) -> Result<(f64, Tensor)> {
    tv_energy_impl(n, smooth_eps, Some(active))
}

fn tv_energy_impl(n: &Tensor, smooth_eps: f64, active: Option<&[bool]>) -> Result<(f64, Tensor)> {
    if n.rank() != 3 {
        return Err(Error::shape("tv_energy", format!("expected [h,w,c], got {:?}", n.shape())));
    }
    if smooth_eps < 0.0 {
        return Err(Error::invalid("tv_energy", "smooth_eps must be >= 0"));
    }
    let (h, w, c) = (n.shape()[0], n.shape()[1], n.shape()[2]);
    let is_active = |loc: usize| active.map_or(true, |m| m[loc]);
    let mut grad = vec![0.0; h * w * c];
    let mut total = 0.0;
    let data = n.data();
    let pair = |loc_a: usize, loc_b: usize, grad: &mut [f64], total: &mut f64| {
        let a_on = is_active(loc_a);
        let b_on = is_active(loc_b);
        if !a_on && !b_on {
            return;
        }
        let pa = &data[loc_a * c..loc_a * c + c];
        let pb = &data[loc_b * c..loc_b * c + c];
        let mut nsq = 0.0;
        for k in 0..c {
            let d = pb[k] - pa[k];
            nsq += d * d;
        }
        let root = (nsq + smooth_eps).sqrt();
        *total += root;
        if root > 0.0 {
            for k in 0..c {
                let d = (pb[k] - pa[k]) / root;
                if b_on {
                    grad[loc_b * c + k] += d;
                }
                if a_on {
                    grad[loc_a * c + k] -= d;
                }
            }
        }
    };
    for i in 0..h {
        for j in 0..w {
            let loc = i * w + j;
            if i + 1 < h {
                pair(loc, loc + w, &mut grad, &mut total);
            }
            if j + 1 < w {
                pair(loc, loc + 1, &mut grad, &mut total);
            }
        }
    }
    Ok((total, Tensor::from_op("tv-grad", vec![h, w, c], grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_penalty_at_zero_matches_closed_form() {
        let a = Tensor::zeros(vec![2, 2, 3]);
        let (v, g) = log_penalty(&a, 1e-4).unwrap();
        // Per pixel: log(sqrt(1e-4)) = log(0.01).
        let per = 0.01f64.ln();
        assert!((v - 4.0 * per).abs() < 1e-12);
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn log_penalty_unit_vector_value() {
        let mut a = Tensor::zeros(vec![1, 1, 3]);
        a.data_mut()[0] = 1.0;
        let (v, _) = log_penalty(&a, 1e-4).unwrap();
        let expected = ((1.0f64 + 1e-4).sqrt() + 1.0).ln();
        assert!((v - expected).abs() < 1e-9);
        assert!((expected - 0.693172).abs() < 1e-6);
    }

    #[test]
    fn log_penalty_monotone_and_concave_in_norm() {
        // Sample increasing norms along a fixed direction.
        let eps = 1e-4;
        let dir = [0.6, -0.8, 0.0];
        let vals: Vec<f64> = (1..40)
            .map(|s| {
                let t = s as f64 * 0.05;
                let mut a = Tensor::zeros(vec![1, 1, 3]);
                for k in 0..3 {
                    a.data_mut()[k] = dir[k] * t;
                }
                log_penalty(&a, eps).unwrap().0
            })
            .collect();
        for p in vals.windows(2) {
            assert!(p[1] > p[0], "penalty must increase with the norm");
        }
        for p in vals.windows(3) {
            assert!(p[2] - p[1] <= p[1] - p[0] + 1e-12, "increments must shrink");
        }
    }

    #[test]
    fn fit_mog_single_component_is_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pixels: Vec<[f64; 3]> = (0..5000)
            .map(|_| {
                [
                    0.5 + 0.2 * rng.gen_range(-1.0..1.0f64),
                    -0.1 + 0.1 * rng.gen_range(-1.0..1.0f64),
                    0.3 + 0.05 * rng.gen_range(-1.0..1.0f64),
                ]
            })
            .collect();
        let prior = fit_mog(&pixels, 1, 7).unwrap();
        let mut mean = [0.0; 3];
        for p in &pixels {
            for k in 0..3 {
                mean[k] += p[k];
            }
        }
        for v in mean.iter_mut() {
            *v /= pixels.len() as f64;
        }
        for k in 0..3 {
            assert!((prior.means[0][k] - mean[k]).abs() < 1e-9);
        }
        // Covariance matches the (biased) sample covariance.
        let mut cov = [0.0; 9];
        for p in &pixels {
            let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
            for a in 0..3 {
                for b in 0..3 {
                    cov[a * 3 + b] += d[a] * d[b];
                }
            }
        }
        for v in cov.iter_mut() {
            *v /= pixels.len() as f64;
        }
        for t in 0..9 {
            assert!((prior.covs[0][t] - cov[t]).abs() < 1e-9, "cov entry {t}");
        }
    }

    #[test]
    fn fit_mog_separated_clusters_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c0 = [0.2, 0.2, 0.2];
        let c1 = [0.8, 0.7, 0.9];
        let pixels: Vec<[f64; 3]> = (0..4000)
            .map(|i| {
                let c = if i % 2 == 0 { c0 } else { c1 };
                [
                    c[0] + 0.02 * rng.gen_range(-1.0..1.0f64),
                    c[1] + 0.02 * rng.gen_range(-1.0..1.0f64),
                    c[2] + 0.02 * rng.gen_range(-1.0..1.0f64),
                ]
            })
            .collect();
        let prior = fit_mog(&pixels, 2, 11).unwrap();
        // Match each fitted mean to its closest generator; both must be
        // within 2% of the generating means.
        for target in [c0, c1] {
            let best = prior
                .means
                .iter()
                .map(|m| dist2_3(m, &target).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.02, "mean off by {best}");
        }
    }

    #[test]
    fn fit_mog_loglik_non_decreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pixels: Vec<[f64; 3]> = (0..3000)
            .map(|_| {
                let pick = rng.gen_range(0..3);
                let base = [[0.1, 0.1, 0.1], [0.5, 0.6, 0.4], [0.9, 0.2, 0.7]][pick];
                [
                    base[0] + 0.03 * rng.gen_range(-1.0..1.0f64),
                    base[1] + 0.03 * rng.gen_range(-1.0..1.0f64),
                    base[2] + 0.03 * rng.gen_range(-1.0..1.0f64),
                ]
            })
            .collect();
        let (_, trace) = fit_mog_traced(&pixels, 3, 17).unwrap();
        assert!(trace.log_likelihoods.len() >= 2);
        for pair in trace.log_likelihoods.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9, "log-likelihood decreased: {pair:?}");
        }
    }

    #[test]
    fn fit_mog_rejects_small_samples() {
        let pixels = vec![[0.0, 0.0, 0.0]; 19];
        assert!(fit_mog(&pixels, 2, 0).is_err());
    }

    #[test]
    fn mog_energy_zero_at_component_mean_and_min_rule() {
        let prior = MogPrior::from_parts(
            vec![0.5, 0.5],
            vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]],
            vec![identity_cov(), identity_cov()],
        )
        .unwrap();
        let mut n = Tensor::zeros(vec![1, 2, 3]);
        for k in 0..3 {
            n.data_mut()[3 + k] = 1.0; // second pixel at the second mean
        }
        let (v, _) = mog_prior_energy(&prior, &n).unwrap();
        assert!(v.abs() < 1e-12);

        // Pixel (0.1, 0, 0): min(0.01, 2.81) = 0.01.
        let mut n = Tensor::zeros(vec![1, 1, 3]);
        n.data_mut()[0] = 0.1;
        let (v, _) = mog_prior_energy(&prior, &n).unwrap();
        assert!((v - 0.01).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn mog_energy_invariant_to_component_permutation() {
        let covs = vec![scaled_cov(0.5), scaled_cov(2.0)];
        let a = MogPrior::from_parts(
            vec![0.3, 0.7],
            vec![[0.1, 0.2, 0.3], [0.7, 0.8, 0.9]],
            covs.clone(),
        )
        .unwrap();
        let b = MogPrior::from_parts(
            vec![0.7, 0.3],
            vec![[0.7, 0.8, 0.9], [0.1, 0.2, 0.3]],
            vec![covs[1], covs[0]],
        )
        .unwrap();
        let mut n = Tensor::zeros(vec![2, 2, 3]);
        for (i, v) in n.data_mut().iter_mut().enumerate() {
            *v = (i as f64) * 0.07 - 0.3;
        }
        let (va, ga) = mog_prior_energy(&a, &n).unwrap();
        let (vb, gb) = mog_prior_energy(&b, &n).unwrap();
        assert!((va - vb).abs() < 1e-12);
        assert!(ga.max_abs_diff(&gb) < 1e-12);
    }

    #[test]
    fn tv_energy_constant_zero_and_step_value() {
        let n = Tensor::full(vec![4, 4, 3], 0.7).unwrap();
        let (v, g) = tv_energy(&n, 0.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));

        // h x 2 image with one vertical step of size c in every channel:
        // energy = h * c * sqrt(3).
        let h = 5;
        let step = 0.4;
        let mut n = Tensor::zeros(vec![h, 2, 3]);
        for i in 0..h {
            for ch in 0..3 {
                let idx = n.idx3(i, 1, ch);
                n.data_mut()[idx] = step;
            }
        }
        let (v, _) = tv_energy(&n, 0.0).unwrap();
        assert!((v - h as f64 * step * 3.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn tv_energy_shift_and_transpose_invariance() {
        let mut n = Tensor::zeros(vec![3, 4, 3]);
        for (i, v) in n.data_mut().iter_mut().enumerate() {
            *v = ((i * 13) % 7) as f64 * 0.11;
        }
        let (v0, _) = tv_energy(&n, 0.0).unwrap();
        let shifted = n.map("shift", |v| v + 0.37);
        let (v1, _) = tv_energy(&shifted, 0.0).unwrap();
        assert!((v0 - v1).abs() < 1e-12);

        // Transpose the image; row terms and column terms swap.
        let mut t = Tensor::zeros(vec![4, 3, 3]);
        for i in 0..3 {
            for j in 0..4 {
                for ch in 0..3 {
                    let idx = t.idx3(j, i, ch);
                    t.data_mut()[idx] = n.at3(i, j, ch);
                }
            }
        }
        let (v2, _) = tv_energy(&t, 0.0).unwrap();
        assert!((v0 - v2).abs() < 1e-12);
    }

    fn identity_cov() -> [f64; 9] {
        [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
    }

    fn scaled_cov(s: f64) -> [f64; 9] {
        [s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, s]
    }
}
