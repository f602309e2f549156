//! Fitted normality models and their differentiable anomaly-score losses.
//!
//! Two backends are provided: a per-location Gaussian field scored by squared
//! Mahalanobis distance, and a memory bank scored by squared distance to the
//! nearest stored feature (greedy-coreset reduced, candidate-set
//! accelerated). Both expose per-location score maps for initial-mask
//! computation and a tape node for the optimization loss. The surface is
//! uniform (fit, per-location scores, loss) so further backends can slot in;
//! a flow-density backend would go through the same three entry points.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{CustomOp, Graph, VarId};
use crate::error::{Error, Result};
use crate::extractor::{FeatureStack, FeatureStackVars};
use crate::linalg;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Gaussian field
// ---------------------------------------------------------------------------

/// Per-location Gaussian model of normal features: mean vectors plus a
/// factor `U` of each precision matrix (`U U^T = covariance^-1`), obtained
/// from the Cholesky factorization of the ridged covariance.
#[derive(Debug, Clone)]
pub struct GaussianField {
    h: usize,
    w: usize,
    c: usize,
    mean: Arc<Tensor>,
    factor: Arc<Tensor>,
}

/// Covariance regularizer used when fitting the field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    /// Fixed `ridge * I` added to every location's covariance.
    Absolute(f64),
    /// Per-location `max(scale * trace/c, floor) * I`; scale-free across
    /// feature magnitudes, floor guards degenerate constant locations.
    TraceScaled { scale: f64, floor: f64 },
}

/// Fit per-location means and ridged covariances from training stacks and
/// invert them via Cholesky.
pub fn fit_gaussian_field(stacks: &[FeatureStack], ridge: Ridge) -> Result<GaussianField> {
    if stacks.len() < 2 {
        return Err(Error::invalid(
            "fit_gaussian_field",
            format!("need at least 2 training stacks, got {}", stacks.len()),
        ));
    }
    match ridge {
        Ridge::Absolute(r) if r <= 0.0 => {
            return Err(Error::invalid("fit_gaussian_field", format!("ridge {r} must be > 0")));
        }
        Ridge::TraceScaled { scale, floor } if scale <= 0.0 || floor <= 0.0 => {
            return Err(Error::invalid("fit_gaussian_field", "ridge scale and floor must be > 0"));
        }
        _ => {}
    }
    let (h, w) = stacks[0].grid();
    let c = stacks[0].channels();
    for s in stacks {
        if s.grid() != (h, w) || s.channels() != c {
            return Err(Error::shape("fit_gaussian_field", "training stacks disagree on dims"));
        }
    }
    let n = stacks.len();
    let mut mean = vec![0.0; h * w * c];
    for s in stacks {
        for (m, &v) in mean.iter_mut().zip(s.concat.data()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }

    let mut factor = vec![0.0; h * w * c * c];
    let mut cov = vec![0.0; c * c];
    let mut d = vec![0.0; c];
    for loc in 0..h * w {
        cov.fill(0.0);
        let mu = &mean[loc * c..loc * c + c];
        for s in stacks {
            let f = &s.concat.data()[loc * c..loc * c + c];
            for i in 0..c {
                d[i] = f[i] - mu[i];
            }
            for i in 0..c {
                let di = d[i];
                let row = &mut cov[i * c..i * c + c];
                for j in 0..c {
                    row[j] += di * d[j];
                }
            }
        }
        let denom = (n - 1) as f64;
        for v in cov.iter_mut() {
            *v /= denom;
        }
        let r = match ridge {
            Ridge::Absolute(r) => r,
            Ridge::TraceScaled { scale, floor } => {
                let tr: f64 = (0..c).map(|i| cov[i * c + i]).sum();
                (scale * tr / c as f64).max(floor)
            }
        };
        for i in 0..c {
            cov[i * c + i] += r;
        }
        let g = linalg::cholesky(&cov, c).map_err(|e| {
            Error::numerical(
                "fit_gaussian_field",
                format!("covariance at location {loc} not invertible after ridge: {e}"),
            )
        })?;
        let u = linalg::inverse_factor(&g, c);
        factor[loc * c * c..(loc + 1) * c * c].copy_from_slice(&u);
    }

    Ok(GaussianField {
        h,
        w,
        c,
        mean: Arc::new(Tensor::new(vec![h, w, c], mean)?),
        factor: Arc::new(Tensor::new(vec![h, w, c, c], factor)?),
    })
}

impl GaussianField {
    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn factor(&self) -> &Tensor {
        &self.factor
    }

    pub fn from_parts(mean: Tensor, factor: Tensor) -> Result<GaussianField> {
        if mean.rank() != 3 || factor.rank() != 4 {
            return Err(Error::Format("gaussian field tensors have wrong ranks".into()));
        }
        let (h, w, c) = (mean.shape()[0], mean.shape()[1], mean.shape()[2]);
        if factor.shape() != [h, w, c, c] {
            return Err(Error::Format("gaussian field factor shape mismatch".into()));
        }
        Ok(GaussianField { h, w, c, mean: Arc::new(mean), factor: Arc::new(factor) })
    }

    fn check_stack_dims(&self, shape: &[usize]) -> Result<()> {
        if shape != [self.h, self.w, self.c] {
            return Err(Error::shape(
                "padim_loss",
                format!("stack {:?} vs fitted field [{}, {}, {}]", shape, self.h, self.w, self.c),
            ));
        }
        Ok(())
    }

    /// Per-location squared Mahalanobis distances of a feature stack.
    pub fn score_map(&self, stack: &FeatureStack) -> Result<Tensor> {
        self.check_stack_dims(stack.concat.shape())?;
        let op = PadimScoresOp { mean: self.mean.clone(), factor: self.factor.clone(), c: self.c };
        let t = op.forward(&[&stack.concat])?;
        Ok(t)
    }
}

struct PadimScoresOp {
    mean: Arc<Tensor>,
    factor: Arc<Tensor>,
    c: usize,
}

impl CustomOp for PadimScoresOp {
    fn name(&self) -> &'static str {
        "padim_scores"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let f = inputs[0];
        let (h, w) = (f.shape()[0], f.shape()[1]);
        let c = self.c;
        let mut out = vec![0.0; h * w];
        let mut d = vec![0.0; c];
        let mut u = vec![0.0; c];
        for loc in 0..h * w {
            let fv = &f.data()[loc * c..loc * c + c];
            let mu = &self.mean.data()[loc * c..loc * c + c];
            for i in 0..c {
                d[i] = fv[i] - mu[i];
            }
            let fac = &self.factor.data()[loc * c * c..(loc + 1) * c * c];
            linalg::matvec_transpose(fac, c, &d, &mut u);
            out[loc] = u.iter().map(|&v| v * v).sum();
        }
        Ok(Tensor::from_op("padim_scores", vec![h, w], out))
    }

    fn vjp(&self, gout: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Tensor>> {
        let f = inputs[0];
        let (h, w) = (f.shape()[0], f.shape()[1]);
        let c = self.c;
        let mut gin = vec![0.0; h * w * c];
        let mut d = vec![0.0; c];
        let mut u = vec![0.0; c];
        let mut v = vec![0.0; c];
        for loc in 0..h * w {
            let g = gout.data()[loc];
            if g == 0.0 {
                continue;
            }
            let fv = &f.data()[loc * c..loc * c + c];
            let mu = &self.mean.data()[loc * c..loc * c + c];
            for i in 0..c {
                d[i] = fv[i] - mu[i];
            }
            let fac = &self.factor.data()[loc * c * c..(loc + 1) * c * c];
            linalg::matvec_transpose(fac, c, &d, &mut u);
            linalg::matvec(fac, c, &u, &mut v);
            let dst = &mut gin[loc * c..loc * c + c];
            for i in 0..c {
                dst[i] = 2.0 * g * v[i];
            }
        }
        vec![Some(Tensor::from_op("padim_scores-vjp", vec![h, w, c], gin))]
    }
}

// ---------------------------------------------------------------------------
// Memory bank
// ---------------------------------------------------------------------------

/// Flat store of normal feature vectors.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    n: usize,
    c: usize,
    data: Vec<f64>,
}

impl MemoryBank {
    /// Collect every per-location vector of the training stacks.
    pub fn from_stacks(stacks: &[FeatureStack]) -> Result<MemoryBank> {
        if stacks.is_empty() {
            return Err(Error::invalid("MemoryBank::from_stacks", "no training stacks"));
        }
        let c = stacks[0].channels();
        let mut data = Vec::new();
        for s in stacks {
            if s.channels() != c {
                return Err(Error::shape("MemoryBank::from_stacks", "stacks disagree on channels"));
            }
            data.extend_from_slice(s.concat.data());
        }
        let n = data.len() / c;
        Ok(MemoryBank { n, c, data })
    }

    pub fn from_matrix(features: Tensor) -> Result<MemoryBank> {
        if features.rank() != 2 {
            return Err(Error::shape("MemoryBank::from_matrix", "expected [n,c]"));
        }
        let (n, c) = (features.shape()[0], features.shape()[1]);
        Ok(MemoryBank { n, c, data: features.data().to_vec() })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.c..(i + 1) * self.c]
    }

    pub fn as_matrix(&self) -> Result<Tensor> {
        Tensor::new(vec![self.n, self.c], self.data.clone())
    }
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Greedy farthest-point selection starting from a seeded random element.
pub fn coreset_select(bank: &MemoryBank, m: usize, seed: u64) -> Result<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.gen_range(0..bank.len());
    coreset_select_from(bank, m, start)
}

/// Greedy farthest-point selection with an explicit start element: each round
/// adds the bank point farthest from the current selection (ties keep the
/// lowest index).
pub fn coreset_select_from(bank: &MemoryBank, m: usize, start: usize) -> Result<Vec<u32>> {
    if m == 0 || m > bank.len() {
        return Err(Error::invalid(
            "coreset_select",
            format!("m = {m} outside 1..={}", bank.len()),
        ));
    }
    if start >= bank.len() {
        return Err(Error::invalid("coreset_select", "start index out of range"));
    }
    let mut selected = Vec::with_capacity(m);
    selected.push(start as u32);
    let mut min_d: Vec<f64> = (0..bank.len())
        .map(|i| sqdist(bank.vector(i), bank.vector(start)))
        .collect();
    while selected.len() < m {
        let mut best = 0;
        let mut best_d = -1.0;
        for (i, &d) in min_d.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best as u32);
        for i in 0..bank.len() {
            let d = sqdist(bank.vector(i), bank.vector(best));
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    Ok(selected)
}

/// Per-location nearest-coreset-member index lists (stored as bank indices,
/// ascending), frozen from the initial estimate's features.
#[derive(Debug, Clone)]
pub struct CandidateSets {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub idx: Vec<u32>,
}

/// Exact k-NN of each location's initial feature among the coreset members.
/// Oversized `size` clamps to the coreset size with a warning.
pub fn build_candidate_sets(
    bank: &MemoryBank,
    coreset: &[u32],
    stack0: &FeatureStack,
    size: usize,
) -> Result<CandidateSets> {
    if size == 0 {
        return Err(Error::invalid("build_candidate_sets", "size must be >= 1"));
    }
    if coreset.is_empty() {
        return Err(Error::invalid("build_candidate_sets", "empty coreset"));
    }
    let k = if size > coreset.len() {
        log::warn!(
            "candidate size {size} exceeds coreset size {}; clamping",
            coreset.len()
        );
        coreset.len()
    } else {
        size
    };
    let (h, w) = stack0.grid();
    let c = stack0.channels();
    if c != bank.channels() {
        return Err(Error::shape("build_candidate_sets", "stack channels differ from bank"));
    }
    let mut idx = vec![0u32; h * w * k];
    let mut scored: Vec<(f64, u32)> = Vec::with_capacity(coreset.len());
    for loc in 0..h * w {
        let f0 = &stack0.concat.data()[loc * c..loc * c + c];
        scored.clear();
        for &bi in coreset {
            scored.push((sqdist(f0, bank.vector(bi as usize)), bi));
        }
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let sel = &mut idx[loc * k..(loc + 1) * k];
        for (slot, &(_, bi)) in scored.iter().take(k).enumerate() {
            sel[slot] = bi;
        }
        // Ascending bank index so a strict-< min scan breaks ties low.
        sel.sort_unstable();
    }
    Ok(CandidateSets { h, w, k, idx })
}

/// Fitted memory-bank backend: the full bank plus its coreset.
#[derive(Debug, Clone)]
pub struct PatchCoreModel {
    pub bank: Arc<MemoryBank>,
    pub coreset: Vec<u32>,
}

impl PatchCoreModel {
    /// Per-location squared distance to the nearest coreset member.
    pub fn score_map(&self, stack: &FeatureStack) -> Result<Tensor> {
        let (h, w) = stack.grid();
        let c = stack.channels();
        if c != self.bank.channels() {
            return Err(Error::shape("patchcore_scores", "stack channels differ from bank"));
        }
        let mut out = vec![0.0; h * w];
        for loc in 0..h * w {
            let f = &stack.concat.data()[loc * c..loc * c + c];
            let mut best = f64::INFINITY;
            for &bi in &self.coreset {
                let d = sqdist(f, self.bank.vector(bi as usize));
                if d < best {
                    best = d;
                }
            }
            out[loc] = best;
        }
        Ok(Tensor::from_op("patchcore_scores", vec![h, w], out))
    }
}

struct PatchcoreScoresOp {
    bank: Arc<MemoryBank>,
    cands: Arc<CandidateSets>,
}

impl PatchcoreScoresOp {
    /// (distance, bank index) of the candidate nearest to `f`; candidates are
    /// stored ascending so strict `<` keeps the lowest index on ties.
    fn nearest(&self, loc: usize, f: &[f64]) -> (f64, u32) {
        let k = self.cands.k;
        let mut best = f64::INFINITY;
        let mut best_i = self.cands.idx[loc * k];
        for &bi in &self.cands.idx[loc * k..(loc + 1) * k] {
            let d = sqdist(f, self.bank.vector(bi as usize));
            if d < best {
                best = d;
                best_i = bi;
            }
        }
        (best, best_i)
    }
}

impl CustomOp for PatchcoreScoresOp {
    fn name(&self) -> &'static str {
        "patchcore_scores"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let f = inputs[0];
        let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        if (h, w) != (self.cands.h, self.cands.w) {
            return Err(Error::shape(
                "patchcore_scores",
                format!("stack {h}x{w} vs candidate sets {}x{}", self.cands.h, self.cands.w),
            ));
        }
        let mut out = vec![0.0; h * w];
        for loc in 0..h * w {
            out[loc] = self.nearest(loc, &f.data()[loc * c..loc * c + c]).0;
        }
        Ok(Tensor::from_op("patchcore_scores", vec![h, w], out))
    }

    fn vjp(&self, gout: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Tensor>> {
        let f = inputs[0];
        let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        let mut gin = vec![0.0; h * w * c];
        for loc in 0..h * w {
            let g = gout.data()[loc];
            if g == 0.0 {
                continue;
            }
            let fv = &f.data()[loc * c..loc * c + c];
            let (_, bi) = self.nearest(loc, fv);
            let m = self.bank.vector(bi as usize);
            let dst = &mut gin[loc * c..loc * c + c];
            for i in 0..c {
                dst[i] = 2.0 * g * (fv[i] - m[i]);
            }
        }
        vec![Some(Tensor::from_op("patchcore_scores-vjp", vec![h, w, c], gin))]
    }
}

// ---------------------------------------------------------------------------
// Backend facade
// ---------------------------------------------------------------------------

/// A fitted scoring backend.
#[derive(Debug, Clone)]
pub enum Backend {
    Gaussian(GaussianField),
    PatchCore(PatchCoreModel),
}

/// Backend plus any per-image acceleration state (candidate sets for the
/// memory bank, frozen from the initial estimate).
pub enum PreparedBackend<'a> {
    Gaussian(&'a GaussianField),
    PatchCore { model: &'a PatchCoreModel, cands: Arc<CandidateSets> },
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Gaussian(_) => "padim",
            Backend::PatchCore(_) => "patchcore",
        }
    }

    /// Per-location anomaly scores on the backend grid.
    pub fn score_map(&self, stack: &FeatureStack) -> Result<Tensor> {
        match self {
            Backend::Gaussian(f) => f.score_map(stack),
            Backend::PatchCore(m) => m.score_map(stack),
        }
    }

    /// Freeze per-image acceleration state from the initial estimate's stack.
    pub fn prepare<'a>(
        &'a self,
        stack0: &FeatureStack,
        candidate_size: usize,
    ) -> Result<PreparedBackend<'a>> {
        match self {
            Backend::Gaussian(f) => Ok(PreparedBackend::Gaussian(f)),
            Backend::PatchCore(m) => {
                let cands = build_candidate_sets(&m.bank, &m.coreset, stack0, candidate_size)?;
                Ok(PreparedBackend::PatchCore { model: m, cands: Arc::new(cands) })
            }
        }
    }
}

impl PreparedBackend<'_> {
    /// Record the scalar loss `sum of per-location scores` on the tape,
    /// optionally masking score cells first (zeros drop both the score and
    /// its backward work).
    pub fn loss_node(
        &self,
        graph: &mut Graph,
        stack: &FeatureStackVars,
        score_mask: Option<Arc<Tensor>>,
    ) -> Result<VarId> {
        let scores = self.scores_node(graph, stack)?;
        let masked = match score_mask {
            Some(m) => graph.mul_const(scores, m)?,
            None => scores,
        };
        Ok(graph.sum(masked))
    }

    /// Record the per-location score map on the tape.
    pub fn scores_node(&self, graph: &mut Graph, stack: &FeatureStackVars) -> Result<VarId> {
        match self {
            PreparedBackend::Gaussian(f) => {
                f.check_stack_dims(graph.value(stack.concat).shape())?;
                let op = PadimScoresOp {
                    mean: f.mean.clone(),
                    factor: f.factor.clone(),
                    c: f.c,
                };
                graph.custom(Arc::new(op), &[stack.concat])
            }
            PreparedBackend::PatchCore { model, cands } => {
                let op = PatchcoreScoresOp { bank: model.bank.clone(), cands: cands.clone() };
                graph.custom(Arc::new(op), &[stack.concat])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack_from(h: usize, w: usize, c: usize, data: Vec<f64>) -> FeatureStack {
        let concat = Tensor::new(vec![h, w, c], data).unwrap();
        FeatureStack { maps: vec![concat.clone()], concat }
    }

    #[test]
    fn identical_training_features_give_ridge_covariance() {
        let s = stack_from(1, 1, 2, vec![3.0, -1.0]);
        let field = fit_gaussian_field(&[s.clone(), s.clone(), s.clone()], Ridge::Absolute(0.5))
            .unwrap();
        assert_eq!(field.mean().data(), &[3.0, -1.0]);
        // Covariance is 0.5 * I, so the precision factor satisfies
        // U U^T = 2 * I.
        let u = field.factor().data();
        let p00 = u[0] * u[0] + u[1] * u[1];
        let p11 = u[2] * u[2] + u[3] * u[3];
        assert!((p00 - 2.0).abs() < 1e-12 && (p11 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_ridge_rejected_and_two_stacks_required() {
        let s = stack_from(1, 1, 2, vec![0.0, 0.0]);
        assert!(fit_gaussian_field(&[s.clone(), s.clone()], Ridge::Absolute(0.0)).is_err());
        assert!(fit_gaussian_field(&[s], Ridge::Absolute(0.1)).is_err());
    }

    #[test]
    fn mahalanobis_identity_covariance_is_squared_norm() {
        // Two training points symmetric about the origin along each axis give
        // mean 0; with a big ridge the covariance is ~I after scaling.
        let a = stack_from(1, 1, 2, vec![1e-9, 1e-9]);
        let b = stack_from(1, 1, 2, vec![-1e-9, -1e-9]);
        let field = fit_gaussian_field(&[a, b], Ridge::Absolute(1.0)).unwrap();
        // f - mean = (3,4), precision ~ I => score ~ 25.
        let probe = stack_from(1, 1, 2, vec![3.0, 4.0]);
        let s = field.score_map(&probe).unwrap();
        assert!((s.item() - 25.0).abs() < 1e-6, "got {}", s.item());
    }

    #[test]
    fn padim_score_zero_at_mean() {
        let s = stack_from(2, 2, 3, (0..12).map(|v| v as f64 * 0.1).collect());
        let t = stack_from(2, 2, 3, (0..12).map(|v| v as f64 * 0.1 + 0.05).collect());
        let field = fit_gaussian_field(&[s.clone(), t], Ridge::Absolute(0.3)).unwrap();
        let mean_stack = stack_from(2, 2, 3, field.mean().data().to_vec());
        let scores = field.score_map(&mean_stack).unwrap();
        for &v in scores.data() {
            assert!(v.abs() < 1e-18);
        }
    }

    #[test]
    fn padim_loss_dim_mismatch_errors() {
        let s = stack_from(2, 2, 2, vec![0.0; 8]);
        let field = fit_gaussian_field(&[s.clone(), s.clone()], Ridge::Absolute(0.1)).unwrap();
        let bad = stack_from(2, 3, 2, vec![0.0; 12]);
        assert!(field.score_map(&bad).is_err());
    }

    #[test]
    fn coreset_line_example() {
        // Bank {0, 1, 10} on the line, m = 2, starting at 0: farthest is 10.
        let bank = MemoryBank::from_matrix(
            Tensor::new(vec![3, 1], vec![0.0, 1.0, 10.0]).unwrap(),
        )
        .unwrap();
        let sel = coreset_select_from(&bank, 2, 0).unwrap();
        assert_eq!(sel, vec![0, 2]);
    }

    #[test]
    fn coreset_full_selection_returns_everything() {
        let bank = MemoryBank::from_matrix(
            Tensor::new(vec![4, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let sel = coreset_select(&bank, 4, 9).unwrap();
        let mut sorted = sel.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert!(coreset_select(&bank, 5, 9).is_err());
        assert!(coreset_select(&bank, 0, 9).is_err());
    }

    #[test]
    fn candidate_sets_single_nearest() {
        let bank = MemoryBank::from_matrix(
            Tensor::new(vec![3, 2], vec![0.0, 0.0, 5.0, 5.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let coreset = vec![0, 1, 2];
        let stack0 = stack_from(1, 1, 2, vec![0.9, 0.9]);
        let cands = build_candidate_sets(&bank, &coreset, &stack0, 1).unwrap();
        assert_eq!(cands.idx, vec![2]); // (1,1) is nearest to (0.9,0.9)
    }

    #[test]
    fn candidate_size_clamps_to_coreset() {
        let bank = MemoryBank::from_matrix(
            Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let stack0 = stack_from(1, 1, 1, vec![0.4]);
        let cands = build_candidate_sets(&bank, &[0, 1], &stack0, 50).unwrap();
        assert_eq!(cands.k, 2);
    }

    #[test]
    fn patchcore_known_distances() {
        // Candidates {(0,0), (3,4)}, f = (0,1): min(1, 18) = 1.
        let bank = MemoryBank::from_matrix(
            Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap();
        let model = PatchCoreModel { bank: Arc::new(bank), coreset: vec![0, 1] };
        let stack = stack_from(1, 1, 2, vec![0.0, 1.0]);
        let s = model.score_map(&stack).unwrap();
        assert_eq!(s.item(), 1.0);

        // f equal to a bank member scores zero.
        let hit = stack_from(1, 1, 2, vec![3.0, 4.0]);
        assert_eq!(model.score_map(&hit).unwrap().item(), 0.0);
    }

    #[test]
    fn patchcore_gradient_flows_through_argmin() {
        let bank = Arc::new(
            MemoryBank::from_matrix(Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap())
                .unwrap(),
        );
        let cands = Arc::new(CandidateSets { h: 1, w: 1, k: 2, idx: vec![0, 1] });
        let op = PatchcoreScoresOp { bank, cands };
        let f = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let out = op.forward(&[&f]).unwrap();
        let gout = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let gin = op.vjp(&gout, &[&f], &out)[0].take().unwrap();
        // Argmin is bank[0] = (0,0); gradient 2*(f - m) = (0, 2).
        assert_eq!(gin.data(), &[0.0, 2.0]);
    }
}
