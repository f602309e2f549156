//! Oracle-equivalence tests: brute-force reference computations, written
//! independently of the library path they check.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use f2pad_core::backends::{
    build_candidate_sets, coreset_select_from, fit_gaussian_field, MemoryBank, PatchCoreModel,
    Ridge,
};
use f2pad_core::extractor::FeatureStack;
use f2pad_core::regularizers::fit_mog_traced;
use f2pad_core::tensor::Tensor;

fn rand_matrix(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
    Tensor::new(vec![n, c], (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn stack_of(t: &Tensor, h: usize, w: usize, c: usize) -> FeatureStack {
    let concat = Tensor::new(vec![h, w, c], t.data().to_vec()).unwrap();
    FeatureStack { maps: vec![concat.clone()], concat }
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Exact per-location loss over the whole bank (the unapproximated score).
fn exact_bank_loss(bank: &MemoryBank, stack: &FeatureStack) -> f64 {
    let (h, w) = stack.grid();
    let c = stack.channels();
    let mut total = 0.0;
    for loc in 0..h * w {
        let f = &stack.concat.data()[loc * c..loc * c + c];
        let mut best = f64::INFINITY;
        for i in 0..bank.len() {
            best = best.min(sqdist(f, bank.vector(i)));
        }
        total += best;
    }
    total
}

#[test]
fn patchcore_full_candidates_equal_exact_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (n_bank, h, w, c) in [(64, 4, 4, 6), (256, 8, 8, 4), (512, 6, 5, 8)] {
        let bank = Arc::new(MemoryBank::from_matrix(rand_matrix(&mut rng, n_bank, c)).unwrap());
        let coreset: Vec<u32> = (0..n_bank as u32).collect();
        let probe = rand_matrix(&mut rng, h * w, c);
        let stack = stack_of(&probe, h, w, c);
        let cands = build_candidate_sets(&bank, &coreset, &stack, n_bank).unwrap();

        // Library loss via the candidate path.
        let model = PatchCoreModel { bank: bank.clone(), coreset };
        let mut g = f2pad_core::autodiff::Graph::new();
        let leaf = g.leaf(stack.concat.clone(), false);
        let vars = f2pad_core::extractor::FeatureStackVars { maps: vec![leaf], concat: leaf };
        let prepared = f2pad_core::backends::PreparedBackend::PatchCore {
            model: &model,
            cands: Arc::new(cands),
        };
        let loss = prepared.loss_node(&mut g, &vars, None).unwrap();
        let got = g.value(loss).item();

        let want = exact_bank_loss(&bank, &stack);
        assert!(
            (got - want).abs() <= 1e-12 * want.abs().max(1.0),
            "bank {n_bank}: {got} vs {want}"
        );
    }
}

#[test]
fn candidate_score_is_upper_bound_of_exact_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let bank = Arc::new(MemoryBank::from_matrix(rand_matrix(&mut rng, 120, 5)).unwrap());
    let coreset: Vec<u32> = (0..120).collect();
    let stack0 = stack_of(&rand_matrix(&mut rng, 9, 5), 3, 3, 5);
    let cands = build_candidate_sets(&bank, &coreset, &stack0, 6).unwrap();
    let model = PatchCoreModel { bank: bank.clone(), coreset };

    for _ in 0..50 {
        // Evaluate at inputs unrelated to the stack the candidates froze on.
        let probe = stack_of(&rand_matrix(&mut rng, 9, 5), 3, 3, 5);
        let mut g = f2pad_core::autodiff::Graph::new();
        let leaf = g.leaf(probe.concat.clone(), false);
        let vars = f2pad_core::extractor::FeatureStackVars { maps: vec![leaf], concat: leaf };
        let prepared = f2pad_core::backends::PreparedBackend::PatchCore {
            model: &model,
            cands: Arc::new(cands.clone()),
        };
        let scores = prepared.scores_node(&mut g, &vars).unwrap();
        let approx = g.value(scores).clone();

        for loc in 0..9 {
            let f = &probe.concat.data()[loc * 5..loc * 5 + 5];
            let exact = (0..bank.len())
                .map(|i| sqdist(f, bank.vector(i)))
                .fold(f64::INFINITY, f64::min);
            assert!(
                approx.data()[loc] >= exact - 1e-12,
                "approximation must upper-bound the exact score"
            );
        }
    }
}

/// Exhaustive greedy farthest-point oracle, recomputing all distances from
/// scratch each round.
fn greedy_oracle(bank: &MemoryBank, m: usize, start: usize) -> Vec<u32> {
    let mut selected = vec![start as u32];
    while selected.len() < m {
        let mut best = 0usize;
        let mut best_d = -1.0;
        for i in 0..bank.len() {
            let d = selected
                .iter()
                .map(|&s| sqdist(bank.vector(i), bank.vector(s as usize)))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best as u32);
    }
    selected
}

#[test]
fn coreset_matches_exhaustive_greedy_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (n, c, m) in [(64, 3, 8), (256, 4, 25), (100, 2, 100)] {
        let bank = MemoryBank::from_matrix(rand_matrix(&mut rng, n, c)).unwrap();
        let start = rng.gen_range(0..n);
        let got = coreset_select_from(&bank, m, start).unwrap();
        let want = greedy_oracle(&bank, m, start);
        assert_eq!(got, want, "n={n} m={m}");
    }
}

#[test]
fn gaussian_field_recovers_known_covariance() {
    // 2-D features drawn with covariance [[2,0],[0,1]]; with 10k samples the
    // fitted covariance must land within 5% elementwise on the diagonal.
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let gauss = |rng: &mut ChaCha8Rng| {
        // Box-Muller from two uniforms.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let stacks: Vec<FeatureStack> = (0..10_000)
        .map(|_| {
            let f = vec![2f64.sqrt() * gauss(&mut rng), gauss(&mut rng)];
            let concat = Tensor::new(vec![1, 1, 2], f).unwrap();
            FeatureStack { maps: vec![concat.clone()], concat }
        })
        .collect();
    let field = fit_gaussian_field(&stacks, Ridge::Absolute(1e-6)).unwrap();

    // Reconstruct the covariance from the stored precision factor:
    // precision = U U^T, covariance = precision^-1.
    let u = field.factor().data();
    let p = [
        u[0] * u[0] + u[1] * u[1],
        u[0] * u[2] + u[1] * u[3],
        u[2] * u[0] + u[3] * u[1],
        u[2] * u[2] + u[3] * u[3],
    ];
    let det = p[0] * p[3] - p[1] * p[2];
    let cov = [p[3] / det, -p[1] / det, -p[2] / det, p[0] / det];
    assert!((cov[0] - 2.0).abs() / 2.0 < 0.05, "var0 {}", cov[0]);
    assert!((cov[3] - 1.0).abs() < 0.05, "var1 {}", cov[3]);
    assert!(cov[1].abs() < 0.05, "cross {}", cov[1]);
}

#[test]
fn em_loglik_non_decreasing_across_twenty_seeds() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let centers = [[0.2, 0.3, 0.2], [0.7, 0.6, 0.8], [0.4, 0.9, 0.1]];
        let pixels: Vec<[f64; 3]> = (0..2500)
            .map(|_| {
                let c = centers[rng.gen_range(0..3)];
                [
                    c[0] + rng.gen_range(-0.05..0.05),
                    c[1] + rng.gen_range(-0.05..0.05),
                    c[2] + rng.gen_range(-0.05..0.05),
                ]
            })
            .collect();
        let (_, trace) = fit_mog_traced(&pixels, 3, seed).unwrap();
        for (i, pair) in trace.log_likelihoods.windows(2).enumerate() {
            assert!(
                pair[1] >= pair[0] - 1e-9,
                "seed {seed}: log-likelihood decreased at iteration {i}: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }
}
