//! Finite-difference oracles for every differentiable op and for composite
//! graphs. The numeric gradients here are computed from forward evaluations
//! only and never touch the tape's backward path.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use f2pad_core::autodiff::{Graph, VarId};
use f2pad_core::backends::{
    build_candidate_sets, fit_gaussian_field, CandidateSets, MemoryBank, PatchCoreModel,
    PreparedBackend, Ridge,
};
use f2pad_core::extractor::{build_extractor, ExtractorSpec, FeatureStack};
use f2pad_core::regularizers::{log_penalty, mog_prior_energy, tv_energy, MogPrior};
use f2pad_core::tensor::Tensor;

const FD_STEP: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Central finite differences of a scalar function of one tensor.
fn fd_grad(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor) -> Tensor {
    let mut grad = vec![0.0; x.numel()];
    for e in 0..x.numel() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        {
            let d = plus.data_mut();
            d[e] += FD_STEP;
        }
        {
            let d = minus.data_mut();
            d[e] -= FD_STEP;
        }
        grad[e] = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
    }
    Tensor::new(x.shape().to_vec(), grad).unwrap()
}

/// Max over elements of |a - n| / max(1, |a|, |n|).
fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Check d(sum of graph output)/d(leaf) against finite differences, where
/// `build` records the op under test.
fn check_op(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
    build: &dyn Fn(&mut Graph, VarId) -> VarId,
) -> f64 {
    let x = rand_tensor(rng, shape, lo, hi);
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let out = build(&mut g, leaf);
    let s = g.sum(out);
    let grads = g.backward(s).unwrap();
    let analytic = grads.wrt_or_zeros(leaf, x.shape());

    let mut f = |t: &Tensor| {
        let mut g = Graph::new();
        let leaf = g.leaf(t.clone(), false);
        let out = build(&mut g, leaf);
        let s = g.sum(out);
        g.value(s).item()
    };
    let numeric = fd_grad(&mut f, &x);
    max_rel_err(&analytic, &numeric)
}

#[test]
fn conv2d_input_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let kernel = rand_tensor(&mut rng, &[3, 3, 2, 3], -0.7, 0.7);
        let stride = 1 + (trial % 2);
        let pad = trial % 2;
        let err = check_op(&mut rng, &[5, 6, 2], -1.0, 1.0, &|g, leaf| {
            let k = g.leaf(kernel.clone(), false);
            g.conv2d(leaf, k, stride, pad).unwrap()
        });
        worst = worst.max(err);
    }
    assert!(worst < 1e-6, "worst rel err {worst:e}");
}

#[test]
fn conv2d_kernel_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let input = rand_tensor(&mut rng, &[5, 5, 2], -1.0, 1.0);
        let err = check_op(&mut rng, &[3, 3, 2, 2], -0.7, 0.7, &|g, leaf| {
            let x = g.leaf(input.clone(), false);
            g.conv2d(x, leaf, 1, 1).unwrap()
        });
        worst = worst.max(err);
    }
    assert!(worst < 1e-6, "worst rel err {worst:e}");
}

#[test]
fn avg_pool_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let k = 2 + trial % 2;
        let err = check_op(&mut rng, &[6, 6, 3], -1.0, 1.0, &|g, leaf| {
            g.avg_pool(leaf, k, 2).unwrap()
        });
        worst = worst.max(err);
    }
    assert!(worst < 1e-6, "worst rel err {worst:e}");
}

#[test]
fn leaky_relu_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        // Keep inputs away from the kink so central differences are valid.
        let x = rand_tensor(&mut rng, &[4, 4, 2], 0.05, 1.0);
        let signs = rand_tensor(&mut rng, &[4, 4, 2], -1.0, 1.0);
        let signed = Tensor::new(
            vec![4, 4, 2],
            x.data()
                .iter()
                .zip(signs.data())
                .map(|(&v, &s)| if s > 0.0 { v } else { -v })
                .collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let leaf = g.leaf(signed.clone(), true);
        let y = g.leaky_relu(leaf, 0.1).unwrap();
        let s = g.sum(y);
        let analytic = g.backward(s).unwrap().wrt_or_zeros(leaf, signed.shape());
        let mut f = |t: &Tensor| {
            let mut g = Graph::new();
            let leaf = g.leaf(t.clone(), false);
            let y = g.leaky_relu(leaf, 0.1).unwrap();
            let s = g.sum(y);
            g.value(s).item()
        };
        let numeric = fd_grad(&mut f, &signed);
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    assert!(worst < 1e-6, "worst rel err {worst:e}");
}

#[test]
fn upsample_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let err = check_op(&mut rng, &[3, 2, 2], -1.0, 1.0, &|g, leaf| {
            g.upsample_nearest(leaf, 6, 6).unwrap()
        });
        worst = worst.max(err);
    }
    assert!(worst < 1e-6, "worst rel err {worst:e}");
}

#[test]
fn elementwise_and_concat_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let other = rand_tensor(&mut rng, &[3, 3, 2], -1.0, 1.0);
        let weights = Arc::new(rand_tensor(&mut rng, &[3, 3, 4], -1.0, 1.0));
        let err = check_op(&mut rng, &[3, 3, 2], -1.0, 1.0, &|g, leaf| {
            let o = g.leaf(other.clone(), false);
            let prod = g.mul(leaf, leaf).unwrap();
            let mixed = g.sub(prod, o).unwrap();
            let cat = g.concat_channels(&[mixed, leaf]).unwrap();
            g.mul_const(cat, weights.clone()).unwrap()
        });
        worst = worst.max(err);
    }
    assert!(worst < 1e-6, "worst rel err {worst:e}");
}

#[test]
fn random_three_layer_conv_net_matches_fd() {
    // The named end-to-end check: conv -> leaky-relu -> pool stacked three
    // times, scalar output, gradient w.r.t. the input image.
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let k1 = rand_tensor(&mut rng, &[3, 3, 2, 3], -0.5, 0.5);
    let k2 = rand_tensor(&mut rng, &[3, 3, 3, 4], -0.5, 0.5);
    let k3 = rand_tensor(&mut rng, &[3, 3, 4, 4], -0.5, 0.5);
    let build = |g: &mut Graph, leaf: VarId| {
        let kk1 = g.leaf(k1.clone(), false);
        let kk2 = g.leaf(k2.clone(), false);
        let kk3 = g.leaf(k3.clone(), false);
        let c1 = g.conv2d(leaf, kk1, 1, 1).unwrap();
        let a1 = g.leaky_relu(c1, 0.1).unwrap();
        let p1 = g.avg_pool(a1, 2, 2).unwrap();
        let c2 = g.conv2d(p1, kk2, 1, 1).unwrap();
        let a2 = g.leaky_relu(c2, 0.1).unwrap();
        let p2 = g.avg_pool(a2, 2, 2).unwrap();
        let c3 = g.conv2d(p2, kk3, 1, 1).unwrap();
        g.leaky_relu(c3, 0.1).unwrap()
    };
    let x = rand_tensor(&mut rng, &[8, 8, 2], -1.0, 1.0);
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let out = build(&mut g, leaf);
    let s = g.sum(out);
    let analytic = g.backward(s).unwrap().wrt_or_zeros(leaf, x.shape());
    let mut f = |t: &Tensor| {
        let mut g = Graph::new();
        let leaf = g.leaf(t.clone(), false);
        let out = build(&mut g, leaf);
        let s = g.sum(out);
        g.value(s).item()
    };
    let numeric = fd_grad(&mut f, &x);
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < 1e-6, "rel err {err:e}");
}

// ---------------------------------------------------------------------------
// Composite chains against a dense-Jacobian oracle
// ---------------------------------------------------------------------------

/// One link of a chain, with its forward map on raw tensors.
struct Link {
    name: &'static str,
    apply: Box<dyn Fn(&mut Graph, VarId) -> VarId>,
}

/// Dense Jacobian of a link's forward at `x`, via finite differences of the
/// forward evaluation alone.
fn dense_jacobian(link: &Link, x: &Tensor) -> (Vec<f64>, usize, usize) {
    let eval = |t: &Tensor| -> Tensor {
        let mut g = Graph::new();
        let leaf = g.leaf(t.clone(), false);
        let out = (link.apply)(&mut g, leaf);
        g.value(out).clone()
    };
    let base = eval(x);
    let (m, n) = (base.numel(), x.numel());
    let mut jac = vec![0.0; m * n];
    for col in 0..n {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[col] += FD_STEP;
        minus.data_mut()[col] -= FD_STEP;
        let fp = eval(&plus);
        let fm = eval(&minus);
        for row in 0..m {
            jac[row * n + col] = (fp.data()[row] - fm.data()[row]) / (2.0 * FD_STEP);
        }
    }
    (jac, m, n)
}

#[test]
fn chain_backward_equals_jacobian_product() {
    // Chains of up to 4 ops on <= 32 scalars: the tape gradient must equal
    // ones^T * J4 * J3 * J2 * J1 assembled from per-op dense Jacobians.
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let kernel = rand_tensor(&mut rng, &[3, 3, 1, 2], -0.6, 0.6);
    let kernel2 = rand_tensor(&mut rng, &[1, 1, 2, 1], -0.9, 0.9);

    let make_links = || -> Vec<Link> {
        vec![
            Link {
                name: "conv2d",
                apply: {
                    let k = kernel.clone();
                    Box::new(move |g, v| {
                        let kk = g.leaf(k.clone(), false);
                        g.conv2d(v, kk, 1, 1).unwrap()
                    })
                },
            },
            Link { name: "leaky_relu", apply: Box::new(|g, v| g.leaky_relu(v, 0.1).unwrap()) },
            Link { name: "avg_pool", apply: Box::new(|g, v| g.avg_pool(v, 2, 2).unwrap()) },
            Link {
                name: "conv1x1",
                apply: {
                    let k = kernel2.clone();
                    Box::new(move |g, v| {
                        let kk = g.leaf(k.clone(), false);
                        g.conv2d(v, kk, 1, 0).unwrap()
                    })
                },
            },
        ]
    };

    let x = rand_tensor(&mut rng, &[4, 4, 1], 0.2, 1.0); // 16 scalars, away from relu kink
    let links = make_links();

    // Tape gradient of sum(chain(x)).
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let mut cur = leaf;
    let mut intermediates = vec![x.clone()];
    for link in &links {
        cur = (link.apply)(&mut g, cur);
        intermediates.push(g.value(cur).clone());
    }
    let s = g.sum(cur);
    let tape_grad = g.backward(s).unwrap().wrt_or_zeros(leaf, x.shape());

    // Oracle: propagate ones backward through dense per-op Jacobians.
    let mut v = vec![1.0; intermediates.last().unwrap().numel()];
    for (idx, link) in links.iter().enumerate().rev() {
        let (jac, m, n) = dense_jacobian(link, &intermediates[idx]);
        assert!(m <= 32 && n <= 32, "{}: oracle dims {m}x{n}", link.name);
        let mut next = vec![0.0; n];
        for row in 0..m {
            for col in 0..n {
                next[col] += v[row] * jac[row * n + col];
            }
        }
        v = next;
    }
    for (e, (&a, &b)) in tape_grad.data().iter().zip(&v).enumerate() {
        let err = (a - b).abs() / 1f64.max(a.abs()).max(b.abs());
        assert!(err < 1e-6, "element {e}: tape {a} oracle {b}");
    }
}

// ---------------------------------------------------------------------------
// Extractor, backends, regularizers
// ---------------------------------------------------------------------------

fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    rand_tensor(rng, &[h, w, 3], -1.2, 1.2)
}

#[test]
fn extractor_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let ex = build_extractor(&ExtractorSpec::default_spec(5)).unwrap();
    let x = rand_image(&mut rng, 8, 8);
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let stack = ex.extract_graph(&mut g, leaf).unwrap();
    let s = g.sum(stack.concat);
    let analytic = g.backward(s).unwrap().wrt_or_zeros(leaf, x.shape());
    let mut f = |t: &Tensor| {
        let stack = ex.extract(t).unwrap();
        stack.concat.data().iter().sum()
    };
    let numeric = fd_grad(&mut f, &x);
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < 1e-6, "rel err {err:e}");
}

fn synth_stacks(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> Vec<FeatureStack> {
    (0..n)
        .map(|_| {
            let concat = rand_tensor(rng, &[h, w, c], -1.0, 1.0);
            FeatureStack { maps: vec![concat.clone()], concat }
        })
        .collect()
}

#[test]
fn padim_loss_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let stacks = synth_stacks(&mut rng, 12, 3, 3, 4);
    let field = fit_gaussian_field(&stacks, Ridge::Absolute(0.05)).unwrap();
    let probe = rand_tensor(&mut rng, &[3, 3, 4], -1.0, 1.0);

    let mut g = Graph::new();
    let leaf = g.leaf(probe.clone(), true);
    let stack_vars = f2pad_core::extractor::FeatureStackVars { maps: vec![leaf], concat: leaf };
    let prepared = PreparedBackend::Gaussian(&field);
    let loss = prepared.loss_node(&mut g, &stack_vars, None).unwrap();
    let analytic = g.backward(loss).unwrap().wrt_or_zeros(leaf, probe.shape());

    let mut f = |t: &Tensor| {
        let stack = FeatureStack { maps: vec![t.clone()], concat: t.clone() };
        field.score_map(&stack).unwrap().data().iter().sum()
    };
    let numeric = fd_grad(&mut f, &probe);
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < 1e-6, "rel err {err:e}");
}

#[test]
fn patchcore_loss_gradient_matches_fd_at_non_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let bank = Arc::new(
        MemoryBank::from_matrix(rand_tensor(&mut rng, &[40, 4], -1.0, 1.0)).unwrap(),
    );
    let coreset: Vec<u32> = (0..40).collect();
    let probe = rand_tensor(&mut rng, &[3, 3, 4], -1.0, 1.0);
    let stack0 = FeatureStack { maps: vec![probe.clone()], concat: probe.clone() };
    let cands = Arc::new(build_candidate_sets(&bank, &coreset, &stack0, 8).unwrap());

    // Verify the argmin margin so the FD step cannot flip the minimum.
    for loc in 0..9 {
        let f = &probe.data()[loc * 4..loc * 4 + 4];
        let mut ds: Vec<f64> = cands.idx[loc * 8..loc * 8 + 8]
            .iter()
            .map(|&bi| {
                bank.vector(bi as usize)
                    .iter()
                    .zip(f)
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum()
            })
            .collect();
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(ds[1] - ds[0] > 1e-3, "degenerate margin at loc {loc}");
    }

    let model = PatchCoreModel { bank: bank.clone(), coreset };
    let mut g = Graph::new();
    let leaf = g.leaf(probe.clone(), true);
    let stack_vars = f2pad_core::extractor::FeatureStackVars { maps: vec![leaf], concat: leaf };
    let prepared = PreparedBackend::PatchCore { model: &model, cands: cands.clone() };
    let loss = prepared.loss_node(&mut g, &stack_vars, None).unwrap();
    let analytic = g.backward(loss).unwrap().wrt_or_zeros(leaf, probe.shape());

    let cands2 = cands.clone();
    let bank2 = bank.clone();
    let mut f = |t: &Tensor| -> f64 {
        let mut total = 0.0;
        for loc in 0..9 {
            let fv = &t.data()[loc * 4..loc * 4 + 4];
            let best = cands2.idx[loc * 8..loc * 8 + 8]
                .iter()
                .map(|&bi| {
                    bank2
                        .vector(bi as usize)
                        .iter()
                        .zip(fv)
                        .map(|(&a, &b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            total += best;
        }
        total
    };
    let numeric = fd_grad(&mut f, &probe);
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < 1e-6, "rel err {err:e}");
}

#[test]
fn log_penalty_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    for _ in 0..20 {
        let a = rand_tensor(&mut rng, &[4, 4, 3], 0.05, 1.0);
        let (_, analytic) = log_penalty(&a, 1e-4).unwrap();
        let mut f = |t: &Tensor| log_penalty(t, 1e-4).unwrap().0;
        let numeric = fd_grad(&mut f, &a);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "rel err {err:e}");
    }
}

#[test]
fn mog_energy_gradient_matches_fd_at_non_ties() {
    let prior = MogPrior::from_parts(
        vec![0.4, 0.6],
        vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]],
        vec![
            [0.04, 0.01, 0.0, 0.01, 0.05, 0.0, 0.0, 0.0, 0.06],
            [0.03, 0.0, 0.01, 0.0, 0.04, 0.0, 0.01, 0.0, 0.05],
        ],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(112);
    for _ in 0..20 {
        // Bias pixels toward one mean so the argmin has a healthy margin.
        let n = rand_tensor(&mut rng, &[3, 3, 3], -0.2, 0.35);
        let (_, analytic) = mog_prior_energy(&prior, &n).unwrap();
        let mut f = |t: &Tensor| mog_prior_energy(&prior, t).unwrap().0;
        let numeric = fd_grad(&mut f, &n);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "rel err {err:e}");
    }
}

#[test]
fn tv_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(113);
    for _ in 0..20 {
        let n = rand_tensor(&mut rng, &[4, 5, 3], -1.0, 1.0);
        let (_, analytic) = tv_energy(&n, 1e-12).unwrap();
        let mut f = |t: &Tensor| tv_energy(t, 1e-12).unwrap().0;
        let numeric = fd_grad(&mut f, &n);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "rel err {err:e}");
    }
}

#[test]
fn padim_score_mask_drops_masked_cells_from_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(114);
    let stacks = synth_stacks(&mut rng, 8, 2, 2, 3);
    let field = fit_gaussian_field(&stacks, Ridge::Absolute(0.05)).unwrap();
    let probe = rand_tensor(&mut rng, &[2, 2, 3], -1.0, 1.0);
    let mask = Arc::new(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());

    let mut g = Graph::new();
    let leaf = g.leaf(probe.clone(), true);
    let stack_vars = f2pad_core::extractor::FeatureStackVars { maps: vec![leaf], concat: leaf };
    let prepared = PreparedBackend::Gaussian(&field);
    let loss = prepared.loss_node(&mut g, &stack_vars, Some(mask)).unwrap();
    let grad = g.backward(loss).unwrap().wrt_or_zeros(leaf, probe.shape());
    // Cells (0,1) and (1,0) are masked out: their feature gradients vanish.
    for c in 0..3 {
        assert_eq!(grad.at3(0, 1, c), 0.0);
        assert_eq!(grad.at3(1, 0, c), 0.0);
        assert_ne!(grad.at3(0, 0, c), 0.0);
    }
}

#[test]
fn candidate_sets_accept_declared_sizes() {
    // Keeps the CandidateSets import honest and pins the stored layout.
    let cands = CandidateSets { h: 1, w: 2, k: 1, idx: vec![3, 5] };
    assert_eq!(cands.idx.len(), cands.h * cands.w * cands.k);
}
