//! Development scratchpad: runs the synthetic suite end to end and prints
//! per-sample metrics so solver parameters can be tuned.

use std::time::Instant;

use f2pad_core::backends::{fit_gaussian_field, Backend, Ridge};
use f2pad_core::datasynth::{generate, random_blob_mask, AnomalySource, SynthSpec, TextureCategory};
use f2pad_core::evalkit::{evaluate_samples, iou_dice, Method, Sample, SuiteModels};
use f2pad_core::extractor::{build_extractor, ExtractorSpec};
use f2pad_core::mask::InitMaskMode;
use f2pad_core::pipeline::F2PADConfig;
use f2pad_core::regularizers::{fit_mog, sample_training_pixels};

fn main() {
    let t0 = Instant::now();
    let args: Vec<String> = std::env::args().collect();
    let get = |name: &str, default: f64| -> f64 {
        args.iter()
            .position(|a| a == name)
            .and_then(|i| args.get(i + 1))
            .and_then(|v| v.parse().ok())
            .unwrap_or(default)
    };

    let n_train = get("--train", 32.0) as usize;
    let n_test = get("--test", 20.0) as u64;
    let cat = TextureCategory::new(64, 64, 424242);
    let train: Vec<_> = (0..n_train as u64).map(|i| cat.render(1000 + i)).collect();

    let ex = if get("--coarse", 1.0) > 0.0 {
        build_extractor(&ExtractorSpec::coarse_spec(7)).unwrap()
    } else {
        build_extractor(&ExtractorSpec::default_spec(7)).unwrap()
    };
    let stacks: Vec<_> = train.iter().map(|img| ex.extract(img).unwrap()).collect();
    let ridge = get("--ridge", 0.05);
    let field = fit_gaussian_field(&stacks, Ridge::TraceScaled { scale: ridge, floor: 1e-9 }).unwrap();
    let backend = Backend::Gaussian(field);
    let pixels = sample_training_pixels(&train, 20_000, 99);
    let prior = fit_mog(&pixels, 4, 5).unwrap();
    println!("fit done at {:.1}s", t0.elapsed().as_secs_f64());

    let samples: Vec<Sample> = (0..n_test)
        .map(|s| {
            let normal = cat.render(5000 + s);
            let spec = SynthSpec {
                mask_source: random_blob_mask(70 + s),
                resize_range: (0.45 + 0.06 * (s % 5) as f64, 0.7 + 0.14 * (s % 5) as f64),
                source: AnomalySource::RandomColor,
                contrast_min: 0.2,
                seed: 900 + s,
            };
            let (x, gt) = generate(&normal, &spec).unwrap();
            Sample { name: format!("s{s:02}"), image: x, gt }
        })
        .collect();
    let areas: Vec<f64> = samples
        .iter()
        .map(|s| s.gt.count() as f64 / 4096.0)
        .collect();
    println!("areas: {:?}", areas.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>());

    let cfg = F2PADConfig {
        alpha1: get("--alpha1", 0.5),
        beta0: get("--beta0", 300.0),
        gamma0: get("--gamma0", 1.0),
        dilation_radius: get("--dilate", 8.0) as usize,
        max_iters: get("--iters", 1200.0) as usize,
        refine_max_iters: get("--riters", 300.0) as usize,
        tau_a: get("--tau", 0.1),
        stop_gaussian: get("--stop", 0.1),
        ..F2PADConfig::default()
    };
    println!("cfg: {cfg:?}");

    if get("--bench", 0.0) > 0.0 {
        use f2pad_core::pipeline::{active_region, f2pad_objective};
        let s = &samples[0];
        let stack = ex.extract(&s.image).unwrap();
        let scores = backend.score_map(&stack).unwrap();
        let px = f2pad_core::mask::bilinear_upsample(&scores, 64, 64).unwrap();
        let (m0, _) = f2pad_core::mask::initial_mask(&px, InitMaskMode::MaxF1, Some(&s.gt)).unwrap();
        let dil = f2pad_core::mask::dilate(&m0, cfg.dilation_radius);
        let n0 = f2pad_core::inpaint::inpaint_init(&s.image, &m0).unwrap();
        let region = active_region(&dil, &ex).unwrap();
        let prepared = backend.prepare(&ex.extract(&n0).unwrap(), cfg.candidate_size).unwrap();
        let mut obj = f2pad_objective(
            &ex, prepared, Some(&prior), &s.image, Some(&region), cfg.alpha1, cfg.alpha2, 1.0, &cfg,
        );
        let reps = 200;
        let t = Instant::now();
        for _ in 0..reps {
            let _ = obj.eval(&n0).unwrap();
        }
        println!("objective eval: {:.2} ms/iter", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

        // Forward-only extraction for comparison.
        let t = Instant::now();
        for _ in 0..reps {
            let _ = ex.extract(&n0).unwrap();
        }
        println!("extract fwd: {:.2} ms/iter", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

        let kernel = f2pad_core::optimizer::build_sharing_kernel(&s.image, cfg.ks, cfg.sigma0, cfg.sigma1).unwrap();
        let grad = f2pad_core::tensor::Tensor::full(vec![64, 64, 3], 0.001).unwrap();
        let t = Instant::now();
        for _ in 0..reps {
            let _ = f2pad_core::optimizer::share_gradients(&kernel, &grad, cfg.clip).unwrap();
        }
        println!("share: {:.2} ms/iter", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
        return;
    }

    if get("--probe", 0.0) > 0.0 {
        let s = &samples[get("--probe", 0.0) as usize];
        let res = f2pad_core::pipeline::run(
            &s.image,
            &ex,
            &backend,
            Some(&prior),
            &cfg,
            &f2pad_core::pipeline::RunOptions {
                init_mode: Some(InitMaskMode::MaxF1),
                ..Default::default()
            },
            Some(&s.gt),
        )
        .unwrap();
        let hist = &res.diagnostics.loss_history;
        println!(
            "probe: m0={} dilated_active={} affected={} beta={:.3} iters={} mask={} gt={}",
            res.initial_mask.count(),
            res.diagnostics.active_pixels,
            res.diagnostics.affected_cells,
            res.diagnostics.beta,
            res.diagnostics.solve_iterations,
            res.mask.count(),
            s.gt.count(),
        );
        let show: Vec<String> = hist.iter().take(8).map(|v| format!("{v:.2}")).collect();
        println!("loss head: {show:?}");
        if hist.len() > 8 {
            let tail: Vec<String> =
                hist[hist.len().saturating_sub(4)..].iter().map(|v| format!("{v:.2}")).collect();
            println!("loss tail ({} entries): {tail:?}", hist.len());
        }
        println!("iou(f2pad)={:.1}", iou_dice(&res.mask, &s.gt).unwrap().iou);
        let init_iou = iou_dice(&res.initial_mask, &s.gt).unwrap().iou;
        println!("iou(m0)={init_iou:.1}");

        // Where does the mask land relative to ground truth?
        let (mut m_in, mut m_out) = (0, 0);
        for (i, j) in res.mask.pixels() {
            if s.gt.get(i, j) {
                m_in += 1;
            } else {
                m_out += 1;
            }
        }
        println!("mask: {m_in} inside gt, {m_out} outside gt");

        // |a| norms from the first solve, split by gt membership.
        let a = {
            let mut d = s.image.clone();
            for (v, &nv) in d.data_mut().iter_mut().zip(res.n_solve.data()) {
                *v -= nv;
            }
            d
        };
        let dilated = f2pad_core::mask::dilate(&res.initial_mask, cfg.dilation_radius);
        let mut in_norms = Vec::new();
        let mut out_norms = Vec::new();
        for (i, j) in dilated.pixels() {
            let n2: f64 = (0..3).map(|c| a.at3(i, j, c).powi(2)).sum();
            if s.gt.get(i, j) {
                in_norms.push(n2.sqrt());
            } else {
                out_norms.push(n2.sqrt());
            }
        }
        let q = |v: &mut Vec<f64>, p: f64| -> f64 {
            if v.is_empty() {
                return f64::NAN;
            }
            v.sort_by(|x, y| x.partial_cmp(y).unwrap());
            v[((v.len() - 1) as f64 * p) as usize]
        };
        println!(
            "|a| in-gt quantiles: p10={:.3} p50={:.3} p90={:.3}",
            q(&mut in_norms, 0.1),
            q(&mut in_norms, 0.5),
            q(&mut in_norms, 0.9)
        );
        println!(
            "|a| out-gt quantiles: p50={:.3} p90={:.3} p99={:.3}",
            q(&mut out_norms, 0.5),
            q(&mut out_norms, 0.9),
            q(&mut out_norms, 0.99)
        );
        return;
    }

    let models = SuiteModels { extractor: &ex, backend: &backend, prior: Some(&prior) };
    let methods = [Method::Baseline, Method::F2pad];
    let out = evaluate_samples(&samples, &methods, &models, &cfg, Some(InitMaskMode::MaxF1)).unwrap();
    for row in &out.rows {
        print!("{} area={:.3}", row.name, row.area_frac);
        for (m, v) in &row.metrics {
            print!("  {}={:.1}", m.label(), v.iou);
        }
        println!();
    }
    for m in methods {
        if let Some(v) = out.mean_metric(m) {
            println!("mean {}: iou={:.2} dice={:.2}", m.label(), v.iou, v.dice);
        }
    }
    let _ = iou_dice; // quiet unused import when trimmed down
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
