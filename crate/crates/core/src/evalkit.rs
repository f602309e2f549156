//! Segmentation metrics and the experiment harness: per-sample IOU/DICE for
//! the baseline masks and the optimized masks, grouped by anomaly size, with
//! delta columns against the baseline.

use std::path::Path;

use rayon::prelude::*;

use crate::backends::Backend;
use crate::error::{Error, Result};
use crate::extractor::Extractor;
use crate::imageio;
use crate::mask::{initial_mask, AnomalyMask, InitMaskMode};
use crate::pipeline::{self, F2PADConfig, RunOptions};
use crate::regularizers::MogPrior;
use crate::tensor::Tensor;

/// Overlap metrics, scaled by 100.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegMetrics {
    pub iou: f64,
    pub dice: f64,
}

/// IOU and DICE of a predicted mask against ground truth. Two empty masks
/// are defined as a perfect (100, 100) match.
pub fn iou_dice(m: &AnomalyMask, gt: &AnomalyMask) -> Result<SegMetrics> {
    if (m.height(), m.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(
            "iou_dice",
            format!("{}x{} vs {}x{}", m.height(), m.width(), gt.height(), gt.width()),
        ));
    }
    let mut inter = 0usize;
    let mut m_count = 0usize;
    let mut g_count = 0usize;
    for (a, b) in m.as_slice().iter().zip(gt.as_slice()) {
        if *a {
            m_count += 1;
        }
        if *b {
            g_count += 1;
        }
        if *a && *b {
            inter += 1;
        }
    }
    if m_count == 0 && g_count == 0 {
        log::warn!("iou_dice: both masks empty; reporting (100, 100) by convention");
        return Ok(SegMetrics { iou: 100.0, dice: 100.0 });
    }
    let union = m_count + g_count - inter;
    let iou = 100.0 * inter as f64 / union as f64;
    let dice = 100.0 * 2.0 * inter as f64 / (m_count + g_count) as f64;
    Ok(SegMetrics { iou, dice })
}

/// Anomaly-size group boundaries (area fraction of the image).
pub const SIZE_GROUPS: [f64; 6] = [0.0, 0.02, 0.04, 0.06, 0.08, 0.13];

/// Index of the size group a sample falls into; sizes past the last boundary
/// clamp into the final group.
pub fn size_group(area_frac: f64) -> usize {
    for g in 0..SIZE_GROUPS.len() - 2 {
        if area_frac < SIZE_GROUPS[g + 1] {
            return g;
        }
    }
    SIZE_GROUPS.len() - 2
}

/// Evaluated variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// The backend's own thresholded mask (no optimization).
    Baseline,
    F2pad,
    InitOnly,
    NoPrior,
    NoSparsity,
    NoSharing,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::F2pad => "f2pad",
            Method::InitOnly => "init-only",
            Method::NoPrior => "no-prior",
            Method::NoSparsity => "no-sparsity",
            Method::NoSharing => "no-sharing",
        }
    }

    pub fn run_options(&self, init_mode: Option<InitMaskMode>) -> RunOptions {
        let mut opts = RunOptions { init_mode, ..Default::default() };
        match self {
            Method::Baseline | Method::F2pad => {}
            Method::InitOnly => opts.init_only = true,
            Method::NoPrior => opts.no_prior = true,
            Method::NoSparsity => opts.no_sparsity = true,
            Method::NoSharing => opts.no_sharing = true,
        }
        opts
    }
}

/// One labelled test case.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub image: Tensor,
    pub gt: AnomalyMask,
}

/// Per-sample metric row.
#[derive(Debug, Clone)]
pub struct SampleRow {
    pub name: String,
    pub area_frac: f64,
    pub metrics: Vec<(Method, SegMetrics)>,
    /// Final solve losses, for the optimizer-comparison reports.
    pub final_losses: Vec<(Method, f64)>,
}

/// Full suite output.
#[derive(Debug, Clone)]
pub struct SuiteOutput {
    pub methods: Vec<Method>,
    pub rows: Vec<SampleRow>,
    pub skipped: Vec<String>,
}

impl SuiteOutput {
    pub fn mean_metric(&self, method: Method) -> Option<SegMetrics> {
        let mut iou = 0.0;
        let mut dice = 0.0;
        let mut n = 0.0;
        for row in &self.rows {
            if let Some((_, m)) = row.metrics.iter().find(|(mm, _)| *mm == method) {
                iou += m.iou;
                dice += m.dice;
                n += 1.0;
            }
        }
        if n == 0.0 {
            None
        } else {
            Some(SegMetrics { iou: iou / n, dice: dice / n })
        }
    }

    /// Per-group mean IOU/DICE for one method, in group order; empty groups
    /// report NaN.
    pub fn group_means(&self, method: Method) -> Vec<SegMetrics> {
        let groups = SIZE_GROUPS.len() - 1;
        let mut acc = vec![(0.0, 0.0, 0.0); groups];
        for row in &self.rows {
            if let Some((_, m)) = row.metrics.iter().find(|(mm, _)| *mm == method) {
                let g = size_group(row.area_frac);
                acc[g].0 += m.iou;
                acc[g].1 += m.dice;
                acc[g].2 += 1.0;
            }
        }
        acc.into_iter()
            .map(|(i, d, n)| SegMetrics { iou: i / n, dice: d / n })
            .collect()
    }

    /// Tab-separated table: per-sample metrics with delta columns against
    /// the baseline, then group and overall means.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str("sample\tarea");
        for m in &self.methods {
            out.push_str(&format!("\t{0}_iou\t{0}_dice", m.label()));
            if *m != Method::Baseline {
                out.push_str(&format!("\t{0}_iou_delta\t{0}_dice_delta", m.label()));
            }
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{}\t{:.4}", row.name, row.area_frac));
            let base = row.metrics.iter().find(|(m, _)| *m == Method::Baseline).map(|(_, v)| *v);
            for m in &self.methods {
                if let Some((_, v)) = row.metrics.iter().find(|(mm, _)| mm == m) {
                    out.push_str(&format!("\t{:.2}\t{:.2}", v.iou, v.dice));
                    if *m != Method::Baseline {
                        if let Some(b) = base {
                            out.push_str(&format!("\t{:+.2}\t{:+.2}", v.iou - b.iou, v.dice - b.dice));
                        } else {
                            out.push_str("\t\t");
                        }
                    }
                }
            }
            out.push('\n');
        }
        let base_mean = self.mean_metric(Method::Baseline);
        for g in 0..SIZE_GROUPS.len() - 1 {
            out.push_str(&format!("group{}[{},{})", g + 1, SIZE_GROUPS[g], SIZE_GROUPS[g + 1]));
            out.push_str("\t");
            for m in &self.methods {
                let gm = self.group_means(*m)[g];
                out.push_str(&format!("\t{:.2}\t{:.2}", gm.iou, gm.dice));
                if *m != Method::Baseline {
                    out.push_str("\t\t");
                }
            }
            out.push('\n');
        }
        out.push_str("mean\t");
        for m in &self.methods {
            if let Some(v) = self.mean_metric(*m) {
                out.push_str(&format!("\t{:.2}\t{:.2}", v.iou, v.dice));
                if *m != Method::Baseline {
                    if let Some(b) = base_mean {
                        out.push_str(&format!("\t{:+.2}\t{:+.2}", v.iou - b.iou, v.dice - b.dice));
                    } else {
                        out.push_str("\t\t");
                    }
                }
            }
        }
        out.push('\n');
        out
    }
}

/// Fitted models the suite evaluates with.
pub struct SuiteModels<'a> {
    pub extractor: &'a Extractor,
    pub backend: &'a Backend,
    pub prior: Option<&'a MogPrior>,
}

/// Evaluate every method on every sample. The baseline mask is the
/// backend's thresholded score map; ground truth drives the max-F1 mode, so
/// the initial mask matches the original backbones' evaluation protocol.
pub fn evaluate_samples(
    samples: &[Sample],
    methods: &[Method],
    models: &SuiteModels,
    cfg: &F2PADConfig,
    init_mode: Option<InitMaskMode>,
) -> Result<SuiteOutput> {
    let rows: Result<Vec<SampleRow>> = samples
        .par_iter()
        .map(|sample| evaluate_one(sample, methods, models, cfg, init_mode))
        .collect();
    Ok(SuiteOutput { methods: methods.to_vec(), rows: rows?, skipped: Vec::new() })
}

fn evaluate_one(
    sample: &Sample,
    methods: &[Method],
    models: &SuiteModels,
    cfg: &F2PADConfig,
    init_mode: Option<InitMaskMode>,
) -> Result<SampleRow> {
    let area_frac =
        sample.gt.count() as f64 / (sample.gt.height() * sample.gt.width()) as f64;
    let mut metrics = Vec::with_capacity(methods.len());
    let mut final_losses = Vec::new();
    for method in methods {
        match method {
            Method::Baseline => {
                let stack = models.extractor.extract(&sample.image)?;
                let scores = models.backend.score_map(&stack)?;
                let px = crate::mask::bilinear_upsample(
                    &scores,
                    sample.image.shape()[0],
                    sample.image.shape()[1],
                )?;
                let mode = init_mode.unwrap_or(InitMaskMode::Percentile(cfg.percentile_q));
                let (m0, _) = initial_mask(&px, mode, Some(&sample.gt))?;
                metrics.push((*method, iou_dice(&m0, &sample.gt)?));
            }
            _ => {
                let opts = method.run_options(init_mode);
                let result = pipeline::run(
                    &sample.image,
                    models.extractor,
                    models.backend,
                    models.prior,
                    cfg,
                    &opts,
                    Some(&sample.gt),
                )?;
                metrics.push((*method, iou_dice(&result.mask, &sample.gt)?));
                if let Some(&loss) = result.diagnostics.loss_history.last() {
                    final_losses.push((*method, loss));
                }
            }
        }
    }
    Ok(SampleRow { name: sample.name.clone(), area_frac, metrics, final_losses })
}

/// Disk-backed suite: reads `manifest.tsv` plus `test/` and `test_gt/`
/// under `dataset_dir`, evaluates, writes `results.tsv` and per-sample
/// heatmap PNGs into `out_dir` when given. Missing sample files are skipped
/// and listed in the output.
pub fn run_suite(
    dataset_dir: &Path,
    methods: &[Method],
    models: &SuiteModels,
    cfg: &F2PADConfig,
    init_mode: Option<InitMaskMode>,
    out_dir: Option<&Path>,
) -> Result<SuiteOutput> {
    let manifest = dataset_dir.join("manifest.tsv");
    let text = std::fs::read_to_string(&manifest)
        .map_err(|e| Error::invalid("run_suite", format!("cannot read {}: {e}", manifest.display())))?;
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let name = line.split('\t').next().unwrap_or_default().to_string();
        if !line.starts_with("test") && !name.starts_with("test") {
            continue;
        }
        let img_path = dataset_dir.join("test").join(format!("{name}.png"));
        let gt_path = dataset_dir.join("test_gt").join(format!("{name}.png"));
        if !img_path.exists() || !gt_path.exists() {
            skipped.push(name);
            continue;
        }
        let image = imageio::load_image(&img_path)?;
        let gt = imageio::load_mask(&gt_path)?;
        samples.push(Sample { name, image, gt });
    }
    let mut output = evaluate_samples(&samples, methods, models, cfg, init_mode)?;
    output.skipped = skipped;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.tsv"), output.render_table())?;
        for sample in &samples {
            let stack = models.extractor.extract(&sample.image)?;
            let scores = models.backend.score_map(&stack)?;
            let px = crate::mask::bilinear_upsample(
                &scores,
                sample.image.shape()[0],
                sample.image.shape()[1],
            )?;
            imageio::save_heatmap(&dir.join(format!("{}_heatmap.png", sample.name)), &px)?;
        }
    }
    Ok(output)
}
