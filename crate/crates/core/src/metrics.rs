//! Explanation-quality metrics: edge-insertion curves, occlusion and
//! integrated-gradients attributions, infidelity, PQ sparsity, planted-edge
//! recall, plus the dataset-level goodness-of-fit measures (accuracy, macro
//! F1, R^2, Kendall tau).

use crate::error::{Error, Result};
use crate::explain::{top_percentile_subgraph, Explanation};
use crate::forward::GraphTrace;
use crate::model::{Model, Prediction, Target};
use crate::trainer::{derive_rng, Split};
use ndarray::{Array3, ArrayD};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// goodness-of-fit measures
// ---------------------------------------------------------------------------

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len());
    let n = target.len() as f64;
    let mean = target.iter().sum::<f64>() / n;
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    if ss_tot == 0.0 {
        if ss_res == 0.0 {
            return 1.0;
        }
        return f64::NEG_INFINITY;
    }
    1.0 - ss_res / ss_tot
}

/// Kendall tau-b: pair counting with tie correction.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut ties_a = 0i64;
    let mut ties_b = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            if da == 0.0 && db == 0.0 {
                ties_a += 1;
                ties_b += 1;
            } else if da == 0.0 {
                ties_a += 1;
            } else if db == 0.0 {
                ties_b += 1;
            } else if da * db > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let total = (n * (n - 1) / 2) as f64;
    let denom = ((total - ties_a as f64) * (total - ties_b as f64)).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (concordant - discordant) as f64 / denom
}

pub fn accuracy(pred: &[usize], target: &[usize]) -> f64 {
    assert_eq!(pred.len(), target.len());
    let hits = pred.iter().zip(target).filter(|(p, t)| p == t).count();
    hits as f64 / pred.len().max(1) as f64
}

/// Macro-averaged F1 over the classes present in the targets.
pub fn macro_f1(pred: &[usize], target: &[usize], num_classes: usize) -> f64 {
    let mut f1s = Vec::new();
    for c in 0..num_classes {
        let tp = pred.iter().zip(target).filter(|(p, t)| **p == c && **t == c).count() as f64;
        let fp = pred.iter().zip(target).filter(|(p, t)| **p == c && **t != c).count() as f64;
        let fn_ = pred.iter().zip(target).filter(|(p, t)| **p != c && **t == c).count() as f64;
        if tp + fp + fn_ == 0.0 {
            continue; // class absent everywhere: skip
        }
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        f1s.push(f1);
    }
    if f1s.is_empty() {
        return 0.0;
    }
    f1s.iter().sum::<f64>() / f1s.len() as f64
}

// ---------------------------------------------------------------------------
// insertion curves
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionOrder {
    Descending,
    Ascending,
}

/// Model performance as edges are inserted in importance order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InsertionCurve {
    pub fractions: Vec<f64>,
    pub scores: Vec<f64>,
    pub auc: f64,
}

fn trapezoid(fractions: &[f64], scores: &[f64]) -> f64 {
    let mut auc = 0.0;
    for i in 1..fractions.len() {
        auc += 0.5 * (scores[i] + scores[i - 1]) * (fractions[i] - fractions[i - 1]);
    }
    auc
}

/// Re-evaluate the model with bottleneck edge weights zeroed outside the top
/// `t`-fraction of edges (ranked by probability; `Ascending` inserts the
/// least important first). The score at each fraction is the dataset mean of
/// the true-class probability (classification) or R^2 (regression).
pub fn insertion_curve(
    model: &Model,
    split: &Split,
    order: InsertionOrder,
    steps: usize,
) -> Result<InsertionCurve> {
    if steps < 2 {
        return Err(Error::Config("insertion needs at least 2 steps".into()));
    }
    if split.is_empty() {
        return Err(Error::Data("insertion over an empty split".into()));
    }
    let fractions: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();

    // per image: one score per fraction
    let per_image: Vec<Result<Vec<f64>>> = split
        .samples
        .par_iter()
        .map(|sample| {
            let cache = model.embed(&sample.image)?;
            let ranked = rank_for_insertion(&cache.edges.src, &cache.edges.dst, &cache.p, order);
            let e = ranked.len();
            let mut scores = Vec::with_capacity(fractions.len());
            for &t in &fractions {
                let keep = ((t * e as f64).ceil() as usize).min(e);
                let mut mask = vec![0.0; e];
                for &edge_idx in ranked.iter().take(keep) {
                    mask[edge_idx] = 1.0;
                }
                let pred = model.predict_from_cache(&cache, Some(&mask))?;
                scores.push(prediction_score(&pred, &sample.target)?);
            }
            Ok(scores)
        })
        .collect();

    let mut collected = Vec::with_capacity(split.len());
    for r in per_image {
        collected.push(r?);
    }
    let scores: Vec<f64> = (0..fractions.len())
        .map(|i| match model.config.task {
            crate::config::TaskKind::Classification { .. } => {
                collected.iter().map(|s| s[i]).sum::<f64>() / collected.len() as f64
            }
            crate::config::TaskKind::Regression => {
                let preds: Vec<f64> = collected.iter().map(|s| s[i]).collect();
                let targets: Vec<f64> = split
                    .samples
                    .iter()
                    .map(|s| match s.target {
                        Target::Value(v) => v,
                        Target::Class(c) => c as f64,
                    })
                    .collect();
                r_squared(&preds, &targets)
            }
        })
        .collect();
    let auc = trapezoid(&fractions, &scores);
    Ok(InsertionCurve { fractions, scores, auc })
}

fn prediction_score(pred: &Prediction, target: &Target) -> Result<f64> {
    match (pred, target) {
        (Prediction::Classification { probabilities, .. }, Target::Class(c)) => probabilities
            .get(*c)
            .copied()
            .ok_or_else(|| Error::Data(format!("label {c} out of range"))),
        (Prediction::Regression { value }, _) => Ok(*value),
        (Prediction::Classification { .. }, Target::Value(_)) => {
            Err(Error::Data("value target for classification".into()))
        }
    }
}

/// Edge indices in insertion order: probability descending (or ascending),
/// ties by (src, dst) ascending.
fn rank_for_insertion(
    src: &[usize],
    dst: &[usize],
    p: &[f64],
    order: InsertionOrder,
) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| {
        let byp = match order {
            InsertionOrder::Descending => p[b].partial_cmp(&p[a]).unwrap(),
            InsertionOrder::Ascending => p[a].partial_cmp(&p[b]).unwrap(),
        };
        byp.then(src[a].cmp(&src[b])).then(dst[a].cmp(&dst[b]))
    });
    idx
}

// ---------------------------------------------------------------------------
// attribution methods
// ---------------------------------------------------------------------------

/// Scalar-score view of a model for attribution methods. `score` is the true
/// model response; `score_and_grad` is the differentiable path (for the
/// window-graph model the dynamically built graphs are frozen to the
/// attributed input).
pub trait AttributionModel: Sync {
    fn score(&self, image: &Array3<f64>) -> Result<f64>;
    fn score_and_grad(&self, image: &Array3<f64>) -> Result<(f64, Array3<f64>)>;
}

/// Attribution adapter for a trained model scored against one target.
pub struct ModelAttribution<'a> {
    model: &'a Model,
    target: Target,
    trace: GraphTrace,
}

impl<'a> ModelAttribution<'a> {
    pub fn new(model: &'a Model, image: &Array3<f64>, target: Target) -> Result<Self> {
        let trace = model.graph_trace(image)?;
        Ok(ModelAttribution { model, target, trace })
    }
}

impl AttributionModel for ModelAttribution<'_> {
    fn score(&self, image: &Array3<f64>) -> Result<f64> {
        self.model.score(image, &self.target)
    }

    fn score_and_grad(&self, image: &Array3<f64>) -> Result<(f64, Array3<f64>)> {
        self.model.score_and_input_grad(image, &self.target, Some(&self.trace))
    }
}

/// Occlusion: slide a `patch_px` square filled with `baseline_value` in
/// `stride_px` steps; each covered pixel accumulates the score drop divided
/// by how many windows cover it. All channels of a pixel carry its value.
pub fn occlusion_attribution(
    model: &dyn AttributionModel,
    image: &Array3<f64>,
    patch_px: usize,
    stride_px: usize,
    baseline_value: f64,
) -> Result<Array3<f64>> {
    let (h, w, c) = image.dim();
    if patch_px == 0 || patch_px > h || patch_px > w {
        return Err(Error::Config(format!("occlusion patch {patch_px} exceeds image")));
    }
    if stride_px == 0 {
        return Err(Error::Config("occlusion stride must be positive".into()));
    }
    if stride_px > patch_px {
        eprintln!(
            "warning: occlusion stride {stride_px} exceeds patch {patch_px}; \
             some pixels will receive no attribution"
        );
    }
    let base_score = model.score(image)?;
    let positions: Vec<(usize, usize)> = stride_positions(h, patch_px, stride_px)
        .into_iter()
        .flat_map(|r| {
            stride_positions(w, patch_px, stride_px).into_iter().map(move |cc| (r, cc))
        })
        .collect();

    let drops: Vec<Result<f64>> = positions
        .par_iter()
        .map(|&(r0, c0)| {
            let mut occluded = image.clone();
            for r in r0..(r0 + patch_px).min(h) {
                for cc in c0..(c0 + patch_px).min(w) {
                    for ch in 0..c {
                        occluded[(r, cc, ch)] = baseline_value;
                    }
                }
            }
            Ok(base_score - model.score(&occluded)?)
        })
        .collect();

    let mut attribution = Array3::<f64>::zeros((h, w, c));
    let mut cover = ndarray::Array2::<f64>::zeros((h, w));
    for (&(r0, c0), _) in positions.iter().zip(&drops) {
        for r in r0..(r0 + patch_px).min(h) {
            for cc in c0..(c0 + patch_px).min(w) {
                cover[(r, cc)] += 1.0;
            }
        }
    }
    for (&(r0, c0), drop) in positions.iter().zip(drops) {
        let drop = drop?;
        for r in r0..(r0 + patch_px).min(h) {
            for cc in c0..(c0 + patch_px).min(w) {
                let share = drop / cover[(r, cc)];
                for ch in 0..c {
                    attribution[(r, cc, ch)] += share;
                }
            }
        }
    }
    Ok(attribution)
}

fn stride_positions(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 0usize;
    loop {
        out.push(p);
        if p + patch >= extent {
            break;
        }
        p += stride;
        if p + patch > extent {
            out.push(extent - patch);
            break;
        }
    }
    out.dedup();
    out
}

/// Integrated gradients with a right Riemann sum:
/// `(x - x0) * mean_{s=1..steps} grad(x0 + (s/steps)(x - x0))`.
pub fn integrated_gradients(
    model: &dyn AttributionModel,
    image: &Array3<f64>,
    steps: usize,
    baseline: &Array3<f64>,
) -> Result<Array3<f64>> {
    if steps < 8 {
        return Err(Error::Config(format!("integrated gradients needs steps >= 8, got {steps}")));
    }
    if baseline.dim() != image.dim() {
        return Err(Error::Config("baseline shape must match image".into()));
    }
    let grads: Vec<Result<Array3<f64>>> = (1..=steps)
        .into_par_iter()
        .map(|s| {
            let t = s as f64 / steps as f64;
            let point = baseline + &((image - baseline) * t);
            Ok(model.score_and_grad(&point)?.1)
        })
        .collect();
    let mut mean = Array3::<f64>::zeros(image.dim());
    for g in grads {
        mean += &g?;
    }
    mean /= steps as f64;
    Ok((image - baseline) * &mean)
}

/// Perturbation family for the infidelity estimator.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    /// Replace a random `patch_px` square with a baseline value; the
    /// perturbation is the removed content.
    SquarePatch { patch_px: usize, baseline: f64 },
    /// Elementwise Gaussian noise of the given scale.
    Gaussian { sigma: f64 },
}

/// Monte-Carlo infidelity: `E[(I . attribution - (score(x) - score(x - I)))^2]`.
pub fn infidelity(
    model: &dyn AttributionModel,
    image: &Array3<f64>,
    attribution: &Array3<f64>,
    num_samples: usize,
    perturbation: &Perturbation,
    seed: u64,
) -> Result<f64> {
    if num_samples == 0 {
        return Err(Error::Config("infidelity needs at least one sample".into()));
    }
    if attribution.dim() != image.dim() {
        return Err(Error::Config("attribution shape must match image".into()));
    }
    let (h, w, c) = image.dim();
    let base_score = model.score(image)?;

    let draws: Vec<Result<f64>> = (0..num_samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = derive_rng(seed, &[0x696e_6669u64, k as u64]);
            let mut perturbed = image.clone();
            let mut dot = 0.0;
            match perturbation {
                Perturbation::SquarePatch { patch_px, baseline } => {
                    let p = (*patch_px).min(h).min(w);
                    let r0 = rng.gen_range(0..=h - p);
                    let c0 = rng.gen_range(0..=w - p);
                    for r in r0..r0 + p {
                        for cc in c0..c0 + p {
                            for ch in 0..c {
                                let i_val = image[(r, cc, ch)] - baseline;
                                dot += i_val * attribution[(r, cc, ch)];
                                perturbed[(r, cc, ch)] = *baseline;
                            }
                        }
                    }
                }
                Perturbation::Gaussian { sigma } => {
                    use rand_distr::{Distribution, Normal};
                    let normal = Normal::new(0.0, *sigma)
                        .map_err(|e| Error::Config(format!("bad sigma: {e}")))?;
                    for r in 0..h {
                        for cc in 0..w {
                            for ch in 0..c {
                                let i_val: f64 = normal.sample(&mut rng);
                                dot += i_val * attribution[(r, cc, ch)];
                                perturbed[(r, cc, ch)] = image[(r, cc, ch)] - i_val;
                            }
                        }
                    }
                }
            }
            let delta = base_score - model.score(&perturbed)?;
            Ok((dot - delta) * (dot - delta))
        })
        .collect();

    let mut sum = 0.0;
    for d in draws {
        sum += d?;
    }
    Ok(sum / num_samples as f64)
}

/// PQ sparsity index `1 - d^(1/q - 1/p) * |w|_p / |w|_q` over the flattened
/// absolute attribution: 0 for uniform vectors, approaching 1 with
/// concentration.
pub fn pq_sparsity(attribution: &ArrayD<f64>, p: f64, q: f64) -> Result<f64> {
    if !(0.0 < p && p < q) {
        return Err(Error::Config(format!("pq_sparsity needs 0 < p < q, got p={p} q={q}")));
    }
    let d = attribution.len();
    if d == 0 {
        return Err(Error::Config("empty attribution".into()));
    }
    let norm = |order: f64| -> f64 {
        attribution
            .iter()
            .map(|v| v.abs().powf(order))
            .sum::<f64>()
            .powf(1.0 / order)
    };
    let np = norm(p);
    let nq = norm(q);
    if nq == 0.0 {
        return Err(Error::Numeric("pq_sparsity of an all-zero attribution".into()));
    }
    Ok(1.0 - (d as f64).powf(1.0 / q - 1.0 / p) * np / nq)
}

// ---------------------------------------------------------------------------
// planted-edge recall
// ---------------------------------------------------------------------------

/// 1 iff the top-percentile subgraph contains an edge between the two
/// ground-truth nodes, in either direction.
pub fn planted_edge_recall(expl: &Explanation, truth: (usize, usize), percentile: f64) -> Result<bool> {
    let sub = top_percentile_subgraph(expl, percentile)?;
    let hit = sub
        .edges
        .iter()
        .any(|(s, d)| (s, d) == truth || (d, s) == truth);
    Ok(hit)
}

/// Exact probability that a uniformly random size-`keep` edge subset contains
/// at least one of `pair_edges` designated edges out of `num_edges`.
pub fn random_inclusion_baseline(num_edges: usize, keep: usize, pair_edges: usize) -> f64 {
    if pair_edges == 0 || keep == 0 {
        return 0.0;
    }
    // 1 - C(E - m, k) / C(E, k), computed as a product to stay exact in f64
    let mut ratio = 1.0f64;
    for i in 0..keep {
        let avail = num_edges - pair_edges;
        if avail < keep {
            return 1.0;
        }
        ratio *= (avail - i) as f64 / (num_edges - i) as f64;
    }
    1.0 - ratio
}

// ---------------------------------------------------------------------------
// dataset-level report
// ---------------------------------------------------------------------------

/// Knobs of the metric computation, recorded in the report metadata because
/// the perturbation/attribution defaults are implementation decisions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsOptions {
    pub percentile: f64,
    pub insertion_steps: usize,
    pub ig_steps: usize,
    pub infidelity_samples: usize,
    pub infidelity_perturbation: Perturbation,
    pub occlusion_patch_px: usize,
    pub occlusion_stride_px: usize,
    pub occlusion_baseline: f64,
    pub seed: u64,
    /// Cap on the number of images used for attribution-based metrics
    /// (insertion always uses the full split).
    pub attribution_limit: Option<usize>,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        MetricsOptions {
            percentile: 5.0,
            insertion_steps: 20,
            ig_steps: 32,
            infidelity_samples: 32,
            infidelity_perturbation: Perturbation::SquarePatch { patch_px: 16, baseline: 0.0 },
            occlusion_patch_px: 17,
            occlusion_stride_px: 8,
            occlusion_baseline: 0.0,
            seed: 0,
            attribution_limit: None,
        }
    }
}

/// Dataset-level explanation-quality report for one attribution method.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub insertion_desc: InsertionCurve,
    pub insertion_asc: InsertionCurve,
    /// Mean infidelity over the evaluated images.
    pub infidelity: f64,
    /// Mean PQ sparsity over the evaluated images.
    pub pq_sparsity: f64,
    /// Fraction of images whose top-percentile subgraph contains the planted
    /// edge; absent without ground truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planted_recall: Option<f64>,
    pub attribution: String,
    pub options: MetricsOptions,
}

/// Per-image rows of the CSV report.
#[derive(Clone, Debug, Serialize)]
pub struct PerImageMetrics {
    pub image_id: String,
    pub label: String,
    pub predicted: String,
    pub score: f64,
    pub infidelity_ig: Option<f64>,
    pub infidelity_occlusion: Option<f64>,
    pub pq_ig: Option<f64>,
    pub pq_occlusion: Option<f64>,
    pub planted_hit: Option<bool>,
}

pub struct MetricsBundle {
    pub ig: MetricsReport,
    pub occlusion: MetricsReport,
    pub rows: Vec<PerImageMetrics>,
}

fn target_string(t: &Target) -> String {
    match t {
        Target::Class(c) => c.to_string(),
        Target::Value(v) => format!("{v:.6}"),
    }
}

fn prediction_string(p: &Prediction) -> String {
    match p {
        Prediction::Classification { class, .. } => class.to_string(),
        Prediction::Regression { value } => format!("{value:.6}"),
    }
}

/// Full explanation-quality evaluation of a model over a split.
pub fn compute_metrics(model: &Model, split: &Split, opts: &MetricsOptions) -> Result<MetricsBundle> {
    let insertion_desc = insertion_curve(model, split, InsertionOrder::Descending, opts.insertion_steps)?;
    let insertion_asc = insertion_curve(model, split, InsertionOrder::Ascending, opts.insertion_steps)?;

    let limit = opts.attribution_limit.unwrap_or(split.len()).min(split.len());
    let zeros = Array3::<f64>::zeros(
        split.samples.first().map(|s| s.image.dim()).unwrap_or((1, 1, 3)),
    );

    let rows: Vec<Result<PerImageMetrics>> = split.samples[..limit]
        .par_iter()
        .enumerate()
        .map(|(i, sample)| -> Result<PerImageMetrics> {
            let (pred, expl) = model.predict_with_explanation(&sample.image, &sample.id)?;
            let score = prediction_score(&pred, &sample.target)?;
            let attr_model = ModelAttribution::new(model, &sample.image, sample.target)?;

            let ig = integrated_gradients(&attr_model, &sample.image, opts.ig_steps, &zeros)?;
            let occ = occlusion_attribution(
                &attr_model,
                &sample.image,
                opts.occlusion_patch_px,
                opts.occlusion_stride_px,
                opts.occlusion_baseline,
            )?;
            let inf_ig = infidelity(
                &attr_model,
                &sample.image,
                &ig,
                opts.infidelity_samples,
                &opts.infidelity_perturbation,
                derive_seed(opts.seed, i as u64),
            )?;
            let inf_occ = infidelity(
                &attr_model,
                &sample.image,
                &occ,
                opts.infidelity_samples,
                &opts.infidelity_perturbation,
                derive_seed(opts.seed, i as u64),
            )?;
            let pq_ig = pq_sparsity(&ig.into_dyn(), 1.0, 2.0)?;
            let pq_occ = pq_sparsity(&occ.into_dyn(), 1.0, 2.0)?;
            let planted = match sample.marker_nodes {
                Some(truth) => Some(planted_edge_recall(&expl, truth, opts.percentile)?),
                None => None,
            };
            Ok(PerImageMetrics {
                image_id: sample.id.clone(),
                label: target_string(&sample.target),
                predicted: prediction_string(&pred),
                score,
                infidelity_ig: Some(inf_ig),
                infidelity_occlusion: Some(inf_occ),
                pq_ig: Some(pq_ig),
                pq_occlusion: Some(pq_occ),
                planted_hit: planted,
            })
        })
        .collect();
    let mut rows_ok = Vec::with_capacity(rows.len());
    for r in rows {
        rows_ok.push(r?);
    }
    // recall over the remaining images (cheap: one forward each)
    let extra: Vec<Result<PerImageMetrics>> = split.samples[limit..]
        .par_iter()
        .map(|sample| -> Result<PerImageMetrics> {
            let (pred, expl) = model.predict_with_explanation(&sample.image, &sample.id)?;
            let score = prediction_score(&pred, &sample.target)?;
            let planted = match sample.marker_nodes {
                Some(truth) => Some(planted_edge_recall(&expl, truth, opts.percentile)?),
                None => None,
            };
            Ok(PerImageMetrics {
                image_id: sample.id.clone(),
                label: target_string(&sample.target),
                predicted: prediction_string(&pred),
                score,
                infidelity_ig: None,
                infidelity_occlusion: None,
                pq_ig: None,
                pq_occlusion: None,
                planted_hit: planted,
            })
        })
        .collect();
    for r in extra {
        rows_ok.push(r?);
    }

    let mean = |sel: &dyn Fn(&PerImageMetrics) -> Option<f64>| -> f64 {
        let vals: Vec<f64> = rows_ok.iter().filter_map(|r| sel(r)).collect();
        if vals.is_empty() {
            return f64::NAN;
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let recall_vals: Vec<f64> = rows_ok
        .iter()
        .filter_map(|r| r.planted_hit.map(|h| h as u8 as f64))
        .collect();
    let planted_recall = if recall_vals.is_empty() {
        None
    } else {
        Some(recall_vals.iter().sum::<f64>() / recall_vals.len() as f64)
    };

    let make = |name: &str, infidelity: f64, pq: f64| MetricsReport {
        insertion_desc: insertion_desc.clone(),
        insertion_asc: insertion_asc.clone(),
        infidelity,
        pq_sparsity: pq,
        planted_recall,
        attribution: name.to_string(),
        options: opts.clone(),
    };
    Ok(MetricsBundle {
        ig: make("integrated_gradients", mean(&|r| r.infidelity_ig), mean(&|r| r.pq_ig)),
        occlusion: make(
            "occlusion",
            mean(&|r| r.infidelity_occlusion),
            mean(&|r| r.pq_occlusion),
        ),
        rows: rows_ok,
    })
}

fn derive_seed(seed: u64, image_index: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(image_index)
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6e}")).unwrap_or_default()
}

/// CSV form: one row per image plus a summary row.
pub fn bundle_to_csv(bundle: &MetricsBundle) -> String {
    let mut out = String::from(
        "image_id,label,predicted,score,infidelity_ig,infidelity_occlusion,pq_ig,pq_occlusion,planted_hit\n",
    );
    for r in &bundle.rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{},{},{},{},{}\n",
            r.image_id,
            r.label,
            r.predicted,
            r.score,
            opt_f64(r.infidelity_ig),
            opt_f64(r.infidelity_occlusion),
            opt_f64(r.pq_ig),
            opt_f64(r.pq_occlusion),
            r.planted_hit.map(|h| (h as u8).to_string()).unwrap_or_default(),
        ));
    }
    out.push_str(&format!(
        "summary,,,{:.6},{},{},{},{},{}\n",
        bundle.rows.iter().map(|r| r.score).sum::<f64>() / bundle.rows.len().max(1) as f64,
        opt_f64(Some(bundle.ig.infidelity)),
        opt_f64(Some(bundle.occlusion.infidelity)),
        opt_f64(Some(bundle.ig.pq_sparsity)),
        opt_f64(Some(bundle.occlusion.pq_sparsity)),
        bundle
            .ig
            .planted_recall
            .map(|r| format!("{r:.6}"))
            .unwrap_or_default(),
    ));
    out
}

/// Render both insertion curves (descending blue, ascending orange) to a PNG.
pub fn render_insertion_plot(
    desc: &InsertionCurve,
    asc: &InsertionCurve,
    path: &std::path::Path,
) -> Result<()> {
    let to_points = |c: &InsertionCurve| -> Vec<(f64, f64)> {
        c.fractions.iter().zip(&c.scores).map(|(&f, &s)| (f, s.clamp(0.0, 1.0))).collect()
    };
    let d = to_points(desc);
    let a = to_points(asc);
    let img = crate::render::line_plot(
        &[(&d, [40, 90, 220]), (&a, [235, 140, 30])],
        640,
        480,
    );
    img.save_with_format(path, image::ImageFormat::Png).map_err(Error::Image)?;
    Ok(())
}
