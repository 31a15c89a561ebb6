//! Inherent explanation artifacts: ranked edges, top-percentile subgraphs,
//! canonical JSON export, and image overlays.

use crate::error::{Error, Result};
use crate::graph::{EdgeList, PixelRect};
use crate::model::Prediction;
use serde_json::{json, Map, Value};
use std::path::Path;

/// One explanation node: a final-stage grid position and its pixel rectangle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExplanationNode {
    pub id: usize,
    pub row: usize,
    pub col: usize,
    pub px_rect: PixelRect,
}

/// Ranked-edge explanation for one image: the bottleneck edge probabilities
/// over the final-stage window graph plus the node -> pixel mapping.
#[derive(Clone, Debug)]
pub struct Explanation {
    pub image_id: String,
    pub prediction: Prediction,
    pub nodes: Vec<ExplanationNode>,
    /// Directed edges; `weight` holds the edge probabilities.
    pub edges: EdgeList,
}

impl Explanation {
    pub fn new(
        image_id: String,
        prediction: Prediction,
        patches: Vec<PixelRect>,
        grid_side: usize,
        edges: EdgeList,
    ) -> Result<Self> {
        let weights = edges
            .weight
            .as_ref()
            .ok_or_else(|| Error::Config("explanation edges need probabilities".into()))?;
        if weights.iter().any(|&w| !(0.0 < w && w < 1.0)) {
            return Err(Error::Numeric("edge probabilities must lie in (0, 1)".into()));
        }
        edges.validate(patches.len())?;
        let nodes = patches
            .into_iter()
            .enumerate()
            .map(|(id, px_rect)| ExplanationNode {
                id,
                row: id / grid_side,
                col: id % grid_side,
                px_rect,
            })
            .collect();
        Ok(Explanation { image_id, prediction, nodes, edges })
    }

    pub fn probabilities(&self) -> &[f64] {
        self.edges.weight.as_deref().unwrap_or(&[])
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
}

/// Edges sorted by probability descending, ties by `(src, dst)` ascending.
/// Returns `(src, dst, p)` triples; stable and deterministic.
pub fn rank_edges(expl: &Explanation) -> Vec<(usize, usize, f64)> {
    let p = expl.probabilities();
    let mut order: Vec<usize> = (0..expl.edges.len()).collect();
    order.sort_by(|&a, &b| {
        p[b].partial_cmp(&p[a])
            .unwrap()
            .then(expl.edges.src[a].cmp(&expl.edges.src[b]))
            .then(expl.edges.dst[a].cmp(&expl.edges.dst[b]))
    });
    order
        .into_iter()
        .map(|e| (expl.edges.src[e], expl.edges.dst[e], p[e]))
        .collect()
}

/// Keep the `ceil(|E| * percentile / 100)` highest-ranked edges; nodes are
/// restricted to the retained edge endpoints.
pub fn top_percentile_subgraph(expl: &Explanation, percentile: f64) -> Result<Explanation> {
    if expl.edges.is_empty() {
        return Err(Error::Config("cannot take a percentile of an empty explanation".into()));
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::Config(format!("percentile {percentile} outside (0, 100]")));
    }
    let keep = ((expl.edges.len() as f64) * percentile / 100.0).ceil() as usize;
    let keep = keep.max(1).min(expl.edges.len());
    let ranked = rank_edges(expl);
    let mut src = Vec::with_capacity(keep);
    let mut dst = Vec::with_capacity(keep);
    let mut weight = Vec::with_capacity(keep);
    for &(s, d, p) in ranked.iter().take(keep) {
        src.push(s);
        dst.push(d);
        weight.push(p);
    }
    let endpoint = |id: usize| src.contains(&id) || dst.contains(&id);
    let nodes: Vec<ExplanationNode> =
        expl.nodes.iter().filter(|n| endpoint(n.id)).cloned().collect();
    Ok(Explanation {
        image_id: expl.image_id.clone(),
        prediction: expl.prediction.clone(),
        nodes,
        edges: EdgeList { src, dst, weight: Some(weight) },
    })
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn prediction_value(pred: &Prediction) -> Value {
    match pred {
        Prediction::Classification { logits, probabilities, class } => json!({
            "task": "classification",
            "logits": logits.iter().map(|&v| round6(v)).collect::<Vec<f64>>(),
            "probabilities": probabilities.iter().map(|&v| round6(v)).collect::<Vec<f64>>(),
            "class": class,
        }),
        Prediction::Regression { value } => json!({
            "task": "regression",
            "value": round6(*value),
        }),
    }
}

/// Canonical JSON form: sorted keys (serde_json maps are ordered), floats
/// rounded to 6 decimals. Write -> read -> write is byte-identical.
pub fn explanation_to_json(expl: &Explanation) -> Value {
    let nodes: Vec<Value> = expl
        .nodes
        .iter()
        .map(|n| {
            json!({
                "id": n.id,
                "row": n.row,
                "col": n.col,
                "px_rect": [n.px_rect.r0, n.px_rect.c0, n.px_rect.r1, n.px_rect.c1],
            })
        })
        .collect();
    let p = expl.probabilities();
    let edges: Vec<Value> = expl
        .edges
        .iter()
        .enumerate()
        .map(|(e, (s, d))| {
            json!({
                "src": s,
                "dst": d,
                "p": round6(p[e]),
            })
        })
        .collect();
    let mut root = Map::new();
    root.insert("image_id".into(), json!(expl.image_id));
    root.insert("prediction".into(), prediction_value(&expl.prediction));
    root.insert("nodes".into(), Value::Array(nodes));
    root.insert("edges".into(), Value::Array(edges));
    Value::Object(root)
}

pub fn export_json(expl: &Explanation, path: &Path) -> Result<()> {
    let value = explanation_to_json(expl);
    let mut bytes = serde_json::to_vec_pretty(&value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Parse an exported explanation back into `(image_id, edges)` triples.
/// Used by tooling that re-ranks or validates exports.
pub fn import_json(path: &Path) -> Result<Value> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Draw the explanation over the image: one line per directed node pair
/// (probability = max of the two directions), opacity scaled by normalized
/// probability, plus node markers at patch centers. Writes a PNG.
pub fn render_overlay(
    image: &ndarray::Array3<f64>,
    expl: &Explanation,
    path: &Path,
) -> Result<()> {
    let (h, w, _) = image.dim();
    let max_r = expl.nodes.iter().map(|n| n.px_rect.r1).max().unwrap_or(0);
    let max_c = expl.nodes.iter().map(|n| n.px_rect.c1).max().unwrap_or(0);
    if max_r > h || max_c > w {
        return Err(Error::Config(format!(
            "explanation patches extend to {max_r}x{max_c}, image is {h}x{w}"
        )));
    }
    let mut canvas = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let px = [
                (image[(r, c, 0)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[(r, c, 1)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[(r, c, 2)].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            canvas.put_pixel(c as u32, r as u32, image::Rgb(px));
        }
    }

    let center = |id: usize| -> Result<(f64, f64)> {
        expl.nodes
            .iter()
            .find(|n| n.id == id)
            .map(|n| n.px_rect.center())
            .ok_or_else(|| Error::Config(format!("edge endpoint {id} missing from nodes")))
    };

    // collapse directed pairs: keep max probability per unordered pair
    let p = expl.probabilities();
    let mut pairs: std::collections::BTreeMap<(usize, usize), f64> = std::collections::BTreeMap::new();
    for (e, (s, d)) in expl.edges.iter().enumerate() {
        let key = (s.min(d), s.max(d));
        let entry = pairs.entry(key).or_insert(f64::NEG_INFINITY);
        if p[e] > *entry {
            *entry = p[e];
        }
    }
    let (pmin, pmax) = pairs
        .values()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (pmax - pmin).max(1e-12);

    let line_color = [255u8, 220, 40];
    for (&(a, b), &pv) in &pairs {
        let alpha = if pairs.len() == 1 { 1.0 } else { 0.25 + 0.75 * (pv - pmin) / span };
        let (r0, c0) = center(a)?;
        let (r1, c1) = center(b)?;
        crate::render::draw_line(&mut canvas, (r0, c0), (r1, c1), line_color, alpha);
    }
    let marker_color = [40u8, 200, 255];
    for n in &expl.nodes {
        let (r, c) = n.px_rect.center();
        crate::render::draw_disc(&mut canvas, (r, c), 2.5, marker_color);
    }
    canvas
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(Error::Image)?;
    Ok(())
}
