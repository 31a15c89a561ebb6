//! Window partitions and k-nearest-neighbor graph construction over node
//! feature grids.
//!
//! Edges point neighbor -> center: an edge `(j -> i)` means node `j` is
//! aggregated into node `i`. Edge lists are emitted grouped by destination
//! node in ascending order, neighbors ordered by (squared distance, source
//! index); identical inputs therefore always produce identical edge lists.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

/// Axis-aligned half-open pixel rectangle `[r0, r1) x [c0, c1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl PixelRect {
    pub fn new(r0: usize, c0: usize, r1: usize, c1: usize) -> Self {
        PixelRect { r0, c0, r1, c1 }
    }

    pub fn area(&self) -> usize {
        (self.r1 - self.r0) * (self.c1 - self.c0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.r0 + self.r1) as f64 / 2.0,
            (self.c0 + self.c1) as f64 / 2.0,
        )
    }

    pub fn contains(&self, other: &PixelRect) -> bool {
        self.r0 <= other.r0 && self.c0 <= other.c0 && self.r1 >= other.r1 && self.c1 >= other.c1
    }
}

/// A 2-D grid of node feature vectors with an exact node -> pixel-rectangle
/// mapping. Node `(r, c)` is row `r * width + c` of `features`.
#[derive(Clone, Debug)]
pub struct NodeGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// `(height * width, dim)`, row-major over grid rows.
    pub features: Array2<f64>,
    /// One rectangle per node; rectangles tile the source image.
    pub patch_px: Vec<PixelRect>,
}

impl NodeGrid {
    pub fn new(height: usize, width: usize, features: Array2<f64>, patch_px: Vec<PixelRect>) -> Self {
        assert_eq!(features.nrows(), height * width, "features/grid mismatch");
        assert_eq!(patch_px.len(), height * width, "patch_px/grid mismatch");
        let dim = features.ncols();
        NodeGrid { height, width, dim, features, patch_px }
    }

    pub fn num_nodes(&self) -> usize {
        self.height * self.width
    }

    pub fn node_index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }
}

/// Directed edges over node indices with optional per-edge weights.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct EdgeList {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub weight: Option<Vec<f64>>,
}

impl EdgeList {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.src.iter().copied().zip(self.dst.iter().copied())
    }

    /// Checks index bounds, absence of self-loops and of duplicate pairs.
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        if self.src.len() != self.dst.len() {
            return Err(Error::Config("edge list: src/dst length mismatch".into()));
        }
        if let Some(w) = &self.weight {
            if w.len() != self.src.len() {
                return Err(Error::Config("edge list: weight length mismatch".into()));
            }
        }
        let mut seen = std::collections::HashSet::with_capacity(self.len());
        for (s, d) in self.iter() {
            if s >= num_nodes || d >= num_nodes {
                return Err(Error::Config(format!(
                    "edge ({s} -> {d}) out of bounds for {num_nodes} nodes"
                )));
            }
            if s == d {
                return Err(Error::Config(format!("self-loop at node {s}")));
            }
            if !seen.insert((s, d)) {
                return Err(Error::Config(format!("duplicate edge ({s} -> {d})")));
            }
        }
        Ok(())
    }
}

/// Disjoint cover of a grid by contiguous square windows of `window_side`
/// nodes per edge, in row-major window order; nodes within a window are in
/// row-major grid order.
#[derive(Clone, Debug)]
pub struct WindowPartition {
    pub window_side: usize,
    pub windows: Vec<Vec<usize>>,
}

/// Split a grid into non-overlapping `window_side x window_side` node blocks.
pub fn partition_windows(grid: &NodeGrid, window_side: usize) -> Result<WindowPartition> {
    partition_windows_dims(grid.height, grid.width, window_side)
}

/// As [`partition_windows`] for a grid given by its dimensions alone.
pub fn partition_windows_dims(
    height: usize,
    width: usize,
    window_side: usize,
) -> Result<WindowPartition> {
    if window_side == 0 {
        return Err(Error::Config("window_side must be positive".into()));
    }
    if height % window_side != 0 {
        return Err(Error::Config(format!(
            "grid height {height} not divisible by window_side {window_side}"
        )));
    }
    if width % window_side != 0 {
        return Err(Error::Config(format!(
            "grid width {width} not divisible by window_side {window_side}"
        )));
    }
    let wh = height / window_side;
    let ww = width / window_side;
    let mut windows = Vec::with_capacity(wh * ww);
    for wr in 0..wh {
        for wc in 0..ww {
            let mut nodes = Vec::with_capacity(window_side * window_side);
            for r in 0..window_side {
                for c in 0..window_side {
                    nodes.push((wr * window_side + r) * width + (wc * window_side + c));
                }
            }
            windows.push(nodes);
        }
    }
    Ok(WindowPartition { window_side, windows })
}

fn check_finite(features: &ArrayView2<f64>) -> Result<()> {
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite node features in k-NN input".into()));
    }
    Ok(())
}

/// For each node `i`, add edges `(j -> i)` from the `min(k, N-1)` nodes with
/// smallest squared Euclidean distance to `i`; ties break on smaller index.
pub fn knn_edges(features: &ArrayView2<f64>, k: usize) -> Result<EdgeList> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::Config(format!("k-NN needs at least 2 nodes, got {n}")));
    }
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    check_finite(features)?;
    let k = k.min(n - 1);
    let mut src = Vec::with_capacity(n * k);
    let mut dst = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        let xi = features.row(i);
        for j in 0..n {
            if j == i {
                continue;
            }
            let xj = features.row(j);
            let mut d = 0.0;
            for (a, b) in xi.iter().zip(xj.iter()) {
                let t = a - b;
                d += t * t;
            }
            cand.push((d, j));
        }
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, j) in cand.iter().take(k) {
            src.push(j);
            dst.push(i);
        }
    }
    Ok(EdgeList { src, dst, weight: None })
}

/// k-NN computed independently inside each window, indices mapped back to the
/// grid; no edge crosses a window boundary.
pub fn windowed_knn(grid: &NodeGrid, partition: &WindowPartition, k: usize) -> Result<EdgeList> {
    windowed_knn_features(&grid.features.view(), partition, k)
}

/// As [`windowed_knn`] but over a bare feature matrix (the grid shape is
/// implied by the partition).
pub fn windowed_knn_features(
    features: &ArrayView2<f64>,
    partition: &WindowPartition,
    k: usize,
) -> Result<EdgeList> {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for window in &partition.windows {
        let mut local = Array2::<f64>::zeros((window.len(), features.ncols()));
        for (li, &gi) in window.iter().enumerate() {
            local.row_mut(li).assign(&features.row(gi));
        }
        let edges = knn_edges(&local.view(), k)?;
        for (s, d) in edges.iter() {
            src.push(window[s]);
            dst.push(window[d]);
        }
    }
    Ok(EdgeList { src, dst, weight: None })
}

/// Global k-NN over final-stage node embeddings (one node per window region).
pub fn global_knn(embeddings: &ArrayView2<f64>, k: usize) -> Result<EdgeList> {
    knn_edges(embeddings, k)
}
