//! Hierarchical window-local backbone: non-overlapping stem, grapher stages
//! with window-confined max-relative graph convolution, and kernel-2/stride-2
//! downsampling.
//!
//! All spatial mixing before the bottleneck happens either inside a 2x2
//! pixel/node block (stem, downsample) or inside one window (grapher blocks),
//! so the receptive field of every final-stage node stays confined to the
//! pixel block of its enclosing last-stage window.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::forward::ForwardCtx;
use crate::graph::{partition_windows_dims, windowed_knn_features, EdgeList, PixelRect};
use crate::params::ParamBuilder;
use crate::tensor::{Tape, Var};
use ndarray::Ix2;

/// Pixel rectangles of a `side x side` node grid over patches of `px` pixels.
pub fn grid_patches(side: usize, px: usize) -> Vec<PixelRect> {
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            out.push(PixelRect::new(r * px, c * px, (r + 1) * px, (c + 1) * px));
        }
    }
    out
}

pub fn register_stem(b: &mut ParamBuilder, dim: usize) {
    b.linear("stem.conv1", 12, dim);
    b.batchnorm("stem.bn1", dim);
    b.linear("stem.conv2", 4 * dim, dim);
    b.batchnorm("stem.bn2", dim);
}

pub fn register_grapher_block(b: &mut ParamBuilder, prefix: &str, dim: usize, ffn_ratio: usize) {
    b.linear(&format!("{prefix}.lin_in"), dim, dim);
    b.batchnorm(&format!("{prefix}.bn_in"), dim);
    b.linear(&format!("{prefix}.proj"), 2 * dim, dim);
    b.batchnorm(&format!("{prefix}.bn_proj"), dim);
    b.linear(&format!("{prefix}.lin_out"), dim, dim);
    b.batchnorm(&format!("{prefix}.bn_out"), dim);
    register_ffn(b, prefix, dim, ffn_ratio);
}

/// Feed-forward sublayer: expand by `ffn_ratio`, contract back.
pub fn register_ffn(b: &mut ParamBuilder, prefix: &str, dim: usize, ffn_ratio: usize) {
    b.linear(&format!("{prefix}.ffn1"), dim, ffn_ratio * dim);
    b.batchnorm(&format!("{prefix}.bn_ffn1"), ffn_ratio * dim);
    b.linear(&format!("{prefix}.ffn2"), ffn_ratio * dim, dim);
    b.batchnorm(&format!("{prefix}.bn_ffn2"), dim);
}

pub fn register_downsample(b: &mut ParamBuilder, idx: usize, dim_in: usize, dim_out: usize) {
    b.linear(&format!("ds{idx}.conv"), 4 * dim_in, dim_out);
    b.batchnorm(&format!("ds{idx}.bn"), dim_out);
}

pub fn register_backbone(b: &mut ParamBuilder, cfg: &ModelConfig) {
    register_stem(b, cfg.stage_dims[0]);
    for stage in 0..3 {
        for block in 0..cfg.blocks_per_stage[stage] {
            register_grapher_block(
                b,
                &format!("s{}.b{}", stage + 1, block),
                cfg.stage_dims[stage],
                cfg.ffn_ratio,
            );
        }
        register_downsample(b, stage + 1, cfg.stage_dims[stage], cfg.stage_dims[stage + 1]);
    }
}

/// Two kernel-2/stride-2 convolutions (each: conv, norm, GELU) mapping
/// vertically stacked images `(B * S, S, 3)` to a `(B * S/4 * S/4, dim)`
/// node matrix in image-major row order. Patches never overlap: each node
/// sees exactly one 4x4 pixel block of its image.
pub fn stem(ctx: &ForwardCtx, image: Var, dim: usize) -> Var {
    let t = ctx.tape;
    let shape = t.shape(image);
    let (rows, cols, c) = (shape[0], shape[1], shape[2]);

    let d1 = t.space_to_depth(image);
    let d1 = t.reshape(d1, &[(rows / 2) * (cols / 2), 4 * c]);
    let h1 = ctx.batchnorm(ctx.linear(d1, "stem.conv1"), "stem.bn1");
    let h1 = t.gelu(h1);

    let h1 = t.reshape(h1, &[rows / 2, cols / 2, dim]);
    let d2 = t.space_to_depth(h1);
    let d2 = t.reshape(d2, &[(rows / 4) * (cols / 4), 4 * dim]);
    let h2 = ctx.batchnorm(ctx.linear(d2, "stem.conv2"), "stem.bn2");
    t.gelu(h2)
}

/// Window-local k-NN across a batch of stacked per-image node grids:
/// per-image edges with node indices offset by the image's first row.
pub fn batched_windowed_knn(
    features: &ndarray::ArrayView2<f64>,
    batch: usize,
    height: usize,
    width: usize,
    window_side: usize,
    k: usize,
) -> Result<EdgeList> {
    let n = height * width;
    assert_eq!(features.nrows(), batch * n, "batched features shape");
    let partition = partition_windows_dims(height, width, window_side)?;
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for b in 0..batch {
        let slice = features.slice(ndarray::s![b * n..(b + 1) * n, ..]);
        let e = windowed_knn_features(&slice, &partition, k)?;
        src.extend(e.src.iter().map(|&s| s + b * n));
        dst.extend(e.dst.iter().map(|&d| d + b * n));
    }
    Ok(EdgeList { src, dst, weight: None })
}

/// Max-relative graph convolution:
/// `out_i = W_proj . concat(x_i, max over j in N(i) of (x_j - x_i)) + b`.
/// An empty neighborhood contributes a zero relative part.
pub fn max_relative_conv(tape: &Tape, x: Var, edges: &EdgeList, w: Var, b: Var) -> Var {
    let rel = tape.max_relative(x, &edges.src, &edges.dst);
    let cat = tape.concat_cols(x, rel);
    tape.add_bias(tape.matmul(cat, w), b)
}

/// One grapher block: recompute the window-local k-NN graph from the current
/// features, then linear-in, max-relative graph conv, linear-out with a
/// residual, then an FFN with its own residual. `batch` images are processed
/// as one disjoint graph with per-image node offsets.
pub fn grapher_block(
    ctx: &ForwardCtx,
    x: Var,
    batch: usize,
    height: usize,
    width: usize,
    window_side: usize,
    k: usize,
    prefix: &str,
) -> Result<Var> {
    let t = ctx.tape;
    let edges = ctx.next_edges(|| {
        let feats = t.value(x);
        let feats = feats.view().into_dimensionality::<Ix2>().expect("grapher features");
        batched_windowed_knn(&feats, batch, height, width, window_side, k)
    })?;

    let y = ctx.batchnorm(ctx.linear(x, &format!("{prefix}.lin_in")), &format!("{prefix}.bn_in"));
    let w = ctx.param(&format!("{prefix}.proj.w"));
    let b = ctx.param(&format!("{prefix}.proj.b"));
    let g = max_relative_conv(t, y, &edges, w, b);
    let g = t.gelu(ctx.batchnorm(g, &format!("{prefix}.bn_proj")));
    let o = ctx.batchnorm(ctx.linear(g, &format!("{prefix}.lin_out")), &format!("{prefix}.bn_out"));
    let x1 = t.add(x, o);
    let f = ffn(ctx, x1, prefix);
    Ok(t.add(x1, f))
}

pub fn ffn(ctx: &ForwardCtx, x: Var, prefix: &str) -> Var {
    let t = ctx.tape;
    let f = ctx.batchnorm(ctx.linear(x, &format!("{prefix}.ffn1")), &format!("{prefix}.bn_ffn1"));
    let f = t.gelu(f);
    ctx.batchnorm(ctx.linear(f, &format!("{prefix}.ffn2")), &format!("{prefix}.bn_ffn2"))
}

/// Kernel-2/stride-2 convolution plus normalization; halves the grid side,
/// changes the feature dimension. Each output node unions the pixel
/// rectangles of exactly four input nodes.
pub fn downsample(
    ctx: &ForwardCtx,
    x: Var,
    batch: usize,
    height: usize,
    width: usize,
    idx: usize,
) -> Var {
    let t = ctx.tape;
    let dim = t.shape(x)[1];
    let grid = t.reshape(x, &[batch * height, width, dim]);
    let d = t.space_to_depth(grid);
    let d = t.reshape(d, &[batch * (height / 2) * (width / 2), 4 * dim]);
    ctx.batchnorm(ctx.linear(d, &format!("ds{idx}.conv")), &format!("ds{idx}.bn"))
}

/// Stages 1-3 of the backbone over `batch` vertically stacked images.
/// Returns the final-stage node features `(batch * M, stage_dims[3])` with
/// `M = (input_side / 32)^2`.
pub fn backbone_forward(
    ctx: &ForwardCtx,
    image: Var,
    cfg: &ModelConfig,
    batch: usize,
) -> Result<Var> {
    let mut x = stem(ctx, image, cfg.stage_dims[0]);
    let mut side = cfg.input_side / 4;
    for stage in 0..3 {
        for block in 0..cfg.blocks_per_stage[stage] {
            x = grapher_block(
                ctx,
                x,
                batch,
                side,
                side,
                cfg.window_side,
                cfg.local_k,
                &format!("s{}.b{}", stage + 1, block),
            )?;
        }
        x = downsample(ctx, x, batch, side, side, stage + 1);
        side /= 2;
    }
    Ok(x)
}
