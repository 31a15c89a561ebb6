//! Stochastic-attention graph bottleneck over the global window graph.
//!
//! Every edge `(u, v)` of the final-stage k-NN graph gets a sampling
//! probability `p_uv = sigmoid(MLP(concat(h_u, h_v)))`. During training the
//! forward pass runs on stochastic edge weights drawn through a binary
//! concrete relaxation of Bernoulli(p); in evaluation the weights equal `p`.
//! The per-edge probabilities are regularized toward a prior rate `r` and
//! double as the model's inherent explanation.

use crate::backbone::ffn;
use crate::config::{BottleneckConfig, InfoReduction};
use crate::error::Result;
use crate::forward::{ForwardCtx, Mode};
use crate::graph::{global_knn, EdgeList};
use crate::params::ParamBuilder;
use crate::tensor::{Tape, Var};
use ndarray::Ix2;
use rand::Rng;

/// Probabilities are clamped to this band so logs stay finite.
pub const P_CLAMP: (f64, f64) = (1e-6, 1.0 - 1e-6);

pub fn register_bottleneck(b: &mut ParamBuilder, dim: usize, layers: usize, ffn_ratio: usize) {
    b.linear("gsat.edge_mlp.fc1", 2 * dim, dim);
    b.linear("gsat.edge_mlp.fc2", dim, 1);
    for l in 0..layers {
        let p = format!("gsat.g{l}");
        b.linear(&format!("{p}.lin"), dim, dim);
        b.batchnorm(&format!("{p}.bn_lin"), dim);
        b.linear(&format!("{p}.mlp1"), dim, dim);
        b.batchnorm(&format!("{p}.bn_mlp1"), dim);
        b.linear(&format!("{p}.mlp2"), dim, dim);
        b.batchnorm(&format!("{p}.bn_mlp2"), dim);
        crate::backbone::register_ffn(b, &p, dim, ffn_ratio);
    }
}

/// Per-edge sampling probability from the concatenated endpoint embeddings,
/// clamped inside [`P_CLAMP`]. With `symmetrize` the two directions of a node
/// pair share the average of their probabilities.
pub fn edge_probability(ctx: &ForwardCtx, h: Var, edges: &EdgeList, symmetrize: bool) -> Var {
    let t = ctx.tape;
    let hu = t.gather_rows(h, &edges.src);
    let hv = t.gather_rows(h, &edges.dst);
    let cat = t.concat_cols(hu, hv);
    let z = ctx.linear(cat, "gsat.edge_mlp.fc1");
    let z = t.gelu(z);
    let z = ctx.linear(z, "gsat.edge_mlp.fc2");
    let z = t.reshape(z, &[edges.len()]);
    let p = t.sigmoid(z);
    let p = t.clamp(p, P_CLAMP.0, P_CLAMP.1);
    if symmetrize {
        // pair each edge with its reverse (or itself when absent)
        let mut rev = vec![0usize; edges.len()];
        let index: std::collections::HashMap<(usize, usize), usize> = edges
            .iter()
            .enumerate()
            .map(|(e, (s, d))| ((s, d), e))
            .collect();
        for (e, (s, d)) in edges.iter().enumerate() {
            rev[e] = *index.get(&(d, s)).unwrap_or(&e);
        }
        let p2 = t.reshape(p, &[edges.len(), 1]);
        let pr = t.gather_rows(p2, &rev);
        let sum = t.add(p2, pr);
        let avg = t.affine(sum, 0.5, 0.0);
        t.reshape(avg, &[edges.len()])
    } else {
        p
    }
}

/// Training: binary concrete relaxation
/// `alpha = sigmoid((logit(u) + logit(p)) / temperature)`, `u ~ Uniform(0,1)`
/// per edge. Evaluation: `alpha = p` (the very same tape node).
pub fn sample_edge_weights(
    tape: &Tape,
    p: Var,
    temperature: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Var {
    match mode {
        Mode::Evaluation => p,
        Mode::Training => {
            let n = tape.shape(p)[0];
            let noise = ndarray::Array1::from_shape_fn(n, |_| {
                let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
                (u / (1.0 - u)).ln()
            });
            let noise = tape.leaf1(noise);
            let z = tape.add(tape.logit(p), noise);
            tape.sigmoid(tape.affine(z, 1.0 / temperature, 0.0))
        }
    }
}

/// Mean (or sum) over edges of `p ln(p/r) + (1-p) ln((1-p)/(1-r))`:
/// nonnegative, zero iff every entry equals `r`.
pub fn info_loss(tape: &Tape, p: Var, r: f64, reduction: InfoReduction) -> Var {
    tape.bernoulli_kl(p, r, matches!(reduction, InfoReduction::Mean))
}

/// One bottleneck graph layer: linear transform, weighted-sum aggregation
/// `(1 + eps) x_i + sum alpha_ji x_j` followed by a 2-layer MLP, residual,
/// then an FFN with residual.
pub fn gin_layer(
    ctx: &ForwardCtx,
    x: Var,
    edges: &EdgeList,
    alpha: Var,
    eps: f64,
    prefix: &str,
) -> Var {
    let t = ctx.tape;
    let h = ctx.batchnorm(ctx.linear(x, &format!("{prefix}.lin")), &format!("{prefix}.bn_lin"));
    let m = t.gin_aggregate(h, &edges.src, &edges.dst, alpha, eps);
    let u = ctx.batchnorm(ctx.linear(m, &format!("{prefix}.mlp1")), &format!("{prefix}.bn_mlp1"));
    let u = t.gelu(u);
    let u = ctx.batchnorm(ctx.linear(u, &format!("{prefix}.mlp2")), &format!("{prefix}.bn_mlp2"));
    let x1 = t.add(x, u);
    let f = ffn(ctx, x1, prefix);
    t.add(x1, f)
}

/// Everything the bottleneck computes for one pass (optionally batched).
pub struct BottleneckOut {
    /// Final node embeddings `(batch * M, D)`.
    pub out: Var,
    /// The global k-NN edges the pass ran on (per-image graphs with node
    /// offsets; no edge crosses an image boundary).
    pub edges: EdgeList,
    /// Edges per image (identical across a batch).
    pub edges_per_image: usize,
    /// Edge probabilities `(E,)`.
    pub p: Var,
    /// Edge weights used by the message passing (equals `p` in evaluation).
    pub alpha: Var,
    /// Information regularizer value.
    pub info: Var,
}

/// Global k-NN per image over stacked final-stage embeddings, node indices
/// offset per image.
pub fn batched_global_knn(
    features: &ndarray::ArrayView2<f64>,
    batch: usize,
    k: usize,
) -> Result<EdgeList> {
    let n = features.nrows() / batch;
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for b in 0..batch {
        let slice = features.slice(ndarray::s![b * n..(b + 1) * n, ..]);
        let e = global_knn(&slice, k)?;
        src.extend(e.src.iter().map(|&s| s + b * n));
        dst.extend(e.dst.iter().map(|&d| d + b * n));
    }
    Ok(EdgeList { src, dst, weight: None })
}

/// Build the global graph over the final-stage embeddings, estimate `p` once,
/// sample one weight vector, and run all bottleneck layers on it.
/// `edge_mask` multiplies the sampled weights (used by insertion-style
/// evaluations); `None` leaves them untouched.
pub fn bottleneck_forward(
    ctx: &ForwardCtx,
    stage4: Var,
    batch: usize,
    cfg: &BottleneckConfig,
    rng: &mut impl Rng,
    edge_mask: Option<&[f64]>,
) -> Result<BottleneckOut> {
    let t = ctx.tape;
    let edges = ctx.next_edges(|| {
        let feats = t.value(stage4);
        let feats = feats.view().into_dimensionality::<Ix2>().expect("stage-4 features");
        batched_global_knn(&feats, batch, cfg.k)
    })?;
    let edges_per_image = edges.len() / batch.max(1);
    let p = edge_probability(ctx, stage4, &edges, cfg.symmetrize_p);
    let mut alpha = sample_edge_weights(t, p, cfg.temperature, ctx.mode, rng);
    if let Some(mask) = edge_mask {
        assert_eq!(mask.len(), edges.len(), "edge mask length mismatch");
        let m = t.leaf1(ndarray::Array1::from_vec(mask.to_vec()));
        alpha = t.mul(alpha, m);
    }
    let mut x = stage4;
    for l in 0..cfg.layers {
        x = gin_layer(ctx, x, &edges, alpha, cfg.gin_eps, &format!("gsat.g{l}"));
    }
    let info = info_loss(t, p, cfg.r, cfg.info_reduction);
    Ok(BottleneckOut { out: x, edges, edges_per_image, p, alpha, info })
}
