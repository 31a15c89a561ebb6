//! Tape-based reverse-mode automatic differentiation on `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and returns gradients for every recorded variable.
//! All kernels are single-threaded and deterministic: identical inputs produce
//! bit-identical outputs and gradients.
//!
//! The op set is exactly what the model needs: dense linear algebra, a few
//! pointwise nonlinearities, batch normalization, non-overlapping 2x2
//! space-to-depth (kernel-2/stride-2 convolutions become reshape + matmul),
//! and fused graph aggregations (max-relative and weighted-sum message
//! passing) that route gradients through edge indices.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};
use std::cell::RefCell;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

/// Backward kernel: `(values, grad_of_output, grads_of_inputs)`.
/// Kernels accumulate (`+=`) into the gradients of their inputs only.
type BackFn = Box<dyn Fn(&[ArrayD<f64>], &ArrayD<f64>, &mut [ArrayD<f64>])>;

struct TapeInner {
    values: Vec<ArrayD<f64>>,
    backs: Vec<Option<BackFn>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients(Vec<ArrayD<f64>>);

impl Gradients {
    pub fn get(&self, v: Var) -> &ArrayD<f64> {
        &self.0[v.0]
    }
}

pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected rank-2 tensor")
}

fn as1(a: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("expected rank-1 tensor")
}

fn reshaped(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let flat: Vec<f64> = match a.as_slice() {
        Some(s) => s.to_vec(),
        None => a.iter().copied().collect(),
    };
    ArrayD::from_shape_vec(IxDyn(shape), flat).expect("reshape: element count mismatch")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh form.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax_slice(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                values: Vec::with_capacity(256),
                backs: Vec::with_capacity(256),
            }),
        }
    }

    fn push(&self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.backs.push(back);
        Var(inner.values.len() - 1)
    }

    /// Index the next pushed node will get; lets kernels capture their own slot.
    fn next_idx(&self) -> usize {
        self.inner.borrow().values.len()
    }

    /// Record an input value. Gradients flow into leaves like any other node.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    pub fn leaf2(&self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf1(&self, value: Array1<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.inner.borrow().values[v.0].clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().values[v.0].shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let inner = self.inner.borrow();
        let a = &inner.values[v.0];
        assert_eq!(a.len(), 1, "scalar_value on non-scalar");
        *a.iter().next().unwrap()
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            assert_eq!(inner.values[a.0].shape(), inner.values[b.0].shape(), "add: shape mismatch");
            &inner.values[a.0] + &inner.values[b.0]
        };
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |_vals, gout, grads| {
                grads[ai] += gout;
                grads[bi] += gout;
            })),
        )
    }

    /// `(N, D) + (D,)` row-broadcast bias add.
    pub fn add_bias(&self, a: Var, bias: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let m = as2(&inner.values[a.0]);
            let b = as1(&inner.values[bias.0]);
            (&m + &b).into_dyn()
        };
        let (ai, bi) = (a.0, bias.0);
        self.push(
            out,
            Some(Box::new(move |_vals, gout, grads| {
                let g2 = as2(gout);
                let colsum = g2.sum_axis(Axis(0));
                grads[ai] += gout;
                grads[bi] += &colsum.into_dyn();
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            &inner.values[a.0] - &inner.values[b.0]
        };
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |_vals, gout, grads| {
                grads[ai] += gout;
                grads[bi] -= gout;
            })),
        )
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            assert_eq!(inner.values[a.0].shape(), inner.values[b.0].shape(), "mul: shape mismatch");
            &inner.values[a.0] * &inner.values[b.0]
        };
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                grads[ai] += &(gout * &vals[bi]);
                grads[bi] += &(gout * &vals[ai]);
            })),
        )
    }

    /// `k * a + c` elementwise.
    pub fn affine(&self, a: Var, k: f64, c: f64) -> Var {
        let out = {
            let inner = self.inner.borrow();
            inner.values[a.0].mapv(|x| k * x + c)
        };
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |_vals, gout, grads| {
                grads[ai] += &gout.mapv(|x| k * x);
            })),
        )
    }

    /// `(N, K) x (K, M)` matrix product.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            as2(&inner.values[a.0]).dot(&as2(&inner.values[b.0])).into_dyn()
        };
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let g2 = as2(gout);
                let da = g2.dot(&as2(&vals[bi]).t());
                let db = as2(&vals[ai]).t().dot(&g2);
                grads[ai] += &da.into_dyn();
                grads[bi] += &db.into_dyn();
            })),
        )
    }

    /// GELU (tanh form), applied elementwise.
    pub fn gelu(&self, a: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            inner.values[a.0].mapv(gelu_scalar)
        };
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let dx = ndarray::Zip::from(gout)
                    .and(&vals[ai])
                    .map_collect(|&gv, &xv| gv * gelu_grad_scalar(xv));
                grads[ai] += &dx;
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            inner.values[a.0].mapv(sigmoid_scalar)
        };
        let ai = a.0;
        let oi = self.next_idx();
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let s = &vals[oi];
                let dx = ndarray::Zip::from(gout).and(s).map_collect(|&gv, &sv| gv * sv * (1.0 - sv));
                grads[ai] += &dx;
            })),
        )
    }

    /// `ln(x / (1 - x))` elementwise; inputs must lie strictly in (0, 1).
    pub fn logit(&self, a: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            inner.values[a.0].mapv(|x| (x / (1.0 - x)).ln())
        };
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let dx = ndarray::Zip::from(gout)
                    .and(&vals[ai])
                    .map_collect(|&gv, &xv| gv / (xv * (1.0 - xv)));
                grads[ai] += &dx;
            })),
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes where the input lies inside the
    /// range (boundary inclusive).
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let out = {
            let inner = self.inner.borrow();
            inner.values[a.0].mapv(|x| x.clamp(lo, hi))
        };
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let dx = ndarray::Zip::from(gout)
                    .and(&vals[ai])
                    .map_collect(|&gv, &xv| if (lo..=hi).contains(&xv) { gv } else { 0.0 });
                grads[ai] += &dx;
            })),
        )
    }

    /// Batch normalization over axis 0 of an `(N, D)` tensor using batch
    /// statistics. Returns the output plus the biased batch `(mean, var)` so
    /// the caller can maintain running statistics.
    pub fn batchnorm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, (Array1<f64>, Array1<f64>)) {
        let (out, mean, var, xhat) = {
            let inner = self.inner.borrow();
            let xm = as2(&inner.values[x.0]);
            let n = xm.nrows() as f64;
            let mean = xm.mean_axis(Axis(0)).unwrap();
            let mut var = Array1::<f64>::zeros(xm.ncols());
            for row in xm.outer_iter() {
                ndarray::Zip::from(&mut var).and(&row).and(&mean).for_each(|v, &x, &m| {
                    let d = x - m;
                    *v += d * d;
                });
            }
            var /= n;
            let std = var.mapv(|v| (v + eps).sqrt());
            let xhat = (&xm - &mean) / &std;
            let g = as1(&inner.values[gamma.0]);
            let b = as1(&inner.values[beta.0]);
            let out = (&xhat * &g + &b).into_dyn();
            (out, mean, var, xhat)
        };
        let (xi, gi, bi) = (x.0, gamma.0, beta.0);
        let var_b = var.clone();
        let stats = (mean, var);
        let v = self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let g2 = as2(gout);
                let gamma_v = as1(&vals[gi]);
                let std = var_b.mapv(|v| (v + eps).sqrt());
                let dgamma = (&g2 * &xhat).sum_axis(Axis(0));
                let dbeta = g2.sum_axis(Axis(0));
                grads[gi] += &dgamma.into_dyn();
                grads[bi] += &dbeta.into_dyn();
                // dx = gamma/std * (g - mean(g) - xhat * mean(g*xhat))
                let mg = g2.mean_axis(Axis(0)).unwrap();
                let mgx = (&g2 * &xhat).mean_axis(Axis(0)).unwrap();
                let coef = &gamma_v / &std;
                let dx = ndarray::Zip::from(&g2)
                    .and(&xhat)
                    .and_broadcast(&mg)
                    .and_broadcast(&mgx)
                    .and_broadcast(&coef)
                    .map_collect(|&gv, &xh, &m1, &m2, &c| c * (gv - m1 - xh * m2));
                grads[xi] += &dx.into_dyn();
            })),
        );
        (v, stats)
    }

    /// Batch normalization with fixed (running) statistics: a per-feature
    /// affine transform.
    pub fn batchnorm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
        eps: f64,
    ) -> Var {
        let std = running_var.mapv(|v| (v + eps).sqrt());
        let (out, xhat) = {
            let inner = self.inner.borrow();
            let xm = as2(&inner.values[x.0]);
            let xhat = (&xm - running_mean) / &std;
            let g = as1(&inner.values[gamma.0]);
            let b = as1(&inner.values[beta.0]);
            ((&xhat * &g + &b).into_dyn(), xhat)
        };
        let (xi, gi, bi) = (x.0, gamma.0, beta.0);
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let g2 = as2(gout);
                let gamma_v = as1(&vals[gi]);
                let dgamma = (&g2 * &xhat).sum_axis(Axis(0));
                let dbeta = g2.sum_axis(Axis(0));
                let coef = &gamma_v / &std;
                let dx = &g2 * &coef;
                grads[gi] += &dgamma.into_dyn();
                grads[bi] += &dbeta.into_dyn();
                grads[xi] += &dx.into_dyn();
            })),
        )
    }

    /// Rearrange `(H, W, C)` into `(H/2, W/2, 4C)` by concatenating each
    /// non-overlapping 2x2 block in (top-left, top-right, bottom-left,
    /// bottom-right) order. This is the im2col of a kernel-2/stride-2
    /// convolution.
    pub fn space_to_depth(&self, x: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let a = inner.values[x.0]
                .view()
                .into_dimensionality::<Ix3>()
                .expect("space_to_depth: rank-3");
            let (h, w, c) = a.dim();
            assert!(h % 2 == 0 && w % 2 == 0, "space_to_depth: odd side");
            let mut out = ndarray::Array3::<f64>::zeros((h / 2, w / 2, 4 * c));
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    for (q, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        for ch in 0..c {
                            out[(i, j, q * c + ch)] = a[(2 * i + di, 2 * j + dj, ch)];
                        }
                    }
                }
            }
            out.into_dyn()
        };
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let g3 = gout.view().into_dimensionality::<Ix3>().unwrap();
                let (h2, w2, c4) = g3.dim();
                let c = c4 / 4;
                let mut dx = ArrayD::<f64>::zeros(IxDyn(vals[xi].shape()));
                {
                    let mut dx3 = dx.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for i in 0..h2 {
                        for j in 0..w2 {
                            for (q, (di, dj)) in
                                [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate()
                            {
                                for ch in 0..c {
                                    dx3[(2 * i + di, 2 * j + dj, ch)] += g3[(i, j, q * c + ch)];
                                }
                            }
                        }
                    }
                }
                grads[xi] += &dx;
            })),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let out = {
            let inner = self.inner.borrow();
            reshaped(&inner.values[a.0], shape)
        };
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let dx = reshaped(gout, vals[ai].shape());
                grads[ai] += &dx;
            })),
        )
    }

    /// Column-wise concatenation of `(N, D1)` and `(N, D2)`.
    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let am = as2(&inner.values[a.0]);
            let bm = as2(&inner.values[b.0]);
            ndarray::concatenate(Axis(1), &[am, bm]).expect("concat_cols").into_dyn()
        };
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let g2 = as2(gout);
                let d1 = vals[ai].shape()[1];
                let ga = g2.slice(ndarray::s![.., ..d1]).to_owned();
                let gb = g2.slice(ndarray::s![.., d1..]).to_owned();
                grads[ai] += &ga.into_dyn();
                grads[bi] += &gb.into_dyn();
            })),
        )
    }

    /// Row gather: `out[e] = x[idx[e]]`.
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Var {
        let idx: Vec<usize> = idx.to_vec();
        let out = {
            let inner = self.inner.borrow();
            let xm = as2(&inner.values[x.0]);
            let mut out = Array2::<f64>::zeros((idx.len(), xm.ncols()));
            for (e, &i) in idx.iter().enumerate() {
                out.row_mut(e).assign(&xm.row(i));
            }
            out.into_dyn()
        };
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let g2 = as2(gout);
                let shape = vals[xi].shape();
                let mut dx = Array2::<f64>::zeros((shape[0], shape[1]));
                for (e, &i) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(i);
                    row += &g2.row(e);
                }
                grads[xi] += &dx.into_dyn();
            })),
        )
    }

    /// Max-relative aggregation: `out[i, d] = max over edges (j -> i) of
    /// (x[j, d] - x[i, d])`, or 0 when node `i` has no incoming edge. Ties
    /// resolve to the earliest edge in list order; the gradient follows the
    /// selected neighbor.
    pub fn max_relative(&self, x: Var, src: &[usize], dst: &[usize]) -> Var {
        assert_eq!(src.len(), dst.len());
        let (out, argmax) = {
            let inner = self.inner.borrow();
            let xm = as2(&inner.values[x.0]);
            let (n, d) = xm.dim();
            let mut out = Array2::<f64>::zeros((n, d));
            // argmax[i, d] = source node index + 1, or 0 for "no incoming edge"
            let mut argmax = Array2::<u32>::zeros((n, d));
            for (&j, &i) in src.iter().zip(dst.iter()) {
                for k in 0..d {
                    let rel = xm[(j, k)] - xm[(i, k)];
                    if argmax[(i, k)] == 0 || rel > out[(i, k)] {
                        out[(i, k)] = rel;
                        argmax[(i, k)] = (j + 1) as u32;
                    }
                }
            }
            (out.into_dyn(), argmax)
        };
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let g2 = as2(gout);
                let (n, d) = g2.dim();
                let shape = vals[xi].shape();
                let mut dx = Array2::<f64>::zeros((shape[0], shape[1]));
                for i in 0..n {
                    for k in 0..d {
                        let a = argmax[(i, k)];
                        if a > 0 {
                            let j = (a - 1) as usize;
                            dx[(j, k)] += g2[(i, k)];
                            dx[(i, k)] -= g2[(i, k)];
                        }
                    }
                }
                grads[xi] += &dx.into_dyn();
            })),
        )
    }

    /// Weighted-sum graph aggregation:
    /// `out[i] = (1 + eps) * x[i] + sum over edges e=(j -> i) of alpha[e] * x[j]`.
    pub fn gin_aggregate(&self, x: Var, src: &[usize], dst: &[usize], alpha: Var, eps: f64) -> Var {
        assert_eq!(src.len(), dst.len());
        let src: Vec<usize> = src.to_vec();
        let dst: Vec<usize> = dst.to_vec();
        let out = {
            let inner = self.inner.borrow();
            let xm = as2(&inner.values[x.0]);
            let al = as1(&inner.values[alpha.0]);
            assert_eq!(al.len(), src.len(), "gin_aggregate: alpha length mismatch");
            let mut out = xm.mapv(|v| (1.0 + eps) * v);
            for (e, (&j, &i)) in src.iter().zip(dst.iter()).enumerate() {
                let a = al[e];
                let xr = xm.row(j).to_owned();
                let mut or = out.row_mut(i);
                or.zip_mut_with(&xr, |o, &v| *o += a * v);
            }
            out.into_dyn()
        };
        let (xi, ai) = (x.0, alpha.0);
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let g2 = as2(gout);
                let xm = as2(&vals[xi]);
                let al = as1(&vals[ai]);
                let mut dx = g2.mapv(|v| (1.0 + eps) * v);
                let mut dalpha = Array1::<f64>::zeros(al.len());
                for (e, (&j, &i)) in src.iter().zip(dst.iter()).enumerate() {
                    let a = al[e];
                    {
                        let gi_row = g2.row(i).to_owned();
                        let mut dj = dx.row_mut(j);
                        dj.zip_mut_with(&gi_row, |o, &v| *o += a * v);
                    }
                    dalpha[e] = g2.row(i).dot(&xm.row(j));
                }
                grads[xi] += &dx.into_dyn();
                grads[ai] += &dalpha.into_dyn();
            })),
        )
    }

    /// Mean over equal contiguous row segments: `(B * M, D) -> (B, D)`.
    pub fn segment_mean(&self, a: Var, segments: usize) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let m = as2(&inner.values[a.0]);
            let rows = m.nrows();
            assert!(segments > 0 && rows % segments == 0, "segment_mean: uneven segments");
            let seg = rows / segments;
            let mut out = Array2::<f64>::zeros((segments, m.ncols()));
            for b in 0..segments {
                for r in 0..seg {
                    let row = m.row(b * seg + r);
                    let mut acc = out.row_mut(b);
                    acc += &row;
                }
            }
            out.mapv_inplace(|v| v / seg as f64);
            out.into_dyn()
        };
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let g2 = as2(gout);
                let rows = vals[ai].shape()[0];
                let seg = rows / segments;
                let mut dx = Array2::<f64>::zeros((rows, vals[ai].shape()[1]));
                for b in 0..segments {
                    let grow = g2.row(b).mapv(|v| v / seg as f64);
                    for r in 0..seg {
                        dx.row_mut(b * seg + r).assign(&grow);
                    }
                }
                grads[ai] += &dx.into_dyn();
            })),
        )
    }

    /// Mean cross-entropy of `(B, K)` logit rows against integer labels.
    pub fn softmax_ce_batch(&self, logits: Var, labels: &[usize]) -> Var {
        let labels: Vec<usize> = labels.to_vec();
        let (loss, probs) = {
            let inner = self.inner.borrow();
            let z = as2(&inner.values[logits.0]);
            assert_eq!(z.nrows(), labels.len(), "softmax_ce_batch: label count");
            let mut probs = Array2::<f64>::zeros(z.dim());
            let mut loss = 0.0;
            for (b, row) in z.outer_iter().enumerate() {
                let p = softmax_slice(row.as_slice().unwrap());
                loss -= p[labels[b]].max(1e-300).ln();
                for (k, &pv) in p.iter().enumerate() {
                    probs[(b, k)] = pv;
                }
            }
            (loss / labels.len() as f64, probs)
        };
        let li = logits.0;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), loss),
            Some(Box::new(move |_vals, gout, grads| {
                let g = gout[[0]] / labels.len() as f64;
                let mut dz = probs.clone();
                for (b, &lab) in labels.iter().enumerate() {
                    dz[(b, lab)] -= 1.0;
                }
                grads[li] += &dz.mapv(|v| v * g).into_dyn();
            })),
        )
    }

    /// Mean squared error of `(B, 1)` predictions against targets.
    pub fn mse_batch(&self, pred: Var, targets: &[f64]) -> Var {
        let targets: Vec<f64> = targets.to_vec();
        let loss = {
            let inner = self.inner.borrow();
            let p = as2(&inner.values[pred.0]);
            assert_eq!(p.nrows(), targets.len(), "mse_batch: target count");
            targets
                .iter()
                .enumerate()
                .map(|(b, &t)| {
                    let d = p[(b, 0)] - t;
                    d * d
                })
                .sum::<f64>()
                / targets.len() as f64
        };
        let pi = pred.0;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), loss),
            Some(Box::new(move |vals, gout, grads| {
                let g = gout[[0]] / targets.len() as f64;
                let p = as2(&vals[pi]);
                let mut dz = Array2::<f64>::zeros(p.dim());
                for (b, &t) in targets.iter().enumerate() {
                    dz[(b, 0)] = 2.0 * (p[(b, 0)] - t) * g;
                }
                grads[pi] += &dz.into_dyn();
            })),
        )
    }

    /// Mean over rows: `(N, D) -> (1, D)`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let m = as2(&inner.values[a.0]);
            m.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0)).into_dyn()
        };
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |vals, gout, grads| {
                let g2 = as2(gout);
                let n = vals[ai].shape()[0];
                let row = g2.row(0).mapv(|v| v / n as f64);
                let dx = Array2::from_shape_fn((n, row.len()), |(_, j)| row[j]);
                grads[ai] += &dx.into_dyn();
            })),
        )
    }

    /// Cross-entropy of a `(1, K)` logit row against an integer label.
    pub fn softmax_ce(&self, logits: Var, label: usize) -> Var {
        let (loss, probs) = {
            let inner = self.inner.borrow();
            let z = as2(&inner.values[logits.0]);
            assert_eq!(z.nrows(), 1);
            let probs = Array1::from_vec(softmax_slice(z.row(0).as_slice().unwrap()));
            let loss = -(probs[label].max(1e-300)).ln();
            (loss, probs)
        };
        let li = logits.0;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), loss),
            Some(Box::new(move |_vals, gout, grads| {
                let g = gout[[0]];
                let mut dz = probs.clone();
                dz[label] -= 1.0;
                let dz2 = dz.mapv(|v| v * g).insert_axis(Axis(0));
                grads[li] += &dz2.into_dyn();
            })),
        )
    }

    /// Softmax probability of one class from a `(1, K)` logit row.
    pub fn softmax_select(&self, logits: Var, class: usize) -> Var {
        let probs = {
            let inner = self.inner.borrow();
            let z = as2(&inner.values[logits.0]);
            Array1::from_vec(softmax_slice(z.row(0).as_slice().unwrap()))
        };
        let li = logits.0;
        let pc = probs[class];
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), pc),
            Some(Box::new(move |_vals, gout, grads| {
                let g = gout[[0]];
                let dz: Array1<f64> = Array1::from_shape_fn(probs.len(), |j| {
                    let delta = if j == class { 1.0 } else { 0.0 };
                    g * pc * (delta - probs[j])
                });
                grads[li] += &dz.insert_axis(Axis(0)).into_dyn();
            })),
        )
    }

    /// Squared error of a single-element prediction against a target.
    pub fn mse_scalar(&self, pred: Var, target: f64) -> Var {
        let p = self.scalar_value(pred);
        let pi = pred.0;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), (p - target) * (p - target)),
            Some(Box::new(move |vals, gout, grads| {
                let g = gout[[0]];
                let p = *vals[pi].iter().next().unwrap();
                let shape = vals[pi].shape().to_vec();
                let d = ArrayD::from_elem(IxDyn(&shape), 2.0 * (p - target) * g);
                grads[pi] += &d;
            })),
        )
    }

    /// Bernoulli KL of each entry against a constant rate `r`, reduced over
    /// entries: `p ln(p/r) + (1-p) ln((1-p)/(1-r))`, mean or sum.
    pub fn bernoulli_kl(&self, p: Var, r: f64, mean: bool) -> Var {
        let (total, count) = {
            let inner = self.inner.borrow();
            let pv = as1(&inner.values[p.0]);
            let total: f64 = pv
                .iter()
                .map(|&x| x * (x / r).ln() + (1.0 - x) * ((1.0 - x) / (1.0 - r)).ln())
                .sum();
            (total, pv.len())
        };
        let scale = if mean { 1.0 / count.max(1) as f64 } else { 1.0 };
        let pi = p.0;
        let logit_r = (r / (1.0 - r)).ln();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), total * scale),
            Some(Box::new(move |vals, gout, grads| {
                let g = gout[[0]];
                let pv = as1(&vals[pi]);
                let dp = pv.mapv(|x| g * scale * ((x / (1.0 - x)).ln() - logit_r));
                grads[pi] += &dp.into_dyn();
            })),
        )
    }

    /// Scalar probe `sum(w * a)` with constant weights; scalarizes an
    /// arbitrary tensor for backward passes.
    pub fn weighted_sum(&self, a: Var, w: &ArrayD<f64>) -> Var {
        let out = {
            let inner = self.inner.borrow();
            assert_eq!(inner.values[a.0].shape(), w.shape());
            (&inner.values[a.0] * w).sum()
        };
        let ai = a.0;
        let w = w.clone();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), out),
            Some(Box::new(move |_vals, gout, grads| {
                let g = gout[[0]];
                grads[ai] += &w.mapv(|v| v * g);
            })),
        )
    }

    /// Reverse pass from a single-element root with seed gradient `seed`.
    pub fn backward(&self, root: Var, seed: f64) -> Gradients {
        let inner = self.inner.borrow();
        let mut grads: Vec<ArrayD<f64>> = inner
            .values
            .iter()
            .map(|v| ArrayD::zeros(IxDyn(v.shape())))
            .collect();
        assert_eq!(inner.values[root.0].len(), 1, "backward root must be scalar");
        grads[root.0].fill(seed);
        for i in (0..=root.0).rev() {
            if let Some(back) = &inner.backs[i] {
                let gout = std::mem::replace(&mut grads[i], ArrayD::zeros(IxDyn(&[0])));
                back(&inner.values, &gout, &mut grads);
                grads[i] = gout;
            }
        }
        Gradients(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences against the tape gradient for a scalar
    /// function of several tensor inputs.
    fn gradcheck<F>(inputs: &[ArrayD<f64>], f: F, tol: f64)
    where
        F: Fn(&Tape, &[Var]) -> Var,
    {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
        let root = f(&tape, &vars);
        let grads = tape.backward(root, 1.0);
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]);
            for idx in 0..input.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[k].as_slice_mut().unwrap()[idx] += h;
                minus[k].as_slice_mut().unwrap()[idx] -= h;
                let fp = {
                    let t = Tape::new();
                    let vs: Vec<Var> = plus.iter().map(|a| t.leaf(a.clone())).collect();
                    t.scalar_value(f(&t, &vs))
                };
                let fm = {
                    let t = Tape::new();
                    let vs: Vec<Var> = minus.iter().map(|a| t.leaf(a.clone())).collect();
                    t.scalar_value(f(&t, &vs))
                };
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                assert!(
                    (a - numeric).abs() <= tol * (1.0 + a.abs() + numeric.abs()),
                    "input {k} element {idx}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_bias_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_arr(&[3, 4], &mut rng);
        let w = rand_arr(&[4, 2], &mut rng);
        let b = rand_arr(&[2], &mut rng);
        let probe = rand_arr(&[3, 2], &mut rng);
        gradcheck(
            &[x, w, b],
            |t, v| {
                let y = t.add_bias(t.matmul(v[0], v[1]), v[2]);
                t.weighted_sum(t.gelu(y), &probe)
            },
            1e-5,
        );
    }

    #[test]
    fn pointwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_arr(&[5, 3], &mut rng);
        let probe = rand_arr(&[5, 3], &mut rng);
        gradcheck(
            &[x.clone()],
            |t, v| t.weighted_sum(t.sigmoid(v[0]), &probe),
            1e-5,
        );
        gradcheck(
            &[x.clone()],
            |t, v| t.weighted_sum(t.affine(t.mul(v[0], v[0]), 0.5, 1.0), &probe),
            1e-5,
        );
        let p = x.mapv(|v| 0.2 + 0.6 * sigmoid_scalar(v));
        gradcheck(&[p], |t, v| t.weighted_sum(t.logit(v[0]), &probe), 1e-5);
    }

    #[test]
    fn batchnorm_train_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_arr(&[6, 3], &mut rng);
        let gamma = rand_arr(&[3], &mut rng).mapv(|v| 1.0 + 0.3 * v);
        let beta = rand_arr(&[3], &mut rng);
        let probe = rand_arr(&[6, 3], &mut rng);
        gradcheck(
            &[x, gamma, beta],
            |t, v| {
                let (y, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5);
                t.weighted_sum(y, &probe)
            },
            1e-4,
        );
    }

    #[test]
    fn batchnorm_eval_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_arr(&[4, 3], &mut rng);
        let gamma = rand_arr(&[3], &mut rng).mapv(|v| 1.0 + 0.3 * v);
        let beta = rand_arr(&[3], &mut rng);
        let rm = arr1(&[0.3, -0.2, 0.1]);
        let rv = arr1(&[1.5, 0.7, 1.0]);
        let probe = rand_arr(&[4, 3], &mut rng);
        gradcheck(
            &[x, gamma, beta],
            |t, v| {
                let y = t.batchnorm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5);
                t.weighted_sum(y, &probe)
            },
            1e-5,
        );
    }

    #[test]
    fn graph_aggregations_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_arr(&[5, 4], &mut rng);
        let src = vec![1usize, 2, 0, 4, 3];
        let dst = vec![0usize, 0, 1, 2, 4];
        let probe = rand_arr(&[5, 4], &mut rng);
        {
            let (src, dst, probe) = (src.clone(), dst.clone(), probe.clone());
            gradcheck(
                &[x.clone()],
                move |t, v| t.weighted_sum(t.max_relative(v[0], &src, &dst), &probe),
                1e-5,
            );
        }
        let alpha = rand_arr(&[5], &mut rng).mapv(|v| 0.5 + 0.4 * v);
        gradcheck(
            &[x, alpha],
            move |t, v| t.weighted_sum(t.gin_aggregate(v[0], &src, &dst, v[1], 0.1), &probe),
            1e-5,
        );
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img = rand_arr(&[4, 4, 2], &mut rng);
        let probe = rand_arr(&[4, 8], &mut rng);
        gradcheck(
            &[img],
            |t, v| {
                let d = t.space_to_depth(v[0]);
                let r = t.reshape(d, &[4, 8]);
                t.weighted_sum(r, &probe)
            },
            1e-5,
        );
        let a = rand_arr(&[3, 2], &mut rng);
        let b = rand_arr(&[3, 3], &mut rng);
        let probe2 = rand_arr(&[4, 5], &mut rng);
        gradcheck(
            &[a, b],
            |t, v| {
                let c = t.concat_cols(v[0], v[1]);
                let g = t.gather_rows(c, &[2, 0, 1, 0]);
                t.weighted_sum(g, &probe2)
            },
            1e-5,
        );
    }

    #[test]
    fn loss_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let logits = rand_arr(&[1, 4], &mut rng);
        gradcheck(&[logits.clone()], |t, v| t.softmax_ce(v[0], 2), 1e-5);
        gradcheck(&[logits], |t, v| t.softmax_select(v[0], 1), 1e-5);
        let pred = rand_arr(&[1, 1], &mut rng);
        gradcheck(&[pred], |t, v| t.mse_scalar(v[0], 0.37), 1e-5);
        let p = rand_arr(&[6], &mut rng).mapv(|v| 0.15 + 0.7 * sigmoid_scalar(v));
        gradcheck(&[p.clone()], |t, v| t.bernoulli_kl(v[0], 0.7, true), 1e-5);
        gradcheck(&[p], |t, v| t.bernoulli_kl(v[0], 0.3, false), 1e-5);
    }

    #[test]
    fn mean_rows_and_residual_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_arr(&[4, 3], &mut rng);
        let probe = rand_arr(&[1, 3], &mut rng);
        gradcheck(
            &[x],
            |t, v| {
                let doubled = t.add(v[0], v[0]);
                t.weighted_sum(t.mean_rows(doubled), &probe)
            },
            1e-5,
        );
    }

    #[test]
    fn max_relative_empty_neighborhood_is_zero() {
        let t = Tape::new();
        let x = t.leaf2(arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        // only node 0 receives an edge
        let y = t.max_relative(x, &[1], &[0]);
        let v = t.value(y);
        assert_eq!(v[[0, 0]], 2.0);
        assert_eq!(v[[0, 1]], 2.0);
        assert_eq!(v[[1, 0]], 0.0);
        assert_eq!(v[[1, 1]], 0.0);
    }

    #[test]
    fn softmax_probabilities_sum_to_one() {
        let p = softmax_slice(&[0.3, -2.0, 5.0, 0.0]);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let t = Tape::new();
        let x = t.leaf1(arr1(&[-0.5, 0.5, 1.5]));
        let y = t.clamp(x, 0.0, 1.0);
        let w = ArrayD::from_elem(IxDyn(&[3]), 1.0);
        let root = t.weighted_sum(y, &w);
        let g = t.backward(root, 1.0);
        let gx = g.get(x);
        assert_eq!(gx[[0]], 0.0);
        assert_eq!(gx[[1]], 1.0);
        assert_eq!(gx[[2]], 0.0);
    }
}
