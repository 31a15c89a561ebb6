//! Shared state of one forward pass: parameter tape handles, normalization
//! mode, batch-statistic updates, and the trace of dynamically built graphs.

use crate::error::Result;
use crate::graph::EdgeList;
use crate::params::ParamStore;
use crate::tensor::{Tape, Var};
use ndarray::Array1;
use std::cell::{Cell, RefCell};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Evaluation,
}

/// Batch statistics recorded by one training-mode normalization layer.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub name: String,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub rows: usize,
}

/// Dynamically constructed edge lists of one forward pass, in construction
/// order (window graphs per block, then the global graph). Re-running a
/// forward with a recorded trace freezes the graph structure, which keeps the
/// network differentiable along input-interpolation paths.
#[derive(Clone, Debug, Default)]
pub struct GraphTrace {
    pub edges: Vec<EdgeList>,
}

pub struct ForwardCtx<'a> {
    pub tape: &'a Tape,
    pub params: &'a ParamStore,
    pub mode: Mode,
    param_vars: RefCell<HashMap<String, Var>>,
    bn_updates: RefCell<Vec<BnUpdate>>,
    trace_out: RefCell<GraphTrace>,
    trace_in: Option<&'a GraphTrace>,
    trace_pos: Cell<usize>,
    bn_eps: f64,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(
        tape: &'a Tape,
        params: &'a ParamStore,
        mode: Mode,
        trace_in: Option<&'a GraphTrace>,
    ) -> Self {
        ForwardCtx {
            tape,
            params,
            mode,
            param_vars: RefCell::new(HashMap::new()),
            bn_updates: RefCell::new(Vec::new()),
            trace_out: RefCell::new(GraphTrace::default()),
            trace_in,
            trace_pos: Cell::new(0),
            bn_eps: 1e-5,
        }
    }

    /// Tape handle for a named parameter; one leaf per parameter per pass so
    /// repeated uses accumulate into a single gradient slot.
    pub fn param(&self, name: &str) -> Var {
        if let Some(&v) = self.param_vars.borrow().get(name) {
            return v;
        }
        let v = self.tape.leaf(self.params.get(name).clone());
        self.param_vars.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// `x @ W + b` for layer `name` (expects `name.w` / `name.b`).
    pub fn linear(&self, x: Var, name: &str) -> Var {
        let w = self.param(&format!("{name}.w"));
        let b = self.param(&format!("{name}.b"));
        self.tape.add_bias(self.tape.matmul(x, w), b)
    }

    /// Batch normalization for layer `name`; batch statistics in training
    /// mode (recorded for the running-average update), running statistics in
    /// evaluation mode.
    pub fn batchnorm(&self, x: Var, name: &str) -> Var {
        let gamma = self.param(&format!("{name}.gamma"));
        let beta = self.param(&format!("{name}.beta"));
        match self.mode {
            Mode::Training => {
                let rows = self.tape.shape(x)[0];
                let (y, (mean, var)) = self.tape.batchnorm_train(x, gamma, beta, self.bn_eps);
                self.bn_updates.borrow_mut().push(BnUpdate {
                    name: name.to_string(),
                    mean,
                    var,
                    rows,
                });
                y
            }
            Mode::Evaluation => {
                let rm = self.params.get1(&format!("{name}.running_mean"));
                let rv = self.params.get1(&format!("{name}.running_var"));
                self.tape.batchnorm_eval(x, gamma, beta, &rm, &rv, self.bn_eps)
            }
        }
    }

    /// Next graph of the pass: replayed from the input trace when frozen,
    /// otherwise computed and recorded.
    pub fn next_edges(&self, compute: impl FnOnce() -> Result<EdgeList>) -> Result<EdgeList> {
        if let Some(trace) = self.trace_in {
            let pos = self.trace_pos.get();
            let edges = trace
                .edges
                .get(pos)
                .cloned()
                .ok_or_else(|| crate::error::Error::Config("graph trace exhausted".into()))?;
            self.trace_pos.set(pos + 1);
            self.trace_out.borrow_mut().edges.push(edges.clone());
            Ok(edges)
        } else {
            let edges = compute()?;
            self.trace_out.borrow_mut().edges.push(edges.clone());
            Ok(edges)
        }
    }

    /// Parameter tape handles created during the pass.
    pub fn param_vars(&self) -> HashMap<String, Var> {
        self.param_vars.borrow().clone()
    }

    /// Batch statistics recorded by training-mode normalization layers.
    pub fn bn_updates(&self) -> Vec<BnUpdate> {
        self.bn_updates.borrow().clone()
    }

    pub fn trace(&self) -> GraphTrace {
        self.trace_out.borrow().clone()
    }
}

/// Apply recorded batch statistics to running buffers with exponential decay.
/// Variances use the unbiased correction. Updates are applied in record order.
pub fn apply_bn_updates(params: &mut ParamStore, updates: &[BnUpdate], momentum: f64) {
    for u in updates {
        let correction = if u.rows > 1 { u.rows as f64 / (u.rows - 1) as f64 } else { 1.0 };
        let rm_name = format!("{}.running_mean", u.name);
        let rv_name = format!("{}.running_var", u.name);
        let rm = params.get(&rm_name).clone();
        let rv = params.get(&rv_name).clone();
        let new_rm =
            rm.mapv(|v| v * (1.0 - momentum)) + &u.mean.view().into_dyn().mapv(|v| v * momentum);
        let unbiased = u.var.mapv(|v| v * correction);
        let new_rv =
            rv.mapv(|v| v * (1.0 - momentum)) + &unbiased.into_dyn().mapv(|v| v * momentum);
        params.set(&rm_name, new_rm);
        params.set(&rv_name, new_rv);
    }
}
