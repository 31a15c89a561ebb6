//! Training: task + information loss, AdamW with cosine-annealed learning
//! rate, the epoch loop with periodic validation, and checkpointing.
//!
//! Batches are accumulation groups: each image runs its own forward/backward
//! pass (images in a batch are processed in parallel, gradients reduced in
//! dataset order), so results are bit-reproducible for a fixed seed
//! regardless of thread count.

use crate::config::{RunConfig, TaskKind, TrainConfig};
use crate::error::{Error, Result};
use crate::forward::{apply_bn_updates, Mode};
use crate::model::{Model, Prediction, Target};
use crate::params::ParamStore;
use crate::tensor::Var;
use ndarray::{Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Momentum of the running-statistics update (per normalization group).
const BN_MOMENTUM: f64 = 0.1;

/// One labeled sample in memory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f64>,
    pub target: Target,
    /// Final-stage node pair carrying the planted relation, when known.
    pub marker_nodes: Option<(usize, usize)>,
}

/// An in-memory dataset split.
#[derive(Clone, Debug, Default)]
pub struct Split {
    pub samples: Vec<Sample>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Task loss plus information loss; `total = task_loss + info_loss`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub info_loss: f64,
    pub total: f64,
}

/// Attach the task criterion to a forward pass output: cross-entropy for
/// classification, squared error for regression; the information term adds on
/// top.
pub fn total_loss(
    tape: &crate::tensor::Tape,
    output: Var,
    info: Var,
    target: &Target,
    task: TaskKind,
) -> Result<(Var, LossBreakdown)> {
    total_loss_batch(tape, output, info, std::slice::from_ref(target), task)
}

/// Batched loss: mean task criterion over the batch plus the information term.
pub fn total_loss_batch(
    tape: &crate::tensor::Tape,
    output: Var,
    info: Var,
    targets: &[Target],
    task: TaskKind,
) -> Result<(Var, LossBreakdown)> {
    let task_var = match task {
        TaskKind::Classification { num_classes } => {
            let mut labels = Vec::with_capacity(targets.len());
            for t in targets {
                match t {
                    Target::Class(c) if *c < num_classes => labels.push(*c),
                    Target::Class(c) => {
                        return Err(Error::Data(format!(
                            "label {c} out of range for {num_classes} classes"
                        )))
                    }
                    Target::Value(_) => {
                        return Err(Error::Data(
                            "regression target fed to classification model".into(),
                        ))
                    }
                }
            }
            tape.softmax_ce_batch(output, &labels)
        }
        TaskKind::Regression => {
            let mut values = Vec::with_capacity(targets.len());
            for t in targets {
                match t {
                    Target::Value(v) => values.push(*v),
                    Target::Class(_) => {
                        return Err(Error::Data("class target fed to regression model".into()))
                    }
                }
            }
            tape.mse_batch(output, &values)
        }
    };
    let total = tape.add(task_var, info);
    let breakdown = LossBreakdown {
        task_loss: tape.scalar_value(task_var),
        info_loss: tape.scalar_value(info),
        total: tape.scalar_value(total),
    };
    Ok((total, breakdown))
}

/// Decoupled-weight-decay Adam. Weight decay applies to dense weights only
/// (never biases or normalization parameters); buffers are not touched.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: HashMap<String, ArrayD<f64>>,
    v: HashMap<String, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update with gradients keyed by parameter name.
    pub fn step(&mut self, params: &mut ParamStore, grads: &HashMap<String, ArrayD<f64>>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for p in params.iter_mut() {
            if !p.kind.trainable() {
                continue;
            }
            let Some(g) = grads.get(&p.name) else { continue };
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| ArrayD::zeros(IxDyn(p.value.shape())));
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| ArrayD::zeros(IxDyn(p.value.shape())));
            ndarray::Zip::from(m.view_mut()).and(g).for_each(|mv, &gv| {
                *mv = 0.9 * *mv + 0.1 * gv;
            });
            ndarray::Zip::from(v.view_mut()).and(g).for_each(|vv, &gv| {
                *vv = 0.999 * *vv + 0.001 * gv * gv;
            });
            let decay = if p.kind.decayed() { self.weight_decay } else { 0.0 };
            let eps = self.eps;
            ndarray::Zip::from(p.value.view_mut())
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *pv -= lr * (mhat / (vhat.sqrt() + eps) + decay * *pv);
                });
        }
    }
}

/// Saved training outcome: parameters plus a JSON sidecar.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: RunConfig,
    pub epoch: usize,
    pub validation_metric: f64,
    pub rng: RngState,
}

/// Training RNG position: the master seed plus the epoch the checkpoint was
/// taken at (all per-step streams derive from these).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
}

pub struct Checkpoint {
    pub params: ParamStore,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Write `<path>` (parameter blob) and `<path>.json` (metadata).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        let meta = serde_json::to_string_pretty(&self.meta)? + "\n";
        std::fs::write(sidecar_path(path), meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params = ParamStore::load(path)?;
        let meta_bytes = std::fs::read(sidecar_path(path))
            .map_err(|e| Error::Data(format!("checkpoint sidecar missing: {e}")))?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)?;
        Ok(Checkpoint { params, meta })
    }

    pub fn into_model(self) -> Result<(Model, CheckpointMeta)> {
        let meta = self.meta.clone();
        let model = Model::from_parts(self.meta.config.model, self.params)?;
        Ok((model, meta))
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Per-epoch training record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: LossBreakdown,
    pub validation_metric: Option<f64>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
    /// Validation metric of the returned (best) checkpoint.
    pub best_metric: f64,
}

/// Dataset-level goodness of fit: accuracy for classification, R^2 for
/// regression.
pub fn goodness_of_fit(model: &Model, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Data("empty split".into()));
    }
    let preds = predict_split(model, split)?;
    match model.config.task {
        TaskKind::Classification { .. } => {
            let correct = preds
                .iter()
                .zip(&split.samples)
                .filter(|(p, s)| match (p, s.target) {
                    (Prediction::Classification { class, .. }, Target::Class(c)) => *class == c,
                    _ => false,
                })
                .count();
            Ok(correct as f64 / split.len() as f64)
        }
        TaskKind::Regression => {
            let pairs: Vec<(f64, f64)> = preds
                .iter()
                .zip(&split.samples)
                .map(|(p, s)| {
                    let y = match s.target {
                        Target::Value(v) => v,
                        Target::Class(c) => c as f64,
                    };
                    (p.value().unwrap_or(0.0), y)
                })
                .collect();
            Ok(crate::metrics::r_squared(
                &pairs.iter().map(|p| p.0).collect::<Vec<_>>(),
                &pairs.iter().map(|p| p.1).collect::<Vec<_>>(),
            ))
        }
    }
}

/// Evaluation-mode predictions over a split, computed in parallel, collected
/// in dataset order.
pub fn predict_split(model: &Model, split: &Split) -> Result<Vec<Prediction>> {
    split
        .samples
        .par_iter()
        .map(|s| model.predict(&s.image))
        .collect::<Result<Vec<_>>>()
}

/// Run the training loop and return the checkpoint with the best validation
/// metric (higher is better: accuracy or R^2).
pub fn train(model: &mut Model, train_split: &Split, val_split: &Split, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_split.is_empty() || val_split.is_empty() {
        return Err(Error::Data("training needs non-empty train and validation splits".into()));
    }
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..train_split.len()).collect();
        let mut shuffle_rng = derive_rng(cfg.seed, &[0x7368_7566u64, epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = LossBreakdown { task_loss: 0.0, info_loss: 0.0, total: 0.0 };
        let mut seen = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            // split the batch into a fixed number of normalization groups;
            // each group runs one concatenated-graph pass (statistics pool
            // over the group), groups run in parallel
            let group_size = batch.len().div_ceil(BN_GROUPS);
            let groups: Vec<&[usize]> = batch.chunks(group_size).collect();
            let results: Vec<Result<GroupGrads>> = groups
                .par_iter()
                .enumerate()
                .map(|(g, idxs)| {
                    group_grads(model, train_split, idxs, cfg.seed, epoch, step, g)
                })
                .collect();

            let mut accum: HashMap<String, ArrayD<f64>> = HashMap::new();
            let batch_len = batch.len() as f64;
            for r in results {
                let r = r?;
                if !r.loss.total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch} step {step}"
                    )));
                }
                let w = r.count as f64;
                loss_sum.task_loss += r.loss.task_loss * w;
                loss_sum.info_loss += r.loss.info_loss * w;
                loss_sum.total += r.loss.total * w;
                seen += r.count;
                let scale = w / batch_len;
                for (name, g) in r.grads {
                    accum
                        .entry(name)
                        .and_modify(|a| *a += &g.mapv(|v| v * scale))
                        .or_insert_with(|| g.mapv(|v| v * scale));
                }
                apply_bn_updates(&mut model.params, &r.bn_updates, BN_MOMENTUM);
            }
            opt.step(&mut model.params, &accum, lr);
            if !model.params.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite parameter after epoch {epoch} step {step}"
                )));
            }
        }

        let mean_loss = LossBreakdown {
            task_loss: loss_sum.task_loss / seen as f64,
            info_loss: loss_sum.info_loss / seen as f64,
            total: loss_sum.total / seen as f64,
        };

        let is_eval_epoch = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let validation_metric = if is_eval_epoch {
            let metric = goodness_of_fit(model, val_split)?;
            if best.as_ref().map_or(true, |(b, _, _)| metric > *b) {
                best = Some((metric, epoch, model.params.clone()));
            }
            Some(metric)
        } else {
            None
        };
        history.push(EpochStats { epoch, lr, mean_loss, validation_metric });
    }

    let (best_metric, best_epoch, best_params) = best.expect("at least one validation ran");
    let checkpoint = Checkpoint {
        params: best_params,
        meta: CheckpointMeta {
            format_version: 1,
            config: RunConfig { model: model.config.clone(), train: cfg.clone() },
            epoch: best_epoch,
            validation_metric: best_metric,
            rng: RngState { seed: cfg.seed, epoch: best_epoch },
        },
    };
    Ok(TrainOutcome { checkpoint, history, best_metric })
}

/// Fixed number of normalization groups per training batch, independent of
/// the machine's thread count so results stay reproducible everywhere.
const BN_GROUPS: usize = 2;

struct GroupGrads {
    loss: LossBreakdown,
    count: usize,
    grads: Vec<(String, ArrayD<f64>)>,
    bn_updates: Vec<crate::forward::BnUpdate>,
}

fn group_grads(
    model: &Model,
    split: &Split,
    indices: &[usize],
    seed: u64,
    epoch: usize,
    step: usize,
    group: usize,
) -> Result<GroupGrads> {
    let mut noise_rng =
        derive_rng(seed, &[0x6e6f_6973u64, epoch as u64, step as u64, group as u64]);
    let images: Vec<&ndarray::Array3<f64>> =
        indices.iter().map(|&i| &split.samples[i].image).collect();
    let targets: Vec<Target> = indices.iter().map(|&i| split.samples[i].target).collect();
    let out = model.forward_batch(&images, Mode::Training, &mut noise_rng, None, None)?;
    let (loss_var, loss) = total_loss_batch(
        &out.tape,
        out.output,
        out.bottleneck.info,
        &targets,
        model.config.task,
    )?;
    let grads = out.tape.backward(loss_var, 1.0);
    let mut named = Vec::with_capacity(out.param_vars.len());
    for (name, var) in &out.param_vars {
        named.push((name.clone(), grads.get(*var).clone()));
    }
    // deterministic reduction order
    named.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(GroupGrads { loss, count: indices.len(), grads: named, bn_updates: out.bn_updates })
}

/// Independent deterministic stream for a (seed, purpose, indices...) tuple.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        h ^= t.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
    }
    ChaCha8Rng::seed_from_u64(h)
}
