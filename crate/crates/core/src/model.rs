//! The assembled model: stem + window-local stages + graph bottleneck + head,
//! with single-pass prediction-plus-explanation output.

use crate::backbone::{backbone_forward, grid_patches, register_backbone};
use crate::bottleneck::{bottleneck_forward, register_bottleneck, BottleneckOut};
use crate::config::{ModelConfig, TaskKind};
use crate::error::{Error, Result};
use crate::forward::{BnUpdate, ForwardCtx, GraphTrace, Mode};
use crate::graph::{EdgeList, NodeGrid, PixelRect};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::{softmax_slice, Tape, Var};
use ndarray::{Array2, Array3, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Ground-truth target of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Value(f64),
}

/// Model output for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Prediction {
    Classification {
        logits: Vec<f64>,
        probabilities: Vec<f64>,
        class: usize,
    },
    Regression {
        value: f64,
    },
}

impl Prediction {
    /// Task score of this prediction against a target: probability assigned
    /// to the true class, or the predicted value (consumers turn regression
    /// scores into R^2 dataset-level).
    pub fn true_class_probability(&self, target: &Target) -> Option<f64> {
        match (self, target) {
            (Prediction::Classification { probabilities, .. }, Target::Class(c)) => {
                probabilities.get(*c).copied()
            }
            _ => None,
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Prediction::Regression { value } => Some(*value),
            Prediction::Classification { .. } => None,
        }
    }
}

pub fn register_head(b: &mut ParamBuilder, dim: usize, outputs: usize) {
    b.linear("head.fc1", dim, dim);
    b.linear("head.fc2", dim, outputs);
}

/// Global mean pooling over each image's nodes followed by a 2-layer MLP:
/// `(batch * M, D) -> (batch, outputs)`.
pub fn head(ctx: &ForwardCtx, x: Var, batch: usize) -> Var {
    let t = ctx.tape;
    let pooled = t.segment_mean(x, batch);
    let h = t.gelu(ctx.linear(pooled, "head.fc1"));
    ctx.linear(h, "head.fc2")
}

/// Everything produced by one forward pass over `batch` images. The tape
/// stays alive so callers can run backward passes from any recorded variable.
pub struct ForwardOutput {
    pub tape: Tape,
    pub batch: usize,
    /// Stacked input images `(batch * S, S, 3)`.
    pub image: Var,
    /// Final-stage node embeddings before the bottleneck, `(batch * M, D)`.
    pub stage4: Var,
    pub bottleneck: BottleneckOut,
    /// `(batch, num_classes)` logits or `(batch, 1)` regression values.
    pub output: Var,
    pub param_vars: HashMap<String, Var>,
    pub bn_updates: Vec<BnUpdate>,
    pub trace: GraphTrace,
}

impl ForwardOutput {
    /// Prediction of one image of the batch.
    pub fn prediction_at(&self, task: TaskKind, index: usize) -> Prediction {
        let out = self.tape.value(self.output);
        let out = out.view().into_dimensionality::<Ix2>().expect("output rank 2");
        let row: Vec<f64> = out.row(index).iter().copied().collect();
        prediction_from_row(task, &row)
    }

    pub fn prediction(&self, task: TaskKind) -> Prediction {
        assert_eq!(self.batch, 1, "prediction() expects a single-image pass");
        self.prediction_at(task, 0)
    }
}

fn prediction_from_row(task: TaskKind, row: &[f64]) -> Prediction {
    match task {
        TaskKind::Classification { .. } => {
            let logits = row.to_vec();
            let probabilities = softmax_slice(&logits);
            let class = probabilities
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            Prediction::Classification { logits, probabilities, class }
        }
        TaskKind::Regression => Prediction::Regression { value: row[0] },
    }
}

/// Cached backbone output for cheap bottleneck-only re-evaluation.
#[derive(Clone, Debug)]
pub struct EmbedCache {
    pub stage4: Array2<f64>,
    pub edges: EdgeList,
    pub p: Vec<f64>,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Build a model with freshly initialized parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new(seed);
        register_backbone(&mut b, &config);
        register_bottleneck(
            &mut b,
            config.stage_dims[3],
            config.bottleneck.layers,
            config.ffn_ratio,
        );
        register_head(&mut b, config.stage_dims[3], config.task.num_outputs());
        Ok(Model { config, params: b.store })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(Model { config, params })
    }

    fn check_image(&self, image: &Array3<f64>) -> Result<()> {
        let (h, w, c) = image.dim();
        let s = self.config.input_side;
        if h != s || w != s || c != 3 {
            return Err(Error::Config(format!(
                "image size {h}x{w}x{c} incompatible with configured input {s}x{s}x3"
            )));
        }
        Ok(())
    }

    /// One forward pass over a batch of images, concatenated as disjoint
    /// graphs with per-image node offsets (no edge crosses an image
    /// boundary; normalization statistics pool over the whole batch).
    ///
    /// `noise_rng` drives the stochastic edge weights (training mode only);
    /// `trace_in` freezes all dynamically built graphs to a previous pass;
    /// `edge_mask` multiplies the bottleneck edge weights.
    pub fn forward_batch(
        &self,
        images: &[&Array3<f64>],
        mode: Mode,
        noise_rng: &mut impl Rng,
        trace_in: Option<&GraphTrace>,
        edge_mask: Option<&[f64]>,
    ) -> Result<ForwardOutput> {
        if images.is_empty() {
            return Err(Error::Config("forward over an empty batch".into()));
        }
        for img in images {
            self.check_image(img)?;
        }
        let batch = images.len();
        let s = self.config.input_side;
        let mut stacked = Array3::<f64>::zeros((batch * s, s, 3));
        for (b, img) in images.iter().enumerate() {
            stacked.slice_mut(ndarray::s![b * s..(b + 1) * s, .., ..]).assign(img);
        }
        let tape = Tape::new();
        let (stage4, bottleneck, output, param_vars, bn_updates, trace, image_var) = {
            let ctx = ForwardCtx::new(&tape, &self.params, mode, trace_in);
            let image_var = tape.leaf(stacked.into_dyn());
            let stage4 = backbone_forward(&ctx, image_var, &self.config, batch)?;
            let bottleneck = bottleneck_forward(
                &ctx,
                stage4,
                batch,
                &self.config.bottleneck,
                noise_rng,
                edge_mask,
            )?;
            let output = head(&ctx, bottleneck.out, batch);
            (
                stage4,
                bottleneck,
                output,
                ctx.param_vars(),
                ctx.bn_updates(),
                ctx.trace(),
                image_var,
            )
        };
        Ok(ForwardOutput {
            tape,
            batch,
            image: image_var,
            stage4,
            bottleneck,
            output,
            param_vars,
            bn_updates,
            trace,
        })
    }

    /// Single-image forward pass.
    pub fn forward(
        &self,
        image: &Array3<f64>,
        mode: Mode,
        noise_rng: &mut impl Rng,
        trace_in: Option<&GraphTrace>,
        edge_mask: Option<&[f64]>,
    ) -> Result<ForwardOutput> {
        self.forward_batch(&[image], mode, noise_rng, trace_in, edge_mask)
    }

    /// Evaluation-mode prediction.
    pub fn predict(&self, image: &Array3<f64>) -> Result<Prediction> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(image, Mode::Evaluation, &mut rng, None, None)?;
        Ok(out.prediction(self.config.task))
    }

    /// Single evaluation pass returning both the prediction and the full
    /// edge-probability explanation; no extra backward pass involved.
    pub fn predict_with_explanation(
        &self,
        image: &Array3<f64>,
        image_id: &str,
    ) -> Result<(Prediction, crate::explain::Explanation)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(image, Mode::Evaluation, &mut rng, None, None)?;
        let prediction = out.prediction(self.config.task);
        let p: Vec<f64> = out.tape.value(out.bottleneck.p).iter().copied().collect();
        let mut edges = out.bottleneck.edges.clone();
        edges.weight = Some(p);
        let explanation = crate::explain::Explanation::new(
            image_id.to_string(),
            prediction.clone(),
            self.stage4_patches(),
            self.config.stage_sides()[3],
            edges,
        )?;
        Ok((prediction, explanation))
    }

    /// Pixel rectangles of the final-stage nodes (one per window region).
    pub fn stage4_patches(&self) -> Vec<PixelRect> {
        let side = self.config.stage_sides()[3];
        grid_patches(side, self.config.input_side / side)
    }

    /// Final-stage node grid for one image (evaluation mode).
    pub fn stage4_grid(&self, image: &Array3<f64>) -> Result<NodeGrid> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(image, Mode::Evaluation, &mut rng, None, None)?;
        let side = self.config.stage_sides()[3];
        let features = out
            .tape
            .value(out.stage4)
            .into_dimensionality::<Ix2>()
            .expect("stage-4 features");
        Ok(NodeGrid::new(side, side, features, self.stage4_patches()))
    }

    /// Backbone pass plus edge probabilities, cached for bottleneck-only
    /// re-evaluation under different edge masks.
    pub fn embed(&self, image: &Array3<f64>) -> Result<EmbedCache> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(image, Mode::Evaluation, &mut rng, None, None)?;
        Ok(EmbedCache {
            stage4: out
                .tape
                .value(out.stage4)
                .into_dimensionality::<Ix2>()
                .expect("stage-4 features"),
            edges: out.bottleneck.edges.clone(),
            p: out.tape.value(out.bottleneck.p).iter().copied().collect(),
        })
    }

    /// Evaluation-mode bottleneck + head on cached backbone embeddings.
    pub fn predict_from_cache(
        &self,
        cache: &EmbedCache,
        edge_mask: Option<&[f64]>,
    ) -> Result<Prediction> {
        let tape = Tape::new();
        let trace = GraphTrace { edges: vec![cache.edges.clone()] };
        let prediction = {
            let ctx = ForwardCtx::new(&tape, &self.params, Mode::Evaluation, Some(&trace));
            let stage4 = tape.leaf2(cache.stage4.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let b =
                bottleneck_forward(&ctx, stage4, 1, &self.config.bottleneck, &mut rng, edge_mask)?;
            let output = head(&ctx, b.out, 1);
            let row: Vec<f64> = tape.value(output).iter().copied().collect();
            prediction_from_row(self.config.task, &row)
        };
        Ok(prediction)
    }

    /// Task score of an image: true-class probability for classification,
    /// predicted value for regression.
    pub fn score(&self, image: &Array3<f64>, target: &Target) -> Result<f64> {
        let pred = self.predict(image)?;
        Ok(match (&pred, target) {
            (Prediction::Classification { probabilities, .. }, Target::Class(c)) => {
                *probabilities.get(*c).ok_or_else(|| {
                    Error::Config(format!("label {c} out of range for model output"))
                })?
            }
            (Prediction::Regression { value }, _) => *value,
            (Prediction::Classification { .. }, Target::Value(_)) => {
                return Err(Error::Config("value target for classification model".into()))
            }
        })
    }

    /// Score plus its gradient with respect to the input image, with all
    /// dynamically built graphs optionally frozen to `trace`.
    pub fn score_and_input_grad(
        &self,
        image: &Array3<f64>,
        target: &Target,
        trace: Option<&GraphTrace>,
    ) -> Result<(f64, Array3<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(image, Mode::Evaluation, &mut rng, trace, None)?;
        let root = match (self.config.task, target) {
            (TaskKind::Classification { num_classes }, Target::Class(c)) => {
                if *c >= num_classes {
                    return Err(Error::Config(format!("label {c} out of range")));
                }
                out.tape.softmax_select(out.output, *c)
            }
            (TaskKind::Regression, _) => out.tape.reshape(out.output, &[1]),
            (TaskKind::Classification { .. }, Target::Value(_)) => {
                return Err(Error::Config("value target for classification model".into()))
            }
        };
        let score = out.tape.scalar_value(root);
        let grads = out.tape.backward(root, 1.0);
        let g = grads
            .get(out.image)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("image gradient");
        Ok((score, g))
    }

    /// Graph trace of an evaluation pass (for frozen-graph re-evaluation).
    pub fn graph_trace(&self, image: &Array3<f64>) -> Result<GraphTrace> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(image, Mode::Evaluation, &mut rng, None, None)?.trace)
    }

    /// Gradient of a scalar probe of one final-stage node's pre-bottleneck
    /// embedding with respect to the input image.
    pub fn stage4_node_input_grad(
        &self,
        image: &Array3<f64>,
        node: usize,
        probe: &[f64],
    ) -> Result<Array3<f64>> {
        self.check_image(image)?;
        let tape = Tape::new();
        let ctx = ForwardCtx::new(&tape, &self.params, Mode::Evaluation, None);
        let image_var = tape.leaf(image.clone().into_dyn());
        let stage4 = backbone_forward(&ctx, image_var, &self.config, 1)?;
        let shape = tape.shape(stage4);
        assert_eq!(probe.len(), shape[1], "probe length must match stage-4 dim");
        let mut w = ndarray::ArrayD::<f64>::zeros(ndarray::IxDyn(&shape));
        for (j, &pv) in probe.iter().enumerate() {
            w[[node, j]] = pv;
        }
        let root = tape.weighted_sum(stage4, &w);
        let grads = tape.backward(root, 1.0);
        Ok(grads
            .get(image_var)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("image gradient"))
    }
}
