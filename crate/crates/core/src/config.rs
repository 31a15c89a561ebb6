//! Model, bottleneck and training configuration.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Prediction task of the assembled model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskKind {
    Classification { num_classes: usize },
    Regression,
}

impl TaskKind {
    pub fn num_outputs(&self) -> usize {
        match self {
            TaskKind::Classification { num_classes } => *num_classes,
            TaskKind::Regression => 1,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskKind::Classification { .. })
    }
}

/// Reduction applied to the per-edge information regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoReduction {
    Mean,
    Sum,
}

/// Graph-bottleneck hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BottleneckConfig {
    /// Edge-weight prior: the regularizer is minimal when every edge
    /// probability equals `r`.
    pub r: f64,
    /// Concrete-relaxation temperature for edge sampling during training.
    pub temperature: f64,
    /// Self-weight of the sum aggregation, `(1 + gin_eps) * x_i`.
    pub gin_eps: f64,
    /// Number of bottleneck graph layers.
    pub layers: usize,
    /// Neighbors per node in the global graph; must match `global_k`.
    pub k: usize,
    #[serde(default = "default_info_reduction")]
    pub info_reduction: InfoReduction,
    /// Average the probabilities of the two directions of each node pair.
    #[serde(default)]
    pub symmetrize_p: bool,
}

fn default_info_reduction() -> InfoReduction {
    InfoReduction::Mean
}

/// Architecture hyperparameters of the full model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input image side in pixels; must be divisible by 64.
    pub input_side: usize,
    /// Node feature dimension per stage.
    pub stage_dims: [usize; 4],
    /// Hidden-dimension ratio of the feed-forward sublayers.
    pub ffn_ratio: usize,
    /// Window side in nodes for the window-local stages.
    pub window_side: usize,
    /// Neighbors per node in the window-local graphs.
    pub local_k: usize,
    /// Neighbors per node in the final-stage global graph.
    pub global_k: usize,
    /// Graph blocks per stage; the last entry is the bottleneck layer count.
    pub blocks_per_stage: [usize; 4],
    pub task: TaskKind,
    pub bottleneck: BottleneckConfig,
}

impl ModelConfig {
    /// Small configuration for desk-scale experiments on 128-px inputs.
    pub fn desk() -> Self {
        ModelConfig {
            input_side: 128,
            stage_dims: [16, 32, 64, 96],
            ffn_ratio: 4,
            window_side: 4,
            local_k: 9,
            global_k: 5,
            blocks_per_stage: [1, 1, 2, 2],
            task: TaskKind::Classification { num_classes: 2 },
            bottleneck: BottleneckConfig {
                r: 0.7,
                temperature: 1.0,
                gin_eps: 0.0,
                layers: 2,
                k: 5,
                info_reduction: InfoReduction::Mean,
                symmetrize_p: false,
            },
        }
    }

    /// Full-size configuration (256-px inputs, dims 48/96/240/384).
    pub fn paper() -> Self {
        ModelConfig {
            input_side: 256,
            stage_dims: [48, 96, 240, 384],
            ffn_ratio: 4,
            window_side: 4,
            local_k: 9,
            global_k: 5,
            blocks_per_stage: [2, 2, 4, 4],
            task: TaskKind::Classification { num_classes: 45 },
            bottleneck: BottleneckConfig {
                r: 0.7,
                temperature: 1.0,
                gin_eps: 0.0,
                layers: 4,
                k: 5,
                info_reduction: InfoReduction::Mean,
                symmetrize_p: false,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side == 0 || self.input_side % 64 != 0 {
            return Err(Error::Config(format!(
                "input_side {} must be a positive multiple of 64",
                self.input_side
            )));
        }
        if self.stage_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("stage_dims must be positive".into()));
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(Error::Config("blocks_per_stage must be positive".into()));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::Config("ffn_ratio must be positive".into()));
        }
        if self.window_side == 0 {
            return Err(Error::Config("window_side must be positive".into()));
        }
        if self.local_k == 0 || self.global_k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        for (stage, div) in [(1usize, 4usize), (2, 8), (3, 16)] {
            let side = self.input_side / div;
            if side % self.window_side != 0 {
                return Err(Error::Config(format!(
                    "stage {stage} grid side {side} not divisible by window_side {}",
                    self.window_side
                )));
            }
        }
        if !(0.0 < self.bottleneck.r && self.bottleneck.r < 1.0) {
            return Err(Error::Config(format!(
                "bottleneck r {} must lie in (0, 1)",
                self.bottleneck.r
            )));
        }
        if self.bottleneck.temperature <= 0.0 {
            return Err(Error::Config("bottleneck temperature must be positive".into()));
        }
        if self.bottleneck.layers == 0 {
            return Err(Error::Config("bottleneck layers must be positive".into()));
        }
        if self.bottleneck.k != self.global_k {
            return Err(Error::Config(format!(
                "bottleneck k {} must equal global_k {}",
                self.bottleneck.k, self.global_k
            )));
        }
        if self.bottleneck.layers != self.blocks_per_stage[3] {
            return Err(Error::Config(format!(
                "bottleneck layers {} must equal blocks_per_stage[3] {}",
                self.bottleneck.layers, self.blocks_per_stage[3]
            )));
        }
        if let TaskKind::Classification { num_classes } = self.task {
            if num_classes < 2 {
                return Err(Error::Config("classification needs at least 2 classes".into()));
            }
        }
        Ok(())
    }

    /// Grid side at each of the four stages (input divided by 4/8/16/32).
    pub fn stage_sides(&self) -> [usize; 4] {
        [
            self.input_side / 4,
            self.input_side / 8,
            self.input_side / 16,
            self.input_side / 32,
        ]
    }

    /// Number of final-stage nodes.
    pub fn stage4_nodes(&self) -> usize {
        let s = self.stage_sides()[3];
        s * s
    }

    /// Pixel block mixed by a final window-local stage: window_side nodes of
    /// `input/16` px each.
    pub fn stage3_window_px(&self) -> usize {
        self.window_side * (self.input_side / (self.input_side / 16))
    }
}

/// Optimization schedule. Only cosine annealing to zero is supported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Validate every this many epochs.
    pub eval_every: usize,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
}

fn default_schedule() -> Schedule {
    Schedule::Cosine
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 5e-4,
            weight_decay: 0.03,
            batch_size: 16,
            seed: 0,
            eval_every: 10,
            schedule: Schedule::Cosine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }

    /// Cosine-annealed learning rate for an epoch: starts at `lr`, reaches
    /// zero at the final epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        (self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())).max(0.0)
    }
}

/// Combined configuration file format for the CLI: keys mirror the three
/// config structs exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig { model: ModelConfig::desk(), train: TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
