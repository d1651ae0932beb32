//! Run configuration: a TOML file with flat sections, every key defaulted,
//! unknown keys rejected so a typo in an ablation config cannot silently
//! fall back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use patchflow_core::model::{ModelConfig, UncondMode};
use patchflow_core::objective::{LossWeights, TimeDist};
use patchflow_core::optim::LrSchedule;
use patchflow_core::train::{PairMode, TrainConfig};
use patchflow_core::GridShape;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Instances,
    Triples,
}

/// `[data]`: synthetic dataset geometry and generator seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub residual_count: usize,
    pub residual_scale: f64,
    pub seed: u64,
    pub kind: DataKind,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n: 256,
            channels: 3,
            height: 8,
            width: 8,
            residual_count: 4,
            residual_scale: 0.05,
            seed: 0,
            kind: DataKind::Instances,
        }
    }
}

impl DataSection {
    pub fn shape(&self) -> GridShape {
        GridShape::new(self.channels, self.height, self.width)
    }
}

/// `[model]`: transformer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub patch_size: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub time_freqs: usize,
    pub learned_positions: bool,
    pub uncond_mode: UncondMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            patch_size: 2,
            token_dim: 32,
            heads: 4,
            depth: 2,
            time_freqs: 8,
            learned_positions: true,
            uncond_mode: UncondMode::ZeroGarment,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, shape: GridShape) -> ModelConfig {
        ModelConfig {
            channels: shape.channels,
            height: shape.height,
            width: shape.width,
            patch_size: self.patch_size,
            token_dim: self.token_dim,
            heads: self.heads,
            depth: self.depth,
            time_freqs: self.time_freqs,
            learned_positions: self.learned_positions,
        }
    }
}

/// `[train]`: stage-1 objective weights, schedule, and sampling knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub alpha: f64,
    pub beta: f64,
    pub uncond_ratio: f64,
    pub cfg_scale: f64,
    pub use_cfg_at_inference: bool,
    pub inference_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub plateau_steps: usize,
    pub decay_steps: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub pair_mode: PairMode,
    pub fixed_gap: f64,
    pub stopgrad: bool,
    pub time_dist: TimeDist,
    pub eval_every: usize,
    pub eval_steps: usize,
    pub eval_instances: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            alpha: t.weights.alpha,
            beta: t.weights.beta,
            uncond_ratio: t.uncond_ratio,
            cfg_scale: t.cfg_scale,
            use_cfg_at_inference: t.use_cfg_at_inference,
            inference_steps: t.inference_steps,
            epochs: t.epochs,
            batch_size: t.batch_size,
            warmup_steps: t.schedule.warmup_steps,
            plateau_steps: t.schedule.plateau_steps,
            decay_steps: t.schedule.decay_steps,
            peak_lr: t.schedule.peak_lr,
            floor_lr: t.schedule.floor_lr,
            weight_decay: t.weight_decay,
            seed: t.seed,
            pair_mode: t.pair_mode,
            fixed_gap: t.fixed_gap,
            stopgrad: t.stopgrad,
            time_dist: t.time_dist,
            eval_every: t.eval_every,
            eval_steps: t.eval_steps,
            eval_instances: t.eval_instances,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
            },
            uncond_ratio: self.uncond_ratio,
            cfg_scale: self.cfg_scale,
            use_cfg_at_inference: self.use_cfg_at_inference,
            inference_steps: self.inference_steps,
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: LrSchedule {
                warmup_steps: self.warmup_steps,
                plateau_steps: self.plateau_steps,
                decay_steps: self.decay_steps,
                peak_lr: self.peak_lr,
                floor_lr: self.floor_lr,
            },
            weight_decay: self.weight_decay,
            seed: self.seed,
            pair_mode: self.pair_mode,
            fixed_gap: self.fixed_gap,
            stopgrad: self.stopgrad,
            time_dist: self.time_dist,
            eval_every: self.eval_every,
            eval_steps: self.eval_steps,
            eval_instances: self.eval_instances,
        }
    }
}

/// `[distill]`: stage-2 LADD settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub teacher_steps: usize,
    pub recon_weight: f64,
    pub adv_weight: f64,
    pub blocks_sampled: usize,
    pub disc_lr: f64,
    pub student_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub r1_gamma: f64,
    pub eval_instances: usize,
    pub draws_per_pair: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = patchflow_core::distill::DistillConfig::default();
        Self {
            teacher_steps: d.teacher_steps,
            recon_weight: d.recon_weight,
            adv_weight: d.adv_weight,
            blocks_sampled: d.blocks_sampled,
            disc_lr: d.disc_lr,
            student_lr: d.student_lr,
            epochs: d.epochs,
            batch_size: d.batch_size,
            seed: d.seed,
            r1_gamma: d.r1_gamma,
            eval_instances: d.eval_instances,
            draws_per_pair: d.draws_per_pair,
        }
    }
}

impl DistillSection {
    pub fn to_distill_config(&self) -> patchflow_core::distill::DistillConfig {
        patchflow_core::distill::DistillConfig {
            teacher_steps: self.teacher_steps,
            recon_weight: self.recon_weight,
            adv_weight: self.adv_weight,
            blocks_sampled: self.blocks_sampled,
            disc_lr: self.disc_lr,
            student_lr: self.student_lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            r1_gamma: self.r1_gamma,
            eval_instances: self.eval_instances,
            draws_per_pair: self.draws_per_pair,
        }
    }
}

/// `[eval]`: checkpoint evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub steps: usize,
    /// Instances evaluated from the front of the dataset; 0 means all.
    pub instances: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            steps: 30,
            instances: 0,
            seed: 0,
        }
    }
}

/// `[sample]`: single-trajectory inspection settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub instance: usize,
    pub steps: usize,
    pub seed: u64,
    pub cfg: bool,
    pub cfg_scale: f64,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            instance: 0,
            steps: 30,
            seed: 0,
            cfg: false,
            cfg_scale: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub distill: DistillSection,
    pub eval: EvalSection,
    pub sample: SampleSection,
}

impl FileConfig {
    /// Reads a config file, or returns all defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        if !path.exists() {
            return Err(CliError::Missing(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("parsing {}: {e}", path.display())))
    }

    /// Checks the relations between sections that no single section can see.
    pub fn cross_validate(&self) -> Result<(), CliError> {
        let shape = self.data.shape();
        if self.data.n == 0 {
            return Err(CliError::Config("data.n must be at least 1".into()));
        }
        if self.data.channels < 2 {
            return Err(CliError::Config(
                "data.channels must be at least 2 (last channel carries identity)".into(),
            ));
        }
        if self.data.height < 4 || self.data.width < 4 {
            return Err(CliError::Config(
                "data.height and data.width must be at least 4".into(),
            ));
        }
        if shape.height % self.model.patch_size != 0 || shape.width % self.model.patch_size != 0 {
            return Err(CliError::Config(format!(
                "data shape {}x{} is not divisible by model.patch_size {}",
                shape.height, shape.width, self.model.patch_size
            )));
        }
        self.model
            .to_model_config(shape)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train
            .to_train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }
}
