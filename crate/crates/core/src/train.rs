//! Stage-1 training loop, the eight-cell ablation grid, pseudo-target
//! generation for distillation, and the noise-robustness probe.
//!
//! Every run is a pure function of its config: sample order, noise draws,
//! condition dropout and timestep pairs all come from named streams derived
//! from the single run seed, and all reductions are fixed-order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::flow::{euler_sample, VelocityField};
use crate::grid::LatentGrid;
use crate::metrics::{eval_report, sample_endpoints_with, EvalReport};
use crate::model::{init_model, ModelConfig, ModelField, VelocityModel};
use crate::objective::{
    loss_total_grad, sample_pair_dist, sample_pair_fixed, CfgField, LossWeights, TimeDist,
    TimestepPair,
};
use crate::optim::{AdamConfig, AdamW, LrSchedule};
use crate::rng::{derive_seed, seeded_normal_grid, stream_rng};
use crate::synth::{Dataset, TryOnInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PairMode {
    #[default]
    Free,
    FixedInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub uncond_ratio: f64,
    pub cfg_scale: f64,
    pub use_cfg_at_inference: bool,
    pub inference_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub seed: u64,
    pub pair_mode: PairMode,
    /// t2 - t1 when pair_mode is fixed-interval.
    pub fixed_gap: f64,
    pub stopgrad: bool,
    pub time_dist: TimeDist,
    /// Epochs between periodic evaluations; 0 disables them.
    pub eval_every: usize,
    /// Step count of the multi-step periodic evaluation.
    pub eval_steps: usize,
    /// Instances used for periodic evaluation; 0 means the whole dataset.
    pub eval_instances: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            uncond_ratio: 0.2,
            cfg_scale: 2.0,
            use_cfg_at_inference: false,
            inference_steps: 30,
            epochs: 40,
            batch_size: 8,
            schedule: LrSchedule {
                warmup_steps: 20,
                plateau_steps: 100,
                decay_steps: 120,
                peak_lr: 2e-3,
                floor_lr: 2e-4,
            },
            weight_decay: 1e-4,
            seed: 0,
            pair_mode: PairMode::Free,
            fixed_gap: 0.1,
            stopgrad: true,
            time_dist: TimeDist::Uniform,
            eval_every: 2,
            eval_steps: 30,
            eval_instances: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.schedule.validate()?;
        if !(0.0..=1.0).contains(&self.uncond_ratio) {
            return Err(CoreError::Config(format!(
                "uncond_ratio must lie in [0, 1], got {}",
                self.uncond_ratio
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.inference_steps == 0 {
            return Err(CoreError::Config(
                "epochs, batch_size and inference_steps must be positive".into(),
            ));
        }
        if self.eval_every > 0 && self.eval_steps < 2 {
            return Err(CoreError::Config(
                "eval_steps must be at least 2 when periodic evaluation is on".into(),
            ));
        }
        if !self.cfg_scale.is_finite() {
            return Err(CoreError::Config("cfg_scale must be finite".into()));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(CoreError::Config(format!(
                "weight_decay must be finite and nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub fm: f64,
    pub garment: f64,
    pub consistency: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub epoch: usize,
    pub one_step: EvalReport,
    pub multi_step: EvalReport,
}

pub struct TrainOutput {
    pub model: VelocityModel,
    pub epochs: Vec<EpochMetrics>,
    pub evals: Vec<EvalRow>,
    /// Set when training stopped early on a non-finite loss; the model holds
    /// the parameters of the last completed update.
    pub diverged: Option<(usize, usize)>,
    pub uncond_dropped: usize,
    pub uncond_total: usize,
}

fn eval_subset(data: &Dataset, k: usize) -> Dataset {
    if k == 0 || k >= data.len() {
        return data.clone();
    }
    Dataset {
        shape: data.shape,
        scale: data.scale,
        seed: data.seed,
        bank: data.bank.clone(),
        instances: data.instances[..k].to_vec(),
    }
}

pub(crate) fn shuffled_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, "shuffle", epoch as u64);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

pub fn train_stage1(
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<TrainOutput> {
    model_config.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::Config("training dataset is empty".into()));
    }
    if data.shape != model_config.grid_shape() {
        return Err(CoreError::Config(format!(
            "dataset shape {} does not match model shape {}",
            data.shape,
            model_config.grid_shape()
        )));
    }

    let mut model = init_model(model_config, cfg.seed)?;
    let mut opt = AdamW::new(
        model.param_count(),
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    )?;
    let zero_garment = LatentGrid::zeros(data.shape);
    let eval_data = eval_subset(data, cfg.eval_instances);
    let eval_seed = derive_seed(cfg.seed, "eval", 0);

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut evals = Vec::new();
    let mut grads = vec![0.0; model.param_count()];
    let mut diverged = None;
    // Last parameter vector known to produce a finite loss; restored on abort.
    let mut backup = model.params().to_vec();
    let mut sample_counter = 0u64;
    let mut update_counter = 0usize;
    let mut uncond_dropped = 0usize;
    let mut uncond_total = 0usize;

    'training: for epoch in 0..cfg.epochs {
        let order = shuffled_order(data.len(), cfg.seed, epoch);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut seen = 0usize;
        let mut last_lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            for &idx in batch {
                let inst = &data.instances[idx];
                let eps = seeded_normal_grid(cfg.seed, "noise", sample_counter, data.shape);
                let drop = stream_rng(cfg.seed, "dropout", sample_counter).gen::<f64>()
                    < cfg.uncond_ratio;
                uncond_total += 1;
                if drop {
                    uncond_dropped += 1;
                }
                let garment = if drop { &zero_garment } else { &inst.garment };
                let pair = sample_training_pair(cfg, sample_counter)?;
                sample_counter += 1;
                let breakdown = match loss_total_grad(
                    &model,
                    &inst.person,
                    garment,
                    &inst.target,
                    &eps,
                    pair,
                    cfg.weights,
                    cfg.stopgrad,
                    &mut grads,
                ) {
                    Ok(b) => b,
                    Err(CoreError::NonFinite { .. }) => {
                        diverged = Some((epoch, update_counter));
                        break 'training;
                    }
                    Err(e) => return Err(e),
                };
                if !breakdown.total.is_finite() {
                    diverged = Some((epoch, update_counter));
                    break 'training;
                }
                sums.0 += breakdown.fm_t1 + breakdown.fm_t2;
                sums.1 += breakdown.garment_t1 + breakdown.garment_t2;
                sums.2 += breakdown.consistency;
                sums.3 += breakdown.total;
                seen += 1;
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= inv);
            let lr = cfg.schedule.lr_at(update_counter);
            last_lr = lr;
            backup.copy_from_slice(model.params());
            match opt.step(model.params_mut(), &grads, lr) {
                Ok(()) => {}
                Err(CoreError::NonFinite { .. }) => {
                    diverged = Some((epoch, update_counter));
                    break 'training;
                }
                Err(e) => return Err(e),
            }
            update_counter += 1;
        }
        let n = seen.max(1) as f64;
        epochs.push(EpochMetrics {
            epoch,
            fm: sums.0 / n,
            garment: sums.1 / n,
            consistency: sums.2 / n,
            total: sums.3 / n,
            lr: last_lr,
        });
        let last_epoch = epoch + 1 == cfg.epochs;
        if cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || last_epoch) {
            evals.push(EvalRow {
                epoch,
                one_step: eval_report(&model, &eval_data, 1, eval_seed)?,
                multi_step: eval_report(&model, &eval_data, cfg.eval_steps, eval_seed)?,
            });
        }
    }
    if diverged.is_some() {
        model.params_mut().copy_from_slice(&backup);
    }
    model.set_step(update_counter as u64);
    Ok(TrainOutput {
        model,
        epochs,
        evals,
        diverged,
        uncond_dropped,
        uncond_total,
    })
}

fn sample_training_pair(cfg: &TrainConfig, counter: u64) -> Result<TimestepPair> {
    let mut rng = stream_rng(cfg.seed, "pair", counter);
    match cfg.pair_mode {
        PairMode::Free => Ok(sample_pair_dist(&mut rng, cfg.time_dist)),
        PairMode::FixedInterval => sample_pair_fixed(&mut rng, cfg.fixed_gap),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub uncond_training: bool,
    pub cfg_inference: bool,
    pub steps: usize,
}

impl AblationCell {
    pub fn label(&self) -> String {
        format!(
            "C_{{{},{}}}^{}",
            if self.uncond_training { "UT" } else { "noUT" },
            if self.cfg_inference { "CFG" } else { "noCFG" },
            self.steps
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub cell: AblationCell,
    pub energy_distance: f64,
    pub endpoint_mse: f64,
    pub garment_region_mse: f64,
}

pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub ut: TrainOutput,
    pub nout: TrainOutput,
}

/// Evaluates one trained model under one inference cell.
pub fn evaluate_cell(
    model: &VelocityModel,
    data: &Dataset,
    cell: AblationCell,
    cfg_scale: f64,
    eval_seed: u64,
) -> Result<AblationRow> {
    let report = if cell.cfg_inference {
        cell_report(
            |inst| CfgField::new(model, &inst.person, &inst.garment, cfg_scale),
            data,
            cell.steps,
            eval_seed,
        )?
    } else {
        cell_report(
            |inst| ModelField {
                model,
                person: &inst.person,
                garment: &inst.garment,
            },
            data,
            cell.steps,
            eval_seed,
        )?
    };
    Ok(AblationRow {
        label: cell.label(),
        cell,
        energy_distance: report.energy_distance,
        endpoint_mse: report.endpoint_mse,
        garment_region_mse: report.garment_region_mse,
    })
}

fn cell_report<'a, F, V>(
    field_for: F,
    data: &'a Dataset,
    steps: usize,
    seed: u64,
) -> Result<EvalReport>
where
    F: Fn(&'a TryOnInstance) -> V + Copy,
    V: VelocityField,
{
    let (endpoint_mse, garment_region_mse) =
        crate::metrics::endpoint_error_with(field_for, data, steps, seed)?;
    let endpoints = sample_endpoints_with(field_for, data, steps, seed)?;
    let targets: Vec<LatentGrid> = data.instances.iter().map(|i| i.target.clone()).collect();
    let energy = crate::metrics::energy_distance(&endpoints, &targets)?;
    Ok(EvalReport {
        endpoint_mse,
        garment_region_mse,
        energy_distance: energy,
        mean_chord_deviation: 0.0,
        mean_velocity_dispersion: 0.0,
        n_samples: data.len(),
    })
}

/// Trains the UT (uncond_ratio 0.2) and noUT (ratio 0) models and evaluates
/// both under every {CFG, noCFG} x {1, 30} inference cell.
pub fn run_ablation_grid(
    model_config: &ModelConfig,
    base: &TrainConfig,
    data: &Dataset,
) -> Result<AblationResult> {
    let ut_cfg = TrainConfig {
        uncond_ratio: 0.2,
        ..base.clone()
    };
    let nout_cfg = TrainConfig {
        uncond_ratio: 0.0,
        ..base.clone()
    };
    let ut = train_stage1(model_config, &ut_cfg, data)?;
    let nout = train_stage1(model_config, &nout_cfg, data)?;
    let eval_seed = derive_seed(base.seed, "ablate-eval", 0);
    let mut rows = Vec::with_capacity(8);
    for (uncond_training, output) in [(true, &ut), (false, &nout)] {
        for cfg_inference in [true, false] {
            for steps in [1usize, base.inference_steps] {
                let cell = AblationCell {
                    uncond_training,
                    cfg_inference,
                    steps,
                };
                rows.push(evaluate_cell(
                    &output.model,
                    data,
                    cell,
                    base.cfg_scale,
                    eval_seed,
                )?);
            }
        }
    }
    Ok(AblationResult { rows, ut, nout })
}

/// Multi-step Euler endpoints for randomly matched (person, garment) pairs,
/// used as distillation pseudo-targets.
pub fn generate_pseudo_targets(
    teacher: &VelocityModel,
    pairs: &[(LatentGrid, LatentGrid)],
    steps: usize,
    seed: u64,
) -> Result<Vec<LatentGrid>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, (person, garment))| {
            let field = ModelField {
                model: teacher,
                person,
                garment,
            };
            let eps = seeded_normal_grid(seed, "pseudo-noise", i as u64, teacher.config().grid_shape());
            Ok(euler_sample(&field, &eps, steps)?.final_state().clone())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRobustness {
    /// Mean pairwise distance between one-step outputs across noise seeds,
    /// averaged over instances.
    pub dispersion: f64,
    /// Mean distance between one-step outputs for different garments on the
    /// same person and noise.
    pub cross_garment: f64,
    pub ratio: f64,
}

pub fn mean_pairwise(xs: &[LatentGrid]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            acc += xs[i].distance(&xs[j]);
            count += 1;
        }
    }
    acc / count as f64
}

fn one_step_endpoint<F: VelocityField + ?Sized>(
    field: &F,
    eps: &LatentGrid,
) -> Result<LatentGrid> {
    Ok(euler_sample(field, eps, 1)?.final_state().clone())
}

/// Spread of one-step outputs across noise seeds versus across garments.
/// `field_for(instance, garment)` builds the sampling field; the garment
/// argument is the instance's own for the dispersion part and another
/// instance's for the cross-garment part.
pub fn noise_robustness_with<'a, F, V>(
    field_for: F,
    data: &'a Dataset,
    n_seeds: usize,
    cross_count: usize,
    seed: u64,
) -> Result<NoiseRobustness>
where
    F: Fn(&'a TryOnInstance, &'a LatentGrid) -> V,
    V: VelocityField,
{
    if data.is_empty() || n_seeds == 0 {
        return Err(CoreError::Config(
            "noise robustness needs data and at least one seed".into(),
        ));
    }
    let n = data.len();
    let mut dispersion_acc = 0.0;
    for (i, inst) in data.instances.iter().enumerate() {
        let field = field_for(inst, &inst.garment);
        let outputs: Result<Vec<LatentGrid>> = (0..n_seeds)
            .map(|j| {
                let eps = seeded_normal_grid(
                    seed,
                    "robust-noise",
                    (i * n_seeds + j) as u64,
                    data.shape,
                );
                one_step_endpoint(&field, &eps)
            })
            .collect();
        dispersion_acc += mean_pairwise(&outputs?);
    }
    let dispersion = dispersion_acc / n as f64;

    let mut cross_acc = 0.0;
    let mut cross_n = 0usize;
    if cross_count > 0 && n > 1 {
        for (i, inst) in data.instances.iter().enumerate() {
            let eps = seeded_normal_grid(seed, "robust-noise", (i * n_seeds) as u64, data.shape);
            let own_field = field_for(inst, &inst.garment);
            let own = one_step_endpoint(&own_field, &eps)?;
            for k in 1..=cross_count.min(n - 1) {
                let other = &data.instances[(i + k) % n];
                let field = field_for(inst, &other.garment);
                let out = one_step_endpoint(&field, &eps)?;
                cross_acc += own.distance(&out);
                cross_n += 1;
            }
        }
    }
    let cross_garment = if cross_n > 0 {
        cross_acc / cross_n as f64
    } else {
        0.0
    };
    let ratio = if cross_garment > 0.0 {
        dispersion / cross_garment
    } else if dispersion == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(NoiseRobustness {
        dispersion,
        cross_garment,
        ratio,
    })
}

pub fn noise_robustness(
    model: &VelocityModel,
    data: &Dataset,
    n_seeds: usize,
    cross_count: usize,
    seed: u64,
) -> Result<NoiseRobustness> {
    noise_robustness_with(
        |inst, garment| ModelField {
            model,
            person: &inst.person,
            garment,
        },
        data,
        n_seeds,
        cross_count,
        seed,
    )
}
