//! One-step adversarial distillation of a trained multi-step teacher.
//!
//! The student starts as a copy of the teacher and learns to map pure noise
//! to the teacher's multi-step endpoint in a single step. Two losses drive
//! it: squared reconstruction against precomputed teacher endpoints, and a
//! non-saturating adversarial term. For the adversarial part both the
//! student prediction and the teacher endpoint are re-noised with a shared
//! draw, pushed through the frozen teacher, and hidden token states tapped
//! at evenly spaced blocks feed small convolutional discriminator heads
//! (hinge loss). Discriminator and student alternate single updates.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::flow::ot_interpolate;
use crate::grid::{LatentGrid, PathTime};
use crate::metrics::endpoint_error;
use crate::model::{grid_to_row, ParamSpec, VelocityModel};
use crate::optim::{AdamConfig, AdamW};
use crate::rng::{derive_seed, seeded_normal_grid, stream_rng};
use crate::synth::{hex_sha256, Dataset};
use crate::tape::{Matrix, NodeId, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Euler steps for teacher pseudo-target generation.
    pub teacher_steps: usize,
    pub recon_weight: f64,
    pub adv_weight: f64,
    /// Teacher blocks whose hidden states feed discriminator heads.
    pub blocks_sampled: usize,
    pub disc_lr: f64,
    pub student_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Directional finite-difference gradient penalty weight; 0 disables it.
    pub r1_gamma: f64,
    /// Instances used for the per-epoch one-step evaluation; 0 = all.
    pub eval_instances: usize,
    /// Offline noise draws per (person, garment) pair in the pseudo dataset.
    /// One draw per pair lets the student memorize its 64-odd training
    /// noises; several draws force it to generalize across noise.
    pub draws_per_pair: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            teacher_steps: 30,
            recon_weight: 1.0,
            adv_weight: 0.5,
            blocks_sampled: 2,
            disc_lr: 1e-3,
            student_lr: 5e-4,
            epochs: 15,
            batch_size: 8,
            seed: 0,
            r1_gamma: 0.0,
            eval_instances: 16,
            draws_per_pair: 4,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, teacher_depth: usize) -> Result<()> {
        if self.teacher_steps == 0 || self.epochs == 0 || self.batch_size == 0 || self.draws_per_pair == 0 {
            return Err(CoreError::Config(
                "teacher_steps, epochs, batch_size and draws_per_pair must be positive".into(),
            ));
        }
        if self.recon_weight < 0.0 || self.adv_weight < 0.0 || self.r1_gamma < 0.0 {
            return Err(CoreError::Config(
                "distillation loss weights must be nonnegative".into(),
            ));
        }
        if self.adv_weight > 0.0 {
            if self.blocks_sampled == 0 {
                return Err(CoreError::Config(
                    "adversarial loss needs at least one sampled block".into(),
                ));
            }
            if self.blocks_sampled > teacher_depth {
                return Err(CoreError::Config(format!(
                    "blocks_sampled {} exceeds teacher depth {teacher_depth}",
                    self.blocks_sampled
                )));
            }
        }
        if self.disc_lr <= 0.0 || self.student_lr <= 0.0 {
            return Err(CoreError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Centers of `count` equal slices of `0..depth`.
pub fn tap_indices(depth: usize, count: usize) -> Vec<usize> {
    (0..count).map(|k| ((2 * k + 1) * depth) / (2 * count)).collect()
}

const DISC_WIDTH: usize = 32;

struct ConvStage {
    /// im2col map: each output row gathers a 2x2 patch of the input map.
    map: Arc<Vec<usize>>,
    out_h: usize,
    out_w: usize,
    in_channels: usize,
}

fn conv_stage(h: usize, w: usize, channels: usize) -> ConvStage {
    let (out_h, out_w) = (h - 1, w - 1);
    let mut map = Vec::with_capacity(out_h * out_w * 4 * channels);
    for r in 0..out_h {
        for c in 0..out_w {
            for dy in 0..2 {
                for dx in 0..2 {
                    for ch in 0..channels {
                        map.push(((r + dy) * w + (c + dx)) * channels + ch);
                    }
                }
            }
        }
    }
    ConvStage {
        map: Arc::new(map),
        out_h,
        out_w,
        in_channels: channels,
    }
}

struct HeadPlan {
    stages: Vec<ConvStage>,
    flat_len: usize,
}

fn head_plan(map_h: usize, map_w: usize, token_dim: usize) -> Result<HeadPlan> {
    if map_h < 2 || map_w < 2 {
        return Err(CoreError::Config(format!(
            "token map {map_h}x{map_w} too small for a 2x2 discriminator conv"
        )));
    }
    let mut stages = vec![conv_stage(map_h, map_w, token_dim)];
    let first = &stages[0];
    let (h, w) = (first.out_h, first.out_w);
    if h >= 2 && w >= 2 {
        stages.push(conv_stage(h, w, DISC_WIDTH));
    }
    let last = stages.last().unwrap();
    Ok(HeadPlan {
        flat_len: last.out_h * last.out_w * DISC_WIDTH,
        stages,
    })
}

/// Discriminator over teacher hidden token maps: one head per tapped block,
/// each head two (or one, on tiny maps) 2x2 valid convolutions with ReLU and
/// a final linear readout; head logits are summed.
pub struct Discriminator {
    token_dim: usize,
    map_h: usize,
    map_w: usize,
    taps: Vec<usize>,
    params: Vec<f64>,
    layout: Vec<ParamSpec>,
    plans: Vec<HeadPlan>,
}

impl Discriminator {
    pub fn new(
        token_dim: usize,
        map_h: usize,
        map_w: usize,
        taps: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        if taps.is_empty() {
            return Err(CoreError::Config("discriminator needs at least one tap".into()));
        }
        let mut layout = Vec::new();
        let mut offset = 0usize;
        let mut plans = Vec::with_capacity(taps.len());
        for head in 0..taps.len() {
            let plan = head_plan(map_h, map_w, token_dim)?;
            for (s, stage) in plan.stages.iter().enumerate() {
                let rows = 4 * stage.in_channels;
                layout.push(ParamSpec {
                    name: format!("head{head}.conv{s}.w"),
                    offset,
                    rows,
                    cols: DISC_WIDTH,
                });
                offset += rows * DISC_WIDTH;
                layout.push(ParamSpec {
                    name: format!("head{head}.conv{s}.b"),
                    offset,
                    rows: 1,
                    cols: DISC_WIDTH,
                });
                offset += DISC_WIDTH;
            }
            layout.push(ParamSpec {
                name: format!("head{head}.out.w"),
                offset,
                rows: plan.flat_len,
                cols: 1,
            });
            offset += plan.flat_len;
            layout.push(ParamSpec {
                name: format!("head{head}.out.b"),
                offset,
                rows: 1,
                cols: 1,
            });
            offset += 1;
            plans.push(plan);
        }
        let mut params = vec![0.0; offset];
        for (index, spec) in layout.iter().enumerate() {
            if spec.rows == 1 {
                continue;
            }
            let mut rng = stream_rng(seed, "disc-init", index as u64);
            let std = 1.0 / (spec.rows as f64).sqrt();
            for v in &mut params[spec.offset..spec.offset + spec.rows * spec.cols] {
                let z: f64 = rng.sample(StandardNormal);
                *v = std * z;
            }
        }
        Ok(Self {
            token_dim,
            map_h,
            map_w,
            taps,
            params,
            layout,
            plans,
        })
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn layout(&self) -> &[ParamSpec] {
        &self.layout
    }

    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> Vec<NodeId> {
        self.layout
            .iter()
            .map(|spec| {
                let m = Matrix {
                    rows: spec.rows,
                    cols: spec.cols,
                    data: self.params[spec.offset..spec.offset + spec.rows * spec.cols].to_vec(),
                };
                if tracked {
                    tape.param(m, spec.offset)
                } else {
                    tape.constant(m)
                }
            })
            .collect()
    }

    /// Summed head logits over tapped hidden states (`taps[i]` is the T x D
    /// token matrix of tapped block `i`).
    pub fn logit(&self, tape: &mut Tape, ids: &[NodeId], taps: &[NodeId]) -> Result<NodeId> {
        if taps.len() != self.taps.len() {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{} tapped states", self.taps.len()),
                got: format!("{}", taps.len()),
                context: "discriminator taps".into(),
            });
        }
        let mut total: Option<NodeId> = None;
        let mut id_cursor = 0usize;
        for (head, (&tap, plan)) in taps.iter().zip(&self.plans).enumerate() {
            let v = tape.value(tap);
            let expected = (self.map_h * self.map_w, self.token_dim);
            if (v.rows, v.cols) != expected {
                return Err(CoreError::ShapeMismatch {
                    expected: format!("{}x{}", expected.0, expected.1),
                    got: format!("{}x{}", v.rows, v.cols),
                    context: format!("discriminator head {head} input"),
                });
            }
            let mut x = tap;
            for stage in &plan.stages {
                let cols = 4 * stage.in_channels;
                let patches = tape.gather(x, Arc::clone(&stage.map), stage.out_h * stage.out_w, cols)?;
                let w = ids[id_cursor];
                let b = ids[id_cursor + 1];
                id_cursor += 2;
                let h = tape.matmul(patches, w)?;
                let h = tape.add_row(h, b)?;
                x = tape.relu(h);
            }
            let flat_map: Arc<Vec<usize>> = Arc::new((0..plan.flat_len).collect());
            let flat = tape.gather(x, flat_map, 1, plan.flat_len)?;
            let w = ids[id_cursor];
            let b = ids[id_cursor + 1];
            id_cursor += 2;
            let out = tape.matmul(flat, w)?;
            let out = tape.add(out, b)?;
            total = Some(match total {
                None => out,
                Some(t) => tape.add(t, out)?,
            });
        }
        Ok(total.unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillEpoch {
    pub epoch: usize,
    pub recon: f64,
    pub gen_adv: f64,
    pub disc: f64,
    pub student_endpoint_mse: f64,
}

pub struct DistillOutput {
    pub student: VelocityModel,
    pub log: Vec<DistillEpoch>,
    pub diverged: Option<(usize, usize)>,
}

fn params_hash(params: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(8 * params.len());
    for v in params {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    hex_sha256(&bytes)
}

struct RenoiseDraw {
    t: PathTime,
    eps: LatentGrid,
}

fn renoise_draw(seed: u64, counter: u64, shape: crate::grid::GridShape) -> RenoiseDraw {
    let mut rng = stream_rng(seed, "renoise", counter);
    // Away from both endpoints so the teacher sees informative noise levels.
    let t = PathTime::new(rng.gen::<f64>() * 0.8 + 0.1).expect("in range");
    RenoiseDraw {
        t,
        eps: seeded_normal_grid(seed, "renoise-eps", counter, shape),
    }
}

pub fn distill_ladd(
    teacher: &VelocityModel,
    cfg: &DistillConfig,
    data: &Dataset,
) -> Result<DistillOutput> {
    cfg.validate(teacher.config().depth)?;
    if data.is_empty() {
        return Err(CoreError::Config("distillation dataset is empty".into()));
    }
    let shape = teacher.config().grid_shape();
    if data.shape != shape {
        return Err(CoreError::Config(format!(
            "dataset shape {} does not match teacher shape {shape}",
            data.shape
        )));
    }
    let teacher_hash = params_hash(teacher.params());

    let pseudo_seed = derive_seed(cfg.seed, "pseudo", 0);
    // Each pair appears draws_per_pair times; the pseudo-target generator
    // derives a fresh noise draw per position, so repeats become distinct
    // offline samples.
    let pairs: Vec<(LatentGrid, LatentGrid)> = data
        .instances
        .iter()
        .flat_map(|i| {
            std::iter::repeat((i.person.clone(), i.garment.clone())).take(cfg.draws_per_pair)
        })
        .collect();
    let targets =
        crate::train::generate_pseudo_targets(teacher, &pairs, cfg.teacher_steps, pseudo_seed)?;
    // The student regresses each pseudo endpoint from the very noise draw
    // that produced it.
    let noises: Vec<LatentGrid> = (0..pairs.len())
        .map(|i| seeded_normal_grid(pseudo_seed, "pseudo-noise", i as u64, shape))
        .collect();

    let mut student = teacher.clone();
    let mut student_opt = AdamW::new(student.param_count(), AdamConfig::default())?;
    let config = teacher.config();
    let map_h = config.height / config.patch_size;
    let map_w = config.width / config.patch_size;
    let use_adv = cfg.adv_weight > 0.0;
    let mut disc = if use_adv {
        Some(Discriminator::new(
            config.token_dim,
            map_h,
            map_w,
            tap_indices(config.depth, cfg.blocks_sampled),
            derive_seed(cfg.seed, "disc", 0),
        )?)
    } else {
        None
    };
    let mut disc_opt = match &disc {
        Some(d) => Some(AdamW::new(d.param_count(), AdamConfig::default())?),
        None => None,
    };

    let eval_data = if cfg.eval_instances == 0 || cfg.eval_instances >= data.len() {
        data.clone()
    } else {
        Dataset {
            shape: data.shape,
            scale: data.scale,
            seed: data.seed,
            bank: data.bank.clone(),
            instances: data.instances[..cfg.eval_instances].to_vec(),
        }
    };
    let eval_seed = derive_seed(cfg.seed, "distill-eval", 0);
    let t0 = PathTime::new(0.0).expect("zero is a path time");

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut diverged = None;
    let mut renoise_counter = 0u64;
    let mut update_counter = 0usize;
    let mut student_grads = vec![0.0; student.param_count()];
    let mut disc_grads = vec![0.0; disc.as_ref().map_or(0, |d| d.param_count())];

    'training: for epoch in 0..cfg.epochs {
        let order = crate::train::shuffled_order(pairs.len(), cfg.seed, epoch);
        let mut sums = (0.0, 0.0, 0.0);
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            // Discriminator update on this batch.
            if let (Some(d), Some(opt)) = (disc.as_mut(), disc_opt.as_mut()) {
                disc_grads.iter_mut().for_each(|g| *g = 0.0);
                let mut batch_loss = 0.0;
                for &idx in batch {
                    let inst = idx / cfg.draws_per_pair;
                    let draw = renoise_draw(cfg.seed, renoise_counter, shape);
                    renoise_counter += 1;
                    let x_hat = one_step_prediction(&student, &noises[idx], &data, inst)?;
                    let loss = disc_step_loss(
                        teacher, d, &data, inst, &targets[idx], &x_hat, &draw, cfg.r1_gamma,
                        &mut disc_grads,
                    )?;
                    if !loss.is_finite() {
                        diverged = Some((epoch, update_counter));
                        break 'training;
                    }
                    batch_loss += loss;
                }
                let inv = 1.0 / batch.len() as f64;
                disc_grads.iter_mut().for_each(|g| *g *= inv);
                opt.step(d.params_mut(), &disc_grads, cfg.disc_lr)?;
                sums.2 += batch_loss;
            }

            // Student update on the same batch.
            student_grads.iter_mut().for_each(|g| *g = 0.0);
            for &idx in batch {
                let inst = idx / cfg.draws_per_pair;
                let draw = renoise_draw(cfg.seed, renoise_counter, shape);
                renoise_counter += 1;
                let (recon, gen_adv) = student_step_loss(
                    teacher,
                    disc.as_ref(),
                    &student,
                    cfg,
                    &data,
                    inst,
                    &noises[idx],
                    &targets[idx],
                    &draw,
                    t0,
                    &mut student_grads,
                )?;
                if !recon.is_finite() || !gen_adv.is_finite() {
                    diverged = Some((epoch, update_counter));
                    break 'training;
                }
                sums.0 += recon;
                sums.1 += gen_adv;
                seen += 1;
            }
            let inv = 1.0 / batch.len() as f64;
            student_grads.iter_mut().for_each(|g| *g *= inv);
            student_opt.step(student.params_mut(), &student_grads, cfg.student_lr)?;
            update_counter += 1;
        }
        let n = seen.max(1) as f64;
        let (endpoint, _) = endpoint_error(&student, &eval_data, 1, eval_seed)?;
        log.push(DistillEpoch {
            epoch,
            recon: sums.0 / n,
            gen_adv: sums.1 / n,
            disc: sums.2 / n,
            student_endpoint_mse: endpoint,
        });
    }
    if params_hash(teacher.params()) != teacher_hash {
        return Err(CoreError::Numeric(
            "teacher parameters changed during distillation".into(),
        ));
    }
    student.set_step(teacher.step() + update_counter as u64);
    Ok(DistillOutput {
        student,
        log,
        diverged,
    })
}

/// Student one-step clean prediction x1 = eps + v(eps, 0), no gradients.
fn one_step_prediction(
    student: &VelocityModel,
    eps: &LatentGrid,
    data: &Dataset,
    idx: usize,
) -> Result<LatentGrid> {
    let inst = &data.instances[idx];
    let v = student
        .forward(eps, &inst.person, &inst.garment, PathTime::new(0.0)?)?
        .velocity;
    let mut out = eps.clone();
    out.axpy(1.0, &v);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn disc_step_loss(
    teacher: &VelocityModel,
    disc: &Discriminator,
    data: &Dataset,
    idx: usize,
    real: &LatentGrid,
    fake: &LatentGrid,
    draw: &RenoiseDraw,
    r1_gamma: f64,
    disc_grads: &mut [f64],
) -> Result<f64> {
    let inst = &data.instances[idx];
    let real_in = ot_interpolate(real, &draw.eps, draw.t)?;
    let fake_in = ot_interpolate(fake, &draw.eps, draw.t)?;

    let mut tape = Tape::new();
    let disc_ids = disc.bind(&mut tape, true);
    let teacher_binding = teacher.bind_frozen(&mut tape);
    let person = tape.constant(grid_to_row(&inst.person));
    let garment = tape.constant(grid_to_row(&inst.garment));

    let mut logits = Vec::with_capacity(2);
    for input in [&real_in, &fake_in] {
        let x = tape.constant(grid_to_row(input));
        let nodes = teacher.forward_on_tape(&mut tape, &teacher_binding, x, person, garment, draw.t)?;
        let taps: Vec<NodeId> = disc.taps().iter().map(|&b| nodes.hidden_main[b]).collect();
        logits.push(disc.logit(&mut tape, &disc_ids, &taps)?);
    }
    let (logit_real, logit_fake) = (logits[0], logits[1]);

    // Hinge: relu(1 - D(real)) + relu(1 + D(fake)).
    let real_margin = tape.affine(logit_real, -1.0, 1.0);
    let real_term = tape.relu(real_margin);
    let fake_margin = tape.affine(logit_fake, 1.0, 1.0);
    let fake_term = tape.relu(fake_margin);
    let mut loss = tape.add(real_term, fake_term)?;

    if r1_gamma > 0.0 {
        // Directional finite-difference penalty on the real logit.
        let h = 1e-3;
        let mut probe = real_in.clone();
        let mut dir = seeded_normal_grid(0xD1, "r1-dir", 0, real_in.shape());
        let norm = dir.norm().max(1e-12);
        for v in dir.values_mut() {
            *v /= norm;
        }
        probe.axpy(h, &dir);
        let x = tape.constant(grid_to_row(&probe));
        let nodes =
            teacher.forward_on_tape(&mut tape, &teacher_binding, x, person, garment, draw.t)?;
        let taps: Vec<NodeId> = disc.taps().iter().map(|&b| nodes.hidden_main[b]).collect();
        let shifted = disc.logit(&mut tape, &disc_ids, &taps)?;
        let delta = tape.sub(shifted, logit_real)?;
        let slope = tape.scale(delta, 1.0 / h);
        let sq = tape.mul(slope, slope)?;
        let penalty = tape.scale(sq, r1_gamma);
        loss = tape.add(loss, penalty)?;
    }

    tape.backward(loss, disc_grads)?;
    Ok(tape.value(loss).data[0])
}

#[allow(clippy::too_many_arguments)]
fn student_step_loss(
    teacher: &VelocityModel,
    disc: Option<&Discriminator>,
    student: &VelocityModel,
    cfg: &DistillConfig,
    data: &Dataset,
    idx: usize,
    eps: &LatentGrid,
    target: &LatentGrid,
    draw: &RenoiseDraw,
    t0: PathTime,
    student_grads: &mut [f64],
) -> Result<(f64, f64)> {
    let inst = &data.instances[idx];
    let mut tape = Tape::new();
    let student_binding = student.bind(&mut tape);
    let person = tape.constant(grid_to_row(&inst.person));
    let garment = tape.constant(grid_to_row(&inst.garment));
    let eps_node = tape.constant(grid_to_row(eps));
    let nodes = student.forward_on_tape(&mut tape, &student_binding, eps_node, person, garment, t0)?;
    let x_hat = tape.add(eps_node, nodes.velocity)?;
    let target_node = tape.constant(grid_to_row(target));
    let recon = tape.mse(x_hat, target_node)?;

    let (total, gen_adv_value) = if let Some(d) = disc {
        // Re-noise the prediction and score it through the frozen teacher.
        let t = draw.t.value();
        let scaled_pred = tape.affine(x_hat, t, 0.0);
        let noise_part = tape.constant(grid_to_row(&draw.eps.scale(1.0 - t)));
        let renoised = tape.add(scaled_pred, noise_part)?;
        let teacher_binding = teacher.bind_frozen(&mut tape);
        let t_nodes =
            teacher.forward_on_tape(&mut tape, &teacher_binding, renoised, person, garment, draw.t)?;
        let taps: Vec<NodeId> = d.taps().iter().map(|&b| t_nodes.hidden_main[b]).collect();
        let disc_ids = d.bind(&mut tape, false);
        let logit = d.logit(&mut tape, &disc_ids, &taps)?;
        let neg = tape.affine(logit, -1.0, 0.0);
        let gen_adv = tape.softplus(neg);
        let recon_term = tape.scale(recon, cfg.recon_weight);
        let adv_term = tape.scale(gen_adv, cfg.adv_weight);
        let total = tape.add(recon_term, adv_term)?;
        (total, tape.value(gen_adv).data[0])
    } else {
        (tape.scale(recon, cfg.recon_weight), 0.0)
    };
    tape.backward(total, student_grads)?;
    Ok((tape.value(recon).data[0], gen_adv_value))
}
