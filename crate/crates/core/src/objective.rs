//! Training losses, timestep-pair sampling and guidance combination.
//!
//! The combined objective over one timestep pair (t1 <= t2, both on the same
//! noise/data interpolation) is
//!
//!   L = L_fm(t1) + L_fm(t2) + alpha * (L_g(t1) + L_g(t2)) + beta * L_cons
//!
//! where L_fm regresses the predicted velocity onto y - eps, L_g pins the
//! garment-stream output to its input latent, and L_cons pulls the
//! higher-noise velocity prediction toward the (optionally stop-gradient)
//! lower-noise one. All losses use mean reduction so the weights do not
//! depend on grid resolution.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::flow::{ot_interpolate, target_velocity, VelocityField};
use crate::grid::{LatentGrid, PathTime};
use crate::model::{grid_to_row, ForwardNodes, ForwardOutput, ModelBinding, VelocityModel};
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || !self.beta.is_finite() || self.alpha < 0.0 || self.beta < 0.0
        {
            return Err(CoreError::Config(format!(
                "loss weights must be finite and nonnegative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Upper bound for sampled times; keeps 1/(1-t) bounded during training.
pub const PAIR_TIME_LIMIT: f64 = 1.0 - 1e-6;

/// Ordered timestep pair; t1 is the higher-noise time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimestepPair {
    t1: PathTime,
    t2: PathTime,
}

impl TimestepPair {
    pub fn new(t1: f64, t2: f64) -> Result<Self> {
        if !(t1 <= t2) {
            return Err(CoreError::Config(format!(
                "timestep pair must satisfy t1 <= t2, got {t1} > {t2}"
            )));
        }
        let t1 = PathTime::new(t1)?;
        let t2 = PathTime::new(t2)?;
        t2.require_velocity_domain()?;
        Ok(Self { t1, t2 })
    }

    pub fn t1(&self) -> PathTime {
        self.t1
    }

    pub fn t2(&self) -> PathTime {
        self.t2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TimeDist {
    #[default]
    Uniform,
    LogitNormal,
}

fn sample_time(rng: &mut ChaCha8Rng, dist: TimeDist) -> f64 {
    match dist {
        TimeDist::Uniform => rng.gen::<f64>() * PAIR_TIME_LIMIT,
        TimeDist::LogitNormal => {
            let z: f64 = rng.sample(StandardNormal);
            let s = 1.0 / (1.0 + (-z).exp());
            s.min(PAIR_TIME_LIMIT)
        }
    }
}

/// Two independent draws, sorted ascending.
pub fn sample_pair(rng: &mut ChaCha8Rng) -> TimestepPair {
    sample_pair_dist(rng, TimeDist::Uniform)
}

pub fn sample_pair_dist(rng: &mut ChaCha8Rng, dist: TimeDist) -> TimestepPair {
    let a = sample_time(rng, dist);
    let b = sample_time(rng, dist);
    TimestepPair::new(a.min(b), a.max(b)).expect("sampled times are in domain")
}

/// Pair with a fixed gap t2 - t1; t1 uniform on the admissible range.
pub fn sample_pair_fixed(rng: &mut ChaCha8Rng, gap: f64) -> Result<TimestepPair> {
    if !gap.is_finite() || gap < 0.0 || gap >= PAIR_TIME_LIMIT {
        return Err(CoreError::Config(format!(
            "fixed pair gap must lie in [0, {PAIR_TIME_LIMIT}), got {gap}"
        )));
    }
    let t1 = rng.gen::<f64>() * (PAIR_TIME_LIMIT - gap);
    TimestepPair::new(t1, t1 + gap)
}

/// Loss values of one combined evaluation; `total` is the backward root.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fm_t1: f64,
    pub fm_t2: f64,
    pub garment_t1: f64,
    pub garment_t2: f64,
    pub consistency: f64,
    pub total: f64,
}

fn check_grad_len(model: &VelocityModel, grads: &[f64]) -> Result<()> {
    if grads.len() != model.param_count() {
        return Err(CoreError::ShapeMismatch {
            expected: format!("{} gradient slots", model.param_count()),
            got: format!("{}", grads.len()),
            context: "loss gradient buffer".into(),
        });
    }
    Ok(())
}

struct PassInputs {
    person: NodeId,
    garment: NodeId,
}

fn pass_inputs(tape: &mut Tape, person: &LatentGrid, garment: &LatentGrid) -> PassInputs {
    PassInputs {
        person: tape.constant(grid_to_row(person)),
        garment: tape.constant(grid_to_row(garment)),
    }
}

fn forward_at(
    tape: &mut Tape,
    model: &VelocityModel,
    binding: &ModelBinding,
    inputs: &PassInputs,
    y: &LatentGrid,
    eps: &LatentGrid,
    t: PathTime,
) -> Result<ForwardNodes> {
    let x_t = ot_interpolate(y, eps, t)?;
    let x_node = tape.constant(grid_to_row(&x_t));
    model.forward_on_tape(tape, binding, x_node, inputs.person, inputs.garment, t)
}

/// Flow-matching loss at one time, with parameter gradients accumulated into
/// `grads`.
pub fn loss_fm_grad(
    model: &VelocityModel,
    person: &LatentGrid,
    garment: &LatentGrid,
    y: &LatentGrid,
    eps: &LatentGrid,
    t: PathTime,
    grads: &mut [f64],
) -> Result<f64> {
    check_grad_len(model, grads)?;
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let inputs = pass_inputs(&mut tape, person, garment);
    let target = target_velocity(y, eps)?;
    let target = tape.constant(grid_to_row(&target));
    let nodes = forward_at(&mut tape, model, &binding, &inputs, y, eps, t)?;
    let loss = tape.mse(nodes.velocity, target)?;
    tape.backward(loss, grads)?;
    Ok(tape.value(loss).data[0])
}

/// Garment-preservation loss at one time, with parameter gradients.
pub fn loss_garment_grad(
    model: &VelocityModel,
    person: &LatentGrid,
    garment: &LatentGrid,
    y: &LatentGrid,
    eps: &LatentGrid,
    t: PathTime,
    grads: &mut [f64],
) -> Result<f64> {
    check_grad_len(model, grads)?;
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let inputs = pass_inputs(&mut tape, person, garment);
    let nodes = forward_at(&mut tape, model, &binding, &inputs, y, eps, t)?;
    let loss = tape.mse(nodes.garment_out, inputs.garment)?;
    tape.backward(loss, grads)?;
    Ok(tape.value(loss).data[0])
}

/// Self-consistency loss over a timestep pair, with parameter gradients.
pub fn loss_consistency_grad(
    model: &VelocityModel,
    person: &LatentGrid,
    garment: &LatentGrid,
    y: &LatentGrid,
    eps: &LatentGrid,
    pair: TimestepPair,
    use_stopgrad: bool,
    grads: &mut [f64],
) -> Result<f64> {
    check_grad_len(model, grads)?;
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let inputs = pass_inputs(&mut tape, person, garment);
    let n1 = forward_at(&mut tape, model, &binding, &inputs, y, eps, pair.t1())?;
    let n2 = forward_at(&mut tape, model, &binding, &inputs, y, eps, pair.t2())?;
    let v2 = if use_stopgrad {
        tape.detach(n2.velocity)
    } else {
        n2.velocity
    };
    let loss = tape.mse(n1.velocity, v2)?;
    tape.backward(loss, grads)?;
    Ok(tape.value(loss).data[0])
}

/// Combined objective over one pair with a single backward pass.
pub fn loss_total_grad(
    model: &VelocityModel,
    person: &LatentGrid,
    garment: &LatentGrid,
    y: &LatentGrid,
    eps: &LatentGrid,
    pair: TimestepPair,
    weights: LossWeights,
    use_stopgrad: bool,
    grads: &mut [f64],
) -> Result<LossBreakdown> {
    loss_total_impl(
        model,
        person,
        garment,
        y,
        eps,
        pair,
        weights,
        use_stopgrad,
        false,
        grads,
    )
}

#[allow(clippy::too_many_arguments)]
fn loss_total_impl(
    model: &VelocityModel,
    person: &LatentGrid,
    garment: &LatentGrid,
    y: &LatentGrid,
    eps: &LatentGrid,
    pair: TimestepPair,
    weights: LossWeights,
    use_stopgrad: bool,
    build_t2_first: bool,
    grads: &mut [f64],
) -> Result<LossBreakdown> {
    weights.validate()?;
    check_grad_len(model, grads)?;
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let inputs = pass_inputs(&mut tape, person, garment);
    let target = target_velocity(y, eps)?;
    let target = tape.constant(grid_to_row(&target));
    let (n1, n2) = if build_t2_first {
        let n2 = forward_at(&mut tape, model, &binding, &inputs, y, eps, pair.t2())?;
        let n1 = forward_at(&mut tape, model, &binding, &inputs, y, eps, pair.t1())?;
        (n1, n2)
    } else {
        let n1 = forward_at(&mut tape, model, &binding, &inputs, y, eps, pair.t1())?;
        let n2 = forward_at(&mut tape, model, &binding, &inputs, y, eps, pair.t2())?;
        (n1, n2)
    };
    let fm1 = tape.mse(n1.velocity, target)?;
    let fm2 = tape.mse(n2.velocity, target)?;
    let g1 = tape.mse(n1.garment_out, inputs.garment)?;
    let g2 = tape.mse(n2.garment_out, inputs.garment)?;
    let v2 = if use_stopgrad {
        tape.detach(n2.velocity)
    } else {
        n2.velocity
    };
    let cons = tape.mse(n1.velocity, v2)?;

    let fm_sum = tape.add(fm1, fm2)?;
    let g_sum = tape.add(g1, g2)?;
    let g_term = tape.scale(g_sum, weights.alpha);
    let c_term = tape.scale(cons, weights.beta);
    let partial = tape.add(fm_sum, g_term)?;
    let total = tape.add(partial, c_term)?;
    tape.backward(total, grads)?;
    Ok(LossBreakdown {
        fm_t1: tape.value(fm1).data[0],
        fm_t2: tape.value(fm2).data[0],
        garment_t1: tape.value(g1).data[0],
        garment_t2: tape.value(g2).data[0],
        consistency: tape.value(cons).data[0],
        total: tape.value(total).data[0],
    })
}

/// Gradient-free garment loss on an already computed forward output.
pub fn loss_garment(output: &ForwardOutput, garment_in: &LatentGrid) -> Result<f64> {
    output
        .garment_out
        .check_same_shape(garment_in, "garment loss")?;
    Ok(output.garment_out.mse(garment_in))
}

/// Gradient-free consistency residual between two velocity predictions.
pub fn loss_consistency(v1: &LatentGrid, v2: &LatentGrid) -> Result<f64> {
    v1.check_same_shape(v2, "consistency loss")?;
    Ok(v1.mse(v2))
}

/// `v_uncond + scale * (v_cond - v_uncond)`.
pub fn cfg_velocity(
    v_cond: &LatentGrid,
    v_uncond: &LatentGrid,
    scale: f64,
) -> Result<LatentGrid> {
    let diff = v_cond.sub(v_uncond)?;
    let mut out = v_uncond.clone();
    out.axpy(scale, &diff);
    Ok(out)
}

/// Guided field: conditional and unconditional (zero-garment) passes combined
/// per step.
pub struct CfgField<'a> {
    model: &'a VelocityModel,
    person: &'a LatentGrid,
    garment: &'a LatentGrid,
    zero_garment: LatentGrid,
    scale: f64,
}

impl<'a> CfgField<'a> {
    pub fn new(
        model: &'a VelocityModel,
        person: &'a LatentGrid,
        garment: &'a LatentGrid,
        scale: f64,
    ) -> Self {
        Self {
            model,
            person,
            garment,
            zero_garment: LatentGrid::zeros(model.config().grid_shape()),
            scale,
        }
    }
}

impl VelocityField for CfgField<'_> {
    fn velocity(&self, x: &LatentGrid, t: PathTime) -> Result<LatentGrid> {
        let cond = self.model.forward(x, self.person, self.garment, t)?.velocity;
        let uncond = self
            .model
            .forward(x, self.person, &self.zero_garment, t)?
            .velocity;
        cfg_velocity(&cond, &uncond, self.scale)
    }
}
