//! Closed-form velocity fields for point targets and finite target mixtures.
//!
//! These fields are exact: the delta field realizes the straight conditional
//! transport toward a single target, and the mixture field realizes the
//! marginal field obtained by averaging conditional velocities under the
//! exact posterior over components. Both serve as oracles against which
//! learned models and sampler claims are checked.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::flow::{chord_deviation, euler_sample, VelocityField};
use crate::grid::{LatentGrid, PathTime};

/// Velocity field of a single fixed target: `(target - x)/(1 - t)`.
#[derive(Debug, Clone)]
pub struct DeltaField {
    target: LatentGrid,
}

impl DeltaField {
    pub fn new(target: LatentGrid) -> Self {
        Self { target }
    }

    pub fn target(&self) -> &LatentGrid {
        &self.target
    }
}

pub fn delta_velocity(field: &DeltaField, x: &LatentGrid, t: PathTime) -> Result<LatentGrid> {
    t.require_velocity_domain()?;
    field.target.check_same_shape(x, "delta_velocity")?;
    let inv = 1.0 / (1.0 - t.value());
    let values = field
        .target
        .values()
        .iter()
        .zip(x.values().iter())
        .map(|(y, xi)| (y - xi) * inv)
        .collect();
    LatentGrid::new(x.shape(), values)
}

impl VelocityField for DeltaField {
    fn velocity(&self, x: &LatentGrid, t: PathTime) -> Result<LatentGrid> {
        delta_velocity(self, x, t)
    }
}

/// A finite mixture of targets with strictly positive weights summing to 1.
/// The source distribution is standard normal per coordinate; the posterior
/// formula below depends on that.
#[derive(Debug, Clone)]
pub struct MixtureField {
    weights: Vec<f64>,
    targets: Vec<LatentGrid>,
}

impl MixtureField {
    pub fn new(components: Vec<(f64, LatentGrid)>) -> Result<Self> {
        if components.is_empty() {
            return Err(CoreError::Config("mixture needs at least one component".into()));
        }
        let shape = components[0].1.shape();
        let mut weight_sum = 0.0;
        for (w, target) in &components {
            if !w.is_finite() || *w <= 0.0 {
                return Err(CoreError::Config(format!(
                    "mixture weights must be strictly positive, got {w}"
                )));
            }
            if target.shape() != shape {
                return Err(CoreError::ShapeMismatch {
                    expected: shape.to_string(),
                    got: target.shape().to_string(),
                    context: "MixtureField::new".into(),
                });
            }
            weight_sum += w;
        }
        if (weight_sum - 1.0).abs() > 1e-12 {
            return Err(CoreError::Config(format!(
                "mixture weights must sum to 1, got {weight_sum}"
            )));
        }
        let (weights, targets) = components.into_iter().unzip();
        Ok(Self { weights, targets })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn targets(&self) -> &[LatentGrid] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Exact posterior over components given `x` at time `t`:
/// `p(i | x) ∝ w_i · N(x; t·y_i, (1-t)² I)`, evaluated in log space.
pub fn mixture_posterior(field: &MixtureField, x: &LatentGrid, t: PathTime) -> Result<Vec<f64>> {
    t.require_velocity_domain()?;
    field.targets[0].check_same_shape(x, "mixture_posterior")?;
    let tv = t.value();
    let inv_two_var = 1.0 / (2.0 * (1.0 - tv) * (1.0 - tv));
    let mut log_terms = Vec::with_capacity(field.len());
    for (w, target) in field.weights.iter().zip(field.targets.iter()) {
        let mut sq = 0.0;
        for (xi, yi) in x.values().iter().zip(target.values().iter()) {
            let d = xi - tv * yi;
            sq += d * d;
        }
        log_terms.push(w.ln() - sq * inv_two_var);
    }
    let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(CoreError::Numeric(
            "mixture posterior underflowed: all component log-weights are -inf".into(),
        ));
    }
    let mut total = 0.0;
    let mut posterior: Vec<f64> = log_terms.iter().map(|l| (l - max).exp()).collect();
    for p in &posterior {
        total += p;
    }
    for p in &mut posterior {
        *p /= total;
    }
    Ok(posterior)
}

/// Marginal velocity `Σ_i p(i | x) · (y_i - x)/(1 - t)`.
pub fn mixture_velocity(field: &MixtureField, x: &LatentGrid, t: PathTime) -> Result<LatentGrid> {
    let posterior = mixture_posterior(field, x, t)?;
    let inv = 1.0 / (1.0 - t.value());
    let mut out = vec![0.0; x.len()];
    for (p, target) in posterior.iter().zip(field.targets.iter()) {
        for (o, (yi, xi)) in out.iter_mut().zip(target.values().iter().zip(x.values().iter())) {
            *o += p * (yi - xi) * inv;
        }
    }
    LatentGrid::new(x.shape(), out)
}

impl VelocityField for MixtureField {
    fn velocity(&self, x: &LatentGrid, t: PathTime) -> Result<LatentGrid> {
        mixture_velocity(self, x, t)
    }
}

/// Tolerance below which endpoint discrepancy and chord deviation count as
/// exact agreement in [`verify_field`].
pub const THEOREM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoremReport {
    pub max_endpoint_discrepancy: f64,
    pub max_chord_deviation: f64,
    pub pass: bool,
}

/// Integrates `field` from each noise sample at every step count, then
/// reports the worst relative endpoint disagreement across step-count pairs
/// and the worst chord deviation across trajectories.
///
/// The endpoint discrepancy for one sample is normalized by the largest of
/// the endpoint norms and the noise norm, floored at 1e-12, so that
/// near-zero targets do not inflate rounding noise into failures.
pub fn verify_field<F: VelocityField + ?Sized>(
    field: &F,
    eps_samples: &[LatentGrid],
    step_counts: &[usize],
) -> Result<TheoremReport> {
    if eps_samples.is_empty() || step_counts.is_empty() {
        return Err(CoreError::Config(
            "verification needs at least one noise sample and one step count".into(),
        ));
    }
    let mut max_endpoint_discrepancy: f64 = 0.0;
    let mut max_chord_deviation: f64 = 0.0;
    for eps in eps_samples {
        let mut endpoints = Vec::with_capacity(step_counts.len());
        for &steps in step_counts {
            let traj = euler_sample(field, eps, steps)?;
            max_chord_deviation = max_chord_deviation.max(chord_deviation(&traj)?);
            endpoints.push(traj.final_state().clone());
        }
        let mut scale = eps.norm();
        for e in &endpoints {
            scale = scale.max(e.norm());
        }
        scale = scale.max(1e-12);
        for i in 0..endpoints.len() {
            for j in i + 1..endpoints.len() {
                let d = endpoints[i].distance(&endpoints[j]) / scale;
                max_endpoint_discrepancy = max_endpoint_discrepancy.max(d);
            }
        }
    }
    let pass = max_endpoint_discrepancy < THEOREM_TOLERANCE && max_chord_deviation < THEOREM_TOLERANCE;
    Ok(TheoremReport {
        max_endpoint_discrepancy,
        max_chord_deviation,
        pass,
    })
}

/// [`verify_field`] specialized to the delta field toward `target`: every
/// step count must land on the target and every trajectory must be straight.
pub fn verify_theorem1(
    target: &LatentGrid,
    eps_samples: &[LatentGrid],
    step_counts: &[usize],
) -> Result<TheoremReport> {
    let field = DeltaField::new(target.clone());
    verify_field(&field, eps_samples, step_counts)
}
