//! Evaluation metrics: endpoint error against the compositing oracle,
//! garment-region fidelity, energy distance between sample sets, and
//! straightness summaries of sampled trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::flow::{chord_deviation, euler_sample, velocity_dispersion, VelocityField};
use crate::grid::LatentGrid;
use crate::model::{ModelField, VelocityModel};
use crate::rng::seeded_normal_grid;
use crate::synth::{oracle_composites, Dataset, GarmentRegion, TryOnInstance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub endpoint_mse: f64,
    pub garment_region_mse: f64,
    pub energy_distance: f64,
    pub mean_chord_deviation: f64,
    pub mean_velocity_dispersion: f64,
    pub n_samples: usize,
}

/// Mean squared difference over garment-region cells only.
pub fn region_mse(a: &LatentGrid, b: &LatentGrid, region: &GarmentRegion) -> Result<f64> {
    a.check_same_shape(b, "region mse")?;
    let shape = a.shape();
    let mut acc = 0.0;
    for c in 0..shape.channels {
        for row in region.row0..region.row1 {
            for col in region.col0..region.col1 {
                let d = a.get(c, row, col) - b.get(c, row, col);
                acc += d * d;
            }
        }
    }
    Ok(acc / (shape.channels * region.area()) as f64)
}

/// Error of one endpoint against the nearest oracle composite: full-grid MSE
/// decides which composite is nearest; the region MSE is reported for that
/// same composite.
pub fn nearest_composite_error(
    endpoint: &LatentGrid,
    composites: &[LatentGrid],
    region: &GarmentRegion,
) -> Result<(f64, f64)> {
    if composites.is_empty() {
        return Err(CoreError::Config("no oracle composites".into()));
    }
    let mut best = (f64::INFINITY, 0usize);
    for (j, comp) in composites.iter().enumerate() {
        endpoint.check_same_shape(comp, "nearest composite")?;
        let m = endpoint.mse(comp);
        if m < best.0 {
            best = (m, j);
        }
    }
    let reg = region_mse(endpoint, &composites[best.1], region)?;
    Ok((best.0, reg))
}

/// Per-instance noise used by every evaluation pass, so metrics at different
/// checkpoints are computed on identical noise draws.
pub fn eval_noise(data: &Dataset, seed: u64, index: usize) -> LatentGrid {
    seeded_normal_grid(seed, "eval-noise", index as u64, data.shape)
}

/// Euler endpoints for each instance under a caller-supplied field.
pub fn sample_endpoints_with<'a, F, V>(
    field_for: F,
    data: &'a Dataset,
    steps: usize,
    seed: u64,
) -> Result<Vec<LatentGrid>>
where
    F: Fn(&'a TryOnInstance) -> V,
    V: VelocityField,
{
    data.instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let field = field_for(inst);
            let eps = eval_noise(data, seed, i);
            Ok(euler_sample(&field, &eps, steps)?.final_state().clone())
        })
        .collect()
}

pub fn sample_endpoints(
    model: &VelocityModel,
    data: &Dataset,
    steps: usize,
    seed: u64,
) -> Result<Vec<LatentGrid>> {
    sample_endpoints_with(
        |inst| ModelField {
            model,
            person: &inst.person,
            garment: &inst.garment,
        },
        data,
        steps,
        seed,
    )
}

/// Mean (full, garment-region) endpoint MSE over the dataset, measured
/// against the nearest oracle composite per instance.
pub fn endpoint_error_with<'a, F, V>(
    field_for: F,
    data: &'a Dataset,
    steps: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    F: Fn(&'a TryOnInstance) -> V,
    V: VelocityField,
{
    if data.is_empty() {
        return Err(CoreError::Config("empty dataset in endpoint_error".into()));
    }
    let region = GarmentRegion::for_shape(data.shape)?;
    let endpoints = sample_endpoints_with(field_for, data, steps, seed)?;
    let mut full_acc = 0.0;
    let mut region_acc = 0.0;
    for (inst, endpoint) in data.instances.iter().zip(&endpoints) {
        let composites = oracle_composites(&inst.person, &inst.garment, &data.bank)?;
        let (full, reg) = nearest_composite_error(endpoint, &composites, &region)?;
        full_acc += full;
        region_acc += reg;
    }
    let n = data.len() as f64;
    Ok((full_acc / n, region_acc / n))
}

pub fn endpoint_error(
    model: &VelocityModel,
    data: &Dataset,
    steps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    endpoint_error_with(
        |inst| ModelField {
            model,
            person: &inst.person,
            garment: &inst.garment,
        },
        data,
        steps,
        seed,
    )
}

/// `2 E d(X,Y) - E d(X,X') - E d(Y,Y')` with exact pairwise sums. The cross
/// term averages the row-major and column-major accumulations so swapping
/// the arguments is a bit-exact no-op.
pub fn energy_distance(a: &[LatentGrid], b: &[LatentGrid]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(CoreError::Config("energy distance of an empty set".into()));
    }
    for g in a.iter().chain(b.iter()) {
        a[0].check_same_shape(g, "energy distance")?;
    }
    let cross_row: f64 = a
        .iter()
        .map(|x| b.iter().map(|y| x.distance(y)).sum::<f64>())
        .sum();
    let cross_col: f64 = b
        .iter()
        .map(|y| a.iter().map(|x| y.distance(x)).sum::<f64>())
        .sum();
    let cross = 0.5 * (cross_row + cross_col) / (a.len() * b.len()) as f64;
    let within = |s: &[LatentGrid]| -> f64 {
        let total: f64 = s
            .iter()
            .map(|x| s.iter().map(|y| x.distance(y)).sum::<f64>())
            .sum();
        total / (s.len() * s.len()) as f64
    };
    Ok(2.0 * cross - (within(a) + within(b)))
}

/// Mean chord deviation and velocity dispersion of sampled trajectories.
pub fn straightness_summary_with<'a, F, V>(
    field_for: F,
    data: &'a Dataset,
    steps: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    F: Fn(&'a TryOnInstance) -> V,
    V: VelocityField,
{
    if steps < 2 {
        return Err(CoreError::Config(
            "straightness summary needs at least 2 steps".into(),
        ));
    }
    if data.is_empty() {
        return Err(CoreError::Config("empty dataset in straightness".into()));
    }
    let mut chord_acc = 0.0;
    let mut disp_acc = 0.0;
    for (i, inst) in data.instances.iter().enumerate() {
        let field = field_for(inst);
        let eps = eval_noise(data, seed, i);
        let traj = euler_sample(&field, &eps, steps)?;
        chord_acc += chord_deviation(&traj)?;
        disp_acc += velocity_dispersion(&traj)?;
    }
    let n = data.len() as f64;
    Ok((chord_acc / n, disp_acc / n))
}

pub fn straightness_summary(
    model: &VelocityModel,
    data: &Dataset,
    steps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    straightness_summary_with(
        |inst| ModelField {
            model,
            person: &inst.person,
            garment: &inst.garment,
        },
        data,
        steps,
        seed,
    )
}

/// Full report: endpoint errors, energy distance of sampled endpoints
/// against the dataset targets, and straightness of the same trajectories.
pub fn eval_report(
    model: &VelocityModel,
    data: &Dataset,
    steps: usize,
    seed: u64,
) -> Result<EvalReport> {
    let (endpoint_mse, garment_region_mse) = endpoint_error(model, data, steps, seed)?;
    let endpoints = sample_endpoints(model, data, steps, seed)?;
    let targets: Vec<LatentGrid> = data.instances.iter().map(|i| i.target.clone()).collect();
    let energy = energy_distance(&endpoints, &targets)?;
    let (chord, dispersion) = if steps >= 2 {
        straightness_summary(model, data, steps, seed)?
    } else {
        (0.0, 0.0)
    };
    Ok(EvalReport {
        endpoint_mse,
        garment_region_mse,
        energy_distance: energy,
        mean_chord_deviation: chord,
        mean_velocity_dispersion: dispersion,
        n_samples: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::DeltaField;
    use crate::grid::{GridShape, PathTime};
    use crate::rng::stream_rng;
    use rand::Rng;

    fn small_dataset(seed: u64, n: usize) -> Dataset {
        Dataset::generate(n, GridShape::new(2, 4, 4), 3, 0.05, seed).unwrap()
    }

    #[test]
    fn delta_field_reaches_zero_error() {
        let data = small_dataset(1, 6);
        let (full, region) = endpoint_error_with(
            |inst| DeltaField::new(inst.target.clone()),
            &data,
            5,
            7,
        )
        .unwrap();
        assert!(full < 1e-12, "full {full}");
        assert!(region < 1e-12, "region {region}");
    }

    #[test]
    fn zero_velocity_error_matches_direct_computation() {
        let data = small_dataset(2, 5);
        let zero_field = |_inst: &TryOnInstance| {
            |x: &LatentGrid, _t: PathTime| Ok(LatentGrid::zeros(x.shape()))
        };
        let (full, _) = endpoint_error_with(zero_field, &data, 3, 11).unwrap();
        // Zero velocity leaves the endpoint at eps.
        let region = GarmentRegion::for_shape(data.shape).unwrap();
        let mut expected = 0.0;
        for (i, inst) in data.instances.iter().enumerate() {
            let eps = eval_noise(&data, 11, i);
            let comps = oracle_composites(&inst.person, &inst.garment, &data.bank).unwrap();
            let (f, _) = nearest_composite_error(&eps, &comps, &region).unwrap();
            expected += f;
        }
        expected /= data.len() as f64;
        assert!((full - expected).abs() < 1e-12);
    }

    #[test]
    fn region_restriction_consistency() {
        let shape = GridShape::new(2, 6, 6);
        let region = GarmentRegion::for_shape(shape).unwrap();
        let a = seeded_normal_grid(3, "a", 0, shape);
        let b = seeded_normal_grid(3, "b", 0, shape);
        let direct = region_mse(&a, &b, &region).unwrap();
        // Zero both grids outside the region; the full-grid squared error then
        // lives entirely on the region.
        let mask = |g: &LatentGrid| {
            let mut out = LatentGrid::zeros(shape);
            for c in 0..shape.channels {
                for row in region.row0..region.row1 {
                    for col in region.col0..region.col1 {
                        out.set(c, row, col, g.get(c, row, col));
                    }
                }
            }
            out
        };
        let ma = mask(&a);
        let mb = mask(&b);
        let full = ma.mse(&mb) * shape.len() as f64 / (shape.channels * region.area()) as f64;
        assert!((direct - full).abs() < 1e-12);
    }

    #[test]
    fn endpoint_error_is_monotone_under_corruption() {
        let data = small_dataset(5, 6);
        let mut previous = -1.0;
        for (k, scale) in [0.5, 1.0, 2.0].iter().enumerate() {
            let noisy = |inst: &TryOnInstance| {
                let target = inst.target.clone();
                let s = *scale;
                let seed_k = k as u64;
                move |x: &LatentGrid, t: PathTime| {
                    let mut v = DeltaField::new(target.clone()).velocity(x, t)?;
                    // Deterministic per-call corruption with a fixed stream.
                    let mut rng = stream_rng(99, "corrupt", seed_k);
                    for val in v.values_mut() {
                        *val += s * rng.gen_range(-1.0..1.0);
                    }
                    Ok(v)
                }
            };
            let (full, _) = endpoint_error_with(|i| noisy(i), &data, 4, 13).unwrap();
            assert!(full > previous, "scale {scale} gave {full} <= {previous}");
            previous = full;
        }
    }

    #[test]
    fn energy_distance_identical_multisets() {
        let shape = GridShape::new(1, 4, 4);
        let set: Vec<LatentGrid> = (0..6)
            .map(|i| seeded_normal_grid(7, "s", i, shape))
            .collect();
        let d = energy_distance(&set, &set).unwrap();
        assert!(d.abs() <= 1e-10, "got {d}");
    }

    #[test]
    fn energy_distance_singletons() {
        let shape = GridShape::new(1, 2, 2);
        let a = seeded_normal_grid(8, "a", 0, shape);
        let b = seeded_normal_grid(8, "b", 0, shape);
        let d = energy_distance(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap();
        assert!((d - 2.0 * a.distance(&b)).abs() < 1e-12);
    }

    #[test]
    fn energy_distance_matches_brute_force_on_scalars() {
        let shape = GridShape::new(1, 1, 1);
        let xs = [0.3, -1.2, 0.7, 2.0, -0.4];
        let ys = [1.1, 0.0, -0.9, 0.5, 1.7];
        let to_set = |vals: &[f64]| -> Vec<LatentGrid> {
            vals.iter()
                .map(|v| LatentGrid::new(shape, vec![*v]).unwrap())
                .collect()
        };
        let a = to_set(&xs);
        let b = to_set(&ys);
        let mut cross = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for x in &xs {
            for y in &ys {
                cross += (x - y).abs();
            }
        }
        for x in &xs {
            for y in &xs {
                aa += (x - y).abs();
            }
        }
        for x in &ys {
            for y in &ys {
                bb += (x - y).abs();
            }
        }
        let expected = 2.0 * cross / 25.0 - aa / 25.0 - bb / 25.0;
        let got = energy_distance(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-10, "got {got} vs {expected}");
    }

    #[test]
    fn energy_distance_is_bitwise_symmetric() {
        let shape = GridShape::new(2, 3, 3);
        let a: Vec<LatentGrid> = (0..4).map(|i| seeded_normal_grid(9, "a", i, shape)).collect();
        let b: Vec<LatentGrid> = (0..7).map(|i| seeded_normal_grid(9, "b", i, shape)).collect();
        let ab = energy_distance(&a, &b).unwrap();
        let ba = energy_distance(&b, &a).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
        assert!(ab > 0.0);
    }

    #[test]
    fn energy_distance_rejects_bad_inputs() {
        let shape = GridShape::new(1, 2, 2);
        let a = vec![LatentGrid::zeros(shape)];
        assert!(energy_distance(&a, &[]).is_err());
        let b = vec![LatentGrid::zeros(GridShape::new(1, 3, 3))];
        assert!(energy_distance(&a, &b).is_err());
    }

    #[test]
    fn straightness_zero_for_delta_field() {
        let data = small_dataset(10, 4);
        let (chord, disp) = straightness_summary_with(
            |inst| DeltaField::new(inst.target.clone()),
            &data,
            8,
            17,
        )
        .unwrap();
        assert!(chord < 1e-12, "chord {chord}");
        assert!(disp < 1e-12, "dispersion {disp}");
    }

    #[test]
    fn straightness_positive_for_curved_field() {
        let data = small_dataset(12, 4);
        // A deliberately curved field: rotate the delta velocity by a
        // t-dependent amount through value mixing.
        let curved = |inst: &TryOnInstance| {
            let target = inst.target.clone();
            move |x: &LatentGrid, t: PathTime| {
                let base = DeltaField::new(target.clone()).velocity(x, t)?;
                let mut v = base.clone();
                let w = (1.0 - t.value()) * 2.0;
                for (i, val) in v.values_mut().iter_mut().enumerate() {
                    *val += w * (i as f64 * 0.7).sin();
                }
                Ok(v)
            }
        };
        let (chord, _) = straightness_summary_with(|i| curved(i), &data, 8, 19).unwrap();
        assert!(chord > 1e-4, "chord {chord}");
    }

    #[test]
    fn straightness_rejects_single_step() {
        let data = small_dataset(13, 2);
        let res = straightness_summary_with(
            |inst| DeltaField::new(inst.target.clone()),
            &data,
            1,
            1,
        );
        assert!(res.is_err());
    }

    #[test]
    fn report_serializes_with_stable_keys() {
        let report = EvalReport {
            endpoint_mse: 0.5,
            garment_region_mse: 0.25,
            energy_distance: 0.125,
            mean_chord_deviation: 0.01,
            mean_velocity_dispersion: 0.02,
            n_samples: 4,
        };
        let json = serde_json::to_string(&report).unwrap();
        for key in [
            "endpoint_mse",
            "garment_region_mse",
            "energy_distance",
            "mean_chord_deviation",
            "mean_velocity_dispersion",
            "n_samples",
        ] {
            assert!(json.contains(key));
        }
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
