//! Transport-path math: interpolation, Euler sampling and straightness
//! statistics.
//!
//! The path convention throughout is `x_t = t*y + (1-t)*eps`: `t = 0` is the
//! noise end, `t = 1` is the data end. Everything here is a pure function of
//! its inputs; identical inputs give bit-identical outputs.

use std::io::Write;

use crate::error::{CoreError, Result};
use crate::grid::{LatentGrid, PathTime};

/// A velocity field over latent grids. The conditioning inputs, if any, are
/// captured by the implementing type.
pub trait VelocityField {
    fn velocity(&self, x: &LatentGrid, t: PathTime) -> Result<LatentGrid>;
}

impl<F> VelocityField for F
where
    F: Fn(&LatentGrid, PathTime) -> Result<LatentGrid>,
{
    fn velocity(&self, x: &LatentGrid, t: PathTime) -> Result<LatentGrid> {
        self(x, t)
    }
}

/// Linear path point `t*y + (1-t)*eps`. Defined on the closed interval,
/// including `t = 1`.
pub fn ot_interpolate(y: &LatentGrid, eps: &LatentGrid, t: PathTime) -> Result<LatentGrid> {
    y.check_same_shape(eps, "ot_interpolate")?;
    let tv = t.value();
    let values = y
        .values()
        .iter()
        .zip(eps.values().iter())
        .map(|(yi, ei)| tv * yi + (1.0 - tv) * ei)
        .collect();
    LatentGrid::new(y.shape(), values)
}

/// Training-target velocity `y - eps`, constant along the path.
pub fn target_velocity(y: &LatentGrid, eps: &LatentGrid) -> Result<LatentGrid> {
    y.check_same_shape(eps, "target_velocity")?;
    y.sub(eps)
}

/// An ordered `(time, state)` record of one sampling run. Times start at 0,
/// end at 1 and increase strictly; all states share one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<LatentGrid>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<LatentGrid>) -> Result<Self> {
        if times.len() != states.len() || times.len() < 2 {
            return Err(CoreError::Config(format!(
                "trajectory needs matching times/states with at least 2 points, got {}/{}",
                times.len(),
                states.len()
            )));
        }
        if times[0] != 0.0 || *times.last().unwrap() != 1.0 {
            return Err(CoreError::Config(format!(
                "trajectory times must start at 0 and end at 1, got [{}, {}]",
                times[0],
                times.last().unwrap()
            )));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::Config(
                "trajectory times must be strictly increasing".into(),
            ));
        }
        let shape = states[0].shape();
        for s in &states[1..] {
            if s.shape() != shape {
                return Err(CoreError::ShapeMismatch {
                    expected: shape.to_string(),
                    got: s.shape().to_string(),
                    context: "Trajectory::new".into(),
                });
            }
        }
        Ok(Self { times, states })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[LatentGrid] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn initial(&self) -> &LatentGrid {
        &self.states[0]
    }

    pub fn final_state(&self) -> &LatentGrid {
        self.states.last().unwrap()
    }

    /// One row per point: `t` followed by the flattened state values.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let dim = self.states[0].len();
        write!(out, "t")?;
        for i in 0..dim {
            write!(out, ",v{i}")?;
        }
        writeln!(out)?;
        for (t, state) in self.times.iter().zip(self.states.iter()) {
            write!(out, "{t:?}")?;
            for v in state.values() {
                write!(out, ",{v:?}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Explicit Euler integration of `field` on the uniform grid `t_k = k/steps`,
/// starting from `eps` at `t = 0`. Returns the full trajectory of
/// `steps + 1` points; the final state is the sample.
pub fn euler_sample<F: VelocityField + ?Sized>(
    field: &F,
    eps: &LatentGrid,
    steps: usize,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(CoreError::Config("euler_sample requires steps >= 1".into()));
    }
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut x = eps.clone();
    times.push(0.0);
    states.push(x.clone());
    for k in 0..steps {
        let t_k = k as f64 / steps as f64;
        let t_next = (k + 1) as f64 / steps as f64;
        let v = field.velocity(&x, PathTime::new(t_k)?)?;
        if !v.is_finite() {
            return Err(CoreError::NonFinite {
                what: "velocity field output".into(),
                step: Some(k),
            });
        }
        x.check_same_shape(&v, "euler_sample velocity")?;
        x.axpy(t_next - t_k, &v);
        times.push(t_next);
        states.push(x.clone());
    }
    Trajectory::new(times, states)
}

/// Maximum normalized deviation of interior points from the straight chord.
///
/// For each interior point the deviation is the distance from `x_{t_k}` to
/// the chord point `(1 - t_k) x_0 + t_k x_1`, normalized by `|x_1 - x_0|`.
/// A zero-length chord is reported as 0 when every point coincides with the
/// endpoints, and as an error otherwise.
pub fn chord_deviation(traj: &Trajectory) -> Result<f64> {
    let states = traj.states();
    let times = traj.times();
    let x0 = &states[0];
    let x1 = states.last().unwrap();
    let chord = x1.distance(x0);
    if chord == 0.0 {
        let coincident = states.iter().all(|s| s.distance(x0) == 0.0);
        return if coincident {
            Ok(0.0)
        } else {
            Err(CoreError::DegenerateTrajectory)
        };
    }
    let mut max_dev: f64 = 0.0;
    for k in 1..states.len() - 1 {
        let t = times[k];
        let mut dev = 0.0;
        for ((s, a), b) in states[k]
            .values()
            .iter()
            .zip(x0.values().iter())
            .zip(x1.values().iter())
        {
            let chord_point = (1.0 - t) * a + t * b;
            let d = s - chord_point;
            dev += d * d;
        }
        max_dev = max_dev.max(dev.sqrt() / chord);
    }
    Ok(max_dev)
}

/// Mean squared deviation of per-segment velocities from the chord velocity
/// `x_1 - x_0`, normalized by `|x_1 - x_0|^2`.
///
/// Zero exactly when all points are collinear with uniform speed. When the
/// chord has zero length the unnormalized mean squared segment velocity is
/// returned, preserving that property.
pub fn velocity_dispersion(traj: &Trajectory) -> Result<f64> {
    let states = traj.states();
    let times = traj.times();
    let x0 = &states[0];
    let x1 = states.last().unwrap();
    let chord_sq: f64 = x1
        .values()
        .iter()
        .zip(x0.values().iter())
        .map(|(b, a)| (b - a) * (b - a))
        .sum();
    let segments = states.len() - 1;
    let mut total = 0.0;
    for k in 0..segments {
        let dt = times[k + 1] - times[k];
        let mut dev = 0.0;
        for (((next, prev), a), b) in states[k + 1]
            .values()
            .iter()
            .zip(states[k].values().iter())
            .zip(x0.values().iter())
            .zip(x1.values().iter())
        {
            let seg_v = (next - prev) / dt;
            let d = seg_v - (b - a);
            dev += d * d;
        }
        total += dev;
    }
    let mean = total / segments as f64;
    if chord_sq == 0.0 {
        Ok(mean)
    } else {
        Ok(mean / chord_sq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridShape;
    use crate::rng::seeded_normal_grid;

    fn flat(values: &[f64]) -> LatentGrid {
        LatentGrid::from_flat(values.to_vec())
    }

    #[test]
    fn interpolate_endpoints() {
        let y = flat(&[2.0, -1.0]);
        let eps = flat(&[0.5, 0.25]);
        let at0 = ot_interpolate(&y, &eps, PathTime::new(0.0).unwrap()).unwrap();
        assert_eq!(at0, eps);
        let at1 = ot_interpolate(&y, &eps, PathTime::new(1.0).unwrap()).unwrap();
        assert_eq!(at1, y);
    }

    #[test]
    fn interpolate_quarter() {
        let y = flat(&[2.0]);
        let eps = flat(&[0.0]);
        let x = ot_interpolate(&y, &eps, PathTime::new(0.25).unwrap()).unwrap();
        assert_eq!(x.values(), &[0.5]);
    }

    #[test]
    fn interpolate_shape_mismatch() {
        let y = flat(&[1.0, 2.0]);
        let eps = flat(&[1.0]);
        assert!(matches!(
            ot_interpolate(&y, &eps, PathTime::new(0.5).unwrap()),
            Err(CoreError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn target_velocity_cases() {
        let y = flat(&[1.0, 0.0]);
        let eps = flat(&[0.0, 1.0]);
        assert_eq!(target_velocity(&y, &eps).unwrap().values(), &[1.0, -1.0]);
        assert_eq!(target_velocity(&y, &y).unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn target_velocity_matches_finite_time_quotient() {
        let shape = GridShape::new(2, 3, 3);
        let y = seeded_normal_grid(1, "y", 0, shape);
        let eps = seeded_normal_grid(1, "eps", 0, shape);
        let v = target_velocity(&y, &eps).unwrap();
        for &t in &[0.0, 0.1, 0.5, 0.9, 0.999] {
            let x_t = ot_interpolate(&y, &eps, PathTime::new(t).unwrap()).unwrap();
            for ((yi, xi), vi) in y
                .values()
                .iter()
                .zip(x_t.values().iter())
                .zip(v.values().iter())
            {
                let quotient = (yi - xi) / (1.0 - t);
                assert!(
                    (quotient - vi).abs() <= 1e-12 * vi.abs().max(1.0),
                    "t={t}: {quotient} vs {vi}"
                );
            }
        }
    }

    #[test]
    fn euler_zero_field_returns_eps() {
        let eps = flat(&[0.3, -0.7]);
        let zero = |x: &LatentGrid, _t: PathTime| Ok(LatentGrid::zeros(x.shape()));
        for steps in [1, 3, 10] {
            let traj = euler_sample(&zero, &eps, steps).unwrap();
            assert_eq!(traj.len(), steps + 1);
            assert_eq!(traj.final_state(), &eps);
        }
    }

    #[test]
    fn euler_rejects_zero_steps() {
        let eps = flat(&[0.0]);
        let zero = |x: &LatentGrid, _t: PathTime| Ok(LatentGrid::zeros(x.shape()));
        assert!(euler_sample(&zero, &eps, 0).is_err());
    }

    #[test]
    fn euler_reports_offending_step_for_non_finite_field() {
        let eps = flat(&[0.0]);
        // LatentGrid::new rejects non-finite values, so the field mutates a
        // zero grid in place to slip a NaN through.
        let bad = |x: &LatentGrid, t: PathTime| {
            let mut g = LatentGrid::zeros(x.shape());
            if t.value() >= 0.5 {
                g.values_mut()[0] = f64::NAN;
            }
            Ok(g)
        };
        let err = euler_sample(&bad, &eps, 4).unwrap_err();
        match err {
            CoreError::NonFinite { step, .. } => assert_eq!(step, Some(2)),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn euler_is_deterministic() {
        let shape = GridShape::new(1, 2, 2);
        let eps = seeded_normal_grid(5, "eps", 0, shape);
        let field = |x: &LatentGrid, t: PathTime| {
            Ok(x.scale(-0.5 * (1.0 + t.value())))
        };
        let a = euler_sample(&field, &eps, 17).unwrap();
        let b = euler_sample(&field, &eps, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chord_deviation_two_points_is_zero() {
        let traj = Trajectory::new(vec![0.0, 1.0], vec![flat(&[0.0]), flat(&[2.0])]).unwrap();
        assert_eq!(chord_deviation(&traj).unwrap(), 0.0);
    }

    #[test]
    fn chord_deviation_planar_triangle() {
        // x0=(0,0), x_{0.5}=(0.5,0.3), x1=(1,0): chord point at t=0.5 is
        // (0.5, 0), distance 0.3, chord length 1.
        let traj = Trajectory::new(
            vec![0.0, 0.5, 1.0],
            vec![flat(&[0.0, 0.0]), flat(&[0.5, 0.3]), flat(&[1.0, 0.0])],
        )
        .unwrap();
        let dev = chord_deviation(&traj).unwrap();
        assert!((dev - 0.3).abs() < 1e-15, "dev={dev}");
    }

    #[test]
    fn chord_deviation_degenerate_cases() {
        let all_same = Trajectory::new(
            vec![0.0, 0.5, 1.0],
            vec![flat(&[1.0]), flat(&[1.0]), flat(&[1.0])],
        )
        .unwrap();
        assert_eq!(chord_deviation(&all_same).unwrap(), 0.0);

        let loop_back = Trajectory::new(
            vec![0.0, 0.5, 1.0],
            vec![flat(&[1.0]), flat(&[2.0]), flat(&[1.0])],
        )
        .unwrap();
        assert!(matches!(
            chord_deviation(&loop_back),
            Err(CoreError::DegenerateTrajectory)
        ));
    }

    #[test]
    fn velocity_dispersion_straight_uniform_is_zero() {
        let traj = Trajectory::new(
            vec![0.0, 0.25, 0.5, 1.0],
            vec![flat(&[0.0]), flat(&[0.5]), flat(&[1.0]), flat(&[2.0])],
        )
        .unwrap();
        assert_eq!(velocity_dispersion(&traj).unwrap(), 0.0);
    }

    #[test]
    fn velocity_dispersion_matches_bruteforce_on_triangle() {
        let points = [
            (0.0, [0.0, 0.0]),
            (0.5, [0.5, 0.3]),
            (1.0, [1.0, 0.0]),
        ];
        let traj = Trajectory::new(
            points.iter().map(|(t, _)| *t).collect(),
            points.iter().map(|(_, p)| flat(p)).collect(),
        )
        .unwrap();

        // Segment-by-segment oracle, written directly from the definition.
        let chord = [1.0 - 0.0, 0.0 - 0.0];
        let chord_sq: f64 = chord.iter().map(|c| c * c).sum();
        let mut acc = 0.0;
        for w in points.windows(2) {
            let dt = w[1].0 - w[0].0;
            for d in 0..2 {
                let seg_v = (w[1].1[d] - w[0].1[d]) / dt;
                acc += (seg_v - chord[d]).powi(2);
            }
        }
        let expected = acc / 2.0 / chord_sq;

        let got = velocity_dispersion(&traj).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        // Hand value: segments deviate by (0, ±0.6), so mean is 0.36.
        assert!((got - 0.36).abs() < 1e-15);
    }

    #[test]
    fn straightness_metrics_translation_invariant() {
        let shape = GridShape::new(1, 2, 2);
        let states: Vec<LatentGrid> = (0..4)
            .map(|i| seeded_normal_grid(9, "state", i, shape))
            .collect();
        let times = vec![0.0, 0.3, 0.7, 1.0];
        let traj = Trajectory::new(times.clone(), states.clone()).unwrap();
        let shift = seeded_normal_grid(9, "shift", 0, shape);
        let shifted: Vec<LatentGrid> = states
            .iter()
            .map(|s| {
                let mut t = s.clone();
                t.axpy(1.0, &shift);
                t
            })
            .collect();
        let traj_shifted = Trajectory::new(times, shifted).unwrap();
        let cd = chord_deviation(&traj).unwrap();
        let cd_s = chord_deviation(&traj_shifted).unwrap();
        assert!((cd - cd_s).abs() < 1e-9 * cd.max(1.0));
        let vd = velocity_dispersion(&traj).unwrap();
        let vd_s = velocity_dispersion(&traj_shifted).unwrap();
        assert!((vd - vd_s).abs() < 1e-9 * vd.max(1.0));
    }

    #[test]
    fn trajectory_csv_roundtrip_shape() {
        let traj = Trajectory::new(
            vec![0.0, 1.0],
            vec![flat(&[0.25, -1.5]), flat(&[1.0, 0.125])],
        )
        .unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "t,v0,v1");
        assert_eq!(lines[1], "0.0,0.25,-1.5");
        assert_eq!(lines[2], "1.0,1.0,0.125");
    }
}
