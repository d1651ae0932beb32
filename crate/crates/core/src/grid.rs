//! Dense latent grids and path time.
//!
//! A [`LatentGrid`] is the single tensor type shared by every part of the
//! pipeline: targets, noise samples, interpolated states, person/garment
//! conditions and model outputs all use it. The encoder is the identity at
//! this scale, so grids double as both "pixels" and "latents".

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Velocity fields divide by `1 - t`; times at or above this limit are
/// rejected at evaluation sites.
pub const VELOCITY_TIME_LIMIT: f64 = 1.0 - 1e-12;

/// Shape of a latent grid, `(channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for GridShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.channels, self.height, self.width)
    }
}

/// Dense real-valued tensor, row-major in `(channel, row, column)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    shape: GridShape,
    values: Vec<f64>,
}

impl LatentGrid {
    /// Builds a grid, checking length and finiteness.
    pub fn new(shape: GridShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{} values for shape {shape}", shape.len()),
                got: format!("{} values", values.len()),
                context: "LatentGrid::new".into(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                what: "LatentGrid values".into(),
                step: None,
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: GridShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: GridShape, value: f64) -> Self {
        Self {
            shape,
            values: vec![value; shape.len()],
        }
    }

    /// Convenience constructor for a 1x1xN grid, used heavily in tests.
    pub fn from_flat(values: Vec<f64>) -> Self {
        let shape = GridShape::new(1, 1, values.len());
        Self { shape, values }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.shape.height + row) * self.shape.width + col
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.values[self.index(channel, row, col)]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f64) {
        let i = self.index(channel, row, col);
        self.values[i] = value;
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.shape == other.shape
    }

    pub fn check_same_shape(&self, other: &LatentGrid, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch {
                expected: self.shape.to_string(),
                got: other.shape.to_string(),
                context: context.into(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self + scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &LatentGrid) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            *a += scale * b;
        }
    }

    pub fn sub(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.check_same_shape(other, "LatentGrid::sub")?;
        let values = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(LatentGrid {
            shape: self.shape,
            values,
        })
    }

    pub fn scale(&self, factor: f64) -> LatentGrid {
        LatentGrid {
            shape: self.shape,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Euclidean norm over all elements.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Euclidean distance to another grid of the same shape.
    pub fn distance(&self, other: &LatentGrid) -> f64 {
        debug_assert!(self.same_shape(other));
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, other: &LatentGrid) -> f64 {
        debug_assert!(self.same_shape(other));
        let n = self.values.len().max(1) as f64;
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }
}

/// A point on the transport path. `t = 0` is pure noise, `t = 1` is data.
///
/// Interpolation is defined on the closed interval, while velocity
/// evaluation requires `t < 1 - 1e-12`; use [`PathTime::require_velocity_domain`]
/// at sites that divide by `1 - t`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct PathTime(f64);

impl PathTime {
    pub fn new(t: f64) -> Result<Self> {
        if !t.is_finite() || !(0.0..=1.0).contains(&t) {
            return Err(CoreError::TimeOutOfDomain { t, limit: 1.0 });
        }
        Ok(Self(t))
    }

    pub fn value(&self) -> f64 {
        self.0
    }

    /// Errors unless `t < 1 - 1e-12`, the domain on which `1 / (1 - t)` is
    /// numerically safe.
    pub fn require_velocity_domain(&self) -> Result<()> {
        if self.0 >= VELOCITY_TIME_LIMIT {
            return Err(CoreError::TimeOutOfDomain {
                t: self.0,
                limit: VELOCITY_TIME_LIMIT,
            });
        }
        Ok(())
    }
}
