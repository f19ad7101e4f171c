//! Working evaluation grid with trapezoid quadrature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GRID_SIZE: usize = 51;

/// Equispaced grid on `[t_min, t_max]` with trapezoid weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl EvalGrid {
    pub fn new(t_min: f64, t_max: f64, size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!("grid size must be at least 2, got {size}")));
        }
        if !(t_min.is_finite() && t_max.is_finite()) || t_max <= t_min {
            return Err(Error::Data(format!(
                "degenerate time domain [{t_min}, {t_max}]"
            )));
        }
        let h = (t_max - t_min) / (size - 1) as f64;
        let mut points: Vec<f64> = (0..size).map(|i| t_min + i as f64 * h).collect();
        points[size - 1] = t_max;
        let mut weights = vec![h; size];
        weights[0] = 0.5 * h;
        weights[size - 1] = 0.5 * h;
        Ok(Self { points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn t_min(&self) -> f64 {
        self.points[0]
    }

    pub fn t_max(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn span(&self) -> f64 {
        self.t_max() - self.t_min()
    }

    pub fn spacing(&self) -> f64 {
        self.span() / (self.len() - 1) as f64
    }

    /// Quadrature inner product of two curves on the grid.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(f)
            .zip(g)
            .map(|((w, a), b)| w * a * b)
            .sum()
    }

    pub fn integrate(&self, f: &[f64]) -> f64 {
        self.weights.iter().zip(f).map(|(w, a)| w * a).sum()
    }

    /// Linear interpolation of grid values `f` at `t` (clamped to the domain).
    pub fn interpolate(&self, f: &[f64], t: f64) -> f64 {
        let (i, frac) = self.locate(t);
        if frac == 0.0 {
            f[i]
        } else {
            f[i] * (1.0 - frac) + f[i + 1] * frac
        }
    }

    /// Cell index and fractional offset of `t`.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let g = self.len();
        if t <= self.t_min() {
            return (0, 0.0);
        }
        if t >= self.t_max() {
            return (g - 1, 0.0);
        }
        let u = (t - self.t_min()) / self.spacing();
        let i = (u.floor() as usize).min(g - 2);
        let frac = u - i as f64;
        (i, frac.clamp(0.0, 1.0))
    }
}
