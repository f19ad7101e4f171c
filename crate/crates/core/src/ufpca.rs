//! Univariate sparse FPCA for one embedding dimension.
//!
//! Mean and covariance surfaces come from local-linear smoothing of the
//! pooled observations, the eigenproblem is solved on the working grid under
//! trapezoid quadrature, and subject scores are conditional expectations
//! (PACE) that remain defined for subjects with a single observation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{SlDataset, SparseSample};
use crate::error::{Error, Result};
use crate::grid::{EvalGrid, DEFAULT_GRID_SIZE};
use crate::linalg::{fix_sign, sym_eigen_desc};
use crate::smooth::{gcv_bandwidth, smooth_1d, smooth_2d, Pooled1d, Pooled2d};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UfpcaConfig {
    pub grid_size: usize,
    pub mean_bandwidth: Bandwidth,
    /// Defaults to 1.5x the mean bandwidth.
    pub cov_bandwidth: Option<f64>,
    pub fve_threshold: f64,
    pub k_max: usize,
}

impl Default for UfpcaConfig {
    fn default() -> Self {
        Self {
            grid_size: DEFAULT_GRID_SIZE,
            mean_bandwidth: Bandwidth::Auto,
            cov_bandwidth: None,
            fve_threshold: 0.95,
            k_max: 10,
        }
    }
}

impl UfpcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::Config("grid_size must be at least 2".into()));
        }
        if !(self.fve_threshold > 0.0 && self.fve_threshold <= 1.0) {
            return Err(Error::Config(format!("fve_threshold {} not in (0, 1]", self.fve_threshold)));
        }
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be positive".into()));
        }
        if let Bandwidth::Fixed(h) = self.mean_bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Config(format!("mean bandwidth {h} must be positive")));
            }
        }
        if let Some(h) = self.cov_bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Config(format!("covariance bandwidth {h} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    pub mean: f64,
    pub cov: f64,
}

/// A fitted univariate FPCA model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UfpcaModel {
    /// Subject order of the score rows; empty when fitted from bare samples.
    #[serde(default)]
    pub subject_ids: Vec<String>,
    pub grid: EvalGrid,
    pub mean: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// K x G, rows orthonormal under the grid weights.
    pub eigenfunctions: DMatrix<f64>,
    pub noise_var: f64,
    /// N x K, column-centered.
    pub scores: DMatrix<f64>,
    /// Column means removed from the raw conditional expectations.
    pub score_offset: Vec<f64>,
    /// Cumulative FVE over all retained positive eigenvalues (not only K).
    pub fve: Vec<f64>,
    pub bandwidths: Bandwidths,
}

impl UfpcaModel {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.scores.nrows()
    }

    pub fn eigenfunction(&self, k: usize) -> Vec<f64> {
        self.eigenfunctions.row(k).iter().copied().collect()
    }

    /// Centered scores for a subject that did not take part in the fit.
    pub fn score(&self, sample: &SparseSample) -> Vec<f64> {
        let raw = pace_raw(
            sample,
            &self.grid,
            &self.mean,
            &self.eigenvalues,
            &self.eigenfunctions,
            self.noise_var,
        );
        raw.iter().zip(&self.score_offset).map(|(x, o)| x - o).collect()
    }
}

/// Fits dimension `d` of a dataset, keeping its subject order.
pub fn fit_dimension(dataset: &SlDataset, d: usize, grid: &EvalGrid, cfg: &UfpcaConfig) -> Result<UfpcaModel> {
    let samples = dataset.dim_samples(d);
    let mut model = fit_ufpca(&samples, grid, cfg)?;
    model.subject_ids = dataset.subject_ids();
    Ok(model)
}

fn pooled_mean_data(samples: &[SparseSample]) -> Pooled1d {
    Pooled1d::from_pairs(
        samples
            .iter()
            .flat_map(|s| s.times.iter().copied().zip(s.values.iter().copied())),
    )
}

/// Smoothed mean on the grid and the bandwidth used.
pub fn fit_mean(samples: &[SparseSample], grid: &EvalGrid, bandwidth: Bandwidth) -> Result<(Vec<f64>, f64)> {
    let data = pooled_mean_data(samples);
    if data.n_distinct() < 2 {
        return Err(Error::NotIdentifiable("mean not identifiable: fewer than 2 distinct timestamps".into()));
    }
    let h = match bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Auto => gcv_bandwidth(&data, grid.span())?,
    };
    Ok((smooth_1d(&data, &grid.points, h)?, h))
}

/// Integral of the piecewise-linear interpolant of `f` over `[a, b]`.
fn integrate_interval(grid: &EvalGrid, f: &[f64], a: f64, b: f64) -> f64 {
    let mut knots = vec![a];
    knots.extend(grid.points.iter().copied().filter(|&t| t > a && t < b));
    knots.push(b);
    knots
        .windows(2)
        .map(|w| 0.5 * (w[1] - w[0]) * (grid.interpolate(f, w[0]) + grid.interpolate(f, w[1])))
        .sum()
}

/// Smoothed covariance surface (G x G, symmetric) and noise variance.
pub fn fit_covariance(samples: &[SparseSample], mean: &[f64], grid: &EvalGrid, h: f64) -> Result<(DMatrix<f64>, f64)> {
    if !samples.iter().any(|s| s.len() >= 2) {
        return Err(Error::NotIdentifiable(
            "covariance not identifiable: no subject with at least 2 observations".into(),
        ));
    }
    let resid: Vec<Vec<(f64, f64)>> = samples
        .iter()
        .map(|s| {
            s.times
                .iter()
                .zip(&s.values)
                .map(|(&t, &y)| (t, y - grid.interpolate(mean, t)))
                .collect()
        })
        .collect();
    let off_diag = resid.iter().flat_map(|r| {
        r.iter().enumerate().flat_map(move |(j, &(tj, ej))| {
            r.iter()
                .enumerate()
                .filter(move |&(l, _)| l != j)
                .map(move |(_, &(tl, el))| (tj, tl, ej * el))
        })
    });
    let pooled = Pooled2d::new(off_diag, grid.t_min(), grid.t_max(), h);
    let surface = smooth_2d(&pooled, &grid.points, h)?;
    let surface = (&surface + surface.transpose()) * 0.5;

    let diag = Pooled1d::from_pairs(resid.iter().flatten().map(|&(t, e)| (t, e * e)));
    let v_hat = smooth_1d(&diag, &grid.points, h)?;
    let gap: Vec<f64> = (0..grid.len()).map(|g| v_hat[g] - surface[(g, g)]).collect();
    let quarter = 0.25 * grid.span();
    let integral = integrate_interval(grid, &gap, grid.t_min() + quarter, grid.t_max() - quarter);
    let noise_var = (2.0 / grid.span() * integral).max(0.0);
    Ok((surface, noise_var))
}

/// Result of the weighted eigenproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    /// First K eigenvalues.
    pub eigenvalues: Vec<f64>,
    /// K x G.
    pub eigenfunctions: DMatrix<f64>,
    pub k: usize,
    /// Cumulative FVE over every retained positive eigenvalue.
    pub fve: Vec<f64>,
}

pub fn eigendecompose(cov: &DMatrix<f64>, grid: &EvalGrid, fve_threshold: f64, k_max: usize) -> Result<EigenResult> {
    let g = grid.len();
    let sw: Vec<f64> = grid.weights.iter().map(|w| w.sqrt()).collect();
    let a = DMatrix::from_fn(g, g, |i, j| sw[i] * cov[(i, j)] * sw[j]);
    let (vals, vecs) = sym_eigen_desc(&a);
    let l1 = vals.first().copied().unwrap_or(0.0);
    if l1 <= 0.0 {
        return Err(Error::NotIdentifiable("degenerate covariance: no positive eigenvalue".into()));
    }
    let kept: Vec<usize> = (0..g).filter(|&k| vals[k] > 1e-12 * l1).collect();
    let total: f64 = kept.iter().map(|&k| vals[k]).sum();
    let mut acc = 0.0;
    let fve: Vec<f64> = kept
        .iter()
        .map(|&k| {
            acc += vals[k];
            (acc / total).min(1.0)
        })
        .collect();
    let reach = fve
        .iter()
        .position(|&f| f >= fve_threshold - 1e-12)
        .map(|i| i + 1)
        .unwrap_or(kept.len());
    let k = reach.min(k_max).max(1);
    let mut phis = DMatrix::zeros(k, g);
    for (r, &col) in kept.iter().take(k).enumerate() {
        let mut phi: Vec<f64> = (0..g).map(|i| vecs[(i, col)] / sw[i]).collect();
        let norm = grid.inner(&phi, &phi).sqrt();
        phi.iter_mut().for_each(|x| *x /= norm);
        fix_sign(&mut phi);
        phis.row_mut(r).copy_from_slice(&phi);
    }
    Ok(EigenResult {
        eigenvalues: kept.iter().take(k).map(|&c| vals[c]).collect(),
        eigenfunctions: phis,
        k,
        fve,
    })
}

/// Conditional-expectation scores before centering.
pub fn pace_raw(
    sample: &SparseSample,
    grid: &EvalGrid,
    mean: &[f64],
    eigenvalues: &[f64],
    eigenfunctions: &DMatrix<f64>,
    noise_var: f64,
) -> Vec<f64> {
    let k = eigenvalues.len();
    let n = sample.len();
    if n == 0 || k == 0 {
        return vec![0.0; k];
    }
    let phi_rows: Vec<Vec<f64>> = (0..k)
        .map(|r| eigenfunctions.row(r).iter().copied().collect())
        .collect();
    let phi = DMatrix::from_fn(n, k, |j, r| grid.interpolate(&phi_rows[r], sample.times[j]));
    let resid = DVector::from_fn(n, |j, _| sample.values[j] - grid.interpolate(mean, sample.times[j]));
    let lambda = DMatrix::from_diagonal(&DVector::from_column_slice(eigenvalues));
    let base = &phi * &lambda * phi.transpose();
    let ridge = 1e-8 * eigenvalues[0];

    let solve_with = |extra: f64| -> Option<DVector<f64>> {
        let mut m = base.clone();
        for j in 0..n {
            m[(j, j)] += noise_var + extra;
        }
        m.cholesky().map(|c| c.solve(&resid))
    };
    let sol = if noise_var > 0.0 {
        solve_with(0.0).or_else(|| solve_with(ridge))
    } else if n > k {
        solve_with(ridge)
    } else {
        solve_with(0.0).or_else(|| solve_with(ridge))
    };
    match sol {
        Some(x) => {
            let xi = &lambda * phi.transpose() * x;
            xi.iter().copied().collect()
        }
        None => vec![0.0; k],
    }
}

/// Computes centered PACE scores for every sample; returns (scores, offsets).
pub fn pace_scores(
    samples: &[SparseSample],
    grid: &EvalGrid,
    mean: &[f64],
    eigenvalues: &[f64],
    eigenfunctions: &DMatrix<f64>,
    noise_var: f64,
) -> (DMatrix<f64>, Vec<f64>) {
    let k = eigenvalues.len();
    let rows: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| pace_raw(s, grid, mean, eigenvalues, eigenfunctions, noise_var))
        .collect();
    let n = rows.len();
    let mut scores = DMatrix::from_fn(n, k, |i, r| rows[i][r]);
    let mut offsets = vec![0.0; k];
    for r in 0..k {
        let m = scores.column(r).sum() / n as f64;
        offsets[r] = m;
        scores.column_mut(r).add_scalar_mut(-m);
    }
    (scores, offsets)
}

/// Fits the full univariate model for one dimension.
pub fn fit_ufpca(samples: &[SparseSample], grid: &EvalGrid, cfg: &UfpcaConfig) -> Result<UfpcaModel> {
    cfg.validate()?;
    let (mean, h_mean) = fit_mean(samples, grid, cfg.mean_bandwidth)?;
    let h_cov = cfg.cov_bandwidth.unwrap_or(1.5 * h_mean);
    let (cov, noise_var) = fit_covariance(samples, &mean, grid, h_cov)?;
    let eig = eigendecompose(&cov, grid, cfg.fve_threshold, cfg.k_max)?;
    let (scores, score_offset) = pace_scores(samples, grid, &mean, &eig.eigenvalues, &eig.eigenfunctions, noise_var);
    log::debug!(
        "ufpca: h_mean={h_mean:.4} h_cov={h_cov:.4} sigma2={noise_var:.4e} K={}",
        eig.k
    );
    Ok(UfpcaModel {
        subject_ids: Vec::new(),
        grid: grid.clone(),
        mean,
        eigenvalues: eig.eigenvalues,
        eigenfunctions: eig.eigenfunctions,
        noise_var,
        scores,
        score_offset,
        fve: eig.fve,
        bandwidths: Bandwidths { mean: h_mean, cov: h_cov },
    })
}
