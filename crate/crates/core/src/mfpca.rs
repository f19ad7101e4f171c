//! Multivariate FPCA assembled from per-dimension univariate fits.
//!
//! The centered univariate scores of all dimensions are stacked into one
//! N x M matrix; its sample covariance is diagonalised and the eigenvectors
//! recombine the univariate eigenfunctions into multivariate ones.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::SparseSample;
use crate::error::{Error, Result};
use crate::grid::EvalGrid;
use crate::linalg::sym_eigen_desc;
use crate::ufpca::UfpcaModel;

/// Eigenvalues at or below this fraction of the largest are dropped.
const ZERO_EIGEN_REL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfpcaModel {
    pub per_dim: Vec<UfpcaModel>,
    /// Column offsets of each dimension in the stacked score matrix (length p + 1).
    pub stack_offsets: Vec<usize>,
    /// Stacked univariate scores, N x M.
    pub stacked: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// M x M', columns are eigenvectors.
    pub eigenvectors: DMatrix<f64>,
    /// One p x G matrix per component.
    pub psi: Vec<DMatrix<f64>>,
    /// N x M'.
    pub scores: DMatrix<f64>,
    pub m_selected: usize,
}

/// Where reconstruction takes its mean curves from.
#[derive(Debug, Clone, Copy)]
pub enum MeanSource<'a> {
    /// The per-dimension means stored in the model.
    Model,
    /// Caller-supplied p x G mean curves (for example a cluster's).
    External(&'a DMatrix<f64>),
}

/// Eigendecomposition of `XᵀX / (N - 1)` with near-zero eigenpairs dropped.
pub fn stacked_eigen(xi: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = xi.nrows();
    if n < 2 {
        return Err(Error::NotIdentifiable("need at least 2 subjects for mFPCA".into()));
    }
    let cov = (xi.transpose() * xi) / (n as f64 - 1.0);
    let (vals, vecs) = sym_eigen_desc(&cov);
    let top = vals.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Err(Error::NotIdentifiable("stacked score covariance is zero".into()));
    }
    let keep = vals.iter().take_while(|&&v| v > ZERO_EIGEN_REL * top).count();
    Ok((vals[..keep].to_vec(), vecs.columns(0, keep).into_owned()))
}

/// Smallest M' whose cumulative share of `eigenvalues` reaches `fve_threshold`.
pub fn select_m(eigenvalues: &[f64], fve_threshold: f64) -> usize {
    let total: f64 = eigenvalues.iter().sum();
    let mut acc = 0.0;
    for (m, v) in eigenvalues.iter().enumerate() {
        acc += v;
        if acc / total >= fve_threshold - 1e-12 {
            return m + 1;
        }
    }
    eigenvalues.len()
}

pub fn fit_mfpca(per_dim: Vec<UfpcaModel>) -> Result<MfpcaModel> {
    let first = per_dim
        .first()
        .ok_or_else(|| Error::Data("mFPCA needs at least one dimension".into()))?;
    let n = first.n_subjects();
    for (d, m) in per_dim.iter().enumerate() {
        if m.n_subjects() != n || m.subject_ids != first.subject_ids {
            return Err(Error::Data(format!(
                "subject order of dimension {d} does not match dimension 0"
            )));
        }
        if m.grid != first.grid {
            return Err(Error::Data(format!("dimension {d} uses a different grid")));
        }
    }
    let mut offsets = vec![0usize];
    for m in &per_dim {
        offsets.push(offsets.last().unwrap() + m.k());
    }
    let total_m = *offsets.last().unwrap();
    let mut stacked = DMatrix::zeros(n, total_m);
    for (d, m) in per_dim.iter().enumerate() {
        stacked.columns_mut(offsets[d], m.k()).copy_from(&m.scores);
    }
    let (eigenvalues, eigenvectors) = stacked_eigen(&stacked)?;
    let scores = &stacked * &eigenvectors;
    let psi = build_psi(&per_dim, &offsets, &eigenvectors);
    let m_selected = eigenvalues.len();
    Ok(MfpcaModel {
        per_dim,
        stack_offsets: offsets,
        stacked,
        eigenvalues,
        eigenvectors,
        psi,
        scores,
        m_selected,
    })
}

fn build_psi(per_dim: &[UfpcaModel], offsets: &[usize], v: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let p = per_dim.len();
    let g = per_dim[0].grid.len();
    (0..v.ncols())
        .map(|m| {
            let mut out = DMatrix::zeros(p, g);
            for (d, model) in per_dim.iter().enumerate() {
                for k in 0..model.k() {
                    let coef = v[(offsets[d] + k, m)];
                    for t in 0..g {
                        out[(d, t)] += coef * model.eigenfunctions[(k, t)];
                    }
                }
            }
            out
        })
        .collect()
}

impl MfpcaModel {
    pub fn p(&self) -> usize {
        self.per_dim.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.scores.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn grid(&self) -> &EvalGrid {
        &self.per_dim[0].grid
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.per_dim[0].subject_ids
    }

    /// Pooled mean curves, p x G.
    pub fn mean_curves(&self) -> DMatrix<f64> {
        let g = self.grid().len();
        DMatrix::from_fn(self.p(), g, |d, t| self.per_dim[d].mean[t])
    }

    pub fn select_m(&mut self, fve_threshold: f64) -> usize {
        self.m_selected = select_m(&self.eigenvalues, fve_threshold);
        self.m_selected
    }

    /// Cumulative FVE of the multivariate components.
    pub fn fve(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().sum();
        let mut acc = 0.0;
        self.eigenvalues
            .iter()
            .map(|v| {
                acc += v;
                acc / total
            })
            .collect()
    }

    /// Trajectory reconstruction `mu + sum_{m < m'} rho_m psi_m` for `scores`.
    pub fn reconstruct_from(&self, scores: &[f64], m_prime: usize, mean: MeanSource<'_>) -> Result<DMatrix<f64>> {
        if m_prime == 0 || m_prime > self.n_components() {
            return Err(Error::Config(format!(
                "M' = {m_prime} outside 1..={}",
                self.n_components()
            )));
        }
        let mut out = match mean {
            MeanSource::Model => self.mean_curves(),
            MeanSource::External(mu) => {
                if mu.shape() != (self.p(), self.grid().len()) {
                    return Err(Error::Data("external mean curves have the wrong shape".into()));
                }
                mu.clone()
            }
        };
        for m in 0..m_prime {
            out += &self.psi[m] * scores[m];
        }
        Ok(out)
    }

    pub fn reconstruct(&self, i: usize, m_prime: usize, mean: MeanSource<'_>) -> Result<DMatrix<f64>> {
        let row: Vec<f64> = self.scores.row(i).iter().copied().collect();
        self.reconstruct_from(&row, m_prime, mean)
    }

    /// Stacked univariate scores of a new subject (one sample per dimension).
    pub fn stacked_scores_new(&self, per_dim: &[SparseSample]) -> Vec<f64> {
        self.per_dim
            .iter()
            .zip(per_dim)
            .flat_map(|(m, s)| m.score(s))
            .collect()
    }

    /// mFPC scores of a subject that did not take part in the fit.
    pub fn score_new(&self, per_dim: &[SparseSample]) -> Vec<f64> {
        let xi = DVector::from_vec(self.stacked_scores_new(per_dim));
        (self.eigenvectors.transpose() * xi).iter().copied().collect()
    }
}
