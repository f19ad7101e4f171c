//! Covariate-augmented robust segmentation.
//!
//! Subjects are represented by their mFPC scores joined with static
//! covariates, whitened jointly, and clustered with trimmed k-means. Each
//! cluster then gets its own FPCA refit.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SlDataset;
use crate::error::{Error, Result};
use crate::grid::EvalGrid;
use crate::linalg::{col_means, pinv_sqrt, sample_cov};
use crate::mfpca::{fit_mfpca, MfpcaModel};
use crate::ufpca::{fit_dimension, UfpcaConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    /// N x (M + q) raw features.
    pub rows: DMatrix<f64>,
    pub mean: Vec<f64>,
    pub whitener: DMatrix<f64>,
    pub whitened: DMatrix<f64>,
}

/// Joins scores and covariates, then centers and whitens.
pub fn build_features(scores: &DMatrix<f64>, covariates: &[Vec<f64>]) -> Result<FeatureMatrix> {
    let n = scores.nrows();
    if n < 2 {
        return Err(Error::Data("need at least 2 subjects to build features".into()));
    }
    if covariates.len() != n {
        return Err(Error::Data("covariates not aligned with scores".into()));
    }
    let q = covariates.first().map(Vec::len).unwrap_or(0);
    let m = scores.ncols();
    let rows = DMatrix::from_fn(n, m + q, |i, c| if c < m { scores[(i, c)] } else { covariates[i][c - m] });
    let mean = col_means(&rows);
    let whitener = pinv_sqrt(&sample_cov(&rows), 1e-10);
    let mut centered = rows.clone();
    for mut r in centered.row_iter_mut() {
        r -= mean.transpose();
    }
    let whitened = centered * &whitener;
    Ok(FeatureMatrix {
        rows,
        mean: mean.iter().copied().collect(),
        whitener,
        whitened,
    })
}

/// Features from the selected mFPC scores and the dataset's covariates.
pub fn features_for(model: &MfpcaModel, dataset: &SlDataset) -> Result<FeatureMatrix> {
    if model.subject_ids() != dataset.subject_ids().as_slice() {
        return Err(Error::Data("model and dataset subject orders differ".into()));
    }
    let scores = model.scores.columns(0, model.m_selected).into_owned();
    let covs: Vec<Vec<f64>> = dataset.subjects.iter().map(|s| s.covariates.clone()).collect();
    build_features(&scores, &covs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrimConfig {
    pub k: usize,
    pub trim: f64,
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for TrimConfig {
    fn default() -> Self {
        Self {
            k: 2,
            trim: 0.05,
            restarts: 10,
            max_iter: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterFit {
    pub k: usize,
    pub trim: f64,
    /// Cluster per subject; `None` for trimmed subjects.
    pub assignments: Vec<Option<usize>>,
    /// Nearest centroid for every subject, trimmed ones included.
    pub nearest: Vec<usize>,
    /// K x d.
    pub centroids: DMatrix<f64>,
    /// Retained within-cluster sum of squares.
    pub objective: f64,
    /// Objective after every assignment step of the winning restart.
    pub history: Vec<f64>,
    pub restart: usize,
}

impl ClusterFit {
    pub fn n_trimmed(&self) -> usize {
        self.assignments.iter().filter(|a| a.is_none()).count()
    }

    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == Some(k))
            .collect()
    }

    pub fn trimmed_nearest(&self, k: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i].is_none() && self.nearest[i] == k)
            .collect()
    }
}

fn sq_dist(data: &DMatrix<f64>, i: usize, c: &DMatrix<f64>, k: usize) -> f64 {
    (0..data.ncols()).map(|j| (data[(i, j)] - c[(k, j)]).powi(2)).sum()
}

fn nearest_centroid(data: &DMatrix<f64>, i: usize, c: &DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..c.nrows() {
        let d = sq_dist(data, i, c, k);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ seeding. Candidates are drawn with D² weights, except that the
/// `n_trim` currently farthest points get weight zero, so that gross
/// outliers (which trimming will discard anyway) never become seeds.
fn kmeans_pp(data: &DMatrix<f64>, k: usize, n_trim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = data.nrows();
    let d = data.ncols();
    let mut centroids = DMatrix::zeros(k, d);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from(&data.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(data, i, &centroids, 0)).collect();
    for c in 1..k {
        let mut weights = dist.clone();
        if n_trim > 0 {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(b.cmp(&a)));
            for &i in order.iter().take(n_trim) {
                weights[i] = 0.0;
            }
        }
        let total: f64 = weights.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in weights.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        };
        centroids.row_mut(c).copy_from(&data.row(pick));
        for i in 0..n {
            dist[i] = dist[i].min(sq_dist(data, i, &centroids, c));
        }
    }
    centroids
}

/// Assigns every point, then trims the `n_trim` farthest (ties: lower index kept).
fn assign_and_trim(data: &DMatrix<f64>, c: &DMatrix<f64>, n_trim: usize) -> (Vec<Option<usize>>, Vec<usize>, Vec<f64>) {
    let n = data.nrows();
    let near: Vec<(usize, f64)> = (0..n).map(|i| nearest_centroid(data, i, c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| near[b].1.total_cmp(&near[a].1).then(b.cmp(&a)));
    let mut assign: Vec<Option<usize>> = near.iter().map(|&(k, _)| Some(k)).collect();
    for &i in order.iter().take(n_trim) {
        assign[i] = None;
    }
    (
        assign,
        near.iter().map(|x| x.0).collect(),
        near.iter().map(|x| x.1).collect(),
    )
}

fn retained_ssq(data: &DMatrix<f64>, assign: &[Option<usize>], c: &DMatrix<f64>) -> f64 {
    assign
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.map(|k| sq_dist(data, i, c, k)))
        .sum()
}

/// Recomputes centroids on retained points; empty clusters are reseeded at
/// the retained point farthest from its own centroid.
fn update_centroids(data: &DMatrix<f64>, assign: &[Option<usize>], old: &DMatrix<f64>) -> DMatrix<f64> {
    let (k, d) = old.shape();
    let mut sums = DMatrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, a) in assign.iter().enumerate() {
        if let Some(c) = *a {
            counts[c] += 1;
            for j in 0..d {
                sums[(c, j)] += data[(i, j)];
            }
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for j in 0..d {
                sums[(c, j)] /= counts[c] as f64;
            }
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            let far = assign
                .iter()
                .enumerate()
                .filter_map(|(i, a)| a.map(|own| (i, sq_dist(data, i, &sums, own))))
                .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)));
            if let Some((i, _)) = far {
                log::warn!("empty cluster {c}; reseeding at point {i}");
                sums.row_mut(c).copy_from(&data.row(i));
            }
        }
    }
    sums
}

struct RestartResult {
    assign: Vec<Option<usize>>,
    nearest: Vec<usize>,
    centroids: DMatrix<f64>,
    objective: f64,
    history: Vec<f64>,
}

fn one_restart(data: &DMatrix<f64>, cfg: &TrimConfig, n_trim: usize, restart: usize) -> RestartResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(restart as u64);
    let mut centroids = kmeans_pp(data, cfg.k, n_trim, &mut rng);
    let mut history = Vec::new();
    let (mut assign, _, _) = assign_and_trim(data, &centroids, n_trim);
    history.push(retained_ssq(data, &assign, &centroids));
    for _ in 0..cfg.max_iter {
        centroids = update_centroids(data, &assign, &centroids);
        let (next, _, _) = assign_and_trim(data, &centroids, n_trim);
        history.push(retained_ssq(data, &next, &centroids));
        let stable = next == assign;
        assign = next;
        if stable {
            break;
        }
    }
    // plain Lloyd on the retained set
    for _ in 0..cfg.max_iter {
        centroids = update_centroids(data, &assign, &centroids);
        let mut changed = false;
        for i in 0..data.nrows() {
            if let Some(own) = assign[i] {
                let (k, _) = nearest_centroid(data, i, &centroids);
                if k != own {
                    assign[i] = Some(k);
                    changed = true;
                }
            }
        }
        history.push(retained_ssq(data, &assign, &centroids));
        if !changed {
            break;
        }
    }
    centroids = update_centroids(data, &assign, &centroids);
    let nearest = (0..data.nrows()).map(|i| nearest_centroid(data, i, &centroids).0).collect();
    let objective = retained_ssq(data, &assign, &centroids);
    RestartResult {
        assign,
        nearest,
        centroids,
        objective,
        history,
    }
}

pub fn n_trimmed(n: usize, trim: f64) -> usize {
    // guard against 0.07 * 600 = 42.00000000000001
    ((trim * n as f64) - 1e-9).ceil().max(0.0) as usize
}

pub fn trimmed_kmeans(data: &DMatrix<f64>, cfg: &TrimConfig) -> Result<ClusterFit> {
    let n = data.nrows();
    if cfg.k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.trim) {
        return Err(Error::Config(format!("trim rate {} not in [0, 1)", cfg.trim)));
    }
    if cfg.restarts == 0 {
        return Err(Error::Config("restarts must be at least 1".into()));
    }
    let n_trim = n_trimmed(n, cfg.trim);
    if n - n_trim.min(n) < cfg.k {
        return Err(Error::Config(format!(
            "K = {} exceeds the {} retained subjects",
            cfg.k,
            n - n_trim.min(n)
        )));
    }
    let results: Vec<RestartResult> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| one_restart(data, cfg, n_trim, r))
        .collect();
    let mut best = 0;
    for r in 1..results.len() {
        if results[r].objective < results[best].objective {
            best = r;
        }
    }
    let w = results.into_iter().nth(best).unwrap();
    Ok(ClusterFit {
        k: cfg.k,
        trim: cfg.trim,
        assignments: w.assign,
        nearest: w.nearest,
        centroids: w.centroids,
        objective: w.objective,
        history: w.history,
        restart: best,
    })
}

/// Per-point silhouette widths over retained points (`None` for trimmed),
/// and their mean. Singleton clusters score 0.
pub fn silhouette(data: &DMatrix<f64>, assign: &[Option<usize>], k: usize) -> (f64, Vec<Option<f64>>) {
    let n = data.nrows();
    let dist = |a: usize, b: usize| -> f64 {
        (0..data.ncols())
            .map(|j| (data[(a, j)] - data[(b, j)]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let sizes: Vec<usize> = (0..k).map(|c| assign.iter().filter(|a| **a == Some(c)).count()).collect();
    let per: Vec<Option<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = assign[i]?;
            if sizes[own] <= 1 {
                return Some(0.0);
            }
            let mut sums = vec![0.0; k];
            for j in 0..n {
                if j != i {
                    if let Some(c) = assign[j] {
                        sums[c] += dist(i, j);
                    }
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if !b.is_finite() {
                return Some(0.0);
            }
            let m = a.max(b);
            Some(if m > 0.0 { (b - a) / m } else { 0.0 })
        })
        .collect();
    let vals: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
    (mean, per)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub best_k: usize,
    pub silhouettes: Vec<(usize, f64)>,
}

/// Picks K by mean silhouette over retained points; ties go to the smaller K.
pub fn choose_k(data: &DMatrix<f64>, k_range: &[usize], base: &TrimConfig) -> Result<KSelection> {
    if k_range.is_empty() {
        return Err(Error::Config("empty K range".into()));
    }
    let mut ks = k_range.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut silhouettes = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY);
    for k in ks {
        if k < 2 || k >= data.nrows() {
            return Err(Error::Config(format!("K = {k} outside 2..N-1")));
        }
        let fit = trimmed_kmeans(data, &TrimConfig { k, ..*base })?;
        let (s, _) = silhouette(data, &fit.assignments, k);
        log::info!("K={k}: mean silhouette {s:.4}");
        silhouettes.push((k, s));
        if s > best.1 {
            best = (k, s);
        }
    }
    Ok(KSelection {
        best_k: best.0,
        silhouettes,
    })
}

/// Mean bootstrap Jaccard similarity of each original cluster.
pub fn bootstrap_jaccard(data: &DMatrix<f64>, fit: &ClusterFit, cfg: &TrimConfig, n_boot: usize, seed: u64) -> Result<Vec<f64>> {
    if n_boot == 0 {
        return Err(Error::Config("n_boot must be at least 1".into()));
    }
    let n = data.nrows();
    let k = fit.k;
    let per_boot: Vec<Vec<Option<f64>>> = (0..n_boot)
        .into_par_iter()
        .map(|b| -> Result<Vec<Option<f64>>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let boot = DMatrix::from_fn(n, data.ncols(), |r, c| data[(idx[r], c)]);
            let refit = trimmed_kmeans(&boot, &TrimConfig { k, trim: fit.trim, seed: seed.wrapping_add(b as u64), ..*cfg })?;
            // subject -> new cluster, first occurrence wins
            let mut present = vec![false; n];
            let mut new_label: Vec<Option<usize>> = vec![None; n];
            for (r, &i) in idx.iter().enumerate() {
                if !present[i] {
                    present[i] = true;
                    new_label[i] = refit.assignments[r];
                }
            }
            Ok((0..k)
                .map(|a| {
                    let orig: Vec<usize> = (0..n).filter(|&i| present[i] && fit.assignments[i] == Some(a)).collect();
                    if orig.is_empty() {
                        return None;
                    }
                    let best = (0..k)
                        .map(|c| {
                            let inter = orig.iter().filter(|&&i| new_label[i] == Some(c)).count();
                            let size_b = (0..n).filter(|&i| new_label[i] == Some(c)).count();
                            let union = orig.len() + size_b - inter;
                            inter as f64 / union as f64
                        })
                        .fold(0.0, f64::max);
                    Some(best)
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..k)
        .map(|a| {
            let vals: Vec<f64> = per_boot.iter().filter_map(|v| v[a]).collect();
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect())
}

/// Cluster-specific FPCA refit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub cluster: usize,
    /// Dataset indices of retained members, in model row order.
    pub members: Vec<usize>,
    /// Dataset indices of trimmed subjects whose nearest centroid is this one.
    pub trimmed: Vec<usize>,
    pub model: MfpcaModel,
    /// mFPC scores of the trimmed subjects, scored against `model`.
    pub trimmed_scores: DMatrix<f64>,
}

impl ClusterModel {
    /// (dataset index, mFPC scores, trimmed flag) for every subject attached
    /// to the cluster.
    pub fn score_rows(&self) -> Vec<(usize, Vec<f64>, bool)> {
        let mut rows: Vec<(usize, Vec<f64>, bool)> = self
            .members
            .iter()
            .enumerate()
            .map(|(r, &i)| (i, self.model.scores.row(r).iter().copied().collect(), false))
            .collect();
        rows.extend(
            self.trimmed
                .iter()
                .enumerate()
                .map(|(r, &i)| (i, self.trimmed_scores.row(r).iter().copied().collect(), true)),
        );
        rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefitConfig {
    pub min_size: usize,
    pub mfpca_fve: f64,
}

impl Default for RefitConfig {
    fn default() -> Self {
        Self {
            min_size: 3,
            mfpca_fve: 0.95,
        }
    }
}

/// Fits uFPCA + mFPCA on one set of dataset indices.
pub fn fit_stack(dataset: &SlDataset, indices: &[usize], grid: &EvalGrid, ucfg: &UfpcaConfig, fve: f64) -> Result<MfpcaModel> {
    let sub = dataset.subset(indices);
    let per_dim = (0..dataset.p)
        .map(|d| fit_dimension(&sub, d, grid, ucfg))
        .collect::<Result<Vec<_>>>()?;
    let mut model = fit_mfpca(per_dim)?;
    model.select_m(fve);
    Ok(model)
}

pub fn cluster_refit(
    dataset: &SlDataset,
    fit: &ClusterFit,
    grid: &EvalGrid,
    ucfg: &UfpcaConfig,
    rcfg: &RefitConfig,
) -> Result<Vec<ClusterModel>> {
    (0..fit.k)
        .into_par_iter()
        .map(|k| refit_members(dataset, k, fit.members(k), fit.trimmed_nearest(k), grid, ucfg, rcfg))
        .collect()
}

/// Fits one cluster's mFPCA on `members` and scores `trimmed` against it.
pub fn refit_members(
    dataset: &SlDataset,
    cluster: usize,
    members: Vec<usize>,
    trimmed: Vec<usize>,
    grid: &EvalGrid,
    ucfg: &UfpcaConfig,
    rcfg: &RefitConfig,
) -> Result<ClusterModel> {
    if members.len() < rcfg.min_size {
        return Err(Error::NotIdentifiable(format!(
            "cluster too small to refit: cluster {} has {} members (minimum {})",
            cluster + 1,
            members.len(),
            rcfg.min_size
        )));
    }
    let model = fit_stack(dataset, &members, grid, ucfg, rcfg.mfpca_fve)?;
    let m = model.n_components();
    let mut trimmed_scores = DMatrix::zeros(trimmed.len(), m);
    for (r, &i) in trimmed.iter().enumerate() {
        let samples: Vec<_> = (0..dataset.p).map(|d| dataset.subjects[i].dim_sample(d)).collect();
        let rho = model.score_new(&samples);
        trimmed_scores.row_mut(r).copy_from_slice(&rho);
    }
    Ok(ClusterModel {
        cluster,
        members,
        trimmed,
        model,
        trimmed_scores,
    })
}
