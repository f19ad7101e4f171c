//! Split-sample anomaly detection within a cluster.
//!
//! Subject-level: the cluster is split in two halves, each half is screened
//! at the tails of its own score distribution, and the screened subjects of
//! one half are confirmed with empirical p-values against the clean subjects
//! of the other half. Window-level: confirmed subjects are localised by
//! comparing windowed averages of their raw observations with the cluster
//! mean, calibrated the same way.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SlDataset;
use crate::error::{Error, Result};
use crate::grid::EvalGrid;
use crate::ranktest::bh_adjust;
use crate::segment::ClusterModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Multiplicity {
    #[default]
    Bonferroni,
    Bh,
}

impl std::str::FromStr for Multiplicity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bonferroni" => Ok(Multiplicity::Bonferroni),
            "bh" => Ok(Multiplicity::Bh),
            other => Err(Error::Config(format!("unknown multiplicity '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub alpha1: f64,
    pub alpha: f64,
    /// FVE threshold selecting the number B of tested components.
    pub fve_threshold: f64,
    pub multiplicity: Multiplicity,
    pub seed: u64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.1,
            alpha: 0.05,
            fve_threshold: 0.95,
            multiplicity: Multiplicity::Bonferroni,
            seed: 0,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha1", self.alpha1), ("alpha", self.alpha)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} = {v} not in (0, 1)")));
            }
        }
        if self.alpha1 <= self.alpha {
            return Err(Error::Config(format!(
                "alpha1 ({}) must exceed alpha ({})",
                self.alpha1, self.alpha
            )));
        }
        Ok(())
    }
}

/// Random halving of a cluster's retained members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub cluster: usize,
    pub i1: Vec<usize>,
    pub i2: Vec<usize>,
    pub seed: u64,
}

impl SplitPlan {
    /// `|I1| = ceil(n / 2)`. Both halves are returned sorted.
    pub fn random(cluster: usize, members: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(cluster as u64);
        let mut shuffled = members.to_vec();
        shuffled.sort_unstable();
        shuffled.shuffle(&mut rng);
        let cut = shuffled.len().div_ceil(2);
        let mut i1 = shuffled[..cut].to_vec();
        let mut i2 = shuffled[cut..].to_vec();
        i1.sort_unstable();
        i2.sort_unstable();
        Self { cluster, i1, i2, seed }
    }
}

/// Empirical quantile: the smallest order statistic `x_(j)` with `j/n >= p`.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let mut j = ((p * n as f64).ceil() as usize).clamp(1, n);
    while j > 1 && (j - 1) as f64 / n as f64 >= p {
        j -= 1;
    }
    while j < n && (j as f64 / n as f64) < p {
        j += 1;
    }
    sorted[j - 1]
}

/// Screens subjects (rows of `scores`, first `b` columns) at level `alpha1`.
/// Returns the flag per row.
pub fn screen(scores: &[Vec<f64>], alpha1: f64, b: usize) -> Vec<bool> {
    let mut flagged = vec![false; scores.len()];
    if scores.is_empty() {
        return flagged;
    }
    let tail = alpha1 / (2.0 * b as f64);
    for m in 0..b {
        let mut col: Vec<f64> = scores.iter().map(|r| r[m]).collect();
        col.sort_by(f64::total_cmp);
        let lo = empirical_quantile(&col, tail);
        let hi = empirical_quantile(&col, 1.0 - tail);
        for (i, r) in scores.iter().enumerate() {
            if r[m] < lo || r[m] > hi {
                flagged[i] = true;
            }
        }
    }
    flagged
}

/// `(1 + #{j : |c_j| >= |x|}) / (1 + n)`.
pub fn empirical_pvalue(value: f64, calib: &[f64]) -> Result<f64> {
    if calib.is_empty() {
        return Err(Error::Data("empty calibration set".into()));
    }
    let a = value.abs();
    let count = calib.iter().filter(|c| c.abs() >= a).count();
    Ok((1 + count) as f64 / (1 + calib.len()) as f64)
}

/// Raw p-values of one subject adjusted for `b` tests: Bonferroni gives
/// `min(1, b p)`, BH the step-up values.
pub fn adjust(raw: &[f64], mult: Multiplicity) -> Vec<f64> {
    match mult {
        Multiplicity::Bonferroni => raw.iter().map(|p| (p * raw.len() as f64).min(1.0)).collect(),
        Multiplicity::Bh => bh_adjust(raw),
    }
}

/// A tested subject with its p-values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tested {
    pub subject: usize,
    pub raw: Vec<f64>,
    pub adjusted: Vec<f64>,
    /// Components (0-based) whose adjusted p-value is below alpha.
    pub components: Vec<usize>,
}

/// Tests each `(subject, scores)` against the calibration rows.
pub fn confirm(tests: &[(usize, Vec<f64>)], calib: &[Vec<f64>], b: usize, alpha: f64, mult: Multiplicity) -> Result<Vec<Tested>> {
    if calib.is_empty() {
        return Err(Error::Data("empty calibration set".into()));
    }
    let cols: Vec<Vec<f64>> = (0..b).map(|m| calib.iter().map(|r| r[m]).collect()).collect();
    tests
        .iter()
        .map(|(subject, scores)| {
            let raw = (0..b)
                .map(|m| empirical_pvalue(scores[m], &cols[m]))
                .collect::<Result<Vec<_>>>()?;
            let adjusted = adjust(&raw, mult);
            // adjusted < alpha is the same as raw < alpha / b for Bonferroni
            let components = (0..b).filter(|&m| adjusted[m] < alpha).collect();
            Ok(Tested {
                subject: *subject,
                raw,
                adjusted,
                components,
            })
        })
        .collect()
}

/// One cluster-level scoring row: dataset index, mFPC scores, trimmed flag.
pub type ScoreRow = (usize, Vec<f64>, bool);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub cluster: usize,
    pub b: usize,
    pub alpha1: f64,
    pub alpha: f64,
    pub multiplicity: Multiplicity,
    pub split: SplitPlan,
    pub g1: Vec<usize>,
    pub g1c: Vec<usize>,
    pub g2: Vec<usize>,
    pub g2c: Vec<usize>,
    /// Trimmed subjects, tested against `g1c ∪ g2c`.
    pub trimmed: Vec<usize>,
    /// Every tested subject (screened or trimmed), by dataset index.
    pub tested: Vec<Tested>,
}

impl AnomalyReport {
    /// Confirmed subjects with their outlying components (0-based).
    pub fn confirmed(&self) -> Vec<(usize, Vec<usize>)> {
        self.tested
            .iter()
            .filter(|t| !t.components.is_empty())
            .map(|t| (t.subject, t.components.clone()))
            .collect()
    }

    pub fn confirmed_set(&self) -> BTreeSet<usize> {
        self.confirmed().into_iter().map(|(i, _)| i).collect()
    }

    pub fn tested_row(&self, subject: usize) -> Option<&Tested> {
        self.tested.iter().find(|t| t.subject == subject)
    }

    /// Clean cohort a subject was calibrated against.
    pub fn calibration_pool(&self, subject: usize) -> Vec<usize> {
        if self.split.i1.binary_search(&subject).is_ok() {
            self.g2c.clone()
        } else if self.split.i2.binary_search(&subject).is_ok() {
            self.g1c.clone()
        } else {
            let mut all: Vec<usize> = self.g1c.iter().chain(&self.g2c).copied().collect();
            all.sort_unstable();
            all
        }
    }
}

/// Type-1 detection for one cluster.
pub fn detect_type1(cluster: usize, rows: &[ScoreRow], b: usize, cfg: &DetectConfig) -> Result<AnomalyReport> {
    cfg.validate()?;
    let retained: Vec<&ScoreRow> = rows.iter().filter(|r| !r.2).collect();
    if retained.len() < 4 {
        return Err(Error::Config(format!(
            "cluster {} has {} retained subjects; at least 4 are needed for split-sample detection",
            cluster + 1,
            retained.len()
        )));
    }
    let width = retained[0].1.len();
    let b = b.clamp(1, width.max(1));
    if width == 0 {
        return Err(Error::Data(format!("cluster {} has no mFPC scores", cluster + 1)));
    }
    let by_index: BTreeMap<usize, &Vec<f64>> = rows.iter().map(|r| (r.0, &r.1)).collect();
    let members: Vec<usize> = retained.iter().map(|r| r.0).collect();
    let split = SplitPlan::random(cluster, &members, cfg.seed);

    let screen_half = |half: &[usize]| -> (Vec<usize>, Vec<usize>) {
        let scores: Vec<Vec<f64>> = half.iter().map(|i| by_index[i].clone()).collect();
        let flags = screen(&scores, cfg.alpha1, b);
        let mut g = Vec::new();
        let mut gc = Vec::new();
        for (k, &i) in half.iter().enumerate() {
            if flags[k] {
                g.push(i);
            } else {
                gc.push(i);
            }
        }
        (g, gc)
    };
    let (g1, g1c) = screen_half(&split.i1);
    let (g2, g2c) = screen_half(&split.i2);
    for (h, gc) in [(1, &g1c), (2, &g2c)] {
        if gc.is_empty() {
            return Err(Error::NotIdentifiable(format!(
                "no clean calibration subjects in half {h} of cluster {}; every subject was screened out, so lower alpha1 or use a larger cluster",
                cluster + 1
            )));
        }
    }

    let rows_of = |ids: &[usize]| -> Vec<(usize, Vec<f64>)> { ids.iter().map(|&i| (i, by_index[&i].clone())).collect() };
    let calib_of = |ids: &[usize]| -> Vec<Vec<f64>> { ids.iter().map(|i| by_index[i].clone()).collect() };

    let trimmed: Vec<usize> = rows.iter().filter(|r| r.2).map(|r| r.0).collect();
    let mut both_c: Vec<usize> = g1c.iter().chain(&g2c).copied().collect();
    both_c.sort_unstable();

    for (test, pool) in [(&g1, &g2c), (&g2, &g1c), (&trimmed, &both_c)] {
        if test.iter().any(|i| pool.binary_search(i).is_ok()) {
            return Err(Error::Data("a test subject appears in its own calibration pool".into()));
        }
    }

    let mut tested = confirm(&rows_of(&g1), &calib_of(&g2c), b, cfg.alpha, cfg.multiplicity)?;
    tested.extend(confirm(&rows_of(&g2), &calib_of(&g1c), b, cfg.alpha, cfg.multiplicity)?);
    if !trimmed.is_empty() {
        tested.extend(confirm(&rows_of(&trimmed), &calib_of(&both_c), b, cfg.alpha, cfg.multiplicity)?);
    }
    tested.sort_by_key(|t| t.subject);

    Ok(AnomalyReport {
        cluster,
        b,
        alpha1: cfg.alpha1,
        alpha: cfg.alpha,
        multiplicity: cfg.multiplicity,
        split,
        g1,
        g1c,
        g2,
        g2c,
        trimmed,
        tested,
    })
}

/// Type-1 detection on a refitted cluster, with B chosen by FVE.
pub fn detect_cluster(cm: &ClusterModel, cfg: &DetectConfig) -> Result<AnomalyReport> {
    let b = crate::mfpca::select_m(&cm.model.eigenvalues, cfg.fve_threshold);
    detect_type1(cm.cluster, &cm.score_rows(), b, cfg)
}

/// Contiguous windows `(a_w, b_w]`; the first one also contains `a_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Windows {
    pub bounds: Vec<f64>,
}

impl Windows {
    pub fn equal(t_min: f64, t_max: f64, w: usize) -> Result<Self> {
        if w == 0 {
            return Err(Error::Config("number of windows must be positive".into()));
        }
        if t_max <= t_min {
            return Err(Error::Data("degenerate time domain for windows".into()));
        }
        let step = (t_max - t_min) / w as f64;
        let mut bounds: Vec<f64> = (0..=w).map(|k| t_min + k as f64 * step).collect();
        bounds[w] = t_max;
        Ok(Self { bounds })
    }

    pub fn explicit(bounds: Vec<f64>) -> Result<Self> {
        if bounds.len() < 2 || bounds.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Config("window bounds must be strictly increasing with at least 2 entries".into()));
        }
        Ok(Self { bounds })
    }

    pub fn len(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn interval(&self, w: usize) -> (f64, f64) {
        (self.bounds[w], self.bounds[w + 1])
    }

    pub fn index_of(&self, t: f64) -> Option<usize> {
        let w = self.len();
        if t == self.bounds[0] {
            return Some(0);
        }
        (0..w).find(|&k| t > self.bounds[k] && t <= self.bounds[k + 1])
    }
}

/// Quadrature average of each mean curve (rows of `mean`, p x G) over the
/// grid points inside each window.
pub fn window_means(mean: &DMatrix<f64>, grid: &EvalGrid, windows: &Windows) -> DMatrix<f64> {
    let p = mean.nrows();
    DMatrix::from_fn(windows.len(), p, |w, d| {
        let (a, b) = windows.interval(w);
        let mut num = 0.0;
        let mut den = 0.0;
        for (g, &t) in grid.points.iter().enumerate() {
            if windows.index_of(t) == Some(w) {
                num += grid.weights[g] * mean[(d, g)];
                den += grid.weights[g];
            }
        }
        if den > 0.0 {
            num / den
        } else {
            let row: Vec<f64> = mean.row(d).iter().copied().collect();
            grid.interpolate(&row, 0.5 * (a + b))
        }
    })
}

/// Sup-norm deviation of a subject's window averages; `None` for windows
/// without observations.
pub fn window_deviations(dataset: &SlDataset, subject: usize, mu_bar: &DMatrix<f64>, windows: &Windows) -> Vec<Option<f64>> {
    let p = mu_bar.ncols();
    let mut sums = vec![vec![0.0; p]; windows.len()];
    let mut counts = vec![0usize; windows.len()];
    for r in &dataset.subjects[subject].records {
        let (Some(v), Some(w)) = (&r.values, windows.index_of(r.time)) else {
            continue;
        };
        counts[w] += 1;
        for d in 0..p {
            sums[w][d] += v[d];
        }
    }
    (0..windows.len())
        .map(|w| {
            if counts[w] == 0 {
                return None;
            }
            Some(
                (0..p)
                    .map(|d| (sums[w][d] / counts[w] as f64 - mu_bar[(w, d)]).abs())
                    .fold(0.0, f64::max),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub cluster: usize,
    pub windows: Windows,
    pub alpha: f64,
    /// W x p.
    pub window_means: DMatrix<f64>,
    /// Calibration deviations per clean subject.
    pub calib_deviations: BTreeMap<usize, Vec<Option<f64>>>,
    /// Adjusted window p-values per confirmed subject; `None` is NA.
    pub pvalues: BTreeMap<usize, Vec<Option<f64>>>,
    /// Raw window p-values per confirmed subject.
    pub raw_pvalues: BTreeMap<usize, Vec<Option<f64>>>,
    /// Confirmed subjects with at least one flagged window (0-based).
    pub flagged: Vec<(usize, Vec<usize>)>,
}

impl WindowReport {
    pub fn flagged_windows(&self, subject: usize) -> Vec<usize> {
        self.flagged
            .iter()
            .find(|(i, _)| *i == subject)
            .map(|(_, w)| w.clone())
            .unwrap_or_default()
    }
}

/// Window-level localisation of the confirmed subjects of one cluster.
pub fn window_profile(
    report: &AnomalyReport,
    dataset: &SlDataset,
    cluster_mean: &DMatrix<f64>,
    grid: &EvalGrid,
    windows: &Windows,
    alpha: f64,
    mult: Multiplicity,
) -> WindowReport {
    let mu_bar = window_means(cluster_mean, grid, windows);
    let n_win = windows.len();
    let calib: BTreeMap<usize, Vec<Option<f64>>> = report
        .g1c
        .iter()
        .chain(&report.g2c)
        .map(|&j| (j, window_deviations(dataset, j, &mu_bar, windows)))
        .collect();

    let mut pvalues = BTreeMap::new();
    let mut raw_pvalues = BTreeMap::new();
    let mut flagged = Vec::new();
    for (i, _) in report.confirmed() {
        let pool = report.calibration_pool(i);
        let dev = window_deviations(dataset, i, &mu_bar, windows);
        let raw: Vec<Option<f64>> = (0..n_win)
            .map(|w| {
                let di = dev[w]?;
                let pool_d: Vec<f64> = pool.iter().filter_map(|j| calib[j][w]).collect();
                if pool_d.is_empty() {
                    log::warn!(
                        "cluster {} window {}: empty calibration pool, reported as NA",
                        report.cluster + 1,
                        w + 1
                    );
                    return None;
                }
                let count = pool_d.iter().filter(|&&d| d >= di).count();
                Some((1 + count) as f64 / (1 + pool_d.len()) as f64)
            })
            .collect();
        let adjusted: Vec<Option<f64>> = match mult {
            Multiplicity::Bonferroni => raw.iter().map(|p| p.map(|p| (p * n_win as f64).min(1.0))).collect(),
            Multiplicity::Bh => {
                let present: Vec<f64> = raw.iter().flatten().copied().collect();
                let adj = bh_adjust(&present);
                // BH over the windows with data, scaled to the full family size W
                let scale = n_win as f64 / present.len().max(1) as f64;
                let mut it = adj.into_iter();
                raw.iter().map(|p| p.map(|_| (it.next().unwrap() * scale).min(1.0))).collect()
            }
        };
        let wins: Vec<usize> = (0..n_win).filter(|&w| adjusted[w].is_some_and(|p| p < alpha)).collect();
        if !wins.is_empty() {
            flagged.push((i, wins));
        }
        pvalues.insert(i, adjusted);
        raw_pvalues.insert(i, raw);
    }
    WindowReport {
        cluster: report.cluster,
        windows: windows.clone(),
        alpha,
        window_means: mu_bar,
        calib_deviations: calib,
        pvalues,
        raw_pvalues,
        flagged,
    }
}

/// One long-format row of a mode-of-variation bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub t: f64,
    pub dim: usize,
    pub series_id: String,
    pub role: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotBundle {
    pub cluster: usize,
    pub subject: usize,
    pub component: usize,
    pub rows: Vec<PlotRow>,
    /// (window, a, b, flagged)
    pub windows: Vec<(usize, f64, f64, bool)>,
}

/// Number of grid points dropped at each end of a mode-of-variation plot.
pub fn boundary_trim(g: usize) -> usize {
    ((0.05 * g as f64) - 1e-9).ceil() as usize
}

/// Mean, cohort and subject curves along component `m` for subject `i`.
#[allow(clippy::too_many_arguments)]
pub fn mode_of_variation_data(
    cm: &ClusterModel,
    report: &AnomalyReport,
    subject: usize,
    m: usize,
    subject_ids: &[String],
    windows: &Windows,
    flagged_windows: &[usize],
) -> Result<PlotBundle> {
    let comps = report
        .tested_row(subject)
        .map(|t| t.components.clone())
        .unwrap_or_default();
    if !comps.contains(&m) {
        return Err(Error::Config(format!(
            "component {} is not outlying for subject {}",
            m + 1,
            subject_ids[subject]
        )));
    }
    let rows = cm.score_rows();
    let score_of = |i: usize| -> f64 {
        rows.iter()
            .find(|r| r.0 == i)
            .map(|r| r.1[m])
            .unwrap_or(0.0)
    };
    let grid = cm.model.grid();
    let g = grid.len();
    let cut = boundary_trim(g);
    let mean = cm.model.mean_curves();
    let psi = &cm.model.psi[m];
    let cohort = report.calibration_pool(subject);
    let mut out = Vec::new();
    for d in 0..cm.model.p() {
        for t in cut..g - cut {
            out.push(PlotRow {
                t: grid.points[t],
                dim: d,
                series_id: "mean".into(),
                role: "mean".into(),
                value: mean[(d, t)],
            });
        }
        for &j in &cohort {
            let rho = score_of(j);
            for t in cut..g - cut {
                out.push(PlotRow {
                    t: grid.points[t],
                    dim: d,
                    series_id: subject_ids[j].clone(),
                    role: "cohort".into(),
                    value: mean[(d, t)] + rho * psi[(d, t)],
                });
            }
        }
        let rho = score_of(subject);
        for t in cut..g - cut {
            out.push(PlotRow {
                t: grid.points[t],
                dim: d,
                series_id: subject_ids[subject].clone(),
                role: "subject".into(),
                value: mean[(d, t)] + rho * psi[(d, t)],
            });
        }
    }
    Ok(PlotBundle {
        cluster: cm.cluster,
        subject,
        component: m,
        rows: out,
        windows: (0..windows.len())
            .map(|w| {
                let (a, b) = windows.interval(w);
                (w, a, b, flagged_windows.contains(&w))
            })
            .collect(),
    })
}
