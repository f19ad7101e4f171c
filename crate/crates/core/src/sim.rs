//! Robustness of detected anomalies under sparse re-sampling.
//!
//! Every subject's fitted cluster-specific curve is observed again at a
//! truncated-Poisson number of grid points, the cluster pipeline is rerun and
//! the base anomalies are checked for re-detection. Recall per replicate and
//! detection probability per subject summarise the study; rank tests compare
//! clusters.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anomaly::{detect_cluster, AnomalyReport, DetectConfig};
use crate::dataset::{Observation, SlDataset, SubjectTrajectory};
use crate::error::{Error, Result};
use crate::grid::EvalGrid;
use crate::mfpca::MeanSource;
use crate::ranktest::{friedman, kruskal_wallis, pairwise_wilcoxon, TestResult};
use crate::segment::{refit_members, ClusterModel, RefitConfig};
use crate::ufpca::UfpcaConfig;

/// Poisson(`lambda`) conditioned on `[lo, hi]`, by rejection.
pub fn truncated_poisson<R: Rng>(lambda: f64, lo: usize, hi: usize, rng: &mut R) -> usize {
    let pois = Poisson::new(lambda).expect("positive rate");
    loop {
        let k = pois.sample(rng) as usize;
        if (lo..=hi).contains(&k) {
            return k;
        }
    }
}

/// Observes `curves` (p x G) at K distinct grid points, K ~ truncated
/// Poisson. Returns sorted times and the p-vector at each time.
pub fn subsample_trajectory<R: Rng>(
    curves: &DMatrix<f64>,
    grid: &EvalGrid,
    lambda: f64,
    lo: usize,
    hi: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if grid.len() < hi {
        return Err(Error::Config(format!(
            "grid of {} points is smaller than the maximum subsample size {hi}",
            grid.len()
        )));
    }
    let k = truncated_poisson(lambda, lo, hi, rng);
    let mut idx = sample(rng, grid.len(), k).into_vec();
    idx.sort_unstable();
    let times = idx.iter().map(|&g| grid.points[g]).collect();
    let values = idx.iter().map(|&g| curves.column(g).iter().copied().collect()).collect();
    Ok((times, values))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SubsampleMode {
    /// Fitted cluster-specific curves at truncated-Poisson grid points.
    #[default]
    FittedCurves,
    /// Raw records, a truncated-Poisson number per subject (capped at m_i).
    RawRecords,
    /// Fitted curves at every grid point.
    FullGrid,
    /// The original records unchanged.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub replicates: usize,
    pub lambda: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub seed: u64,
    pub mode: SubsampleMode,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            replicates: 50,
            lambda: 10.0,
            k_min: 5,
            k_max: 15,
            seed: 0,
            mode: SubsampleMode::FittedCurves,
        }
    }
}

/// Pipeline settings reused inside each replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicatePipeline {
    pub ufpca: UfpcaConfig,
    pub refit: RefitConfig,
    pub detect: DetectConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStudy {
    pub cluster: usize,
    /// Dataset indices of the base anomalies, sorted.
    pub base_anomalies: Vec<usize>,
    /// `flags[s][a]` for replicate s and base anomaly a; empty for failed
    /// replicates.
    pub flags: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationStudy {
    pub replicates: usize,
    pub failed: Vec<usize>,
    pub clusters: Vec<ClusterStudy>,
}

impl SimulationStudy {
    pub fn ok_replicates(&self) -> Vec<usize> {
        (0..self.replicates).filter(|s| !self.failed.contains(s)).collect()
    }
}

/// Fitted curve `mu + sum_m rho_m psi_m` over the selected components.
pub fn fitted_curve(cm: &ClusterModel, scores: &[f64]) -> Result<DMatrix<f64>> {
    cm.model.reconstruct_from(scores, cm.model.m_selected.max(1), MeanSource::Model)
}

fn replicate_subjects(
    dataset: &SlDataset,
    cm: &ClusterModel,
    grid: &EvalGrid,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SubjectTrajectory>> {
    let mut rows = cm.score_rows();
    rows.sort_by_key(|r| r.0);
    let mut out = Vec::with_capacity(rows.len());
    for (i, scores, _) in rows {
        let base = &dataset.subjects[i];
        let obs = |t: f64, v: Vec<f64>| Observation { time: t, values: Some(v), text: None, metadata: Default::default() };
        let records = match cfg.mode {
            SubsampleMode::Identity => base.records.clone(),
            SubsampleMode::RawRecords => {
                let k = truncated_poisson(cfg.lambda, cfg.k_min, cfg.k_max, rng).min(base.records.len());
                let mut idx = sample(rng, base.records.len(), k).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|j| base.records[j].clone()).collect()
            }
            SubsampleMode::FittedCurves => {
                let curve = fitted_curve(cm, &scores)?;
                let (t, v) = subsample_trajectory(&curve, grid, cfg.lambda, cfg.k_min, cfg.k_max, rng)?;
                t.into_iter().zip(v).map(|(t, v)| obs(t, v)).collect()
            }
            SubsampleMode::FullGrid => {
                let curve = fitted_curve(cm, &scores)?;
                (0..grid.len()).map(|g| obs(grid.points[g], curve.column(g).iter().copied().collect())).collect()
            }
        };
        out.push(SubjectTrajectory { subject_id: base.subject_id.clone(), records, covariates: base.covariates.clone() });
    }
    Ok(out)
}

/// Reruns refit and detection for one cluster on re-sampled data; returns
/// the confirmed subjects as dataset indices.
fn replicate_cluster(
    dataset: &SlDataset,
    cm: &ClusterModel,
    grid: &EvalGrid,
    cfg: &SimConfig,
    pipe: &ReplicatePipeline,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let subjects = replicate_subjects(dataset, cm, grid, cfg, rng)?;
    let mut local = SlDataset::from_subjects(subjects, dataset.p, dataset.q)?;
    local.time_domain = dataset.time_domain;
    // local rows follow sorted dataset indices
    let mut ids: Vec<usize> = cm.members.iter().chain(&cm.trimmed).copied().collect();
    ids.sort_unstable();
    let pos = |i: &usize| ids.binary_search(i).unwrap();
    let members = cm.members.iter().map(pos).collect();
    let trimmed = cm.trimmed.iter().map(pos).collect();
    let rep = refit_members(&local, cm.cluster, members, trimmed, grid, &pipe.ufpca, &pipe.refit)?;
    let report = detect_cluster(&rep, &pipe.detect)?;
    Ok(report.confirmed_set().into_iter().map(|k| ids[k]).collect())
}

/// Runs `cfg.replicates` replicates. `base` pairs each cluster model with its
/// base detection report. Replicate s draws from stream s of `cfg.seed`.
pub fn run_study(
    dataset: &SlDataset,
    base: &[(ClusterModel, AnomalyReport)],
    grid: &EvalGrid,
    cfg: &SimConfig,
    pipe: &ReplicatePipeline,
) -> Result<SimulationStudy> {
    if cfg.k_min > cfg.k_max {
        return Err(Error::Config(format!("k_min {} exceeds k_max {}", cfg.k_min, cfg.k_max)));
    }
    if !matches!(cfg.mode, SubsampleMode::Identity | SubsampleMode::RawRecords) && grid.len() < cfg.k_max {
        return Err(Error::Config(format!("grid of {} points is smaller than k_max {}", grid.len(), cfg.k_max)));
    }
    let anomalies: Vec<Vec<usize>> = base.iter().map(|(_, r)| r.confirmed_set().into_iter().collect()).collect();
    let per_rep: Vec<(usize, Option<Vec<Vec<bool>>>)> = (0..cfg.replicates)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(s as u64);
            let mut flags = Vec::with_capacity(base.len());
            for ((cm, _), a) in base.iter().zip(&anomalies) {
                match replicate_cluster(dataset, cm, grid, cfg, pipe, &mut rng) {
                    Ok(found) => flags.push(a.iter().map(|i| found.binary_search(i).is_ok()).collect()),
                    Err(e) => {
                        log::warn!("replicate {} failed in cluster {}: {e}", s + 1, cm.cluster + 1);
                        return (s, None);
                    }
                }
            }
            (s, Some(flags))
        })
        .collect();

    let mut clusters: Vec<ClusterStudy> = base
        .iter()
        .zip(anomalies)
        .map(|((cm, _), a)| ClusterStudy { cluster: cm.cluster, base_anomalies: a, flags: Vec::with_capacity(cfg.replicates) })
        .collect();
    let mut failed = Vec::new();
    for (s, flags) in per_rep {
        match flags {
            Some(f) => {
                for (c, fl) in clusters.iter_mut().zip(f) {
                    c.flags.push(fl);
                }
            }
            None => {
                failed.push(s);
                for c in clusters.iter_mut() {
                    c.flags.push(Vec::new());
                }
            }
        }
    }
    if !failed.is_empty() {
        log::warn!("{} of {} replicates failed and were excluded", failed.len(), cfg.replicates);
    }
    Ok(SimulationStudy { replicates: cfg.replicates, failed, clusters })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub cluster: usize,
    pub replicate: usize,
    /// `None` when the cluster has no base anomalies.
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub cluster: usize,
    pub subject: usize,
    pub probability: f64,
}

/// Recall per (cluster, ok replicate) and detection probability per base
/// anomaly over the ok replicates.
pub fn recall_and_hit_rates(study: &SimulationStudy) -> (Vec<RecallRow>, Vec<DetectionRow>) {
    let ok = study.ok_replicates();
    let mut recall = Vec::new();
    let mut detection = Vec::new();
    for c in &study.clusters {
        let n = c.base_anomalies.len();
        for &s in &ok {
            let hits = c.flags[s].iter().filter(|&&f| f).count();
            recall.push(RecallRow { cluster: c.cluster, replicate: s, recall: (n > 0).then(|| hits as f64 / n as f64) });
        }
        if ok.is_empty() {
            continue;
        }
        for (a, &subject) in c.base_anomalies.iter().enumerate() {
            let hits = ok.iter().filter(|&&s| c.flags[s][a]).count();
            detection.push(DetectionRow { cluster: c.cluster, subject, probability: hits as f64 / ok.len() as f64 });
        }
    }
    (recall, detection)
}

/// Kruskal-Wallis across clusters, pairwise rank-sum tests with BH, and a
/// Friedman test pairing clusters by replicate. Clusters with NA recall are
/// left out; fewer than two clusters gives no tests.
pub fn rank_tests(recall: &[RecallRow]) -> Result<Vec<TestResult>> {
    let mut by_cluster: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    for r in recall {
        if let Some(v) = r.recall {
            by_cluster.entry(r.cluster).or_default().insert(r.replicate, v);
        }
    }
    if by_cluster.len() < 2 {
        return Ok(Vec::new());
    }
    let labels: Vec<String> = by_cluster.keys().map(|c| (c + 1).to_string()).collect();
    let relabel = |g: &str| g.split(';').map(|k| labels[k.parse::<usize>().unwrap() - 1].clone()).collect::<Vec<_>>().join(";");
    let groups: Vec<Vec<f64>> = by_cluster.values().map(|m| m.values().copied().collect()).collect();
    let mut out = Vec::new();
    let mut kw = kruskal_wallis(&groups)?;
    kw.groups = relabel(&kw.groups);
    out.push(kw);
    for mut t in pairwise_wilcoxon(&groups)? {
        t.groups = relabel(&t.groups);
        out.push(t);
    }
    let reps: Vec<usize> = by_cluster
        .values()
        .next()
        .unwrap()
        .keys()
        .copied()
        .filter(|s| by_cluster.values().all(|m| m.contains_key(s)))
        .collect();
    if !reps.is_empty() {
        let rows: Vec<Vec<f64>> = reps.iter().map(|s| by_cluster.values().map(|m| m[s]).collect()).collect();
        let mut fr = friedman(&rows)?;
        fr.groups = relabel(&fr.groups);
        out.push(fr);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    #[test]
    fn truncated_poisson_bounds_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = 0usize;
        for _ in 0..n {
            let k = truncated_poisson(10.0, 5, 15, &mut rng);
            assert!((5..=15).contains(&k));
            sum += k;
        }
        let mean = sum as f64 / n as f64;
        let (m, v) = truncated_moments();
        let se = (v / n as f64).sqrt();
        assert!((mean - m).abs() < 4.0 * se, "mean = {mean}, exact = {m}");
    }

    /// Mean and variance of Poisson(10) conditioned on 5..=15, from the pmf.
    fn truncated_moments() -> (f64, f64) {
        let mut pmf = vec![(-10.0f64).exp()];
        for k in 1..=15 {
            pmf.push(pmf[k - 1] * 10.0 / k as f64);
        }
        let mass: f64 = pmf[5..=15].iter().sum();
        let m = (5..=15).map(|k| k as f64 * pmf[k]).sum::<f64>() / mass;
        let v = (5..=15).map(|k| (k as f64 - m).powi(2) * pmf[k]).sum::<f64>() / mass;
        (m, v)
    }

    #[test]
    fn truncated_mean_value() {
        assert!((truncated_moments().0 - 9.828619).abs() < 1e-6);
    }

    #[test]
    fn subsample_is_sorted_distinct_and_exact() {
        let grid = EvalGrid::new(0.0, 1.0, 51).unwrap();
        let curves = DMatrix::from_fn(2, 51, |d, g| (d as f64 + 1.0) * grid.points[g]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (t, v) = subsample_trajectory(&curves, &grid, 10.0, 5, 15, &mut rng).unwrap();
            assert!((5..=15).contains(&t.len()));
            assert!(t.windows(2).all(|w| w[0] < w[1]));
            for (ti, vi) in t.iter().zip(&v) {
                assert!((vi[0] - ti).abs() < 1e-12 && (vi[1] - 2.0 * ti).abs() < 1e-12);
            }
        }
        let small = EvalGrid::new(0.0, 1.0, 10).unwrap();
        assert!(subsample_trajectory(&DMatrix::zeros(1, 10), &small, 10.0, 5, 15, &mut rng).is_err());
    }

    fn study(flags: Vec<Vec<Vec<bool>>>, failed: Vec<usize>) -> SimulationStudy {
        let s = flags[0].len();
        SimulationStudy {
            replicates: s,
            failed,
            clusters: flags
                .into_iter()
                .enumerate()
                .map(|(c, f)| ClusterStudy { cluster: c, base_anomalies: (0..f.iter().map(Vec::len).max().unwrap_or(0)).collect(), flags: f })
                .collect(),
        }
    }

    #[test]
    fn recall_examples() {
        let st = study(vec![vec![vec![true; 6], vec![true, false, true, false, true, false]]], vec![]);
        let (r, _) = recall_and_hit_rates(&st);
        assert_eq!(r[0].recall, Some(1.0));
        assert_eq!(r[1].recall, Some(0.5));
    }

    #[test]
    fn detection_probability_example() {
        let flags: Vec<Vec<bool>> = (0..50).map(|s| vec![s < 40]).collect();
        let (_, d) = recall_and_hit_rates(&study(vec![flags], vec![]));
        assert_eq!(d[0].probability, 0.8);
    }

    #[test]
    fn failed_replicates_excluded() {
        let mut flags: Vec<Vec<bool>> = (0..4).map(|_| vec![true]).collect();
        flags[2] = vec![];
        let (r, d) = recall_and_hit_rates(&study(vec![flags], vec![2]));
        assert_eq!(r.len(), 3);
        assert_eq!(d[0].probability, 1.0);
    }

    #[test]
    fn empty_anomaly_set_gives_na() {
        let st = SimulationStudy {
            replicates: 2,
            failed: vec![],
            clusters: vec![ClusterStudy { cluster: 0, base_anomalies: vec![], flags: vec![vec![], vec![]] }],
        };
        let (r, d) = recall_and_hit_rates(&st);
        assert!(r.iter().all(|x| x.recall.is_none()));
        assert!(d.is_empty());
    }

    #[test]
    fn rank_tests_on_recall() {
        let mut rows = Vec::new();
        for s in 0..20 {
            rows.push(RecallRow { cluster: 0, replicate: s, recall: Some(0.9 + 0.001 * s as f64) });
            rows.push(RecallRow { cluster: 2, replicate: s, recall: Some(0.3 + 0.001 * s as f64) });
        }
        let t = rank_tests(&rows).unwrap();
        assert_eq!(t.iter().map(|x| x.name.as_str()).collect::<Vec<_>>(), vec!["kruskal_wallis", "wilcoxon_rank_sum", "friedman"]);
        assert!(t.iter().all(|x| x.p < 0.001));
        assert_eq!(t[1].groups, "1;3");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn recall_and_detection_agree(bits in proptest::collection::vec(proptest::collection::vec(proptest::bool::ANY, 5), 1..12)) {
            let st = study(vec![bits], vec![]);
            let (r, d) = recall_and_hit_rates(&st);
            let mr: f64 = r.iter().map(|x| x.recall.unwrap()).sum::<f64>() / r.len() as f64;
            let md: f64 = d.iter().map(|x| x.probability).sum::<f64>() / d.len() as f64;
            prop_assert!((mr - md).abs() < 1e-12);
            for x in &r {
                prop_assert!((0.0..=1.0).contains(&x.recall.unwrap()));
            }
        }

        #[test]
        fn subsample_deterministic(seed in 0u64..500) {
            let grid = EvalGrid::new(0.0, 1.0, 30).unwrap();
            let c = DMatrix::from_fn(1, 30, |_, g| g as f64);
            let a = subsample_trajectory(&c, &grid, 10.0, 5, 15, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = subsample_trajectory(&c, &grid, 10.0, 5, 15, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
