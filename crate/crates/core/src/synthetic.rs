//! Synthetic sparse multivariate trajectories with known structure.
//!
//! Subjects belong to clusters with distinct mean curves and covariate
//! centres. Each trajectory is `mu_c(t) + sum_m xi_m psi_m(t) + noise`, with
//! `psi_1 = w_1 sqrt(2) sin(2 pi t)` and `psi_2 = w_2 sqrt(2) cos(2 pi t)` on
//! [0, 1]. Anomalies are planted either as score shifts or as level shifts
//! confined to a time window.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Observation, RawRecord, SlDataset, SubjectTrajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AnomalyKind {
    /// Adds `shift_sd * sqrt(lambda_m)` to score m.
    Score { component: usize, shift_sd: f64 },
    /// Adds `shift` to every dimension for t in (a, b].
    Window { a: f64, b: f64, shift: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    pub cluster: usize,
    pub count: usize,
    pub kind: AnomalyKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub cluster_sizes: Vec<usize>,
    pub p: usize,
    pub q: usize,
    /// Inclusive range of records per subject.
    pub records: (usize, usize),
    pub eigenvalues: [f64; 2],
    pub noise_sd: f64,
    /// Offset between consecutive cluster means.
    pub separation: f64,
    pub covariate_sd: f64,
    pub planted: Vec<Planted>,
    pub with_text: bool,
    pub seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            cluster_sizes: vec![60, 60],
            p: 2,
            q: 2,
            records: (6, 14),
            eigenvalues: [1.0, 0.25],
            noise_sd: 0.1,
            separation: 1.5,
            covariate_sd: 0.2,
            planted: Vec::new(),
            with_text: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synthetic {
    pub dataset: SlDataset,
    /// True cluster per subject (dataset order).
    pub labels: Vec<usize>,
    /// True scores per subject (dataset order), after planting.
    pub scores: Vec<[f64; 2]>,
    /// Planted subjects (dataset indices) with the index into `planted`.
    pub anomalies: BTreeMap<usize, usize>,
}

/// Weight of component `m` on dimension `d`; unit norm across dimensions.
pub fn loading(m: usize, d: usize, p: usize) -> f64 {
    let s = 1.0 / (p as f64).sqrt();
    if m == 0 || d.is_multiple_of(2) {
        s
    } else {
        -s
    }
}

pub fn phi(m: usize, t: f64) -> f64 {
    if m == 0 {
        2f64.sqrt() * (2.0 * PI * t).sin()
    } else {
        2f64.sqrt() * (2.0 * PI * t).cos()
    }
}

/// Cluster mean of dimension `d`.
pub fn cluster_mean(c: usize, d: usize, t: f64, separation: f64) -> f64 {
    let sign = if (c + d).is_multiple_of(2) { 1.0 } else { -1.0 };
    separation * c as f64 * sign + 0.5 * (PI * t + d as f64).sin()
}

const NORMAL_TEXTS: [&str; 8] = [
    "works as described",
    "fast delivery and good packaging",
    "does the job for the price",
    "exactly what I ordered",
    "fits well and looks nice",
    "decent product overall",
    "arrived on time",
    "good value for money",
];

const ANOMALY_TEXTS: [&str; 6] = [
    "such poor quality plastic",
    "stopped working after a week",
    "leaks fuel everywhere",
    "poor quality and poor value for money",
    "wrong size sent and no refund",
    "broke on first use",
];

pub fn generate(cfg: &MixtureConfig) -> Result<Synthetic> {
    if cfg.cluster_sizes.is_empty() || cfg.p == 0 || cfg.records.0 < 1 || cfg.records.0 > cfg.records.1 {
        return Err(Error::Config("invalid synthetic mixture configuration".into()));
    }
    for pl in &cfg.planted {
        if pl.cluster >= cfg.cluster_sizes.len() || pl.count > cfg.cluster_sizes[pl.cluster] {
            return Err(Error::Config("planted anomalies do not fit their cluster".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = Normal::new(0.0, 1.0).unwrap();
    let width = cfg.cluster_sizes.iter().sum::<usize>().to_string().len();

    let mut subjects = Vec::new();
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    let mut planted_of = Vec::new();
    let mut serial = 0;
    for (c, &n) in cfg.cluster_sizes.iter().enumerate() {
        // first subjects of each cluster carry its planted anomalies
        let mut plan: Vec<Option<usize>> = Vec::new();
        for (k, pl) in cfg.planted.iter().enumerate().filter(|(_, p)| p.cluster == c) {
            plan.extend(std::iter::repeat_n(Some(k), pl.count));
        }
        plan.resize(n, None);
        for which in plan {
            let mut xi = [0.0; 2];
            for m in 0..2 {
                xi[m] = cfg.eigenvalues[m].sqrt() * std.sample(&mut rng);
            }
            let kind = which.map(|k| cfg.planted[k].kind);
            if let Some(AnomalyKind::Score { component, shift_sd }) = kind {
                xi[component] += shift_sd * cfg.eigenvalues[component].sqrt();
            }
            let m_i = rng.random_range(cfg.records.0..=cfg.records.1);
            let mut times: Vec<f64> = (0..m_i).map(|_| rng.random::<f64>()).collect();
            times.sort_by(f64::total_cmp);
            let records = times
                .into_iter()
                .map(|t| {
                    let shifted = match kind {
                        Some(AnomalyKind::Window { a, b, shift }) if t > a && t <= b => shift,
                        _ => 0.0,
                    };
                    let values = (0..cfg.p)
                        .map(|d| {
                            let x: f64 = cluster_mean(c, d, t, cfg.separation)
                                + (0..2).map(|m| xi[m] * loading(m, d, cfg.p) * phi(m, t)).sum::<f64>();
                            x + shifted + cfg.noise_sd * std.sample(&mut rng)
                        })
                        .collect();
                    let text = cfg.with_text.then(|| {
                        let anomalous = match kind {
                            Some(AnomalyKind::Score { .. }) => true,
                            Some(AnomalyKind::Window { .. }) => shifted != 0.0,
                            None => false,
                        };
                        let pool: &[&str] = if anomalous { &ANOMALY_TEXTS } else { &NORMAL_TEXTS };
                        pool[rng.random_range(0..pool.len())].to_string()
                    });
                    Observation { time: t, values: Some(values), text, metadata: Default::default() }
                })
                .collect();
            let covariates = (0..cfg.q)
                .map(|j| if j % 2 == 0 { c as f64 } else { -(c as f64) } + cfg.covariate_sd * std.sample(&mut rng))
                .collect();
            subjects.push(SubjectTrajectory { subject_id: format!("s{serial:0width$}"), records, covariates });
            labels.push(c);
            scores.push(xi);
            planted_of.push(which);
            serial += 1;
        }
    }
    // ids are zero-padded serials, so sorting by id keeps generation order
    let dataset = SlDataset::from_subjects(subjects, cfg.p, cfg.q)?;
    let anomalies = planted_of
        .iter()
        .enumerate()
        .filter_map(|(i, k)| k.map(|k| (i, k)))
        .collect();
    Ok(Synthetic { dataset, labels, scores, anomalies })
}

/// Flattens a dataset back into input rows (vector and text both kept).
pub fn to_raw_records(dataset: &SlDataset) -> Vec<RawRecord> {
    dataset
        .subjects
        .iter()
        .flat_map(|s| {
            s.records.iter().map(|r| RawRecord {
                subject_id: s.subject_id.clone(),
                timestamp: r.time,
                text: r.text.clone(),
                vector: r.values.clone(),
                metadata: r.metadata.clone(),
            })
        })
        .collect()
}
