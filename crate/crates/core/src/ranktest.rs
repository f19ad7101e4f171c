//! Nonparametric rank tests used to compare recall across clusters.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub name: String,
    pub groups: String,
    pub statistic: f64,
    pub p: f64,
    pub p_adjusted: Option<f64>,
}

/// Midranks (1-based) and the sizes of tied groups.
pub fn midranks(x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

fn tie_sum(ties: &[usize]) -> f64 {
    ties.iter().map(|&t| (t * t * t - t) as f64).sum()
}

fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    1.0 - ChiSquared::new(df).expect("positive df").cdf(x)
}

fn normal_sf(z: f64) -> f64 {
    1.0 - Normal::new(0.0, 1.0).expect("standard normal").cdf(z)
}

/// Kruskal-Wallis H with tie correction; chi-square p on K-1 df.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<TestResult> {
    if groups.len() < 2 || groups.iter().any(|g| g.is_empty()) {
        return Err(Error::Data("Kruskal-Wallis needs at least 2 nonempty groups".into()));
    }
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let n = all.len() as f64;
    let (ranks, ties) = midranks(&all);
    let mut h = 0.0;
    let mut off = 0;
    for g in groups {
        let r: f64 = ranks[off..off + g.len()].iter().sum();
        h += r * r / g.len() as f64;
        off += g.len();
    }
    h = 12.0 / (n * (n + 1.0)) * h - 3.0 * (n + 1.0);
    let corr = 1.0 - tie_sum(&ties) / (n * n * n - n);
    let (statistic, p) = if corr <= 1e-12 {
        (0.0, 1.0)
    } else {
        let h = (h / corr).max(0.0);
        (h, chi2_sf(h, (groups.len() - 1) as f64))
    };
    Ok(TestResult {
        name: "kruskal_wallis".into(),
        groups: (1..=groups.len()).map(|g| g.to_string()).collect::<Vec<_>>().join(";"),
        statistic,
        p,
        p_adjusted: None,
    })
}

/// Largest group size for which the exact null distribution is used.
pub const WILCOXON_EXACT_MAX: usize = 10;

/// Two-sided rank-sum test. Returns `(U of x, p)`.
pub fn wilcoxon_rank_sum(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Data("Wilcoxon test needs two nonempty samples".into()));
    }
    if x.len() <= WILCOXON_EXACT_MAX && y.len() <= WILCOXON_EXACT_MAX {
        Ok(wilcoxon_exact(x, y))
    } else {
        Ok(wilcoxon_normal(x, y))
    }
}

fn u_stat(x: &[f64], y: &[f64]) -> (f64, Vec<f64>, Vec<usize>) {
    let all: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, ties) = midranks(&all);
    let r1: f64 = ranks[..x.len()].iter().sum();
    let n1 = x.len() as f64;
    (r1 - n1 * (n1 + 1.0) / 2.0, ranks, ties)
}

/// Exact permutation p, conditional on ties (midranks).
pub fn wilcoxon_exact(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (u, ranks, _) = u_stat(x, y);
    let n1 = x.len();
    // doubled midranks are integers
    let r2: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = r2.iter().sum();
    // dp[k][s] = number of k-subsets with doubled rank sum s
    let mut dp = vec![vec![0f64; total + 1]; n1 + 1];
    dp[0][0] = 1.0;
    for &r in &r2 {
        for k in (1..=n1).rev() {
            for s in (r..=total).rev() {
                dp[k][s] += dp[k - 1][s - r];
            }
        }
    }
    let count: f64 = dp[n1].iter().sum();
    let obs: usize = r2[..n1].iter().sum();
    let lower: f64 = dp[n1][..=obs].iter().sum();
    let upper: f64 = dp[n1][obs..].iter().sum();
    let p = (2.0 * lower.min(upper) / count).min(1.0);
    (u, p)
}

/// Normal approximation with tie-corrected variance and continuity correction.
pub fn wilcoxon_normal(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (u, _, ties) = u_stat(x, y);
    let n1 = x.len() as f64;
    let n2 = y.len() as f64;
    let n = n1 + n2;
    let mean = n1 * n2 / 2.0;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_sum(&ties) / (n * (n - 1.0)));
    if var <= 0.0 {
        return (u, 1.0);
    }
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    (u, (2.0 * normal_sf(z)).min(1.0))
}

/// Benjamini-Hochberg step-up adjusted p-values, in input order.
pub fn bh_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        out[i] = running.min(1.0);
    }
    out
}

/// All pairwise rank-sum tests, BH-adjusted over the family.
pub fn pairwise_wilcoxon(groups: &[Vec<f64>]) -> Result<Vec<TestResult>> {
    let mut out = Vec::new();
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            let (u, p) = wilcoxon_rank_sum(&groups[a], &groups[b])?;
            out.push(TestResult {
                name: "wilcoxon_rank_sum".into(),
                groups: format!("{};{}", a + 1, b + 1),
                statistic: u,
                p,
                p_adjusted: None,
            });
        }
    }
    let adj = bh_adjust(&out.iter().map(|t| t.p).collect::<Vec<_>>());
    for (t, a) in out.iter_mut().zip(adj) {
        t.p_adjusted = Some(a);
    }
    Ok(out)
}

/// Friedman test on a complete blocks x treatments matrix.
pub fn friedman(rows: &[Vec<f64>]) -> Result<TestResult> {
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    if n == 0 || k < 2 || rows.iter().any(|r| r.len() != k) {
        return Err(Error::Data("Friedman test needs a complete matrix with at least 2 treatments".into()));
    }
    let mut rsum = vec![0.0; k];
    let mut ties_total = 0.0;
    for r in rows {
        let (ranks, ties) = midranks(r);
        for j in 0..k {
            rsum[j] += ranks[j];
        }
        ties_total += tie_sum(&ties);
    }
    let (nf, kf) = (n as f64, k as f64);
    let q = 12.0 / (nf * kf * (kf + 1.0)) * rsum.iter().map(|r| r * r).sum::<f64>() - 3.0 * nf * (kf + 1.0);
    let corr = 1.0 - ties_total / (nf * (kf * kf * kf - kf));
    let (statistic, p) = if corr <= 1e-12 {
        (0.0, 1.0)
    } else {
        let q = (q / corr).max(0.0);
        (q, chi2_sf(q, kf - 1.0))
    };
    Ok(TestResult {
        name: "friedman".into(),
        groups: (1..=k).map(|g| g.to_string()).collect::<Vec<_>>().join(";"),
        statistic,
        p,
        p_adjusted: None,
    })
}
