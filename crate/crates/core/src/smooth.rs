//! Local-linear kernel smoothers (Epanechnikov) in one and two dimensions.
//!
//! Observations are first pooled into sufficient statistics per distinct
//! design point, so repeated design points (shared time grids, duplicate
//! timestamps) cost nothing extra at evaluation time.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};

const GCV_GRID_LEN: usize = 10;
const MAX_DOUBLINGS: usize = 64;
const SINGULAR_REL: f64 = 1e-10;

#[inline]
pub fn epanechnikov(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// Pooled 1-D data: per distinct design point, count, sum and sum of squares.
#[derive(Debug, Clone, Default)]
pub struct Pooled1d {
    pub t: Vec<f64>,
    pub n: Vec<f64>,
    pub sy: Vec<f64>,
    pub syy: Vec<f64>,
}

impl Pooled1d {
    pub fn from_pairs<I: IntoIterator<Item = (f64, f64)>>(pairs: I) -> Self {
        let mut raw: Vec<(f64, f64)> = pairs.into_iter().collect();
        raw.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out = Pooled1d::default();
        for (t, y) in raw {
            match out.t.last() {
                Some(&last) if last == t => {
                    let k = out.t.len() - 1;
                    out.n[k] += 1.0;
                    out.sy[k] += y;
                    out.syy[k] += y * y;
                }
                _ => {
                    out.t.push(t);
                    out.n.push(1.0);
                    out.sy.push(y);
                    out.syy.push(y * y);
                }
            }
        }
        out
    }

    pub fn n_distinct(&self) -> usize {
        self.t.len()
    }

    pub fn n_total(&self) -> f64 {
        self.n.iter().sum()
    }

    /// Median gap between consecutive distinct design points.
    pub fn median_spacing(&self) -> f64 {
        let mut gaps: Vec<f64> = self.t.windows(2).map(|w| w[1] - w[0]).collect();
        if gaps.is_empty() {
            return 0.0;
        }
        gaps.sort_by(f64::total_cmp);
        let m = gaps.len();
        if m % 2 == 1 {
            gaps[m / 2]
        } else {
            0.5 * (gaps[m / 2 - 1] + gaps[m / 2])
        }
    }
}

/// Local-linear fit at `x` with bandwidth `h`: returns the estimate and the
/// hat-matrix self weight `K(0) S2 / det` of a single observation sitting at
/// `x`. `None` when the local design is singular.
fn local_linear_at(data: &Pooled1d, x: f64, h: f64) -> Option<(f64, f64)> {
    let lo = data.t.partition_point(|&t| t <= x - h);
    let hi = data.t.partition_point(|&t| t < x + h);
    let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut distinct = 0usize;
    for j in lo..hi {
        let u = (data.t[j] - x) / h;
        let k = epanechnikov(u);
        if k <= 0.0 {
            continue;
        }
        distinct += 1;
        let kn = k * data.n[j];
        s0 += kn;
        s1 += kn * u;
        s2 += kn * u * u;
        let ky = k * data.sy[j];
        t0 += ky;
        t1 += ky * u;
    }
    if distinct < 2 {
        return None;
    }
    let det = s0 * s2 - s1 * s1;
    if det <= SINGULAR_REL * s0 * s0 {
        return None;
    }
    let est = (s2 * t0 - s1 * t1) / det;
    Some((est, epanechnikov(0.0) * s2 / det))
}

/// Local fit with the bandwidth doubled until the design is nonsingular.
fn local_linear_doubling(data: &Pooled1d, x: f64, h: f64) -> Result<(f64, f64)> {
    let mut hh = h;
    for _ in 0..MAX_DOUBLINGS {
        if let Some(r) = local_linear_at(data, x, hh) {
            return Ok(r);
        }
        hh *= 2.0;
    }
    Err(Error::NotIdentifiable(format!("local design singular at t={x}")))
}

/// Evaluates the local-linear smoother at `points`.
pub fn smooth_1d(data: &Pooled1d, points: &[f64], h: f64) -> Result<Vec<f64>> {
    if data.n_distinct() < 2 {
        return Err(Error::NotIdentifiable("fewer than 2 distinct design points".into()));
    }
    points
        .iter()
        .map(|&x| local_linear_doubling(data, x, h).map(|r| r.0))
        .collect()
}

/// Generalized cross-validation score of bandwidth `h`.
pub fn gcv_score(data: &Pooled1d, h: f64) -> Result<f64> {
    let n = data.n_total();
    let mut rss = 0.0;
    let mut trace = 0.0;
    for j in 0..data.n_distinct() {
        let (fit, self_w) = local_linear_doubling(data, data.t[j], h)?;
        rss += data.syy[j] - 2.0 * fit * data.sy[j] + data.n[j] * fit * fit;
        trace += data.n[j] * self_w;
    }
    let denom = 1.0 - trace / n;
    if denom <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((rss.max(0.0) / n) / (denom * denom))
}

/// Candidate bandwidths: 10 log-spaced values from 1.5x the median design
/// spacing to half the domain length.
pub fn bandwidth_candidates(data: &Pooled1d, span: f64) -> Vec<f64> {
    let h_max = 0.5 * span;
    let h_min = (1.5 * data.median_spacing()).min(h_max);
    if h_min <= 0.0 || h_min >= h_max {
        return vec![h_max];
    }
    let (a, b) = (h_min.ln(), h_max.ln());
    (0..GCV_GRID_LEN)
        .map(|i| (a + (b - a) * i as f64 / (GCV_GRID_LEN - 1) as f64).exp())
        .collect()
}

/// GCV-selected bandwidth (ties go to the smaller bandwidth).
pub fn gcv_bandwidth(data: &Pooled1d, span: f64) -> Result<f64> {
    if data.n_distinct() < 2 {
        return Err(Error::NotIdentifiable("fewer than 2 distinct design points".into()));
    }
    let mut best = (f64::INFINITY, f64::NAN);
    for h in bandwidth_candidates(data, span) {
        let score = gcv_score(data, h)?;
        log::debug!("gcv h={h:.5} score={score:.6e}");
        if score < best.0 {
            best = (score, h);
        }
    }
    if best.1.is_nan() {
        // every candidate saturated the hat trace
        best.1 = 0.5 * span;
    }
    Ok(best.1)
}

/// Pooled 2-D data with a uniform cell index for neighbourhood queries.
#[derive(Debug, Clone)]
pub struct Pooled2d {
    pub s: Vec<f64>,
    pub t: Vec<f64>,
    pub n: Vec<f64>,
    pub sz: Vec<f64>,
    origin: f64,
    cell: f64,
    n_cells: usize,
    /// Start offsets into `order` per cell, row-major, length n_cells^2 + 1.
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl Pooled2d {
    /// Pools `(s, t, z)` triples and indexes them with cells of width about `h`
    /// over the domain `[lo, hi]`.
    pub fn new<I: IntoIterator<Item = (f64, f64, f64)>>(triples: I, lo: f64, hi: f64, h: f64) -> Self {
        let mut map: HashMap<(u64, u64), usize> = HashMap::new();
        let (mut s, mut t, mut n, mut sz) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (a, b, z) in triples {
            let key = (a.to_bits(), b.to_bits());
            let idx = *map.entry(key).or_insert_with(|| {
                s.push(a);
                t.push(b);
                n.push(0.0);
                sz.push(0.0);
                s.len() - 1
            });
            n[idx] += 1.0;
            sz[idx] += z;
        }
        // deterministic layout independent of hash order
        let mut perm: Vec<usize> = (0..s.len()).collect();
        perm.sort_by(|&i, &j| s[i].total_cmp(&s[j]).then(t[i].total_cmp(&t[j])));
        let s: Vec<f64> = perm.iter().map(|&i| s[i]).collect();
        let t: Vec<f64> = perm.iter().map(|&i| t[i]).collect();
        let n: Vec<f64> = perm.iter().map(|&i| n[i]).collect();
        let sz: Vec<f64> = perm.iter().map(|&i| sz[i]).collect();

        let span = (hi - lo).max(f64::MIN_POSITIVE);
        let n_cells = ((span / h).ceil() as usize).clamp(1, 512);
        let cell = span / n_cells as f64;
        let mut out = Pooled2d {
            s,
            t,
            n,
            sz,
            origin: lo,
            cell,
            n_cells,
            starts: Vec::new(),
            order: Vec::new(),
        };
        out.build_index();
        out
    }

    fn cell_of(&self, x: f64) -> usize {
        let c = ((x - self.origin) / self.cell).floor();
        if c <= 0.0 {
            0
        } else {
            (c as usize).min(self.n_cells - 1)
        }
    }

    fn build_index(&mut self) {
        let nc = self.n_cells;
        let mut counts = vec![0usize; nc * nc + 1];
        let cells: Vec<usize> = (0..self.s.len())
            .map(|i| self.cell_of(self.s[i]) * nc + self.cell_of(self.t[i]))
            .collect();
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for k in 1..counts.len() {
            counts[k] += counts[k - 1];
        }
        let mut fill = counts.clone();
        let mut order = vec![0usize; self.s.len()];
        for (i, &c) in cells.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        self.starts = counts;
        self.order = order;
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    fn fit_at(&self, x: f64, y: f64, h: f64) -> Option<f64> {
        let nc = self.n_cells;
        let (r0, r1) = (self.cell_of(x - h), self.cell_of(x + h));
        let (c0, c1) = (self.cell_of(y - h), self.cell_of(y + h));
        // normal equations for design [1, u, v]
        let mut m = [[0.0f64; 3]; 3];
        let mut rhs = [0.0f64; 3];
        for r in r0..=r1 {
            let a = self.starts[r * nc + c0];
            let b = self.starts[r * nc + c1 + 1];
            for &i in &self.order[a..b] {
                let u = (self.s[i] - x) / h;
                let v = (self.t[i] - y) / h;
                let k = epanechnikov(u) * epanechnikov(v);
                if k <= 0.0 {
                    continue;
                }
                let kn = k * self.n[i];
                let d = [1.0, u, v];
                for p in 0..3 {
                    for q in p..3 {
                        m[p][q] += kn * d[p] * d[q];
                    }
                    rhs[p] += k * self.sz[i] * d[p];
                }
            }
        }
        for p in 0..3 {
            for q in 0..p {
                m[p][q] = m[q][p];
            }
        }
        let s0 = m[0][0];
        if s0 <= 0.0 {
            return None;
        }
        let mat = nalgebra::Matrix3::from_fn(|p, q| m[p][q]);
        let det = mat.determinant();
        if det <= SINGULAR_REL * s0 * s0 * s0 {
            return None;
        }
        let sol = mat.lu().solve(&nalgebra::Vector3::from(rhs))?;
        Some(sol[0])
    }

    fn fit_doubling(&self, x: f64, y: f64, h: f64) -> Result<f64> {
        let mut hh = h;
        for _ in 0..MAX_DOUBLINGS {
            if let Some(v) = self.fit_at(x, y, hh) {
                return Ok(v);
            }
            hh *= 2.0;
        }
        Err(Error::NotIdentifiable(format!("local design singular at ({x}, {y})")))
    }
}

/// Evaluates the 2-D local-linear smoother on `points x points`, returned
/// row-major as a `G x G` matrix.
pub fn smooth_2d(data: &Pooled2d, points: &[f64], h: f64) -> Result<nalgebra::DMatrix<f64>> {
    if data.is_empty() {
        return Err(Error::NotIdentifiable("no off-diagonal pairs".into()));
    }
    let g = points.len();
    let rows: Vec<Vec<f64>> = points
        .par_iter()
        .map(|&x| points.iter().map(|&y| data.fit_doubling(x, y, h)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(nalgebra::DMatrix::from_fn(g, g, |i, j| rows[i][j]))
}
