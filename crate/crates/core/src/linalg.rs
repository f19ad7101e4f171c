//! Small dense linear-algebra helpers shared by the FPCA and whitening steps.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Flips `v` so that its entry of largest magnitude is positive (first such
/// entry on exact ties).
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Symmetric eigendecomposition sorted by decreasing eigenvalue.
///
/// Eigenvectors are sign-fixed, and exactly tied eigenvalues are ordered by
/// the first differing eigenvector coordinate (larger first). Columns of the
/// returned matrix are the eigenvectors.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|j| {
            let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
            fix_sign(&mut v);
            (eig.eigenvalues[j], v)
        })
        .collect();
    pairs.sort_by(|a, b| {
        b.0.total_cmp(&a.0).then_with(|| {
            a.1.iter()
                .zip(&b.1)
                .find(|(x, y)| x != y)
                .map(|(x, y)| y.total_cmp(x))
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let values = pairs.iter().map(|p| p.0).collect();
    let vectors = DMatrix::from_fn(n, n, |i, j| pairs[j].1[i]);
    (values, vectors)
}

/// Pseudo-inverse square root of a symmetric positive semi-definite matrix;
/// eigenvalues at or below `rel_tol * max` are treated as zero.
pub fn pinv_sqrt(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen_desc(m);
    let max = vals.iter().copied().fold(0.0, f64::max);
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (k, &l) in vals.iter().enumerate() {
        if max <= 0.0 || l <= rel_tol * max {
            continue;
        }
        let v = vecs.column(k);
        out += (v * v.transpose()) / l.sqrt();
    }
    out
}

/// Column means of `x`.
pub fn col_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// Sample covariance with the `n - 1` denominator.
pub fn sample_cov(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mean = col_means(x);
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    (c.transpose() * &c) / (n as f64 - 1.0)
}
