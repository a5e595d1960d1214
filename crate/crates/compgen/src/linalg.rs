//! Small dense linear-algebra helpers: Cholesky solves for ridge systems,
//! Householder QR for orthogonal sampling, and nested-array JSON conversion.

use ndarray::{Array1, Array2};

use crate::{Error, Result};

/// Solve `A X = B` for symmetric positive definite `A` via Cholesky.
///
/// Fails with [`Error::Singular`] when a pivot is not strictly positive,
/// which is how an unregularized ridge system on rank-deficient data shows up.
pub fn cholesky_solve(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::Shape(format!(
            "cholesky_solve: a is {}x{}, b has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    // Lower-triangular factor, row by row.
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::Singular(format!(
                        "non-positive pivot {s:.3e} at row {i}"
                    )));
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    // Forward then backward substitution, one right-hand side at a time.
    let m = b.ncols();
    let mut x = Array2::<f64>::zeros((n, m));
    for c in 0..m {
        let mut y = Array1::<f64>::zeros(n);
        for i in 0..n {
            let mut s = b[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    Ok(x)
}

/// QR-factorize `g` with Householder reflections and return `Q` with the sign
/// convention `diag(R) > 0`, making the factorization (and thus the sampled
/// orthogonal matrix) unique.
pub fn householder_orthonormal(g: &Array2<f64>) -> Array2<f64> {
    let n = g.nrows();
    assert_eq!(n, g.ncols(), "householder_orthonormal expects a square matrix");
    let mut r = g.clone();
    let mut q = Array2::<f64>::eye(n);
    for k in 0..n {
        // Build the reflector for column k below the diagonal.
        let mut norm = 0.0;
        for i in k..n {
            norm += r[[i, k]] * r[[i, k]];
        }
        let norm = norm.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[[k, k]] >= 0.0 { -norm } else { norm };
        let mut v = Array1::<f64>::zeros(n);
        for i in k..n {
            v[i] = r[[i, k]];
        }
        v[k] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // Apply H = I - 2 v v^T / (v^T v) to R (left) and accumulate into Q.
        for c in 0..n {
            let mut dot = 0.0;
            for i in k..n {
                dot += v[i] * r[[i, c]];
            }
            let f = 2.0 * dot / vnorm2;
            for i in k..n {
                r[[i, c]] -= f * v[i];
            }
        }
        for c in 0..n {
            let mut dot = 0.0;
            for i in k..n {
                dot += v[i] * q[[c, i]];
            }
            let f = 2.0 * dot / vnorm2;
            for i in k..n {
                q[[c, i]] -= f * v[i];
            }
        }
    }
    // Sign correction: flip columns of Q where the R diagonal is negative.
    for k in 0..n {
        if r[[k, k]] < 0.0 {
            for i in 0..n {
                q[[i, k]] = -q[[i, k]];
            }
        }
    }
    q
}

/// Max-abs entry of `Q^T Q - I`, the orthogonality defect.
pub fn orthogonality_defect(q: &Array2<f64>) -> f64 {
    let n = q.nrows();
    let qtq = q.t().dot(q);
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((qtq[[i, j]] - target).abs());
        }
    }
    worst
}

/// Row-major nested arrays for the JSON file formats.
pub fn mat_to_nested(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Parse a nested array back into a matrix, validating rectangularity.
pub fn mat_from_nested(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    if rows.is_empty() {
        return Err(Error::Format("matrix with zero rows".into()));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Format("ragged matrix rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), ncols), flat)
        .map_err(|e| Error::Format(format!("matrix shape: {e}")))
}

/// Pearson correlation of paired samples.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape("pearson: length mismatch".into()));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::Empty("pearson needs at least 2 pairs".into()));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("pearson: zero-variance input".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
