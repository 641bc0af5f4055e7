//! Dense linear algebra on top of `nalgebra`: jittered Cholesky, triangular
//! solves and a sign-fixed symmetric eigen decomposition.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Row/column matrix of 64-bit floats.
pub type DenseMatrix = DMatrix<f64>;
/// Column vector of 64-bit floats.
pub type Vector = DVector<f64>;

const SYMMETRY_TOL: f64 = 1e-10;
const JITTER_SCALE: f64 = 1e-10;
const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 10_000;

/// Largest absolute asymmetry `|a_ij - a_ji|` relative to the largest entry.
pub fn asymmetry(a: &DenseMatrix) -> f64 {
    let scale = a.amax().max(1.0);
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / scale
}

fn check_square_symmetric(a: &DenseMatrix) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::DomainError("matrix has non-finite entries".into()));
    }
    let asym = asymmetry(a);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

fn cholesky_plain(a: &DenseMatrix) -> std::result::Result<DenseMatrix, (usize, f64)> {
    let n = a.nrows();
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err((j, d));
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
///
/// On failure the factorization is retried once with `1e-10 * trace / n`
/// added to the diagonal.
pub fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix> {
    check_square_symmetric(a)?;
    let n = a.nrows();
    if n == 0 {
        return Ok(DenseMatrix::zeros(0, 0));
    }
    match cholesky_plain(a) {
        Ok(l) => Ok(l),
        Err(_) => {
            let jitter = JITTER_SCALE * a.trace().abs() / n as f64;
            let mut b = a.clone();
            for i in 0..n {
                b[(i, i)] += jitter;
            }
            cholesky_plain(&b).map_err(|(index, pivot)| Error::NotPositiveDefinite { index, pivot })
        }
    }
}

/// Solve `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Solve `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_upper_t(l: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..b.ncols() {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Solve `A x = b` given the lower Cholesky factor of `A`.
pub fn chol_solve(l: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    solve_upper_t(l, &solve_lower(l, b))
}

/// Vector version of [`chol_solve`].
pub fn chol_solve_vec(l: &DenseMatrix, b: &Vector) -> Vector {
    let m = DenseMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let x = chol_solve(l, &m);
    Vector::from_column_slice(x.as_slice())
}

/// `log det A` from its Cholesky factor.
pub fn chol_logdet(l: &DenseMatrix) -> f64 {
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Symmetrize in place: `(A + Aᵀ)/2`.
pub fn symmetrize(a: &mut DenseMatrix) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Eigen-pairs of a symmetric matrix, eigenvalues in descending order.
///
/// Each eigenvector is normalized and oriented so that its first component
/// of largest magnitude is non-negative, which makes the decomposition a
/// pure function of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vector,
    /// Eigenvectors stored as columns.
    pub eigenvectors: DenseMatrix,
}

impl SpectralDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `P Λ Pᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let p = &self.eigenvectors;
        let lambda = DenseMatrix::from_diagonal(&self.eigenvalues);
        p * lambda * p.transpose()
    }
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    let mut best_abs = -1.0f64;
    for (k, x) in v.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = k;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Symmetric eigen decomposition with descending eigenvalues and sign-fixed
/// eigenvectors.
pub fn sym_eigen(a: &DenseMatrix) -> Result<SpectralDecomposition> {
    check_square_symmetric(a)?;
    let n = a.nrows();
    let mut sym = a.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::try_new(sym, EIGEN_EPS, EIGEN_MAX_ITER).ok_or(Error::NoConvergence)?;
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the solver's order on ties.
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut values = Vector::zeros(n);
    let mut vectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let mut col: Vec<f64> = eig.eigenvectors.column(src).iter().copied().collect();
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        col.iter_mut().for_each(|x| *x /= norm);
        fix_sign(&mut col);
        vectors.column_mut(dst).copy_from_slice(&col);
    }
    Ok(SpectralDecomposition { eigenvalues: values, eigenvectors: vectors })
}

/// Serde adapter writing a matrix as an array of rows.
pub mod serde_rows {
    use super::DenseMatrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Option<DenseMatrix> {
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return None;
        }
        Some(DenseMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &DenseMatrix, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DenseMatrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).ok_or_else(|| D::Error::custom("matrix rows have unequal lengths"))
    }
}

/// Serde adapter writing a vector as a plain array.
pub mod serde_vec {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Relative Frobenius error `‖a - b‖ / max(‖b‖, tiny)`.
pub fn rel_frobenius(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
