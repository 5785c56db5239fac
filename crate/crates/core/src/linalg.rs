//! Dense row-major matrices and the handful of solvers the factorization needs:
//! jittered Cholesky solves and power iteration for dominant singular pairs.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real matrix stored row-major in 64-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Validating constructor: length must match and every value must be finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dims(format!("empty shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dims(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dims("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col_to_vec(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::dims(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn tr_matmul(&self, rhs: &DenseMatrix) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::dims(format!(
                "tr_matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let b_row = rhs.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_tr(&self, rhs: &DenseMatrix) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::dims(format!(
                "matmul_tr {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::dims(format!(
                "matvec {}x{} by vector of {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn tr_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::dims(format!(
                "tr_matvec {}x{} by vector of {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        Ok(out)
    }

    fn zip_with(&self, rhs: &DenseMatrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(Error::dims(format!(
                "{op} {}x{} with {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn add(&self, rhs: &DenseMatrix) -> Result<Self> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &DenseMatrix) -> Result<Self> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &DenseMatrix) -> Result<Self> {
        self.zip_with(rhs, "hadamard", |a, b| a * b)
    }

    /// `self += alpha · rhs`.
    pub fn axpy(&mut self, alpha: f64, rhs: &DenseMatrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::dims("axpy shape"));
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Self> {
        if factors.len() != self.rows {
            return Err(Error::dims("scale_rows length"));
        }
        let mut out = self.clone();
        for (i, f) in factors.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
        Ok(out)
    }

    /// Multiplies column `j` by `factors[j]`.
    pub fn scale_cols(&self, factors: &[f64]) -> Result<Self> {
        if factors.len() != self.cols {
            return Err(Error::dims("scale_cols length"));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (v, f) in out.row_mut(i).iter_mut().zip(factors) {
                *v *= f;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Frobenius inner product.
    pub fn inner(&self, rhs: &DenseMatrix) -> f64 {
        debug_assert_eq!(self.shape(), rhs.shape());
        dot(&self.data, &rhs.data)
    }

    /// Gathers the listed columns into a new matrix.
    pub fn select_cols(&self, idx: &[usize]) -> Self {
        Self::from_fn(self.rows, idx.len(), |i, j| self[(i, idx[j])])
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Diagonal jitter schedule for [`cholesky_solve_with`], as multiples of `mean(diag(A))`.
#[derive(Clone, Debug)]
pub struct CholeskyOptions {
    pub jitter: Vec<f64>,
    pub symmetry_tol: f64,
}

impl Default for CholeskyOptions {
    fn default() -> Self {
        Self {
            jitter: vec![1e-10, 1e-7, 1e-4],
            symmetry_tol: 1e-9,
        }
    }
}

/// Solves `A·X = B` for symmetric positive definite `A`.
pub fn cholesky_solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    cholesky_solve_with(a, b, &CholeskyOptions::default())
}

pub fn cholesky_solve_with(
    a: &DenseMatrix,
    b: &DenseMatrix,
    opts: &CholeskyOptions,
) -> Result<DenseMatrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dims(format!("{}x{} is not square", a.rows(), a.cols())));
    }
    if b.rows() != n {
        return Err(Error::dims(format!("rhs has {} rows, expected {n}", b.rows())));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let scale = a.max_abs().max(1.0);
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if asym > opts.symmetry_tol * scale {
        return Err(Error::NotSymmetric(asym));
    }

    let mean_diag = (0..n).map(|i| a[(i, i)]).sum::<f64>() / n as f64;
    let mut factor = cholesky_factor(a, 0.0);
    let mut attempts = 0;
    for delta in &opts.jitter {
        if factor.is_some() {
            break;
        }
        attempts += 1;
        factor = cholesky_factor(a, delta * mean_diag.abs());
    }
    let l = factor.ok_or(Error::NotPositiveDefinite { attempts })?;

    let mut x = b.clone();
    for col in 0..b.cols() {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[(i, col)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = s / l[(i, i)];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[(i, col)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, col)];
            }
            x[(i, col)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

fn cholesky_factor(a: &DenseMatrix, shift: f64) -> Option<DenseMatrix> {
    let n = a.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + shift;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Dominant singular triple `M ≈ sigma · left · rightᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SingularPair {
    pub sigma: f64,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration on `MᵀM`.
///
/// The start vector is built from the column norms of `M`, so for an entrywise
/// nonnegative `M` every iterate stays nonnegative and the Perron pair comes back
/// nonnegative. Hitting `max_iters` is reported through `converged`, not an error.
pub fn top_singular_pair(m: &DenseMatrix, max_iters: usize, tol: f64) -> Result<SingularPair> {
    let cols = m.cols();
    let mut start = vec![0.0; cols];
    for i in 0..m.rows() {
        for (s, v) in start.iter_mut().zip(m.row(i)) {
            *s += v * v;
        }
    }
    let peak = start.iter().fold(0.0f64, |a, b| a.max(*b));
    if peak == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    // small deterministic tilt so the start is not orthogonal to the top pair by symmetry
    for (j, s) in start.iter_mut().enumerate() {
        *s = s.sqrt() + 1e-3 * peak.sqrt() * (j + 1) as f64 / cols as f64;
    }
    top_singular_pair_from(m, start, max_iters, tol)
}

/// Power iteration from a caller-supplied start vector.
pub fn top_singular_pair_from(
    m: &DenseMatrix,
    start: Vec<f64>,
    max_iters: usize,
    tol: f64,
) -> Result<SingularPair> {
    if start.len() != m.cols() {
        return Err(Error::dims("start vector length"));
    }
    let mut v = start;
    let nv = norm2(&v);
    if nv == 0.0 || !nv.is_finite() {
        return Err(Error::InvalidConfig("zero start vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= nv);

    let mut u = m.matvec(&v)?;
    let mut sigma = norm2(&u);
    if sigma == 0.0 {
        // start orthogonal to the row space: restart on the heaviest column
        let j = (0..m.cols())
            .max_by(|&a, &b| {
                let na: f64 = (0..m.rows()).map(|i| m[(i, a)].powi(2)).sum();
                let nb: f64 = (0..m.rows()).map(|i| m[(i, b)].powi(2)).sum();
                na.total_cmp(&nb)
            })
            .unwrap_or(0);
        v = vec![0.0; m.cols()];
        v[j] = 1.0;
        u = m.matvec(&v)?;
        sigma = norm2(&u);
        if sigma == 0.0 {
            return Err(Error::ZeroMatrix);
        }
    }

    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        u.iter_mut().for_each(|x| *x /= sigma);
        v = m.tr_matvec(&u)?;
        let nv = norm2(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        u = m.matvec(&v)?;
        let next = norm2(&u);
        let delta = (next - sigma).abs();
        sigma = next;
        if delta <= tol * sigma {
            converged = true;
            break;
        }
    }
    u.iter_mut().for_each(|x| *x /= sigma);

    // sign convention: the larger-magnitude coordinate sum is nonnegative
    if u.iter().sum::<f64>() + v.iter().sum::<f64>() < 0.0 {
        u.iter_mut().for_each(|x| *x = -*x);
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(SingularPair {
        sigma,
        left: u,
        right: v,
        iterations,
        converged,
    })
}

/// `σ_max(M)` by 200 power iterations; zero for the zero matrix.
pub fn spectral_norm_estimate(m: &DenseMatrix) -> f64 {
    match top_singular_pair(m, 200, 1e-12) {
        Ok(p) => p.sigma,
        Err(_) => 0.0,
    }
}

/// Top-`r` singular triples by repeated power iteration with deflation.
///
/// Returns `(sigmas, left r-column matrix, right r-column matrix)`. Start vectors
/// come from `starts` (one per triple) so runs are reproducible under a seed.
pub fn top_singular_triples(
    m: &DenseMatrix,
    r: usize,
    starts: &[Vec<f64>],
    max_iters: usize,
    tol: f64,
) -> Result<(Vec<f64>, DenseMatrix, DenseMatrix)> {
    if r > m.rows().min(m.cols()) {
        return Err(Error::RankTooLarge {
            rank: r,
            max: m.rows().min(m.cols()),
        });
    }
    let mut resid = m.clone();
    let mut sigmas = Vec::with_capacity(r);
    let mut left = DenseMatrix::zeros(m.rows(), r);
    let mut right = DenseMatrix::zeros(m.cols(), r);
    let scale = m.frobenius_norm();
    for k in 0..r {
        let usable = resid.frobenius_norm() > 1e-14 * scale;
        let pair = if usable {
            let mut start = starts[k].clone();
            // project the start off the already-found right vectors
            for p in 0..k {
                let c: f64 = (0..m.cols()).map(|j| right[(j, p)] * start[j]).sum();
                for (j, s) in start.iter_mut().enumerate() {
                    *s -= c * right[(j, p)];
                }
            }
            top_singular_pair_from(&resid, start, max_iters, tol).ok()
        } else {
            None
        };
        match pair {
            Some(p) if p.sigma > 1e-14 * scale => {
                for i in 0..m.rows() {
                    left[(i, k)] = p.left[i];
                }
                for j in 0..m.cols() {
                    right[(j, k)] = p.right[j];
                }
                for i in 0..m.rows() {
                    let a = p.sigma * p.left[i];
                    for (v, b) in resid.row_mut(i).iter_mut().zip(&p.right) {
                        *v -= a * b;
                    }
                }
                sigmas.push(p.sigma);
            }
            _ => {
                // exhausted rank: fill with a unit vector orthogonal in index
                left[(k % m.rows(), k)] = 1.0;
                right[(k % m.cols(), k)] = 1.0;
                sigmas.push(0.0);
            }
        }
    }
    Ok((sigmas, left, right))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn cholesky_identity_returns_rhs() {
        let b = DenseMatrix::from_rows(&[vec![1.0, -2.0], vec![3.5, 0.0], vec![7.0, 1.0]]).unwrap();
        let x = cholesky_solve(&DenseMatrix::identity(3), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn cholesky_two_by_two_by_hand() {
        let a = DenseMatrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let b = DenseMatrix::column(&[1.0, 0.0]);
        let x = cholesky_solve(&a, &b).unwrap();
        assert!(approx(x[(0, 0)], 0.375, 1e-14));
        assert!(approx(x[(1, 0)], -0.25, 1e-14));
    }

    #[test]
    fn cholesky_rejects_asymmetric_and_bad_dims() {
        let a = DenseMatrix::from_rows(&[vec![4.0, 2.0], vec![1.0, 3.0]]).unwrap();
        assert!(matches!(
            cholesky_solve(&a, &DenseMatrix::column(&[1.0, 1.0])),
            Err(Error::NotSymmetric(_))
        ));
        let a = DenseMatrix::identity(2);
        assert!(matches!(
            cholesky_solve(&a, &DenseMatrix::column(&[1.0, 1.0, 1.0])),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn cholesky_jitter_rescues_semidefinite_then_fails_on_indefinite() {
        // rank-1 PSD: needs jitter
        let a = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(cholesky_solve(&a, &DenseMatrix::column(&[1.0, 1.0])).is_ok());
        let a = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        assert!(matches!(
            cholesky_solve(&a, &DenseMatrix::column(&[1.0, 1.0])),
            Err(Error::NotPositiveDefinite { attempts: 3 })
        ));
    }

    #[test]
    fn power_iteration_rank_one_exact() {
        let m = DenseMatrix::from_rows(&[vec![2.0, 2.0], vec![2.0, 2.0]]).unwrap();
        let p = top_singular_pair(&m, 100, 1e-14).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(approx(p.sigma, 4.0, 1e-12));
        for k in 0..2 {
            assert!(approx(p.left[k], h, 1e-9));
            assert!(approx(p.right[k], h, 1e-9));
        }
    }

    #[test]
    fn power_iteration_diagonal() {
        let m = DenseMatrix::diag(&[3.0, 1.0]);
        let p = top_singular_pair(&m, 500, 1e-15).unwrap();
        assert!(approx(p.sigma, 3.0, 1e-12));
        assert!(approx(p.left[0].abs(), 1.0, 1e-9) && p.left[1].abs() < 1e-6);
        assert!(approx(p.right[0].abs(), 1.0, 1e-9) && p.right[1].abs() < 1e-6);
    }

    #[test]
    fn power_iteration_zero_is_error_and_norm_is_zero() {
        let z = DenseMatrix::zeros(3, 2);
        assert!(matches!(top_singular_pair(&z, 10, 1e-9), Err(Error::ZeroMatrix)));
        assert_eq!(spectral_norm_estimate(&z), 0.0);
        assert!(approx(spectral_norm_estimate(&DenseMatrix::diag(&[5.0, 2.0, 1.0])), 5.0, 1e-9));
    }

    #[test]
    fn power_iteration_handles_orthogonal_start() {
        // column norms are equal, tilt breaks the tie; [[1,-1]] has right vector (1,-1)/√2
        let m = DenseMatrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let p = top_singular_pair(&m, 100, 1e-14).unwrap();
        assert!(approx(p.sigma, 2f64.sqrt(), 1e-12));
    }

    #[test]
    fn from_vec_validates() {
        assert!(DenseMatrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            DenseMatrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFiniteInput)
        ));
    }
}
