//! Dense numerical substrate: a row-major `f64` matrix, matmul, one-sided
//! Jacobi SVD and exact top-k magnitude selection.
//!
//! Everything here is a pure function over immutable inputs. Summation order
//! is fixed (ascending over the inner index) so results are reproducible
//! bit-for-bit across runs and threads.

use std::cmp::Ordering;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Sweep cap for the Jacobi iteration.
pub const SVD_MAX_SWEEPS: usize = 60;
/// Relative off-diagonal tolerance `|a_i . a_j| / (|a_i| |a_j|)`.
pub const SVD_TOLERANCE: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.rows * self.cols <= 64 {
            f.debug_list()
                .entries(self.data.chunks(self.cols.max(1)))
                .finish()?;
        }
        Ok(())
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
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

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", cols, bad.len()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// I.i.d. Gaussian entries with the given standard deviation.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
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

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "Matrix::sub",
                self.shape_str(),
                other.shape_str(),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// `y = self . x`, summing ascending over columns.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(
                "matvec",
                self.shape_str(),
                format!("vector of {}", x.len()),
            ));
        }
        Ok(self.matvec_unchecked(x))
    }

    pub(crate) fn matvec_unchecked(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `y = self^T . x`, accumulating rows in ascending order.
    pub fn matvec_transposed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::shape(
                "matvec_transposed",
                self.shape_str(),
                format!("vector of {}", x.len()),
            ));
        }
        let mut y = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            axpy(xi, self.row(i), &mut y);
        }
        Ok(y)
    }
}

/// Left-to-right dot product.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Matrix product with the inner dimension summed in ascending order.
///
/// Each output entry sees exactly the additions of a naive triple loop, so the
/// result is bit-identical to it.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape_str(), b.shape_str()));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out = &mut c.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            axpy(a.data[i * a.cols + k], b.row(k), out);
        }
    }
    Ok(c)
}

/// Thin SVD `W = U diag(sigma) Vt` with `k = min(rows, cols)` components.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `rows x k`; column `i` is the i-th left singular vector.
    pub u: Matrix,
    /// Descending, non-negative.
    pub sigma: Vec<f64>,
    /// `k x cols`; row `i` is the i-th right singular vector.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn num_components(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows {
            for (k, s) in self.sigma.iter().enumerate() {
                us.data[i * us.cols + k] *= s;
            }
        }
        matmul(&us, &self.vt).expect("svd factors are conformant")
    }
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(w: &Matrix) -> Result<SvdResult> {
    let (m, n) = w.shape();
    if m == 0 || n == 0 {
        return Ok(SvdResult {
            u: Matrix::zeros(m, 0),
            sigma: Vec::new(),
            vt: Matrix::zeros(0, n),
        });
    }
    if m >= n {
        // Orthogonalize the n columns of W (each of length m).
        let cols: Vec<Vec<f64>> = (0..n).map(|j| w.col(j)).collect();
        let (sigma, u, v) = jacobi_columns(cols)?;
        Ok(finish(u, sigma, v))
    } else {
        // W^T = U' S V'^T, hence W = V' S U'^T.
        let cols: Vec<Vec<f64>> = (0..m).map(|i| w.row(i).to_vec()).collect();
        let (sigma, u_t, v_t) = jacobi_columns(cols)?;
        Ok(finish(v_t, sigma, u_t))
    }
}

/// Runs the rotations on `cols` (p columns of length q, q >= p). Returns
/// sigma (unsorted), normalized left vectors and the accumulated right
/// rotation, all as column lists.
#[allow(clippy::type_complexity)]
fn jacobi_columns(mut a: Vec<Vec<f64>>) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let p = a.len();
    let mut v: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = p < 2;
    let mut off = 0.0;
    for _ in 0..SVD_MAX_SWEEPS {
        off = 0.0f64;
        for i in 0..p.saturating_sub(1) {
            for j in i + 1..p {
                let (left, right) = a.split_at_mut(j);
                let (ai, aj) = (&mut left[i], &mut right[0]);
                let alpha = dot(ai, ai);
                let beta = dot(aj, aj);
                let gamma = dot(ai, aj);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                off = off.max(rel);
                if rel <= SVD_TOLERANCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(ai, aj, c, s);
                let (vl, vr) = v.split_at_mut(j);
                rotate(&mut vl[i], &mut vr[0], c, s);
            }
        }
        if off <= SVD_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: SVD_MAX_SWEEPS,
            residual: off,
        });
    }

    let sigma: Vec<f64> = a.iter().map(|c| norm2(c)).collect();
    for (col, &s) in a.iter_mut().zip(&sigma) {
        if s > 0.0 {
            col.iter_mut().for_each(|x| *x /= s);
        }
    }
    Ok((sigma, a, v))
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (xk, yk) in x.iter_mut().zip(y.iter_mut()) {
        let (a, b) = (*xk, *yk);
        *xk = c * a - s * b;
        *yk = s * a + c * b;
    }
}

/// Sorts components, fills in left vectors for exactly-zero singular values
/// and applies the sign convention.
fn finish(mut u_cols: Vec<Vec<f64>>, sigma: Vec<f64>, v_cols: Vec<Vec<f64>>) -> SvdResult {
    let k = sigma.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));

    let m = u_cols.first().map_or(0, Vec::len);
    let n = v_cols.first().map_or(0, Vec::len);

    // Left vectors of zero singular values are zero after normalization;
    // complete them to an orthonormal set.
    let zero: Vec<usize> = (0..k).filter(|&c| sigma[c] == 0.0).collect();
    if !zero.is_empty() {
        let mut basis: Vec<Vec<f64>> = (0..k)
            .filter(|c| sigma[*c] > 0.0)
            .map(|c| u_cols[c].clone())
            .collect();
        let mut next_axis = 0;
        for &c in &zero {
            while next_axis < m {
                let mut cand = vec![0.0; m];
                cand[next_axis] = 1.0;
                next_axis += 1;
                for _ in 0..2 {
                    for b in &basis {
                        let proj = dot(b, &cand);
                        axpy(-proj, b, &mut cand);
                    }
                }
                let nrm = norm2(&cand);
                if nrm > 0.5 {
                    cand.iter_mut().for_each(|x| *x /= nrm);
                    basis.push(cand.clone());
                    u_cols[c] = cand;
                    break;
                }
            }
        }
    }

    let mut u = Matrix::zeros(m, k);
    let mut vt = Matrix::zeros(k, n);
    let mut sorted_sigma = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let ucol = &u_cols[src];
        let (mut big, mut big_abs) = (0.0, -1.0);
        for &x in ucol {
            if x.abs() > big_abs {
                big_abs = x.abs();
                big = x;
            }
        }
        let sign = if big < 0.0 { -1.0 } else { 1.0 };
        for (i, &v) in ucol.iter().enumerate() {
            u.set(i, dst, sign * v);
        }
        vt.row_mut(dst)
            .iter_mut()
            .zip(&v_cols[src])
            .for_each(|(d, s)| *d = sign * s);
        sorted_sigma.push(sigma[src]);
    }
    SvdResult {
        u,
        sigma: sorted_sigma,
        vt,
    }
}

/// Ordering used for magnitude selection: larger `|x|` first, lower index on ties.
#[inline]
fn magnitude_order(x: &[f64], a: usize, b: usize) -> Ordering {
    x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b))
}

/// Indices of the `k` largest-magnitude entries, ascending by index.
pub fn top_k_by_magnitude(x: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > x.len() {
        return Err(Error::invalid(format!(
            "top-k selection of {k} from a vector of length {}",
            x.len()
        )));
    }
    let mut idx: Vec<usize> = (0..x.len()).collect();
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < x.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| magnitude_order(x, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Indices of the `k` largest entries of `scores` (not magnitudes), lower
/// index first on ties, returned ascending.
pub fn top_k_by_value(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::invalid(format!(
            "top-k selection of {k} from {} candidates",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

const PAIRWISE_LEAF: usize = 32;

/// Elementwise sum of equal-length vectors using a fixed pairwise tree over
/// the index range. The tree depends only on `vectors.len()`, so the result is
/// identical no matter how many rayon workers execute it.
pub fn pairwise_sum_vectors(vectors: &[Vec<f64>], width: usize) -> Vec<f64> {
    if vectors.len() <= PAIRWISE_LEAF {
        let mut acc = vec![0.0; width];
        for v in vectors {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        return acc;
    }
    let mid = vectors.len() / 2;
    let (l, r) = vectors.split_at(mid);
    let (mut a, b) = rayon::join(
        || pairwise_sum_vectors(l, width),
        || pairwise_sum_vectors(r, width),
    );
    for (x, y) in a.iter_mut().zip(&b) {
        *x += y;
    }
    a
}
