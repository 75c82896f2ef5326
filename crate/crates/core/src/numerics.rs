//! Dense real matrices and the handful of kernels the rest of the crate
//! builds on: right least squares, inversion, the principal square root
//! and norms.
//!
//! Storage is row-major `f64`. Arithmetic on mismatched shapes is a
//! programming error and panics; the fallible kernels return [`Error`].

use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest accepted condition estimate, `1/eps * 1e-4`.
pub const MAX_CONDITION: f64 = 1.0e-4 / f64::EPSILON;

const SQRTM_MAX_ITER: usize = 100;
const SQRTM_STEP_TOL: f64 = 1e-12;
const SQRTM_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMat", into = "RawMat")]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMat> for Mat {
    type Error = Error;
    fn try_from(raw: RawMat) -> Result<Self> {
        Mat::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl From<Mat> for RawMat {
    fn from(m: Mat) -> Self {
        RawMat { rows: m.rows, cols: m.cols, data: m.data }
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Mat::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Checked constructor; rejects wrong lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Mat::from_vec(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    /// Column matrix from a slice.
    pub fn col_vec(v: &[f64]) -> Self {
        Mat { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    /// Builds an `n x cols.len()` matrix whose j-th column is `cols[j]`.
    pub fn from_cols(n: usize, cols: &[&[f64]]) -> Self {
        let mut m = Mat::zeros(n, cols.len());
        for (j, c) in cols.iter().enumerate() {
            assert_eq!(c.len(), n, "column length");
            for i in 0..n {
                m[(i, j)] = c[i];
            }
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

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_col(&mut self, c: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows);
        for (r, x) in v.iter().enumerate() {
            self[(r, c)] = *x;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul {:?} x {:?}", self.shape(), other.shape());
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Mat { rows: n, cols: m, data: out }
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul {:?} x {:?}", self.shape(), other.shape());
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let arow = &self.data[p * n..(p + 1) * n];
            let brow = &other.data[p * m..(p + 1) * m];
            for (i, a) in arow.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Mat { rows: n, cols: m, data: out }
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_t {:?} x {:?}", self.shape(), other.shape());
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = arow.iter().zip(brow).map(|(a, b)| a * b).sum();
            }
        }
        Mat { rows: n, cols: m, data: out }
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `self^T v`.
    pub fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "t_matvec");
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| f(*v)).collect() }
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "axpy");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Copy of rows `r0..r1`, columns `c0..c1`.
    pub fn block(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Mat {
        assert!(r1 <= self.rows && c1 <= self.cols && r0 <= r1 && c0 <= c1, "block bounds");
        Mat::from_fn(r1 - r0, c1 - c0, |i, j| self[(r0 + i, c0 + j)])
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, b: &Mat) {
        assert!(r0 + b.rows <= self.rows && c0 + b.cols <= self.cols, "set_block bounds");
        for i in 0..b.rows {
            for j in 0..b.cols {
                self[(r0 + i, c0 + j)] = b[(i, j)];
            }
        }
    }

    /// Selects a subset of columns, in the given order.
    pub fn select_cols(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            let src = self.row(i);
            let dst = out.row_mut(i);
            for (d, &j) in dst.iter_mut().zip(idx) {
                *d = src[j];
            }
        }
        out
    }

    pub fn vstack(top: &Mat, bottom: &Mat) -> Mat {
        assert_eq!(top.cols, bottom.cols, "vstack");
        let mut data = top.data.clone();
        data.extend_from_slice(&bottom.data);
        Mat { rows: top.rows + bottom.rows, cols: top.cols, data }
    }

    pub fn hstack(left: &Mat, right: &Mat) -> Mat {
        assert_eq!(left.rows, right.rows, "hstack");
        let mut out = Mat::zeros(left.rows, left.cols + right.cols);
        out.set_block(0, 0, left);
        out.set_block(0, left.cols, right);
        out
    }

    /// Integer power by repeated squaring; `k = 0` gives the identity.
    pub fn powi(&self, k: usize) -> Mat {
        assert!(self.is_square());
        let mut result = Mat::identity(self.rows);
        let mut base = self.clone();
        let mut e = k;
        while e > 0 {
            if e & 1 == 1 {
                result = result.matmul(&base);
            }
            e >>= 1;
            if e > 0 {
                base = base.matmul(&base);
            }
        }
        result
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl Add for &Mat {
    type Output = Mat;
    fn add(self, rhs: &Mat) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "add");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &Mat {
    type Output = Mat;
    fn sub(self, rhs: &Mat) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "sub");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Mul for &Mat {
    type Output = Mat;
    fn mul(self, rhs: &Mat) -> Mat {
        self.matmul(rhs)
    }
}

impl Neg for &Mat {
    type Output = Mat;
    fn neg(self) -> Mat {
        self.scale(-1.0)
    }
}

impl AddAssign<&Mat> for Mat {
    fn add_assign(&mut self, rhs: &Mat) {
        self.axpy(1.0, rhs);
    }
}

impl SubAssign<&Mat> for Mat {
    fn sub_assign(&mut self, rhs: &Mat) {
        self.axpy(-1.0, rhs);
    }
}

/// Frobenius norm.
pub fn frob(m: &Mat) -> f64 {
    m.sum_sq().sqrt()
}

/// Spectral norm estimate by power iteration on `M^T M`.
pub fn norm2_est(m: &Mat) -> f64 {
    if m.rows() == 0 || m.cols() == 0 || m.max_abs() == 0.0 {
        return 0.0;
    }
    let n = m.cols();
    // deterministic, mildly non-uniform start vector
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * (i as f64 + 1.0).sqrt()).collect();
    normalize(&mut v);
    let mut sigma = 0.0;
    for _ in 0..500 {
        let mv = m.matvec(&v);
        let mut w = m.t_matvec(&mv);
        let lambda = dot(&w, &v);
        let wn = normalize(&mut w);
        if wn == 0.0 {
            // start vector in the null space; fall back to a coordinate sweep
            return (0..n)
                .map(|j| {
                    let mut e = vec![0.0; n];
                    e[j] = 1.0;
                    m.matvec(&e).iter().map(|x| x * x).sum::<f64>().sqrt()
                })
                .fold(0.0, f64::max);
        }
        let next = lambda.max(0.0).sqrt();
        v = w;
        if (next - sigma).abs() <= 1e-13 * next {
            sigma = next;
            break;
        }
        sigma = next;
    }
    let mv = m.matvec(&v);
    sigma.max(mv.iter().map(|x| x * x).sum::<f64>().sqrt())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn norm1(m: &Mat) -> f64 {
    (0..m.cols()).map(|j| (0..m.rows()).map(|i| m[(i, j)].abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// LU factorization with partial pivoting, packed in place.
struct Lu {
    lu: Mat,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    fn new(m: &Mat) -> Result<Lu> {
        assert!(m.is_square(), "LU of non-square matrix");
        let n = m.rows();
        let mut lu = m.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        let tol = (n as f64) * f64::EPSILON * m.max_abs().max(f64::MIN_POSITIVE);
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmax <= tol {
                return Err(Error::Singular { cond: f64::INFINITY });
            }
            if p != k {
                for j in 0..n {
                    lu.data.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let f = lu[(i, k)] / pivot;
                lu[(i, k)] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu.data[i * n + j] -= f * lu.data[k * n + j];
                    }
                }
            }
        }
        Ok(Lu { lu, perm, sign })
    }

    fn det(&self) -> f64 {
        (0..self.lu.rows()).map(|i| self.lu[(i, i)]).product::<f64>() * self.sign
    }

    fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows();
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s / self.lu[(i, i)];
        }
        x
    }

    fn inverse(&self) -> Mat {
        let n = self.lu.rows();
        let mut inv = Mat::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            inv.set_col(j, &self.solve_vec(&e));
        }
        inv
    }
}

/// Matrix inverse by LU with partial pivoting.
///
/// Fails with [`Error::Singular`] when a pivot underflows or the 1-norm
/// condition estimate exceeds [`MAX_CONDITION`].
pub fn inv(m: &Mat) -> Result<Mat> {
    if !m.is_square() || m.rows() == 0 {
        return Err(Error::DimensionMismatch(format!("inverse of {:?} matrix", m.shape())));
    }
    let lu = Lu::new(m)?;
    let inv = lu.inverse();
    let cond = norm1(m) * norm1(&inv);
    if !cond.is_finite() || cond > MAX_CONDITION || !inv.is_finite() {
        return Err(Error::Singular { cond });
    }
    Ok(inv)
}

/// Solves `M x = b` for square `M`.
pub fn solve(m: &Mat, b: &Mat) -> Result<Mat> {
    if !m.is_square() || m.rows() != b.rows() {
        return Err(Error::DimensionMismatch(format!("solve {:?} \\ {:?}", m.shape(), b.shape())));
    }
    let lu = Lu::new(m)?;
    let mut x = Mat::zeros(b.rows(), b.cols());
    for j in 0..b.cols() {
        x.set_col(j, &lu.solve_vec(&b.col(j)));
    }
    if !x.is_finite() {
        return Err(Error::Singular { cond: f64::INFINITY });
    }
    Ok(x)
}

pub fn det(m: &Mat) -> f64 {
    match Lu::new(m) {
        Ok(lu) => lu.det(),
        Err(_) => 0.0,
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(m: &Mat) -> Result<Mat> {
    assert!(m.is_square());
    let n = m.rows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Singular { cond: f64::INFINITY });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L L^T x = b` given the lower Cholesky factor.
pub fn cholesky_solve(l: &Mat, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub(crate) fn sym_eigvals(m: &Mat) -> Vec<f64> {
    assert!(m.is_square());
    let n = m.rows();
    let mut a = m.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off <= 1e-30 * a.sum_sq().max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

/// Condition number of a symmetric positive semi-definite matrix
/// (`inf` when singular).
pub(crate) fn spd_condition(m: &Mat) -> f64 {
    let ev = sym_eigvals(m);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// `argmin_K ||Y - K X||_F` for `Y: p x s`, `X: q x s`, `s >= q`.
///
/// Solved through the normal equations; fails with
/// [`Error::RankDeficient`] when `X X^T` is too ill-conditioned for them.
pub fn lstsq_right(y: &Mat, x: &Mat) -> Result<Mat> {
    if y.cols() != x.cols() {
        return Err(Error::DimensionMismatch(format!(
            "lstsq_right: Y {:?} and X {:?} differ in sample count",
            y.shape(),
            x.shape()
        )));
    }
    let (q, s) = x.shape();
    if q == 0 {
        return Err(Error::DimensionMismatch("lstsq_right: empty regressor".into()));
    }
    if s < q {
        return Err(Error::Precondition(format!("lstsq_right needs s >= q, got s={s}, q={q}")));
    }
    let gram = x.matmul_t(x);
    let cond = spd_condition(&gram);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::RankDeficient { cond });
    }
    let l = cholesky(&gram).map_err(|_| Error::RankDeficient { cond })?;
    let xy = x.matmul_t(y); // q x p, columns are right-hand sides
    let mut k = Mat::zeros(y.rows(), q);
    for r in 0..y.rows() {
        let col = cholesky_solve(&l, &xy.col(r));
        k.row_mut(r).copy_from_slice(&col);
    }
    if !k.is_finite() {
        return Err(Error::NonFinite("least-squares solution"));
    }
    Ok(k)
}

/// Principal square root by the scaled Denman–Beavers iteration.
///
/// Fails with [`Error::NoPrincipalRoot`] when an iterate turns singular or
/// the final squaring residual exceeds `1e-8` relative; both happen when
/// the spectrum touches the closed negative real axis.
pub fn sqrtm_principal(m: &Mat) -> Result<Mat> {
    if !m.is_square() || m.rows() == 0 {
        return Err(Error::DimensionMismatch(format!("sqrtm of {:?} matrix", m.shape())));
    }
    let n = m.rows();
    let mnorm = frob(m);
    if mnorm == 0.0 {
        return Err(Error::NoPrincipalRoot { residual: 0.0, iterations: 0 });
    }
    let fail = |iterations: usize| Error::NoPrincipalRoot { residual: f64::INFINITY, iterations };

    let mut y = m.clone();
    let mut z = Mat::identity(n);
    let mut scaling = true;
    let mut iterations = 0;
    for k in 0..SQRTM_MAX_ITER {
        iterations = k + 1;
        let ylu = Lu::new(&y).map_err(|_| fail(iterations))?;
        let zlu = Lu::new(&z).map_err(|_| fail(iterations))?;
        let mu = if scaling {
            let d = (ylu.det() * zlu.det()).abs();
            if d > 0.0 && d.is_finite() {
                d.powf(-1.0 / (2.0 * n as f64))
            } else {
                1.0
            }
        } else {
            1.0
        };
        let yinv = ylu.inverse();
        let zinv = zlu.inverse();
        let mut y_next = y.scale(0.5 * mu);
        y_next.axpy(0.5 / mu, &zinv);
        let mut z_next = z.scale(0.5 * mu);
        z_next.axpy(0.5 / mu, &yinv);
        if !y_next.is_finite() || !z_next.is_finite() {
            return Err(fail(iterations));
        }
        let step = frob(&(&y_next - &y)) / frob(&y).max(f64::MIN_POSITIVE);
        y = y_next;
        z = z_next;
        if step < 1e-2 {
            scaling = false;
        }
        if step < SQRTM_STEP_TOL {
            break;
        }
    }
    let residual = frob(&(&y.matmul(&y) - m)) / mnorm;
    if !(residual < SQRTM_RESIDUAL_TOL) {
        return Err(Error::NoPrincipalRoot { residual, iterations });
    }
    Ok(y)
}
