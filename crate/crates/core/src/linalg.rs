//! Dense row-major vectors and matrices, plus an exact SVD.
//!
//! The SVD is QR-preconditioned one-sided Jacobi: a tall matrix `A` (m ≥ n)
//! is factored `A = Q R` with Householder reflectors, then Jacobi rotations
//! orthogonalize the columns of `Rᵀ`. Wide inputs are handled through their
//! transpose. A second entry point, [`svd_of_outer_sum`], computes the same
//! decomposition for `Σ_j l_j r_jᵀ` without forming the dense matrix, which is
//! how small-batch gradients are decomposed cheaply.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};

use crate::error::{check_dim, Error, Result};

/// Jacobi sweep cap.
pub const MAX_SWEEPS: usize = 60;
/// Sweep-level stop: off-diagonal mass below this fraction of the first sweep's.
pub const OFF_DIAGONAL_REDUCTION: f64 = 1e-12;

/// A dense vector of `f64`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self { data: vec![0.0; len] }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self { data: s.to_vec() }
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Unit vector in the same direction, or `None` for the zero vector.
    pub fn normalized(&self) -> Option<Vector> {
        let n = norm(self);
        if n > 0.0 && n.is_finite() {
            Some(Vector::new(self.data.iter().map(|v| v / n).collect()))
        } else {
            None
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self { data }
    }
}

/// A dense row-major matrix: `data[i * cols + j]` holds entry `(i, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("Matrix::from_vec", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    ///
    /// Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
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
        libm::sqrt(dot_unchecked(&self.data, &self.data))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) -> Result<()> {
        check_dim("Matrix::add_scaled rows", self.rows, other.rows)?;
        check_dim("Matrix::add_scaled cols", self.cols, other.cols)?;
        axpy(&mut self.data, s, &other.data);
        Ok(())
    }

    /// `self += s * u vᵀ`.
    pub fn add_outer(&mut self, s: f64, u: &[f64], v: &[f64]) -> Result<()> {
        check_dim("Matrix::add_outer rows", self.rows, u.len())?;
        check_dim("Matrix::add_outer cols", self.cols, v.len())?;
        self.add_outer_unchecked(s, u, v);
        Ok(())
    }

    pub(crate) fn add_outer_unchecked(&mut self, s: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(self.rows, u.len());
        debug_assert_eq!(self.cols, v.len());
        for (row, &ui) in self.data.chunks_exact_mut(self.cols).zip(u) {
            let c = s * ui;
            if c != 0.0 {
                axpy(row, c, v);
            }
        }
    }
}

/// `u vᵀ`.
pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(u.len(), v.len());
    m.add_outer_unchecked(1.0, u, v);
    m
}

pub fn dot(u: &[f64], v: &[f64]) -> Result<f64> {
    check_dim("dot", u.len(), v.len())?;
    Ok(dot_unchecked(u, v))
}

pub fn norm(u: &[f64]) -> f64 {
    libm::sqrt(dot_unchecked(u, u))
}

/// `m v`.
pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vector> {
    check_dim("matvec", m.cols, v.len())?;
    let mut out = vec![0.0; m.rows];
    matvec_into(m, v, &mut out);
    Ok(Vector::new(out))
}

/// `mᵀ v`.
pub fn matvec_t(m: &Matrix, v: &[f64]) -> Result<Vector> {
    check_dim("matvec_t", m.rows, v.len())?;
    let mut out = vec![0.0; m.cols];
    matvec_t_into(m, v, &mut out);
    Ok(Vector::new(out))
}

pub(crate) fn matvec_into(m: &Matrix, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.cols, v.len());
    debug_assert_eq!(m.rows, out.len());
    for (o, row) in out.iter_mut().zip(m.data.chunks_exact(m.cols)) {
        *o = dot_unchecked(row, v);
    }
}

pub(crate) fn matvec_t_into(m: &Matrix, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.rows, v.len());
    debug_assert_eq!(m.cols, out.len());
    out.iter_mut().for_each(|o| *o = 0.0);
    for (row, &vi) in m.data.chunks_exact(m.cols).zip(v) {
        if vi != 0.0 {
            axpy(out, vi, row);
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`.
#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c = alpha * a bᵀ + beta * c` where `a` is n×k and `b` is m×k (both row-major).
pub fn gemm_nt(alpha: f64, a: &Matrix, b: &Matrix, beta: f64, c: &mut Matrix) -> Result<()> {
    check_dim("gemm_nt inner", a.cols, b.cols)?;
    check_dim("gemm_nt rows", a.rows, c.rows)?;
    check_dim("gemm_nt cols", b.rows, c.cols)?;
    let (m, k, n) = (a.rows, a.cols, b.rows);
    if m == 0 || n == 0 {
        return Ok(());
    }
    // SAFETY: strides describe the row-major buffers whose lengths were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            1,
            k as isize,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(())
}

/// `c = alpha * aᵀ b + beta * c` where `a` is k×m and `b` is k×n (both row-major).
pub fn gemm_tn(alpha: f64, a: &Matrix, b: &Matrix, beta: f64, c: &mut Matrix) -> Result<()> {
    check_dim("gemm_tn inner", a.rows, b.rows)?;
    check_dim("gemm_tn rows", a.cols, c.rows)?;
    check_dim("gemm_tn cols", b.cols, c.cols)?;
    let (m, k, n) = (a.cols, a.rows, b.cols);
    if m == 0 || n == 0 {
        return Ok(());
    }
    // SAFETY: as in `gemm_nt`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            1,
            m as isize,
            b.data.as_ptr(),
            n as isize,
            1,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(())
}

/// `c = alpha * a b + beta * c` where `a` is m×k and `b` is k×n (both row-major).
pub fn gemm_nn(alpha: f64, a: &Matrix, b: &Matrix, beta: f64, c: &mut Matrix) -> Result<()> {
    check_dim("gemm_nn inner", a.cols, b.rows)?;
    check_dim("gemm_nn rows", a.rows, c.rows)?;
    check_dim("gemm_nn cols", b.cols, c.cols)?;
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return Ok(());
    }
    // SAFETY: as in `gemm_nt`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            n as isize,
            1,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(())
}

/// Row-major `c = a bᵀ` on raw slices: `a` is m×k, `b` is n×k, `c` is m×n.
pub(crate) fn gemm_nt_slices(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the assertion above bounds every access implied by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Singular triples sorted by descending singular value.
///
/// Only numerically nonzero singular values are kept, so `rank()` may be
/// smaller than `min(rows, cols)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    pub u: Vec<Vector>,
    pub s: Vec<f64>,
    pub v: Vec<Vector>,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `Σ_{p < k} s_p u_p v_pᵀ` into a matrix of the original shape.
    pub fn reconstruct_top(&self, rows: usize, cols: usize, k: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for p in 0..k.min(self.rank()) {
            m.add_outer_unchecked(self.s[p], &self.u[p], &self.v[p]);
        }
        m
    }

    pub fn reconstruct(&self, rows: usize, cols: usize) -> Matrix {
        self.reconstruct_top(rows, cols, self.rank())
    }

    fn empty() -> Self {
        Self {
            u: Vec::new(),
            s: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// Householder QR of a tall matrix held as `n` contiguous columns of length `m`.
struct HouseholderQr {
    m: usize,
    n: usize,
    /// Factored columns: entries on/above the diagonal are `R`, the rest scratch.
    cols: Vec<f64>,
    /// Reflector `k` acts on indices `k..m`; `betas[k] == 0` means identity.
    reflectors: Vec<Vec<f64>>,
    betas: Vec<f64>,
}

impl HouseholderQr {
    fn factor(mut cols: Vec<f64>, m: usize, n: usize) -> Self {
        debug_assert!(m >= n);
        debug_assert_eq!(cols.len(), m * n);
        let mut reflectors = Vec::with_capacity(n);
        let mut betas = Vec::with_capacity(n);
        for k in 0..n {
            let x = &cols[k * m + k..(k + 1) * m];
            let xnorm = norm(x);
            if xnorm == 0.0 {
                reflectors.push(Vec::new());
                betas.push(0.0);
                continue;
            }
            let alpha = if x[0] >= 0.0 { -xnorm } else { xnorm };
            let mut v = x.to_vec();
            v[0] -= alpha;
            let vv = dot_unchecked(&v, &v);
            let beta = if vv > 0.0 { 2.0 / vv } else { 0.0 };
            cols[k * m + k] = alpha;
            cols[k * m + k + 1..(k + 1) * m].iter_mut().for_each(|e| *e = 0.0);
            if beta != 0.0 {
                for j in k + 1..n {
                    let y = &mut cols[j * m + k..(j + 1) * m];
                    let t = beta * dot_unchecked(&v, y);
                    axpy(y, -t, &v);
                }
            }
            reflectors.push(v);
            betas.push(beta);
        }
        Self {
            m,
            n,
            cols,
            reflectors,
            betas,
        }
    }

    /// `R` as n×n row-major.
    fn r_rows(&self) -> Vec<f64> {
        let n = self.n;
        let mut r = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                r[i * n + j] = self.cols[j * self.m + i];
            }
        }
        r
    }

    /// `Q [y; 0]` for `y` of length n.
    fn apply_q(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        out[..self.n].copy_from_slice(y);
        for k in (0..self.n).rev() {
            let beta = self.betas[k];
            if beta == 0.0 {
                continue;
            }
            let v = &self.reflectors[k];
            let seg = &mut out[k..];
            let t = beta * dot_unchecked(v, seg);
            axpy(seg, -t, v);
        }
        out
    }
}

/// One-sided Jacobi on the `n` contiguous length-`n` columns of `w`.
///
/// On return the columns of `w` are mutually orthogonal and `vacc` (also
/// column-contiguous) holds the accumulated rotation.
fn jacobi_orthogonalize(w: &mut [f64], vacc: &mut [f64], n: usize) -> Result<()> {
    let tol = f64::EPSILON * (n.max(1) as f64);
    // Rotations preserve the Frobenius norm; a column below this is numerically zero.
    let frob_sq: f64 = w.iter().map(|x| x * x).sum();
    if !frob_sq.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    let floor = f64::EPSILON * f64::EPSILON * frob_sq;
    let mut first_off: Option<f64> = None;
    let mut last_off = 0.0;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                let (wp, wq) = pair_mut(w, n, p, q);
                let app = dot_unchecked(wp, wp);
                let aqq = dot_unchecked(wq, wq);
                let apq = dot_unchecked(wp, wq);
                if apq == 0.0 || app <= floor || aqq <= floor {
                    continue;
                }
                off += apq * apq;
                if apq.abs() <= tol * libm::sqrt(app) * libm::sqrt(aqq) {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = libm::copysign(1.0, zeta) / (zeta.abs() + libm::hypot(1.0, zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(wp, wq, c, s);
                let (vp, vq) = pair_mut(vacc, n, p, q);
                rotate(vp, vq, c, s);
            }
        }
        last_off = libm::sqrt(off);
        if !rotated {
            return Ok(());
        }
        match first_off {
            None => first_off = Some(last_off),
            Some(f0) if last_off <= OFF_DIAGONAL_REDUCTION * f0 => return Ok(()),
            _ => {}
        }
    }
    Err(Error::NoConvergence {
        sweeps: MAX_SWEEPS,
        residual: last_off,
    })
}

fn pair_mut(buf: &mut [f64], len: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (head, tail) = buf.split_at_mut(q * len);
    (&mut head[p * len..(p + 1) * len], &mut tail[..len])
}

#[inline]
fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xa, yb) = (*x, *y);
        *x = c * xa - s * yb;
        *y = s * xa + c * yb;
    }
}

/// Raw triples of a tall matrix: (left of length m, sigma, right of length n).
struct TallSvd {
    left: Vec<Vec<f64>>,
    sigma: Vec<f64>,
    right: Vec<Vec<f64>>,
}

/// SVD of the tall m×n matrix given by its columns (m ≥ n).
fn svd_tall(cols: Vec<f64>, m: usize, n: usize) -> Result<TallSvd> {
    let qr = HouseholderQr::factor(cols, m, n);
    // Columns of Rᵀ are the rows of R.
    let mut w = qr.r_rows();
    let mut vacc = vec![0.0; n * n];
    for i in 0..n {
        vacc[i * n + i] = 1.0;
    }
    jacobi_orthogonalize(&mut w, &mut vacc, n)?;

    // Rᵀ = U' Σ V'ᵀ, so A = Q R = (Q V') Σ U'ᵀ.
    let mut sigma: Vec<(usize, f64)> = (0..n)
        .map(|p| (p, norm(&w[p * n..(p + 1) * n])))
        .collect();
    sigma.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(core::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    let smax = sigma.first().map_or(0.0, |s| s.1);
    let cutoff = smax * (m.max(n) as f64) * f64::EPSILON;

    let mut out = TallSvd {
        left: Vec::new(),
        sigma: Vec::new(),
        right: Vec::new(),
    };
    for &(p, s) in &sigma {
        if s.is_nan() || s <= cutoff || s == 0.0 {
            break;
        }
        let right: Vec<f64> = w[p * n..(p + 1) * n].iter().map(|x| x / s).collect();
        let mut left = qr.apply_q(&vacc[p * n..(p + 1) * n]);
        // Reflectors are orthogonal; renormalize to wash out rounding.
        let ln = norm(&left);
        left.iter_mut().for_each(|x| *x /= ln);
        out.left.push(left);
        out.sigma.push(s);
        out.right.push(right);
    }
    Ok(out)
}

/// Flip each pair so the largest-magnitude entry of `v_p` is positive.
fn fix_signs(res: &mut SvdResult) {
    for (u, v) in res.u.iter_mut().zip(res.v.iter_mut()) {
        let mut best = 0usize;
        for (i, x) in v.iter().enumerate() {
            if x.abs() > v[best].abs() {
                best = i;
            }
        }
        if !v.is_empty() && v[best] < 0.0 {
            u.scale(-1.0);
            v.scale(-1.0);
        }
    }
}

/// Exact thin SVD of `m`.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::Dimension {
            op: "svd",
            expected: 1,
            got: 0,
        });
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    let mut res = if m.rows >= m.cols {
        let t = m.transpose();
        let raw = svd_tall(t.data, m.rows, m.cols)?;
        SvdResult {
            u: raw.left.into_iter().map(Vector::new).collect(),
            s: raw.sigma,
            v: raw.right.into_iter().map(Vector::new).collect(),
        }
    } else {
        // Mᵀ is tall and its columns are the rows of M.
        let raw = svd_tall(m.data.clone(), m.cols, m.rows)?;
        SvdResult {
            u: raw.right.into_iter().map(Vector::new).collect(),
            s: raw.sigma,
            v: raw.left.into_iter().map(Vector::new).collect(),
        }
    };
    fix_signs(&mut res);
    Ok(res)
}

/// Exact SVD of `scale · Σ_j lefts[j] rights[j]ᵀ` (an a×b matrix).
///
/// When the number of terms is below `min(a, b)` the factors are reduced by
/// QR and only an n×n core is decomposed; otherwise the dense sum is formed.
pub fn svd_of_outer_sum(scale: f64, lefts: &[&[f64]], rights: &[&[f64]]) -> Result<SvdResult> {
    check_dim("svd_of_outer_sum terms", lefts.len(), rights.len())?;
    let n = lefts.len();
    if n == 0 {
        return Ok(SvdResult::empty());
    }
    let a = lefts[0].len();
    let b = rights[0].len();
    for (l, r) in lefts.iter().zip(rights) {
        check_dim("svd_of_outer_sum left", a, l.len())?;
        check_dim("svd_of_outer_sum right", b, r.len())?;
    }
    if !scale.is_finite() || !lefts.iter().chain(rights).all(|t| t.iter().all(|x| x.is_finite())) {
        return Err(Error::NonFinite("svd input"));
    }
    if n >= a.min(b) {
        let mut dense = Matrix::zeros(a, b);
        for (l, r) in lefts.iter().zip(rights) {
            dense.add_outer_unchecked(scale, l, r);
        }
        return svd(&dense);
    }

    let lq = HouseholderQr::factor(lefts.concat(), a, n);
    let rq = HouseholderQr::factor(rights.concat(), b, n);
    let rl = lq.r_rows();
    let rr = rq.r_rows();
    // core = scale · R_L R_Rᵀ
    let mut core = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            core.data[i * n + j] = scale * dot_unchecked(&rl[i * n..(i + 1) * n], &rr[j * n..(j + 1) * n]);
        }
    }
    let inner = svd(&core)?;
    let mut res = SvdResult::empty();
    for p in 0..inner.rank() {
        let mut u = lq.apply_q(&inner.u[p]);
        let mut v = rq.apply_q(&inner.v[p]);
        let (un, vn) = (norm(&u), norm(&v));
        u.iter_mut().for_each(|x| *x /= un);
        v.iter_mut().for_each(|x| *x /= vn);
        res.u.push(Vector::new(u));
        res.s.push(inner.s[p]);
        res.v.push(Vector::new(v));
    }
    fix_signs(&mut res);
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn outer_examples() {
        assert_eq!(outer(&[1.0, 0.0], &[0.0, 1.0]), Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]));
        assert_eq!(outer(&[2.0], &[3.0]), Matrix::from_rows(&[&[6.0]]));
        assert_eq!(outer(&[1.0, 2.0], &[3.0, 4.0]), Matrix::from_rows(&[&[3.0, 4.0], &[6.0, 8.0]]));
    }

    #[test]
    fn dot_and_norm_examples() {
        assert_eq!(dot(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(dot(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert_eq!(dot(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert!(matches!(dot(&[1.0], &[1.0, 2.0]), Err(Error::Dimension { .. })));
        assert_eq!(norm(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(norm(&[3.0, 4.0]), 5.0);
        let u = Vector::new(vec![1.0, 2.0, -2.0, 0.5]).normalized().unwrap();
        assert!(approx(norm(&u), 1.0, 1e-12));
    }

    #[test]
    fn matvec_examples() {
        let id = Matrix::identity(2);
        assert_eq!(matvec(&id, &[5.0, 7.0]).unwrap().as_slice(), &[5.0, 7.0]);
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matvec(&m, &[1.0, 1.0]).unwrap().as_slice(), &[3.0, 7.0]);
        assert_eq!(matvec_t(&m, &[1.0, 0.0]).unwrap().as_slice(), &[1.0, 2.0]);
        assert!(matvec(&m, &[1.0]).is_err());
        assert!(matvec_t(&m, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn svd_diagonal() {
        let m = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        let r = svd(&m).unwrap();
        assert_eq!(r.rank(), 2);
        assert!(approx(r.s[0], 3.0, 1e-14) && approx(r.s[1], 1.0, 1e-14));
        assert!(approx(r.u[0][0].abs(), 1.0, 1e-14) && approx(r.v[0][0], 1.0, 1e-14));
        assert!(approx(r.u[1][1].abs(), 1.0, 1e-14) && approx(r.v[1][1], 1.0, 1e-14));
    }

    #[test]
    fn svd_rank_one() {
        // |u0| = 2, |v0| = 3
        let u0 = [0.0, 1.2, -1.6];
        let v0 = [2.0, 1.0, 2.0, 0.0];
        let r = svd(&outer(&u0, &v0)).unwrap();
        assert_eq!(r.rank(), 1);
        assert!(approx(r.s[0], 6.0, 1e-12));
        assert!(approx(dot_unchecked(&r.u[0], &u0).abs(), 2.0, 1e-12));
        assert!(approx(dot_unchecked(&r.v[0], &v0).abs(), 3.0, 1e-12));
    }

    #[test]
    fn svd_zero_matrix_has_rank_zero() {
        let r = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(r.rank(), 0);
    }

    #[test]
    fn svd_rejects_empty_and_nan() {
        assert!(svd(&Matrix::zeros(0, 3)).is_err());
        let mut m = Matrix::zeros(2, 2);
        m.set(0, 1, f64::NAN);
        assert!(matches!(svd(&m), Err(Error::NonFinite(_))));
        let x = [1.0, f64::INFINITY];
        let d = [1.0, 2.0, 3.0];
        assert!(matches!(svd_of_outer_sum(1.0, &[&d], &[&x]), Err(Error::NonFinite(_))));
        let huge = Matrix::from_rows(&[&[1e200, 1e200], &[1e200, -1e200]]);
        assert!(matches!(svd(&huge), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sign_convention_largest_v_entry_positive() {
        let m = Matrix::from_rows(&[&[1.0, -4.0, 0.5], &[0.2, -3.0, 1.0]]);
        let r = svd(&m).unwrap();
        for v in &r.v {
            let big = v.iter().cloned().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn outer_sum_matches_dense() {
        let lefts: [&[f64]; 2] = [&[1.0, 0.5, -0.3, 2.0], &[0.1, -1.0, 0.7, 0.0]];
        let rights: [&[f64]; 2] = [&[0.3, -0.2, 1.0, 0.4, 0.0], &[1.5, 0.0, -0.6, 0.2, 0.9]];
        let fac = svd_of_outer_sum(0.5, &lefts, &rights).unwrap();
        let mut dense = Matrix::zeros(4, 5);
        dense.add_outer(0.5, lefts[0], rights[0]).unwrap();
        dense.add_outer(0.5, lefts[1], rights[1]).unwrap();
        let full = svd(&dense).unwrap();
        assert_eq!(fac.rank(), 2);
        for p in 0..2 {
            assert!(approx(fac.s[p], full.s[p], 1e-12));
            for (a, b) in fac.v[p].iter().zip(full.v[p].iter()) {
                assert!(approx(*a, *b, 1e-10));
            }
            for (a, b) in fac.u[p].iter().zip(full.u[p].iter()) {
                assert!(approx(*a, *b, 1e-10));
            }
        }
    }

    #[test]
    fn jacobi_handles_a_negligible_column() {
        // The pair product underflows and zeta squared overflows.
        let mut w = vec![1.0, 1e-160, 1e-160, 1e-160];
        let mut vacc = vec![1.0, 0.0, 0.0, 1.0];
        jacobi_orthogonalize(&mut w, &mut vacc, 2).unwrap();
        assert!(approx(norm(&w[..2]), 1.0, 1e-15));
        assert!(norm(&w[2..]) < 1e-150);
    }

    #[test]
    fn outer_sum_with_repeated_and_tiny_terms() {
        let x = [0.3, -1.0, 0.5, 0.0, 2.0];
        let d = [1.0, 0.25, -0.5, 0.75];
        let tiny: Vec<f64> = x.iter().map(|v| v * 1e-170 + 1e-175).collect();
        let lefts: Vec<&[f64]> = vec![&d, &d, &d];
        let rights: Vec<&[f64]> = vec![&x, &x, &tiny];
        let res = svd_of_outer_sum(1.0 / 3.0, &lefts, &rights).unwrap();
        let want = norm(&x) * norm(&d) * (2.0 / 3.0);
        assert!(approx(res.s[0], want, 1e-12 * want));
    }

    #[test]
    fn gemm_wrappers() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let b = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let mut c = Matrix::zeros(3, 2);
        gemm_nt(1.0, &a, &b, 0.0, &mut c).unwrap();
        assert_eq!(c, a);
        let mut g = Matrix::zeros(2, 2);
        gemm_tn(1.0, &a, &a, 0.0, &mut g).unwrap();
        assert_eq!(g, Matrix::from_rows(&[&[35.0, 44.0], &[44.0, 56.0]]));
        let sq = Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 2.0]]);
        let mut p = Matrix::zeros(3, 2);
        gemm_nn(1.0, &a, &sq, 0.0, &mut p).unwrap();
        assert_eq!(p, Matrix::from_rows(&[&[1.0, 5.0], &[3.0, 11.0], &[5.0, 17.0]]));
        assert!(gemm_nn(1.0, &sq, &a, 0.0, &mut p).is_err());
    }
}
