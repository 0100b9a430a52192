//! Dense real linear algebra.
//!
//! Every matrix is stored column-major: entry `(i, j)` of an `r x c` matrix
//! lives at `data[i + j * r]`. There are no strided views; transposes are
//! materialised.
//!
//! Cholesky factorisation and triangular solves are counted per thread so that
//! callers can assert a code path is free of matrix decompositions (see
//! [`factorisation_counts`]).

use std::cell::Cell;
use std::sync::OnceLock;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Environment variable capping the number of threads used inside `matmul`.
pub const THREADS_ENV: &str = "IFSVGP_THREADS";

const PARALLEL_MIN_FLOPS: usize = 1 << 21;

thread_local! {
    static CHOLESKY_CALLS: Cell<u64> = const { Cell::new(0) };
    static TRI_SOLVE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of factorisation-type calls made on the current thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FactorisationCounts {
    pub cholesky: u64,
    pub tri_solve: u64,
}

impl FactorisationCounts {
    pub fn total(&self) -> u64 {
        self.cholesky + self.tri_solve
    }
}

pub fn factorisation_counts() -> FactorisationCounts {
    FactorisationCounts {
        cholesky: CHOLESKY_CALLS.with(Cell::get),
        tri_solve: TRI_SOLVE_CALLS.with(Cell::get),
    }
}

pub fn reset_factorisation_counts() {
    CHOLESKY_CALLS.with(|c| c.set(0));
    TRI_SOLVE_CALLS.with(|c| c.set(0));
}

fn thread_pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let cap: usize = std::env::var(THREADS_ENV).ok()?.trim().parse().ok()?;
        if cap <= 1 {
            return None;
        }
        rayon::ThreadPoolBuilder::new().num_threads(cap).build().ok()
    })
    .as_ref()
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Compensated dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    compensated_sum(a.iter().zip(b).map(|(x, y)| x * y))
}

// Plain four-accumulator dot used inside matrix products.
#[inline]
fn fast_dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = 4 * c;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i + i * n] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i + i * n] = *d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    /// Builds a matrix from column-major storage.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "from_col_major",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("matrix entries must be finite".into()));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds a matrix from a list of rows (convenient for literals).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        let m = Self::from_fn(r, c, |i, j| rows[i][j]);
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("matrix entries must be finite".into()));
        }
        Ok(m)
    }

    pub fn column_vector(values: &[f64]) -> Self {
        DenseMatrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Column-major storage.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i + j * self.rows]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i + j * self.rows] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i + j * self.rows] += v;
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        let r = self.rows;
        &mut self.data[j * r..(j + 1) * r]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.cols).map(|j| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        compensated_sum(self.diagonal())
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    fn check_same_shape(&self, other: &DenseMatrix, op: &'static str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_same_shape(other, "add")?;
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_same_shape(other, "sub")?;
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &DenseMatrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add_diag(&mut self, values: &[f64]) -> Result<()> {
        if !self.is_square() || values.len() != self.rows {
            return Err(Error::shape("add_diag", "diagonal length mismatch"));
        }
        for (i, v) in values.iter().enumerate() {
            self.add_at(i, i, *v);
        }
        Ok(())
    }

    pub fn add_scalar_diag(&mut self, v: f64) {
        for i in 0..self.rows.min(self.cols) {
            self.add_at(i, i, v);
        }
    }

    /// Replaces the matrix by `(A + Aᵀ) / 2`.
    pub fn symmetrize(&mut self) {
        let n = self.rows;
        debug_assert!(self.is_square());
        for j in 0..n {
            for i in (j + 1)..n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                self.set(i, j, v);
                self.set(j, i, v);
            }
        }
    }

    /// `Σ_ij A_ij B_ij`
    pub fn frobenius_inner(&self, other: &DenseMatrix) -> Result<f64> {
        self.check_same_shape(other, "frobenius_inner")?;
        Ok(dot(&self.data, &other.data))
    }

    /// Matrix–vector product.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(
                "matvec",
                format!("{}x{} times vector of length {}", self.rows, self.cols, x.len()),
            ));
        }
        let mut y = vec![0.0; self.rows];
        for (j, xj) in x.iter().enumerate() {
            if *xj == 0.0 {
                continue;
            }
            for (yi, aij) in y.iter_mut().zip(self.col(j)) {
                *yi += aij * xj;
            }
        }
        Ok(y)
    }

    /// `Aᵀ x`
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::shape(
                "matvec_t",
                format!(
                    "{}x{} transposed times vector of length {}",
                    self.rows,
                    self.cols,
                    x.len()
                ),
            ));
        }
        Ok((0..self.cols).map(|j| fast_dot(self.col(j), x)).collect())
    }

    /// `x = Aᵀ` applied column by column to `b`: returns `AᵀB`.
    pub fn t_matmul(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        matmul_tn(self, b)
    }

    pub fn matmul(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        matmul(self, b)
    }
}

fn gemm_column(a: &DenseMatrix, b_col: &[f64], out: &mut [f64]) {
    let m = a.rows;
    let k = a.cols;
    let chunks = k / 4;
    for c in 0..chunks {
        let p = 4 * c;
        let (b0, b1, b2, b3) = (b_col[p], b_col[p + 1], b_col[p + 2], b_col[p + 3]);
        let a0 = &a.data[p * m..(p + 1) * m];
        let a1 = &a.data[(p + 1) * m..(p + 2) * m];
        let a2 = &a.data[(p + 2) * m..(p + 3) * m];
        let a3 = &a.data[(p + 3) * m..(p + 4) * m];
        for i in 0..m {
            out[i] += a0[i] * b0 + a1[i] * b1 + a2[i] * b2 + a3[i] * b3;
        }
    }
    for p in 4 * chunks..k {
        let bp = b_col[p];
        let ap = &a.data[p * m..(p + 1) * m];
        for i in 0..m {
            out[i] += ap[i] * bp;
        }
    }
}

/// Dense product `A·B`.
///
/// The reduction order is fixed per output column, so results are identical
/// regardless of the thread cap.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut c = DenseMatrix::zeros(a.rows, b.cols);
    if a.rows == 0 || b.cols == 0 {
        return Ok(c);
    }
    let flops = a.rows * a.cols * b.cols;
    match thread_pool() {
        Some(pool) if flops >= PARALLEL_MIN_FLOPS => pool.install(|| {
            c.data
                .par_chunks_mut(a.rows)
                .enumerate()
                .for_each(|(j, out)| gemm_column(a, b.col(j), out));
        }),
        _ => {
            let m = a.rows;
            for j in 0..b.cols {
                gemm_column(a, b.col(j), &mut c.data[j * m..(j + 1) * m]);
            }
        }
    }
    Ok(c)
}

/// `Aᵀ·B`
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_tn",
            format!("({}x{})ᵀ times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    Ok(DenseMatrix::from_fn(a.cols, b.cols, |i, j| {
        fast_dot(a.col(i), b.col(j))
    }))
}

/// `A·Bᵀ`
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_nt",
            format!("{}x{} times ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    matmul(a, &b.transpose())
}

/// `A · diag(d) · Aᵀ` for `A` of shape `m x n` and `d` of length `n`.
pub fn weighted_gram(a: &DenseMatrix, d: &[f64]) -> Result<DenseMatrix> {
    if d.len() != a.cols {
        return Err(Error::shape("weighted_gram", "weight length mismatch"));
    }
    let mut scaled = a.clone();
    for (j, dj) in d.iter().enumerate() {
        scaled.col_mut(j).iter_mut().for_each(|v| *v *= dj);
    }
    let mut g = matmul_nt(&scaled, a)?;
    g.symmetrize();
    Ok(g)
}

pub fn frobenius(a: &DenseMatrix) -> f64 {
    compensated_sum(a.data.iter().map(|v| v * v)).sqrt()
}

/// Keeps entries with `i >= j`.
pub fn tril_mask(a: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows, a.cols, |i, j| if i >= j { a.get(i, j) } else { 0.0 })
}

/// Keeps only the diagonal.
pub fn diag_part(a: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows, a.cols, |i, j| if i == j { a.get(i, j) } else { 0.0 })
}

/// Square lower-triangular matrix; entries above the diagonal are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular {
    inner: DenseMatrix,
}

impl LowerTriangular {
    /// Zeroes the strictly upper part of a square matrix.
    pub fn from_dense_masked(a: &DenseMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::shape("LowerTriangular", "matrix must be square"));
        }
        Ok(LowerTriangular { inner: tril_mask(a) })
    }

    /// Rejects inputs with non-zero strictly-upper entries.
    pub fn from_dense(a: DenseMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::shape("LowerTriangular", "matrix must be square"));
        }
        let n = a.rows;
        for j in 0..n {
            for i in 0..j {
                if a.get(i, j) != 0.0 {
                    return Err(Error::Domain(format!("entry ({i},{j}) above the diagonal is non-zero")));
                }
            }
        }
        Ok(LowerTriangular { inner: a })
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, beta: f64) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        m.add_scalar_diag(beta);
        LowerTriangular { inner: m }
    }

    pub fn dim(&self) -> usize {
        self.inner.rows
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner.get(i, j)
    }

    pub fn as_dense(&self) -> &DenseMatrix {
        &self.inner
    }

    pub fn into_dense(self) -> DenseMatrix {
        self.inner
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.inner.diagonal()
    }

    pub fn has_positive_diagonal(&self) -> bool {
        self.diagonal().iter().all(|d| *d > 0.0)
    }

    /// `log |L Lᵀ| = 2 Σ log L_ii`; requires a positive diagonal.
    pub fn log_det_gram(&self) -> f64 {
        2.0 * compensated_sum(self.diagonal().into_iter().map(f64::ln))
    }

    /// `L·B`, skipping the structural zeros.
    pub fn matmul(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        let n = self.dim();
        if b.rows != n {
            return Err(Error::shape(
                "lower_matmul",
                format!("{n}x{n} times {}x{}", b.rows, b.cols),
            ));
        }
        let mut c = DenseMatrix::zeros(n, b.cols);
        for j in 0..b.cols {
            let bj = b.col(j);
            let out = &mut c.data[j * n..(j + 1) * n];
            for (k, bkj) in bj.iter().enumerate() {
                if *bkj == 0.0 {
                    continue;
                }
                let lk = self.inner.col(k);
                for i in k..n {
                    out[i] += lk[i] * bkj;
                }
            }
        }
        Ok(c)
    }

    /// `Lᵀ·B`, skipping the structural zeros.
    pub fn t_matmul(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        let n = self.dim();
        if b.rows != n {
            return Err(Error::shape(
                "lower_t_matmul",
                format!("({n}x{n})ᵀ times {}x{}", b.rows, b.cols),
            ));
        }
        Ok(DenseMatrix::from_fn(n, b.cols, |i, j| {
            fast_dot(&self.inner.col(i)[i..], &b.col(j)[i..])
        }))
    }

    /// `L Lᵀ`, exactly symmetric.
    pub fn gram(&self) -> DenseMatrix {
        let n = self.dim();
        let mut t = DenseMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                // rows i and j of L overlap on columns 0..=j
                let mut s = 0.0;
                for k in 0..=j {
                    s += self.inner.get(i, k) * self.inner.get(j, k);
                }
                t.set(i, j, s);
                t.set(j, i, s);
            }
        }
        t
    }
}

/// Cholesky factor `G` with `G Gᵀ = A`. Only the lower triangle of `a` is read.
pub fn cholesky(a: &DenseMatrix) -> Result<LowerTriangular> {
    CHOLESKY_CALLS.with(|c| c.set(c.get() + 1));
    if !a.is_square() {
        return Err(Error::shape("cholesky", "matrix must be square"));
    }
    let n = a.rows;
    let mut g = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= g.get(j, k) * g.get(j, k);
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        g.set(j, j, djj);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= g.get(i, k) * g.get(j, k);
            }
            g.set(i, j, s / djj);
        }
    }
    Ok(LowerTriangular { inner: g })
}

/// Solves `G X = B` (or `Gᵀ X = B` when `transpose` is set).
pub fn tri_solve(g: &LowerTriangular, b: &DenseMatrix, transpose: bool) -> Result<DenseMatrix> {
    TRI_SOLVE_CALLS.with(|c| c.set(c.get() + 1));
    let n = g.dim();
    if b.rows != n {
        return Err(Error::shape(
            "tri_solve",
            format!("{n}x{n} against {}x{}", b.rows, b.cols),
        ));
    }
    if let Some(idx) = g.diagonal().iter().position(|d| *d == 0.0) {
        return Err(Error::Singular { index: idx });
    }
    let l = &g.inner;
    let mut x = b.clone();
    for j in 0..b.cols {
        let col = x.col_mut(j);
        if !transpose {
            for k in 0..n {
                let v = col[k] / l.get(k, k);
                col[k] = v;
                if v != 0.0 {
                    let lk = l.col(k);
                    for i in (k + 1)..n {
                        col[i] -= lk[i] * v;
                    }
                }
            }
        } else {
            for k in (0..n).rev() {
                let lk = l.col(k);
                let s = fast_dot(&lk[k + 1..], &col[k + 1..]);
                col[k] = (col[k] - s) / lk[k];
            }
        }
    }
    Ok(x)
}

/// Rademacher (±1) probe vectors, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeBatch {
    entries: DenseMatrix,
}

impl ProbeBatch {
    pub fn rademacher<R: Rng + ?Sized>(dim: usize, num_probes: usize, rng: &mut R) -> Result<Self> {
        if num_probes == 0 {
            return Err(Error::Config("at least one probe is required".into()));
        }
        let entries = DenseMatrix::from_fn(dim, num_probes, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        Ok(ProbeBatch { entries })
    }

    pub fn from_matrix(entries: DenseMatrix) -> Result<Self> {
        if entries.cols() == 0 {
            return Err(Error::Config("at least one probe is required".into()));
        }
        if entries.data().iter().any(|v| *v != 1.0 && *v != -1.0) {
            return Err(Error::Domain("probe entries must be ±1".into()));
        }
        Ok(ProbeBatch { entries })
    }

    pub fn dim(&self) -> usize {
        self.entries.rows()
    }

    pub fn num_probes(&self) -> usize {
        self.entries.cols()
    }

    pub fn as_matrix(&self) -> &DenseMatrix {
        &self.entries
    }

    /// `Z Zᵀ / K`, the matrix whose trace against `A` equals the estimate.
    pub fn outer_mean(&self) -> DenseMatrix {
        let mut w = matmul_nt(&self.entries, &self.entries).expect("probe shapes agree");
        w.scale_in_place(1.0 / self.num_probes() as f64);
        w
    }
}

/// Hutchinson estimate `(1/K) Σ_k z_kᵀ (A z_k)`, where `apply` maps the
/// `dim x K` probe block to `A Z`.
pub fn hutchinson_trace<F>(apply: F, probes: &ProbeBatch) -> Result<f64>
where
    F: FnOnce(&DenseMatrix) -> Result<DenseMatrix>,
{
    let z = probes.as_matrix();
    let az = apply(z)?;
    if az.rows() != z.rows() || az.cols() != z.cols() {
        return Err(Error::shape(
            "hutchinson_trace",
            format!(
                "probe block {}x{} mapped to {}x{}",
                z.rows(),
                z.cols(),
                az.rows(),
                az.cols()
            ),
        ));
    }
    let per_probe = (0..z.cols()).map(|k| dot(z.col(k), az.col(k)));
    Ok(compensated_sum(per_probe) / z.cols() as f64)
}
