//! ARD squared-exponential kernel with log-space hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, DenseMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub log_variance: f64,
    pub log_lengthscales: Vec<f64>,
}

impl KernelSpec {
    pub fn new(variance: f64, lengthscales: &[f64]) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Domain(format!(
                "kernel variance must be positive, got {variance}"
            )));
        }
        if lengthscales.is_empty() || lengthscales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::Domain("lengthscales must be positive and finite".into()));
        }
        Ok(KernelSpec {
            log_variance: variance.ln(),
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
        })
    }

    /// Unit variance and unit lengthscales.
    pub fn default_for_dim(dim: usize) -> Self {
        KernelSpec {
            log_variance: 0.0,
            log_lengthscales: vec![0.0; dim],
        }
    }

    pub fn from_log(log_variance: f64, log_lengthscales: Vec<f64>) -> Result<Self> {
        if !log_variance.is_finite() || log_lengthscales.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("kernel log-hyperparameters must be finite".into()));
        }
        Ok(KernelSpec {
            log_variance,
            log_lengthscales,
        })
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    pub fn num_params(&self) -> usize {
        1 + self.dim()
    }

    fn check_inputs(&self, x: &DenseMatrix, op: &'static str) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::shape(
                op,
                format!("inputs have {} columns, kernel expects {}", x.cols(), self.dim()),
            ));
        }
        Ok(())
    }
}

/// Inducing locations, one row per inducing point.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingSet {
    z: DenseMatrix,
}

impl InducingSet {
    pub fn new(z: DenseMatrix) -> Result<Self> {
        if z.rows() == 0 {
            return Err(Error::Domain("at least one inducing point is required".into()));
        }
        if !z.is_finite() {
            return Err(Error::Domain("inducing locations must be finite".into()));
        }
        Ok(InducingSet { z })
    }

    pub fn num_inducing(&self) -> usize {
        self.z.rows()
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    pub fn locations(&self) -> &DenseMatrix {
        &self.z
    }

    pub fn locations_mut(&mut self) -> &mut DenseMatrix {
        &mut self.z
    }
}

fn scaled(x: &DenseMatrix, inv_ls: &[f64]) -> DenseMatrix {
    let mut s = x.clone();
    for (d, il) in inv_ls.iter().enumerate() {
        s.col_mut(d).iter_mut().for_each(|v| *v *= il);
    }
    s
}

fn row_sq_norms(x: &DenseMatrix) -> Vec<f64> {
    let mut out = vec![0.0; x.rows()];
    for d in 0..x.cols() {
        for (o, v) in out.iter_mut().zip(x.col(d)) {
            *o += v * v;
        }
    }
    out
}

/// `K(x, y)` of shape `N x M`. When `x` and `y` hold the same values the
/// lower triangle is computed once and mirrored, and the diagonal is set to the
/// variance exactly.
pub fn kernel_matrix(spec: &KernelSpec, x: &DenseMatrix, y: &DenseMatrix) -> Result<DenseMatrix> {
    spec.check_inputs(x, "kernel_matrix")?;
    spec.check_inputs(y, "kernel_matrix")?;
    let var = spec.variance();
    let inv_ls: Vec<f64> = spec.lengthscales().iter().map(|l| 1.0 / l).collect();
    let xs = scaled(x, &inv_ls);
    let same = std::ptr::eq(x, y) || x == y;
    let ys = if same { xs.clone() } else { scaled(y, &inv_ls) };
    let xn = row_sq_norms(&xs);
    let yn = row_sq_norms(&ys);
    let cross = matmul_nt(&xs, &ys)?;
    let entry = |i: usize, j: usize| {
        let d2 = (xn[i] + yn[j] - 2.0 * cross.get(i, j)).max(0.0);
        var * (-0.5 * d2).exp()
    };
    if same {
        let n = x.rows();
        let mut k = DenseMatrix::zeros(n, n);
        for j in 0..n {
            k.set(j, j, var);
            for i in (j + 1)..n {
                let v = entry(i, j);
                k.set(i, j, v);
                k.set(j, i, v);
            }
        }
        Ok(k)
    } else {
        Ok(DenseMatrix::from_fn(x.rows(), y.rows(), entry))
    }
}

/// `k(x_n, x_n)` for each row, which is the variance for this kernel.
pub fn kernel_diag(spec: &KernelSpec, x: &DenseMatrix) -> Vec<f64> {
    vec![spec.variance(); x.rows()]
}

pub fn kuu_with_jitter(spec: &KernelSpec, z: &InducingSet, jitter: f64) -> Result<DenseMatrix> {
    if !(jitter >= 0.0) {
        return Err(Error::Domain(format!("jitter must be non-negative, got {jitter}")));
    }
    let mut k = kernel_matrix(spec, z.locations(), z.locations())?;
    if jitter > 0.0 {
        k.add_scalar_diag(jitter);
    }
    Ok(k)
}

/// Adjoints of the kernel hyperparameters (log-space) and of the first input.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBackward {
    pub d_log_variance: f64,
    pub d_log_lengthscales: Vec<f64>,
    pub d_x: DenseMatrix,
}

/// Pulls an adjoint `g` of `K = kernel_matrix(x, y)` back to the
/// hyperparameters and to `x` (the first argument only).
pub fn kernel_backward(
    spec: &KernelSpec,
    x: &DenseMatrix,
    y: &DenseMatrix,
    k: &DenseMatrix,
    g: &DenseMatrix,
) -> Result<KernelBackward> {
    if k.rows() != x.rows() || k.cols() != y.rows() || g.rows() != k.rows() || g.cols() != k.cols() {
        return Err(Error::shape("kernel_backward", "adjoint does not match kernel matrix"));
    }
    let ls2: Vec<f64> = spec.lengthscales().iter().map(|l| l * l).collect();
    let mut h = k.clone();
    for (hv, gv) in h.data_mut().iter_mut().zip(g.data()) {
        *hv *= gv;
    }
    let d_log_variance = h.data().iter().sum::<f64>();
    let row_sum: Vec<f64> = (0..h.rows())
        .map(|i| (0..h.cols()).map(|j| h.get(i, j)).sum())
        .collect();
    let col_sum: Vec<f64> = (0..h.cols()).map(|j| h.col(j).iter().sum()).collect();
    // (H y)_id = Σ_j H_ij y_jd
    let hy = matmul(&h, y)?;
    let mut d_log_lengthscales = Vec::with_capacity(spec.dim());
    let mut d_x = DenseMatrix::zeros(x.rows(), x.cols());
    for d in 0..spec.dim() {
        let xd = x.col(d);
        let yd = y.col(d);
        let mut s = 0.0;
        for i in 0..x.rows() {
            s += xd[i] * xd[i] * row_sum[i] - 2.0 * xd[i] * hy.get(i, d);
        }
        for j in 0..y.rows() {
            s += yd[j] * yd[j] * col_sum[j];
        }
        d_log_lengthscales.push(s / ls2[d]);
        let out = d_x.col_mut(d);
        for i in 0..x.rows() {
            out[i] = -(xd[i] * row_sum[i] - hy.get(i, d)) / ls2[d];
        }
    }
    Ok(KernelBackward {
        d_log_variance,
        d_log_lengthscales,
        d_x,
    })
}
