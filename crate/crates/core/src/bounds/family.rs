//! Pieces shared by the `L` and `R` flavors once a symmetric surrogate `P` for
//! `K̃⁻¹` is available. Matrix products only.

use crate::error::Result;
use crate::likelihood::Likelihood;
use crate::linalg::{matmul, DenseMatrix};

use super::{column_dots, data_fit, outer, weighted_outer, DataFit, KernelQuantities, Marginals};

/// `a = Q m̃`, or `m̃` when there is no preconditioner.
pub(crate) fn mean_vector(q: Option<&DenseMatrix>, m_tilde: &[f64]) -> Result<Vec<f64>> {
    match q {
        Some(q) => q.matvec(m_tilde),
        None => Ok(m_tilde.to_vec()),
    }
}

/// `μ = Kufᵀ a`, `σ² = k_ff − diag(Kufᵀ P Kuf)`; also returns `P Kuf`.
pub(crate) fn predict(p: &DenseMatrix, a: &[f64], kq: &KernelQuantities) -> Result<(Marginals, DenseMatrix)> {
    let mu = kq.kuf.matvec_t(a)?;
    let pkuf = matmul(p, &kq.kuf)?;
    let quad = column_dots(&kq.kuf, &pkuf);
    let var = kq.kff.iter().zip(&quad).map(|(k, q)| k - q).collect();
    Ok((Marginals { mu, var }, pkuf))
}

pub(crate) struct Forward {
    pub a: Vec<f64>,
    pub kuu_a: Vec<f64>,
    pub pkuf: DenseMatrix,
    pub fit: DataFit,
    /// `½(−tr(P K_uu W) + aᵀ K_uu a − log|S̃|)`
    pub kl_common: f64,
}

pub(crate) struct Inputs<'a> {
    pub kq: &'a KernelQuantities,
    pub p: &'a DenseMatrix,
    pub mean_q: Option<&'a DenseMatrix>,
    pub m_tilde: &'a [f64],
    pub log_s: &'a [f64],
    /// Probe outer-product `Z Zᵀ / K`; `None` means the identity.
    pub weights: Option<&'a DenseMatrix>,
    pub lik: &'a Likelihood,
    pub y: &'a [f64],
    pub scale: f64,
}

/// `tr(A B W)` for symmetric `A`, `B`, `W`.
pub(crate) fn weighted_trace(a: &DenseMatrix, b: &DenseMatrix, w: Option<&DenseMatrix>) -> Result<f64> {
    match w {
        None => a.frobenius_inner(b),
        Some(w) => a.frobenius_inner(&matmul(b, w)?),
    }
}

pub(crate) fn forward(inp: &Inputs<'_>) -> Result<Forward> {
    let a = mean_vector(inp.mean_q, inp.m_tilde)?;
    let (marg, pkuf) = predict(inp.p, &a, inp.kq)?;
    let fit = data_fit(inp.lik, inp.y, &marg, inp.scale);
    let kuu_a = inp.kq.kuu.matvec(&a)?;
    let quad: f64 = a.iter().zip(&kuu_a).map(|(x, y)| x * y).sum();
    let tr = weighted_trace(inp.p, &inp.kq.kuu, inp.weights)?;
    let log_det_s: f64 = inp.log_s.iter().sum();
    Ok(Forward {
        a,
        kuu_a,
        pkuf,
        fit,
        kl_common: 0.5 * (-tr + quad - log_det_s),
    })
}

pub(crate) struct Adjoints {
    pub kuu: DenseMatrix,
    pub kuf: DenseMatrix,
    pub kff: Vec<f64>,
    /// Not yet symmetrised.
    pub p: DenseMatrix,
    /// Adjoint of the mean preconditioner `Q`, when there is one.
    pub mean_q: Option<DenseMatrix>,
    pub m_tilde: Vec<f64>,
    pub log_s: Vec<f64>,
}

/// Adjoints of `scale · Σ E[log p] − KL_common` wrt `K_uu`, `K_uf`, `k_ff`,
/// `P`, `Q` and `m̃`.
pub(crate) fn backward(inp: &Inputs<'_>, fwd: &Forward) -> Result<Adjoints> {
    let kq = inp.kq;
    let g_mu = &fwd.fit.g_mu;
    let g_var = &fwd.fit.g_var;

    let mut adj_a = kq.kuf.matvec(g_mu)?;
    for (x, y) in adj_a.iter_mut().zip(&fwd.kuu_a) {
        *x -= y;
    }

    let mut adj_kuf = outer(&fwd.a, g_mu);
    for n in 0..kq.kuf.cols() {
        let c = -2.0 * g_var[n];
        for (o, v) in adj_kuf.col_mut(n).iter_mut().zip(fwd.pkuf.col(n)) {
            *o += c * v;
        }
    }

    let mut adj_p = weighted_outer(&kq.kuf, g_var)?;
    adj_p.scale_in_place(-1.0);
    let mut adj_kuu = outer(&fwd.a, &fwd.a);
    adj_kuu.scale_in_place(-0.5);
    match inp.weights {
        None => {
            adj_p.axpy(0.5, &kq.kuu)?;
            adj_kuu.axpy(0.5, inp.p)?;
        }
        Some(w) => {
            adj_p.axpy(0.5, &matmul(&kq.kuu, w)?)?;
            adj_kuu.axpy(0.5, &matmul(inp.p, w)?)?;
        }
    }

    let (adj_q, adj_m) = match inp.mean_q {
        Some(q) => (Some(outer(&adj_a, inp.m_tilde)), q.matvec_t(&adj_a)?),
        None => (None, adj_a),
    };

    Ok(Adjoints {
        kuu: adj_kuu,
        kuf: adj_kuf,
        kff: g_var.clone(),
        p: adj_p,
        mean_q: adj_q,
        m_tilde: adj_m,
        log_s: vec![0.5; inp.log_s.len()],
    })
}

/// Routes an adjoint of `K̃ = K_uu + diag(s̃)` into `K_uu` and `log s̃`.
pub(crate) fn push_ktilde(
    adj_kt: &DenseMatrix,
    s: &[f64],
    adj_kuu: &mut DenseMatrix,
    adj_log_s: &mut [f64],
) -> Result<()> {
    adj_kuu.axpy(1.0, adj_kt)?;
    for (i, (g, si)) in adj_log_s.iter_mut().zip(s).enumerate() {
        *g += adj_kt.get(i, i) * si;
    }
    Ok(())
}
