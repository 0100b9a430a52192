//! `L` flavor: `K̃⁻¹` and `log|K̃|` come from a Cholesky factorisation.

use crate::error::{Error, Result};
use crate::linalg::{cholesky, matmul, matmul_tn, tri_solve, DenseMatrix};

use super::family::{self, Inputs};
use super::{
    BoundValue, Covariance, FlavorAdjoints, FlavorResult, KernelQuantities, Marginals, MeanPrecond, SvgpModel,
    VariationalState,
};

fn log_s(state: &VariationalState) -> Result<&[f64]> {
    match &state.cov {
        Covariance::LogDiag(v) => Ok(v),
        Covariance::Cholesky(_) => Err(Error::Domain("L flavor needs a diagonal S̃".into())),
    }
}

fn ktilde(kuu: &DenseMatrix, s: &[f64]) -> Result<DenseMatrix> {
    let mut k = kuu.clone();
    k.add_diag(s)?;
    Ok(k)
}

/// `(K̃⁻¹, log|K̃|)`
pub(crate) fn inverse_and_log_det(kt: &DenseMatrix) -> Result<(DenseMatrix, f64)> {
    let g = cholesky(kt)?;
    let g_inv = tri_solve(&g, &DenseMatrix::identity(kt.rows()), false)?;
    let mut p = matmul_tn(&g_inv, &g_inv)?;
    p.symmetrize();
    Ok((p, g.log_det_gram()))
}

fn precond<'a>(state: &VariationalState, p: &'a DenseMatrix) -> Option<&'a DenseMatrix> {
    match state.mean_precond {
        MeanPrecond::Full => Some(p),
        _ => None,
    }
}

pub(crate) fn marginals(state: &VariationalState, kq: &KernelQuantities) -> Result<Marginals> {
    let s: Vec<f64> = log_s(state)?.iter().map(|v| v.exp()).collect();
    let (p, _) = inverse_and_log_det(&ktilde(&kq.kuu, &s)?)?;
    let a = family::mean_vector(precond(state, &p), &state.m_tilde)?;
    Ok(family::predict(&p, &a, kq)?.0)
}

pub(crate) fn kl(state: &VariationalState, kuu: &DenseMatrix) -> Result<f64> {
    let ls = log_s(state)?;
    let s: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
    let (p, log_det) = inverse_and_log_det(&ktilde(kuu, &s)?)?;
    let a = family::mean_vector(precond(state, &p), &state.m_tilde)?;
    let kuu_a = kuu.matvec(&a)?;
    let quad: f64 = a.iter().zip(&kuu_a).map(|(x, y)| x * y).sum();
    let tr = p.frobenius_inner(kuu)?;
    Ok(0.5 * (-tr + quad + log_det - ls.iter().sum::<f64>()))
}

pub(crate) fn forward_backward(
    model: &SvgpModel,
    kq: &KernelQuantities,
    y: &[f64],
    scale: f64,
    want_grad: bool,
) -> Result<FlavorResult> {
    let state = &model.state;
    let ls = log_s(state)?;
    let s: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
    let (p, log_det) = inverse_and_log_det(&ktilde(&kq.kuu, &s)?)?;
    let inp = Inputs {
        kq,
        p: &p,
        mean_q: precond(state, &p),
        m_tilde: &state.m_tilde,
        log_s: ls,
        weights: None,
        lik: &model.lik,
        y,
        scale,
    };
    let fwd = family::forward(&inp)?;
    let kl = fwd.kl_common + 0.5 * log_det;
    let value = BoundValue::assemble(fwd.fit.sum, kl, scale);
    if !want_grad {
        return Ok(FlavorResult { value, adjoints: None });
    }

    let mut ad = family::backward(&inp, &fwd)?;
    let mut adj_p = ad.p.clone();
    if let Some(q) = &ad.mean_q {
        adj_p.axpy(1.0, q)?;
    }
    adj_p.symmetrize();
    // P = K̃⁻¹ and the −½ log|K̃| term
    let mut adj_kt = matmul(&matmul(&p, &adj_p)?, &p)?;
    adj_kt.axpy(0.5, &p)?;
    adj_kt.scale_in_place(-1.0);
    family::push_ktilde(&adj_kt, &s, &mut ad.kuu, &mut ad.log_s)?;

    Ok(FlavorResult {
        value,
        adjoints: Some(FlavorAdjoints {
            kuu: ad.kuu,
            kuf: ad.kuf,
            kff: ad.kff,
            lik: fwd.fit.g_lik,
            mean: ad.m_tilde,
            cov: ad.log_s,
            aux: Vec::new(),
        }),
    })
}
