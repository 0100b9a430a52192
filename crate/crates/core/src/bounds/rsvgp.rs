//! `R` flavor: the relaxed bound with `T = L Lᵀ` standing in for `K̃⁻¹`.
//!
//! Nothing in this file factorises or solves; every operation is a product.

use crate::error::{Error, Result};
use crate::linalg::{hutchinson_trace, matmul, matmul_tn, DenseMatrix, LowerTriangular, ProbeBatch};
use crate::natgrad::newton_schulz_t;
use crate::params::pack_lower_adjoint;

use super::family::{self, Inputs};
use super::{
    column_dots, data_fit, Batch, BoundValue, Covariance, FlavorAdjoints, FlavorResult, GradOptions, KernelQuantities,
    Marginals, MeanPrecond, SvgpModel, VariationalState,
};

fn parts(state: &VariationalState) -> Result<(&[f64], &LowerTriangular)> {
    let ls = match &state.cov {
        Covariance::LogDiag(v) => v.as_slice(),
        Covariance::Cholesky(_) => return Err(Error::Domain("R flavor needs a diagonal S̃".into())),
    };
    let l = state
        .aux_l
        .as_ref()
        .ok_or_else(|| Error::Domain("R flavor needs an auxiliary factor".into()))?;
    Ok((ls, l))
}

fn ktilde(kuu: &DenseMatrix, s: &[f64]) -> Result<DenseMatrix> {
    let mut k = kuu.clone();
    k.add_diag(s)?;
    Ok(k)
}

struct Dense {
    s: Vec<f64>,
    kt: DenseMatrix,
    t: DenseMatrix,
    p: DenseMatrix,
}

fn dense(state: &VariationalState, kuu: &DenseMatrix) -> Result<Dense> {
    let (ls, l) = parts(state)?;
    let s: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
    let kt = ktilde(kuu, &s)?;
    let t = l.gram();
    let p = newton_schulz_t(&t, &kt)?;
    Ok(Dense { s, kt, t, p })
}

fn mean_q<'a>(state: &VariationalState, d: &'a Dense) -> Option<&'a DenseMatrix> {
    match state.mean_precond {
        MeanPrecond::None => None,
        MeanPrecond::Full => Some(&d.p),
        MeanPrecond::NaiveT => Some(&d.t),
    }
}

pub(crate) fn marginals(state: &VariationalState, kq: &KernelQuantities) -> Result<Marginals> {
    let d = dense(state, &kq.kuu)?;
    let a = family::mean_vector(mean_q(state, &d), &state.m_tilde)?;
    Ok(family::predict(&d.p, &a, kq)?.0)
}

/// Upper bound on the KL term with exact traces.
pub fn relaxed_kl(state: &VariationalState, kuu: &DenseMatrix) -> Result<f64> {
    let (ls, l) = parts(state)?;
    let d = dense(state, kuu)?;
    let a = family::mean_vector(mean_q(state, &d), &state.m_tilde)?;
    let kuu_a = kuu.matvec(&a)?;
    let quad: f64 = a.iter().zip(&kuu_a).map(|(x, y)| x * y).sum();
    let m = kuu.rows() as f64;
    Ok(0.5
        * (-d.p.frobenius_inner(kuu)? + d.kt.frobenius_inner(&d.t)? - m + quad
            - l.log_det_gram()
            - ls.iter().sum::<f64>()))
}

pub(crate) fn forward_backward(
    model: &SvgpModel,
    kq: &KernelQuantities,
    y: &[f64],
    scale: f64,
    weights: Option<&DenseMatrix>,
    opts: GradOptions,
    want_grad: bool,
) -> Result<FlavorResult> {
    let state = &model.state;
    let (ls, l) = parts(state)?;
    let d = dense(state, &kq.kuu)?;
    let inp = Inputs {
        kq,
        p: &d.p,
        mean_q: mean_q(state, &d),
        m_tilde: &state.m_tilde,
        log_s: ls,
        weights,
        lik: &model.lik,
        y,
        scale,
    };
    let fwd = family::forward(&inp)?;
    let m = d.t.rows() as f64;
    let tr_kt = family::weighted_trace(&d.kt, &d.t, weights)?;
    let kl = fwd.kl_common + 0.5 * (tr_kt - m - l.log_det_gram());
    let value = BoundValue::assemble(fwd.fit.sum, kl, scale);
    if !want_grad {
        return Ok(FlavorResult { value, adjoints: None });
    }

    let mut ad = family::backward(&inp, &fwd)?;
    let mut adj_p = ad.p.clone();
    if let (MeanPrecond::Full, Some(q)) = (state.mean_precond, &ad.mean_q) {
        adj_p.axpy(1.0, q)?;
    }
    adj_p.symmetrize();

    // P = 2T − TK̃T with T held fixed, plus the −½ tr(K̃TW) term
    let t_adj = matmul(&d.t, &adj_p)?;
    let mut adj_kt = matmul(&t_adj, &d.t)?;
    adj_kt.scale_in_place(-1.0);
    match weights {
        None => adj_kt.axpy(-0.5, &d.t)?,
        Some(w) => adj_kt.axpy(-0.5, &matmul(w, &d.t)?)?,
    }
    family::push_ktilde(&adj_kt, &d.s, &mut ad.kuu, &mut ad.log_s)?;

    let aux = if opts.differentiate_aux {
        // T K̃, reused for both product-rule terms
        let tk = matmul(&d.t, &d.kt)?;
        let mut adj_t = adj_p.scale(2.0);
        adj_t.axpy(-1.0, &matmul(&adj_p, &tk)?)?;
        adj_t.axpy(-1.0, &matmul_tn(&tk, &adj_p)?)?;
        match weights {
            None => adj_t.axpy(-0.5, &d.kt)?,
            Some(w) => adj_t.axpy(-0.5, &matmul(&d.kt, w)?)?,
        }
        if let (MeanPrecond::NaiveT, Some(q)) = (state.mean_precond, &ad.mean_q) {
            adj_t.axpy(1.0, q)?;
        }
        // T = L Lᵀ
        let sym = adj_t.add(&adj_t.transpose())?;
        let mut adj_l = crate::linalg::tril_mask(&matmul(&sym, l.as_dense())?);
        for i in 0..l.dim() {
            adj_l.add_at(i, i, 1.0 / l.get(i, i));
        }
        pack_lower_adjoint(&adj_l, l)
    } else {
        Vec::new()
    };

    Ok(FlavorResult {
        value,
        adjoints: Some(FlavorAdjoints {
            kuu: ad.kuu,
            kuf: ad.kuf,
            kff: ad.kff,
            lik: fwd.fit.g_lik,
            mean: ad.m_tilde,
            cov: ad.log_s,
            aux,
        }),
    })
}

/// `T X = L (Lᵀ X)`
fn apply_t(l: &LowerTriangular, x: &DenseMatrix) -> Result<DenseMatrix> {
    l.matmul(&l.t_matmul(x)?)
}

/// `P X = 2 T X − T K̃ T X`
fn apply_p(l: &LowerTriangular, kt: &DenseMatrix, x: &DenseMatrix) -> Result<DenseMatrix> {
    let tx = apply_t(l, x)?;
    let mut out = apply_t(l, &matmul(kt, &tx)?)?;
    out.scale_in_place(-1.0);
    out.axpy(2.0, &tx)?;
    Ok(out)
}

/// Relaxed ELBO with Hutchinson estimates of `tr(P K_uu)` and `tr(K̃ T)`.
/// Costs `O((B + K) M²)`: `P` and `T` are only applied to blocks of vectors.
pub(crate) fn elbo_hutchinson(
    model: &SvgpModel,
    batch: Batch<'_>,
    scale: f64,
    probes: &ProbeBatch,
) -> Result<BoundValue> {
    let state = &model.state;
    let (ls, l) = parts(state)?;
    let s: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
    let kq = model.kernel_quantities(batch.x)?;
    let kt = ktilde(&kq.kuu, &s)?;
    let m_col = DenseMatrix::column_vector(&state.m_tilde);
    let a = match state.mean_precond {
        MeanPrecond::None => state.m_tilde.clone(),
        MeanPrecond::Full => apply_p(l, &kt, &m_col)?.into_data(),
        MeanPrecond::NaiveT => apply_t(l, &m_col)?.into_data(),
    };
    let mu = kq.kuf.matvec_t(&a)?;
    let pkuf = apply_p(l, &kt, &kq.kuf)?;
    let var = kq
        .kff
        .iter()
        .zip(column_dots(&kq.kuf, &pkuf))
        .map(|(k, q)| k - q)
        .collect();
    let fit = data_fit(&model.lik, batch.y, &Marginals { mu, var }, scale);

    let tr_pk = hutchinson_trace(|z| apply_p(l, &kt, &matmul(&kq.kuu, z)?), probes)?;
    let tr_kt = hutchinson_trace(|z| matmul(&kt, &apply_t(l, z)?), probes)?;
    let kuu_a = kq.kuu.matvec(&a)?;
    let quad: f64 = a.iter().zip(&kuu_a).map(|(x, y)| x * y).sum();
    let m = s.len() as f64;
    let kl = 0.5 * (-tr_pk + tr_kt - m + quad - l.log_det_gram() - ls.iter().sum::<f64>());
    Ok(BoundValue::assemble(fit.sum, kl, scale))
}

/// Per-datum bounds on the `L`-flavor predictive variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sandwich {
    /// `U_n = k_nn − k_nᵀ(2T − TK̃T)k_n`
    pub upper: Vec<f64>,
    /// `L_n`, valid when `K̃ = K̃₋ + σ² I` with `K̃₋` PD.
    pub lower: Vec<f64>,
    /// `‖(I − K̃T)k_n‖² / σ²`
    pub gap: Vec<f64>,
    /// `U_n − L_n`, which equals `gap` analytically.
    pub gap_difference: Vec<f64>,
}

pub fn variance_sandwich(
    t: &DenseMatrix,
    ktilde_minus: &DenseMatrix,
    ktilde: &DenseMatrix,
    kuf: &DenseMatrix,
    kff: &[f64],
    sigma2: f64,
) -> Result<Sandwich> {
    if !(sigma2 > 0.0) {
        return Err(Error::Domain(format!("σ² must be positive, got {sigma2}")));
    }
    if kff.len() != kuf.cols() {
        return Err(Error::shape(
            "variance_sandwich",
            "k_nn length differs from number of columns",
        ));
    }
    let tk = matmul(t, kuf)?;
    let kt_tk = matmul(ktilde, &tk)?;
    let km_tk = matmul(ktilde_minus, &tk)?;
    let km_k = matmul(ktilde_minus, kuf)?;
    // P k = 2 T k − T K̃ T k
    let mut pk = matmul(t, &kt_tk)?;
    pk.scale_in_place(-1.0);
    pk.axpy(2.0, &tk)?;

    let u_quad = column_dots(kuf, &pk);
    let kk = column_dots(kuf, kuf);
    let cross = column_dots(&tk, &km_k);
    let tail = column_dots(&km_tk, &kt_tk);
    let mut resid = kuf.clone();
    resid.axpy(-1.0, &kt_tk)?;
    let rr = column_dots(&resid, &resid);

    let n = kff.len();
    let mut out = Sandwich {
        upper: Vec::with_capacity(n),
        lower: Vec::with_capacity(n),
        gap: Vec::with_capacity(n),
        gap_difference: Vec::with_capacity(n),
    };
    for i in 0..n {
        let u = kff[i] - u_quad[i];
        let lo = kff[i] - (kk[i] - 2.0 * cross[i] + tail[i]) / sigma2;
        out.upper.push(u);
        out.lower.push(lo);
        out.gap.push(rr[i] / sigma2);
        out.gap_difference.push(u - lo);
    }
    Ok(out)
}
