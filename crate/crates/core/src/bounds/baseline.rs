//! `M` and `W` flavors, both built on a Cholesky factor of `K_uu`.

use crate::error::{Error, Result};
use crate::linalg::{cholesky, frobenius, matmul, matmul_tn, tri_solve, tril_mask, DenseMatrix, LowerTriangular};
use crate::params::pack_lower_adjoint;

use super::{
    column_dots, data_fit, outer, weighted_outer, BoundValue, Covariance, FlavorAdjoints, FlavorResult,
    KernelQuantities, Marginals, SvgpModel, VariationalState,
};

const JITTER_RETRIES: usize = 5;

/// Cholesky of `K_uu`, adding geometrically growing jitter on failure.
pub(crate) fn chol_with_retry(kuu: &DenseMatrix, base_jitter: f64) -> Result<LowerTriangular> {
    let mut err = match cholesky(kuu) {
        Ok(g) => return Ok(g),
        Err(e) => e,
    };
    let mut extra = base_jitter.max(1e-10);
    for _ in 0..JITTER_RETRIES {
        let mut k = kuu.clone();
        k.add_scalar_diag(extra);
        match cholesky(&k) {
            Ok(g) => return Ok(g),
            Err(e) => err = e,
        }
        extra *= 10.0;
    }
    Err(err)
}

fn factor(state: &VariationalState) -> Result<&LowerTriangular> {
    match &state.cov {
        Covariance::Cholesky(l) => Ok(l),
        Covariance::LogDiag(_) => Err(Error::Domain(
            "M and W flavors need a Cholesky covariance factor".into(),
        )),
    }
}

fn inverse_from_chol(g: &LowerTriangular) -> Result<DenseMatrix> {
    let g_inv = tri_solve(g, &DenseMatrix::identity(g.dim()), false)?;
    let mut q = matmul_tn(&g_inv, &g_inv)?;
    q.symmetrize();
    Ok(q)
}

struct MForward {
    q: DenseMatrix,
    s: DenseMatrix,
    alpha: Vec<f64>,
    qkuf: DenseMatrix,
    sqkuf: DenseMatrix,
    marg: Marginals,
    kl: f64,
}

fn forward_m(state: &VariationalState, kq: &KernelQuantities) -> Result<MForward> {
    let ls = factor(state)?;
    let g = chol_with_retry(&kq.kuu, state.jitter)?;
    let q = inverse_from_chol(&g)?;
    let s = ls.gram();
    let m = &state.m_tilde;
    let alpha = q.matvec(m)?;
    let qkuf = matmul(&q, &kq.kuf)?;
    let sqkuf = matmul(&s, &qkuf)?;
    let mu = kq.kuf.matvec_t(&alpha)?;
    let a1 = column_dots(&kq.kuf, &qkuf);
    let a2 = column_dots(&qkuf, &sqkuf);
    let var = (0..kq.kff.len()).map(|n| kq.kff[n] - a1[n] + a2[n]).collect();
    let quad: f64 = m.iter().zip(&alpha).map(|(x, y)| x * y).sum();
    let dim = m.len() as f64;
    let kl = 0.5 * (q.frobenius_inner(&s)? + quad - dim + g.log_det_gram() - ls.log_det_gram());
    Ok(MForward {
        q,
        s,
        alpha,
        qkuf,
        sqkuf,
        marg: Marginals { mu, var },
        kl,
    })
}

pub(crate) fn marginals_m(state: &VariationalState, kq: &KernelQuantities) -> Result<Marginals> {
    Ok(forward_m(state, kq)?.marg)
}

pub(crate) fn kl_m(state: &VariationalState, kuu: &DenseMatrix) -> Result<f64> {
    let kq = KernelQuantities {
        kuu: kuu.clone(),
        kuf: DenseMatrix::zeros(kuu.rows(), 0),
        kff: Vec::new(),
    };
    Ok(forward_m(state, &kq)?.kl)
}

pub(crate) fn forward_backward_m(
    model: &SvgpModel,
    kq: &KernelQuantities,
    y: &[f64],
    scale: f64,
    want_grad: bool,
) -> Result<FlavorResult> {
    let state = &model.state;
    let f = forward_m(state, kq)?;
    let fit = data_fit(&model.lik, y, &f.marg, scale);
    let value = BoundValue::assemble(fit.sum, f.kl, scale);
    if !want_grad {
        return Ok(FlavorResult { value, adjoints: None });
    }
    let ls = factor(state)?;
    let m = &state.m_tilde;
    let (g_mu, g_var) = (&fit.g_mu, &fit.g_var);

    // σ² = k_ff − diag(Kufᵀ R Kuf) with R = Q − QSQ; μ = Kufᵀ Q m
    let mut r_kuf = f.qkuf.clone();
    r_kuf.axpy(-1.0, &matmul(&f.q, &f.sqkuf)?)?;
    let mut adj_kuf = outer(&f.alpha, g_mu);
    for n in 0..kq.kuf.cols() {
        let c = -2.0 * g_var[n];
        for (o, v) in adj_kuf.col_mut(n).iter_mut().zip(r_kuf.col(n)) {
            *o += c * v;
        }
    }
    let kuf_gmu = kq.kuf.matvec(g_mu)?;
    let mut adj_m = f.qkuf.matvec(g_mu)?;
    for (g, a) in adj_m.iter_mut().zip(&f.alpha) {
        *g -= a;
    }

    let mut adj_r = weighted_outer(&kq.kuf, g_var)?;
    adj_r.scale_in_place(-1.0);
    let qs = matmul(&f.q, &f.s)?;
    let mut adj_q = outer(&kuf_gmu, m);
    adj_q.axpy(1.0, &adj_r)?;
    adj_q.axpy(-1.0, &matmul(&adj_r, &qs)?)?;
    adj_q.axpy(-1.0, &matmul(&qs.transpose(), &adj_r)?)?;
    adj_q.axpy(-0.5, &f.s)?;
    adj_q.axpy(-0.5, &outer(m, m))?;
    adj_q.symmetrize();

    let mut adj_s = matmul(&matmul(&f.q, &adj_r)?, &f.q)?;
    adj_s.scale_in_place(-1.0);
    adj_s.axpy(-0.5, &f.q)?;

    // Q = K_uu⁻¹ and the −½ log|K_uu| term
    let mut adj_kuu = matmul(&matmul(&f.q, &adj_q)?, &f.q)?;
    adj_kuu.axpy(0.5, &f.q)?;
    adj_kuu.scale_in_place(-1.0);

    let sym = adj_s.add(&adj_s.transpose())?;
    let mut adj_ls = tril_mask(&matmul(&sym, ls.as_dense())?);
    for i in 0..ls.dim() {
        adj_ls.add_at(i, i, 1.0 / ls.get(i, i));
    }

    Ok(FlavorResult {
        value,
        adjoints: Some(FlavorAdjoints {
            kuu: adj_kuu,
            kuf: adj_kuf,
            kff: g_var.clone(),
            lik: fit.g_lik,
            mean: adj_m,
            cov: pack_lower_adjoint(&adj_ls, ls),
            aux: Vec::new(),
        }),
    })
}

struct WForward {
    g: LowerTriangular,
    a: DenseMatrix,
    b: DenseMatrix,
    marg: Marginals,
    kl: f64,
}

pub(crate) fn kl_w(state: &VariationalState) -> Result<f64> {
    let ls = factor(state)?;
    let m = &state.m_tilde;
    let quad: f64 = m.iter().map(|v| v * v).sum();
    Ok(0.5 * (frobenius(ls.as_dense()).powi(2) + quad - m.len() as f64 - ls.log_det_gram()))
}

fn forward_w(state: &VariationalState, kq: &KernelQuantities) -> Result<WForward> {
    let ls = factor(state)?;
    let g = chol_with_retry(&kq.kuu, state.jitter)?;
    let a = tri_solve(&g, &kq.kuf, false)?;
    let b = ls.t_matmul(&a)?;
    let mu = a.matvec_t(&state.m_tilde)?;
    let aa = column_dots(&a, &a);
    let bb = column_dots(&b, &b);
    let var = (0..kq.kff.len()).map(|n| kq.kff[n] - aa[n] + bb[n]).collect();
    Ok(WForward {
        g,
        a,
        b,
        marg: Marginals { mu, var },
        kl: kl_w(state)?,
    })
}

pub(crate) fn marginals_w(state: &VariationalState, kq: &KernelQuantities) -> Result<Marginals> {
    Ok(forward_w(state, kq)?.marg)
}

/// Reverse-mode Cholesky: given `Ḡ` for `G = chol(K)`, returns the symmetric
/// `K̄ = sym(G⁻ᵀ Φ(Gᵀ Ḡ) G⁻¹)` where `Φ` keeps the lower triangle and halves
/// the diagonal.
pub(crate) fn cholesky_backward(g: &LowerTriangular, g_bar: &DenseMatrix) -> Result<DenseMatrix> {
    let mut phi = tril_mask(&g.t_matmul(g_bar)?);
    for i in 0..phi.rows() {
        let v = phi.get(i, i);
        phi.set(i, i, 0.5 * v);
    }
    let u = tri_solve(g, &phi, true)?;
    let mut k_bar = tri_solve(g, &u.transpose(), true)?.transpose();
    k_bar.symmetrize();
    Ok(k_bar)
}

pub(crate) fn forward_backward_w(
    model: &SvgpModel,
    kq: &KernelQuantities,
    y: &[f64],
    scale: f64,
    want_grad: bool,
) -> Result<FlavorResult> {
    let state = &model.state;
    let f = forward_w(state, kq)?;
    let fit = data_fit(&model.lik, y, &f.marg, scale);
    let value = BoundValue::assemble(fit.sum, f.kl, scale);
    if !want_grad {
        return Ok(FlavorResult { value, adjoints: None });
    }
    let ls = factor(state)?;
    let m = &state.m_tilde;
    let (g_mu, g_var) = (&fit.g_mu, &fit.g_var);

    let mut adj_m = f.a.matvec(g_mu)?;
    for (g, v) in adj_m.iter_mut().zip(m) {
        *g -= v;
    }
    // μ = Aᵀm̃, σ² = k_ff − colsum(A∘A) + colsum(B∘B), B = L_Sᵀ A
    let ls_b = ls.matmul(&f.b)?;
    let mut adj_a = outer(m, g_mu);
    for n in 0..f.a.cols() {
        let c = 2.0 * g_var[n];
        let col = adj_a.col_mut(n);
        for i in 0..col.len() {
            col[i] += c * (ls_b.get(i, n) - f.a.get(i, n));
        }
    }
    let mut a_scaled = f.a.clone();
    for n in 0..a_scaled.cols() {
        let c = 2.0 * g_var[n];
        a_scaled.col_mut(n).iter_mut().for_each(|v| *v *= c);
    }
    let mut adj_ls = tril_mask(&crate::linalg::matmul_nt(&a_scaled, &f.b)?);
    adj_ls.axpy(-1.0, ls.as_dense())?;
    for i in 0..ls.dim() {
        adj_ls.add_at(i, i, 1.0 / ls.get(i, i));
    }

    // A = G⁻¹ K_uf
    let adj_kuf = tri_solve(&f.g, &adj_a, true)?;
    let mut adj_g = tril_mask(&crate::linalg::matmul_nt(&adj_kuf, &f.a)?);
    adj_g.scale_in_place(-1.0);
    let adj_kuu = cholesky_backward(&f.g, &adj_g)?;

    Ok(FlavorResult {
        value,
        adjoints: Some(FlavorAdjoints {
            kuu: adj_kuu,
            kuf: adj_kuf,
            kff: g_var.clone(),
            lik: fit.g_lik,
            mean: adj_m,
            cov: pack_lower_adjoint(&adj_ls, ls),
            aux: Vec::new(),
        }),
    })
}
