//! Predictive marginals, KL terms and ELBOs for the four parameterisations.
//!
//! * `M`: free mean `m` and covariance `S = L_S L_Sᵀ`.
//! * `W`: whitened, `m = L_uu m̃`, `S = L_uu S̃ L_uuᵀ`.
//! * `L`: `m = K_uu P m̃`, `S = (K_uu⁻¹ + S̃⁻¹)⁻¹` with diagonal `S̃` and
//!   `K̃ = K_uu + S̃`; `P` is `I` or `K̃⁻¹`.
//! * `R`: the relaxed bound where `K̃⁻¹` is replaced by the auxiliary
//!   `T = L Lᵀ`. Its code path only multiplies matrices.
//!
//! Gradients are of the ELBO itself (ascent direction) and are assembled from
//! hand-written adjoints over the fixed expression graph of each bound.

mod baseline;
mod family;
mod lsvgp;
mod rsvgp;

use crate::error::{Error, Result};
use crate::kernel::{kernel_backward, kernel_diag, kernel_matrix, kuu_with_jitter, InducingSet, KernelSpec};
use crate::likelihood::Likelihood;
use crate::linalg::{DenseMatrix, LowerTriangular, ProbeBatch};
use crate::natgrad::newton_schulz_t;
use crate::params::ParamGroups;

pub use rsvgp::{relaxed_kl, variance_sandwich, Sandwich};

/// Jitter added to `K_uu` on the `M` and `W` paths.
pub const DEFAULT_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flavor {
    M,
    W,
    L,
    R,
}

impl Flavor {
    pub fn name(self) -> &'static str {
        match self {
            Flavor::M => "M",
            Flavor::W => "W",
            Flavor::L => "L",
            Flavor::R => "R",
        }
    }
}

/// Matrix applied to `m̃` in the inducing mean `m = K_uu Q m̃`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MeanPrecond {
    /// `Q = I`
    None,
    /// `Q = K̃⁻¹` for `L`, `Q = 2T − TK̃T` for `R`.
    Full,
    /// `Q = T`; only for demonstrating that it breaks gradient equivalence.
    NaiveT,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// Cholesky factor of `S` (`M` flavor) or `S̃` (`W` flavor).
    Cholesky(LowerTriangular),
    /// `log s̃` with `S̃ = diag(s̃)` (`L` and `R` flavors).
    LogDiag(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub flavor: Flavor,
    /// `m` for the `M` flavor, `m̃` otherwise.
    pub m_tilde: Vec<f64>,
    pub cov: Covariance,
    /// Cholesky factor of `T`, present exactly for the `R` flavor.
    pub aux_l: Option<LowerTriangular>,
    pub mean_precond: MeanPrecond,
    /// Added to `K_uu` before factorising (`M`/`W` only).
    pub jitter: f64,
}

impl VariationalState {
    /// Standard initialisation: `m̃ = 0`; unit Cholesky factor for `M`/`W`;
    /// `s̃ = α` for `L`/`R`; `L = β I` for `R`.
    pub fn init(flavor: Flavor, m: usize, mean_precond: MeanPrecond, alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(beta > 0.0) {
            return Err(Error::Config("initial scales must be positive".into()));
        }
        let cov = match flavor {
            Flavor::M | Flavor::W => Covariance::Cholesky(LowerTriangular::identity(m)),
            Flavor::L | Flavor::R => Covariance::LogDiag(vec![alpha.ln(); m]),
        };
        let state = VariationalState {
            flavor,
            m_tilde: vec![0.0; m],
            cov,
            aux_l: (flavor == Flavor::R).then(|| LowerTriangular::scaled_identity(m, beta)),
            mean_precond,
            jitter: match flavor {
                Flavor::M | Flavor::W => DEFAULT_JITTER,
                Flavor::L | Flavor::R => 0.0,
            },
        };
        state.validate()?;
        Ok(state)
    }

    pub fn num_inducing(&self) -> usize {
        self.m_tilde.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m_tilde.len();
        if self.m_tilde.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("variational mean must be finite".into()));
        }
        match (&self.cov, self.flavor) {
            (Covariance::Cholesky(l), Flavor::M | Flavor::W) => {
                if l.dim() != m || !l.has_positive_diagonal() {
                    return Err(Error::Domain(
                        "covariance factor must be M x M with positive diagonal".into(),
                    ));
                }
            }
            (Covariance::LogDiag(s), Flavor::L | Flavor::R) => {
                if s.len() != m || s.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Domain("log s̃ must have M finite entries".into()));
                }
            }
            _ => {
                return Err(Error::Domain(format!(
                    "covariance form does not match flavor {}",
                    self.flavor.name()
                )))
            }
        }
        match (&self.aux_l, self.flavor) {
            (Some(l), Flavor::R) => {
                if l.dim() != m || !l.has_positive_diagonal() {
                    return Err(Error::Domain(
                        "auxiliary factor must be M x M with positive diagonal".into(),
                    ));
                }
            }
            (None, Flavor::R) => return Err(Error::Domain("R flavor needs an auxiliary factor".into())),
            (Some(_), _) => return Err(Error::Domain("only the R flavor carries an auxiliary factor".into())),
            (None, _) => {}
        }
        match (self.mean_precond, self.flavor) {
            (MeanPrecond::None, _) => {}
            (MeanPrecond::Full, Flavor::L | Flavor::R) => {}
            (MeanPrecond::NaiveT, Flavor::R) => {}
            (p, f) => {
                return Err(Error::Domain(format!(
                    "preconditioner {p:?} is not defined for flavor {}",
                    f.name()
                )))
            }
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::Domain("jitter must be non-negative".into()));
        }
        Ok(())
    }

    /// `s̃` for the diagonal flavors.
    pub fn s_tilde(&self) -> Option<Vec<f64>> {
        match &self.cov {
            Covariance::LogDiag(v) => Some(v.iter().map(|x| x.exp()).collect()),
            Covariance::Cholesky(_) => None,
        }
    }
}

/// Everything that defines a sparse GP under one parameterisation.
#[derive(Debug, Clone, PartialEq)]
pub struct SvgpModel {
    pub kernel: KernelSpec,
    pub lik: Likelihood,
    pub inducing: InducingSet,
    pub state: VariationalState,
}

impl SvgpModel {
    pub fn new(kernel: KernelSpec, lik: Likelihood, inducing: InducingSet, state: VariationalState) -> Result<Self> {
        if inducing.dim() != kernel.dim() {
            return Err(Error::shape(
                "SvgpModel",
                "inducing dimension differs from kernel dimension",
            ));
        }
        if inducing.num_inducing() != state.num_inducing() {
            return Err(Error::shape(
                "SvgpModel",
                "variational state size differs from number of inducing points",
            ));
        }
        state.validate()?;
        Ok(SvgpModel {
            kernel,
            lik,
            inducing,
            state,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.num_inducing()
    }

    pub fn flavor(&self) -> Flavor {
        self.state.flavor
    }

    /// `K_uu` with the state's jitter.
    pub fn kuu(&self) -> Result<DenseMatrix> {
        kuu_with_jitter(&self.kernel, &self.inducing, self.state.jitter)
    }

    /// `K̃ = K_uu + diag(s̃)` for the diagonal flavors.
    pub fn ktilde(&self) -> Result<DenseMatrix> {
        let s = self
            .state
            .s_tilde()
            .ok_or_else(|| Error::Domain("K̃ is only defined for the L and R flavors".into()))?;
        let mut k = self.kuu()?;
        k.add_diag(&s)?;
        Ok(k)
    }

    /// Kernel quantities at the rows of `x`.
    pub fn kernel_quantities(&self, x: &DenseMatrix) -> Result<KernelQuantities> {
        Ok(KernelQuantities {
            kuu: self.kuu()?,
            kuf: kernel_matrix(&self.kernel, self.inducing.locations(), x)?,
            kff: kernel_diag(&self.kernel, x),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelQuantities {
    pub kuu: DenseMatrix,
    /// `M x B`, column `n` is `k_un`.
    pub kuf: DenseMatrix,
    pub kff: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a DenseMatrix,
    pub y: &'a [f64],
}

impl<'a> Batch<'a> {
    pub fn new(x: &'a DenseMatrix, y: &'a [f64]) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::shape(
                "Batch",
                format!("{} inputs but {} targets", x.rows(), y.len()),
            ));
        }
        if y.is_empty() {
            return Err(Error::Domain("batch must be non-empty".into()));
        }
        Ok(Batch { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundValue {
    pub elbo: f64,
    /// Sum over the batch, before scaling.
    pub expected_loglik: f64,
    pub kl: f64,
    /// `N / B`
    pub minibatch_scale: f64,
}

impl BoundValue {
    pub(crate) fn assemble(expected_loglik: f64, kl: f64, minibatch_scale: f64) -> Self {
        BoundValue {
            elbo: minibatch_scale * expected_loglik - kl,
            expected_loglik,
            kl,
            minibatch_scale,
        }
    }
}

/// How the trace terms of the relaxed KL bound are evaluated.
#[derive(Debug, Clone, Copy)]
pub enum TraceMode<'a> {
    Exact,
    /// Hutchinson estimates from the given probes (`R` flavor only).
    Hutchinson(&'a ProbeBatch),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GradOptions {
    /// Also differentiate wrt the auxiliary factor (`R` flavor trained with
    /// Adam only). When false `T` is a constant.
    pub differentiate_aux: bool,
}

/// `2T − TK̃T`
pub fn rsvgp_preconditioner(t: &DenseMatrix, ktilde: &DenseMatrix) -> Result<DenseMatrix> {
    newton_schulz_t(t, ktilde)
}

fn check_trace_mode(model: &SvgpModel, mode: TraceMode<'_>) -> Result<()> {
    if let TraceMode::Hutchinson(p) = mode {
        if model.flavor() != Flavor::R {
            return Err(Error::Config(
                "Hutchinson trace estimation only applies to the R flavor".into(),
            ));
        }
        if p.dim() != model.num_inducing() {
            return Err(Error::shape("TraceMode", "probe dimension differs from M"));
        }
    }
    Ok(())
}

fn clamp_small_negative(var: &mut [f64]) {
    for v in var.iter_mut() {
        if *v < 0.0 && *v >= -1e-10 {
            *v = 0.0;
        }
    }
}

/// Predictive marginals at the rows of `x`.
///
/// For `M`/`W`/`L`, variances in `[-1e-10, 0)` are clamped to zero. For `R` the
/// variance is the upper bound `U_n` and is returned as computed.
pub fn marginals(model: &SvgpModel, x: &DenseMatrix) -> Result<Marginals> {
    let kq = model.kernel_quantities(x)?;
    marginals_from(model, &kq)
}

pub fn marginals_from(model: &SvgpModel, kq: &KernelQuantities) -> Result<Marginals> {
    let mut out = match model.flavor() {
        Flavor::M => baseline::marginals_m(&model.state, kq)?,
        Flavor::W => baseline::marginals_w(&model.state, kq)?,
        Flavor::L => lsvgp::marginals(&model.state, kq)?,
        Flavor::R => return rsvgp::marginals(&model.state, kq),
    };
    clamp_small_negative(&mut out.var);
    Ok(out)
}

/// KL term: exact for `M`/`W`/`L`, the upper bound for `R`.
pub fn kl_term(model: &SvgpModel) -> Result<f64> {
    let kuu = model.kuu()?;
    match model.flavor() {
        Flavor::M => baseline::kl_m(&model.state, &kuu),
        Flavor::W => baseline::kl_w(&model.state),
        Flavor::L => lsvgp::kl(&model.state, &kuu),
        Flavor::R => relaxed_kl(&model.state, &kuu),
    }
}

/// `(N/B) Σ_batch E[log p(y|f)] − KL`.
pub fn elbo(model: &SvgpModel, batch: Batch<'_>, n_total: usize, mode: TraceMode<'_>) -> Result<BoundValue> {
    check_trace_mode(model, mode)?;
    let scale = n_total as f64 / batch.len() as f64;
    match (model.flavor(), mode) {
        (Flavor::R, TraceMode::Hutchinson(p)) => rsvgp::elbo_hutchinson(model, batch, scale, p),
        _ => gradient_impl(model, batch, scale, mode, GradOptions::default(), false).map(|(b, _)| b),
    }
}

/// ELBO and its gradient wrt the unconstrained parameters (see
/// [`crate::params::pack`] for the layout).
pub fn gradient(
    model: &SvgpModel,
    batch: Batch<'_>,
    n_total: usize,
    mode: TraceMode<'_>,
    opts: GradOptions,
) -> Result<(BoundValue, ParamGroups)> {
    check_trace_mode(model, mode)?;
    if opts.differentiate_aux && model.flavor() != Flavor::R {
        return Err(Error::Config("only the R flavor has an auxiliary factor".into()));
    }
    let scale = n_total as f64 / batch.len() as f64;
    let (b, g) = gradient_impl(model, batch, scale, mode, opts, true)?;
    Ok((b, g.expect("gradient requested")))
}

fn gradient_impl(
    model: &SvgpModel,
    batch: Batch<'_>,
    scale: f64,
    mode: TraceMode<'_>,
    opts: GradOptions,
    want_grad: bool,
) -> Result<(BoundValue, Option<ParamGroups>)> {
    let kq = model.kernel_quantities(batch.x)?;
    let res = match model.flavor() {
        Flavor::M => baseline::forward_backward_m(model, &kq, batch.y, scale, want_grad)?,
        Flavor::W => baseline::forward_backward_w(model, &kq, batch.y, scale, want_grad)?,
        Flavor::L => lsvgp::forward_backward(model, &kq, batch.y, scale, want_grad)?,
        Flavor::R => {
            let weights = match mode {
                TraceMode::Exact => None,
                TraceMode::Hutchinson(p) => Some(p.outer_mean()),
            };
            rsvgp::forward_backward(model, &kq, batch.y, scale, weights.as_ref(), opts, want_grad)?
        }
    };
    let grad = match res.adjoints {
        Some(adj) => Some(assemble_gradient(model, batch.x, &kq, adj)?),
        None => None,
    };
    Ok((res.value, grad))
}

/// Adjoints produced by a flavor's backward sweep.
pub(crate) struct FlavorAdjoints {
    pub kuu: DenseMatrix,
    pub kuf: DenseMatrix,
    pub kff: Vec<f64>,
    pub lik: Vec<f64>,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    pub aux: Vec<f64>,
}

pub(crate) struct FlavorResult {
    pub value: BoundValue,
    pub adjoints: Option<FlavorAdjoints>,
}

fn assemble_gradient(
    model: &SvgpModel,
    x: &DenseMatrix,
    kq: &KernelQuantities,
    adj: FlavorAdjoints,
) -> Result<ParamGroups> {
    let z = model.inducing.locations();
    let mut g_uu = adj.kuu;
    g_uu.symmetrize();
    // K_uu depends on Z through both arguments; with a symmetric adjoint the
    // second-argument contribution equals the first.
    let mut kuu_plain = kq.kuu.clone();
    kuu_plain.add_scalar_diag(-model.state.jitter);
    let b_uu = kernel_backward(&model.kernel, z, z, &kuu_plain, &g_uu)?;
    let b_uf = kernel_backward(&model.kernel, z, x, &kq.kuf, &adj.kuf)?;
    let var = model.kernel.variance();
    let d_kff: f64 = adj.kff.iter().sum::<f64>() * var;

    let mut hyper = Vec::with_capacity(1 + model.kernel.dim() + adj.lik.len());
    hyper.push(b_uu.d_log_variance + b_uf.d_log_variance + d_kff);
    for d in 0..model.kernel.dim() {
        hyper.push(b_uu.d_log_lengthscales[d] + b_uf.d_log_lengthscales[d]);
    }
    hyper.extend_from_slice(&adj.lik);
    let mut dz = b_uu.d_x;
    dz.scale_in_place(2.0);
    dz.axpy(1.0, &b_uf.d_x)?;
    Ok(ParamGroups {
        hyper,
        mean: adj.mean,
        cov: adj.cov,
        z: dz.into_data(),
        aux: adj.aux,
    })
}

/// `Σ_n scale · E[log p(y_n | f_n)]` pieces shared by every flavor.
pub(crate) struct DataFit {
    pub sum: f64,
    /// `scale · ∂/∂μ_n`
    pub g_mu: Vec<f64>,
    /// `scale · ∂/∂σ²_n`
    pub g_var: Vec<f64>,
    /// `scale · ∂/∂(likelihood params)`
    pub g_lik: Vec<f64>,
}

pub(crate) fn data_fit(lik: &Likelihood, y: &[f64], marg: &Marginals, scale: f64) -> DataFit {
    let mut sum = 0.0;
    let mut g_mu = Vec::with_capacity(y.len());
    let mut g_var = Vec::with_capacity(y.len());
    let mut g_lik = vec![0.0; lik.num_params()];
    for ((yn, mu), var) in y.iter().zip(&marg.mu).zip(&marg.var) {
        let ve = lik.var_exp_with_grad(*yn, *mu, *var);
        sum += ve.value;
        g_mu.push(scale * ve.d_mu);
        g_var.push(scale * ve.d_var);
        if let Some(g) = g_lik.first_mut() {
            *g += scale * ve.d_lik;
        }
    }
    DataFit {
        sum,
        g_mu,
        g_var,
        g_lik,
    }
}

/// `Kuf · diag(d) · Kufᵀ`
pub(crate) fn weighted_outer(kuf: &DenseMatrix, d: &[f64]) -> Result<DenseMatrix> {
    crate::linalg::weighted_gram(kuf, d)
}

/// `colsum(A ∘ B)`
pub(crate) fn column_dots(a: &DenseMatrix, b: &DenseMatrix) -> Vec<f64> {
    (0..a.cols())
        .map(|j| a.col(j).iter().zip(b.col(j)).map(|(x, y)| x * y).sum())
        .collect()
}

pub(crate) fn outer(a: &[f64], b: &[f64]) -> DenseMatrix {
    DenseMatrix::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
}

#[cfg(test)]
mod tests;
