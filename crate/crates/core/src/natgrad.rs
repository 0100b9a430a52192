//! Natural-gradient updates for the Cholesky factor `L` of the auxiliary
//! matrix `T = L Lᵀ`, which tracks `A⁻¹` using matrix products only.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius, matmul, DenseMatrix, LowerTriangular};

pub const MAX_HALVINGS: usize = 30;

thread_local! {
    static INNER_LOOP_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of `inner_loop` invocations on the current thread.
pub fn inner_loop_calls() -> u64 {
    INNER_LOOP_CALLS.with(Cell::get)
}

pub fn reset_inner_loop_calls() {
    INNER_LOOP_CALLS.with(|c| c.set(0));
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NgSchedule {
    Constant {
        gamma: f64,
    },
    /// Geometric ramp from `gamma0` to `gamma_t` over the first `steps` NG
    /// steps of training, constant afterwards.
    LogLinear {
        gamma0: f64,
        gamma_t: f64,
        steps: u64,
    },
}

impl Default for NgSchedule {
    fn default() -> Self {
        NgSchedule::LogLinear {
            gamma0: 1e-5,
            gamma_t: 1.0,
            steps: 10,
        }
    }
}

impl NgSchedule {
    pub fn validate(&self) -> Result<()> {
        let in_range = |g: f64| g > 0.0 && g <= 1.0;
        match *self {
            NgSchedule::Constant { gamma } if in_range(gamma) => Ok(()),
            NgSchedule::LogLinear { gamma0, gamma_t, steps }
                if in_range(gamma0) && in_range(gamma_t) && gamma0 <= gamma_t && steps >= 1 =>
            {
                Ok(())
            }
            other => Err(Error::Config(format!("invalid NG schedule {other:?}"))),
        }
    }

    /// Step size for the `t`-th NG step of training (0-based).
    pub fn gamma_at(&self, t: u64) -> f64 {
        match *self {
            NgSchedule::Constant { gamma } => gamma,
            NgSchedule::LogLinear { gamma0, gamma_t, steps } => {
                if steps <= 1 || t + 1 >= steps {
                    return gamma_t;
                }
                let frac = t as f64 / (steps - 1) as f64;
                gamma0 * (gamma_t / gamma0).powf(frac)
            }
        }
    }
}

/// A schedule together with the training-wide count of accepted NG steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleState {
    pub schedule: NgSchedule,
    pub steps_taken: u64,
}

impl ScheduleState {
    pub fn new(schedule: NgSchedule) -> Self {
        ScheduleState {
            schedule,
            steps_taken: 0,
        }
    }

    pub fn current_gamma(&self) -> f64 {
        self.schedule.gamma_at(self.steps_taken)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopKind {
    /// `‖LᵀAL − I‖_F / √M ≤ eps`
    Frobenius { eps: f64 },
    /// Summed variance gap `G ≤ 2 σ²_obs eps` (Gaussian likelihood only).
    ElboGap { eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopCriterion {
    pub kind: StopKind,
    pub max_steps: usize,
}

impl Default for StopCriterion {
    fn default() -> Self {
        StopCriterion {
            kind: StopKind::Frobenius { eps: 5e-3 },
            max_steps: 50,
        }
    }
}

impl StopCriterion {
    pub fn validate(&self) -> Result<()> {
        let eps = match self.kind {
            StopKind::Frobenius { eps } | StopKind::ElboGap { eps } => eps,
        };
        if !(eps > 0.0) {
            return Err(Error::Config(format!("stopping tolerance must be positive, got {eps}")));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerLoopReport {
    pub t_star: usize,
    /// Normalised Frobenius residual at exit.
    pub final_residual: f64,
    /// Summed gap `G` at exit when the gap criterion is used.
    pub final_gap: Option<f64>,
    pub criterion_met: bool,
    /// Step size of the last accepted step (after any halving).
    pub gamma_used: Option<f64>,
}

/// Data needed to evaluate the ELBO-gap criterion on a minibatch.
#[derive(Debug, Clone, Copy)]
pub struct GapContext<'a> {
    /// Cross-covariance `K_uf` of the batch (`M x B`).
    pub kuf: &'a DenseMatrix,
    /// Split `σ²` with `S̃ = S̃' + σ² I`.
    pub sigma2: f64,
    pub sigma2_obs: f64,
    /// Multiplier applied to the batch sum (`N / B`).
    pub scale: f64,
}

fn check_square_pair(l: &LowerTriangular, a: &DenseMatrix, op: &'static str) -> Result<()> {
    if !a.is_square() || a.rows() != l.dim() {
        return Err(Error::shape(
            op,
            format!("L is {0}x{0}, A is {1}x{2}", l.dim(), a.rows(), a.cols()),
        ));
    }
    Ok(())
}

/// `W = Lᵀ A L`, symmetrised.
pub fn whitened(l: &LowerTriangular, a: &DenseMatrix) -> Result<DenseMatrix> {
    check_square_pair(l, a, "whitened")?;
    let al = matmul(a, l.as_dense())?;
    let mut w = l.t_matmul(&al)?;
    w.symmetrize();
    Ok(w)
}

fn residual_of(w: &DenseMatrix) -> f64 {
    let mut r = w.clone();
    r.add_scalar_diag(-1.0);
    frobenius(&r) / (w.rows() as f64).sqrt()
}

fn direction_of(l: &LowerTriangular, w: &DenseMatrix) -> Result<LowerTriangular> {
    let n = w.rows();
    let inner = DenseMatrix::from_fn(n, n, |i, j| {
        if i > j {
            w.get(i, j)
        } else if i == j {
            w.get(i, i) - 0.5 * (1.0 + w.get(i, i))
        } else {
            0.0
        }
    });
    LowerTriangular::from_dense(l.matmul(&inner)?)
}

/// `L [tril(W) − ½(I + diag W)]` with `W = LᵀAL`.
pub fn natgrad_direction(l: &LowerTriangular, a: &DenseMatrix) -> Result<LowerTriangular> {
    let w = whitened(l, a)?;
    direction_of(l, &w)
}

/// `‖LᵀAL − I‖_F / √M`
pub fn frobenius_residual(l: &LowerTriangular, a: &DenseMatrix) -> Result<f64> {
    Ok(residual_of(&whitened(l, a)?))
}

fn step_along(l: &LowerTriangular, dir: &LowerTriangular, gamma: f64) -> Result<(LowerTriangular, f64)> {
    let mut g = gamma;
    for _ in 0..=MAX_HALVINGS {
        let mut next = l.as_dense().clone();
        next.axpy(-g, dir.as_dense())?;
        let ok = (0..next.rows()).all(|i| {
            let d = next.get(i, i);
            d > 0.0 && d.is_finite()
        });
        if ok {
            return Ok((LowerTriangular::from_dense(next)?, g));
        }
        g *= 0.5;
    }
    Err(Error::DegenerateStep { halvings: MAX_HALVINGS })
}

/// One NG step `L − γ∇̃`, halving `γ` until the diagonal stays positive.
/// Returns the new factor and the step size actually used.
pub fn ng_step_with_gamma(l: &LowerTriangular, a: &DenseMatrix, gamma: f64) -> Result<(LowerTriangular, f64)> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Domain(format!("step size must lie in (0, 1], got {gamma}")));
    }
    let dir = natgrad_direction(l, a)?;
    step_along(l, &dir, gamma)
}

pub fn ng_step(l: &LowerTriangular, a: &DenseMatrix, gamma: f64) -> Result<LowerTriangular> {
    ng_step_with_gamma(l, a, gamma).map(|(l, _)| l)
}

/// One Newton–Schulz step `2T − TAT`, symmetrised.
pub fn newton_schulz_t(t: &DenseMatrix, a: &DenseMatrix) -> Result<DenseMatrix> {
    if !t.is_square() || !a.is_square() || t.rows() != a.rows() {
        return Err(Error::shape("newton_schulz_t", "T and A must be square of equal size"));
    }
    let ta = matmul(t, a)?;
    let mut p = matmul(&ta, t)?;
    p.scale_in_place(-1.0);
    p.axpy(2.0, t)?;
    p.symmetrize();
    Ok(p)
}

/// Summed gap `Σ_n ‖(I − K̃T) k_n‖² / σ²` over the columns of `kuf`.
///
/// `ktilde_minus` is accepted for symmetry with the sandwich bounds; the closed
/// form does not need it.
pub fn elbo_gap(
    t: &DenseMatrix,
    ktilde_minus: &DenseMatrix,
    ktilde: &DenseMatrix,
    kuf: &DenseMatrix,
    sigma2: f64,
) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::Domain(format!("σ² must be positive, got {sigma2}")));
    }
    if ktilde_minus.rows() != ktilde.rows() || t.rows() != ktilde.rows() || kuf.rows() != t.rows() {
        return Err(Error::shape("elbo_gap", "inconsistent inducing dimension"));
    }
    let tk = matmul(t, kuf)?;
    let mut r = matmul(ktilde, &tk)?;
    r.scale_in_place(-1.0);
    r.axpy(1.0, kuf)?;
    Ok(frobenius(&r).powi(2) / sigma2)
}

/// Whether a summed gap satisfies `G ≤ 2 σ²_obs ε`.
pub fn gap_satisfied(gap: f64, sigma2_obs: f64, eps: f64) -> bool {
    gap <= 2.0 * sigma2_obs * eps
}

fn gap_for(l: &LowerTriangular, a: &DenseMatrix, ctx: &GapContext<'_>) -> Result<f64> {
    let t = l.gram();
    Ok(ctx.scale * elbo_gap(&t, a, a, ctx.kuf, ctx.sigma2)?)
}

/// Runs NG steps on `L` until the stopping criterion holds or `max_steps` is
/// reached. The criterion is checked before the first step, so zero steps is
/// possible. Exhausting `max_steps` is not an error; the report carries
/// `criterion_met = false`.
pub fn inner_loop(
    l: &LowerTriangular,
    a: &DenseMatrix,
    schedule: &mut ScheduleState,
    stop: &StopCriterion,
    gap: Option<&GapContext<'_>>,
) -> Result<(LowerTriangular, InnerLoopReport)> {
    INNER_LOOP_CALLS.with(|c| c.set(c.get() + 1));
    stop.validate()?;
    check_square_pair(l, a, "inner_loop")?;
    if let (StopKind::ElboGap { .. }, None) = (stop.kind, gap) {
        return Err(Error::Config("the ELBO-gap criterion needs minibatch data".into()));
    }
    let mut current = l.clone();
    let mut t_star = 0;
    let mut gamma_used = None;
    loop {
        let w = whitened(&current, a)?;
        let residual = residual_of(&w);
        let (met, final_gap) = match stop.kind {
            StopKind::Frobenius { eps } => (residual <= eps, None),
            StopKind::ElboGap { eps } => {
                let ctx = gap.expect("checked above");
                let g = gap_for(&current, a, ctx)?;
                (gap_satisfied(g, ctx.sigma2_obs, eps), Some(g))
            }
        };
        if !residual.is_finite() {
            return Err(Error::NonFinite {
                iteration: t_star,
                what: "NG residual".into(),
            });
        }
        if met || t_star == stop.max_steps {
            let report = InnerLoopReport {
                t_star,
                final_residual: residual,
                final_gap,
                criterion_met: met,
                gamma_used,
            };
            return Ok((current, report));
        }
        let dir = direction_of(&current, &w)?;
        let (next, g) = step_along(&current, &dir, schedule.current_gamma())?;
        current = next;
        gamma_used = Some(g);
        schedule.steps_taken += 1;
        t_star += 1;
    }
}
