//! Self-checks behind `ifsvgp verify`. Every reference quantity is computed
//! with nalgebra's dense factorisations, never with this crate's own.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bounds::{
    elbo, gradient, kl_term, marginals, variance_sandwich, Batch, Covariance, Flavor, GradOptions, MeanPrecond,
    SvgpModel, TraceMode, VariationalState,
};
use crate::error::{Error, Result};
use crate::kernel::{InducingSet, KernelSpec};
use crate::likelihood::{BernoulliLik, GaussianLik, Likelihood};
use crate::linalg::{DenseMatrix, LowerTriangular, ProbeBatch};
use crate::natgrad::{
    frobenius_residual, inner_loop, natgrad_direction, ng_step, NgSchedule, ScheduleState, StopCriterion, StopKind,
};
use crate::params::{pack, unpack};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Natgrad,
    Bounds,
    Sandwich,
    Hutchinson,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["natgrad", "bounds", "sandwich", "hutchinson", "all"];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natgrad" => Ok(Suite::Natgrad),
            "bounds" => Ok(Suite::Bounds),
            "sandwich" => Ok(Suite::Sandwich),
            "hutchinson" => Ok(Suite::Hutchinson),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!(
                "unknown suite '{other}' (expected one of {})",
                Suite::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> Check {
    match outcome {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn run(suite: Suite) -> Vec<Check> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Natgrad | Suite::All) {
        out.push(check("natgrad.fisher_oracle", fisher_oracle(50)));
        out.push(check("natgrad.inner_loop_convergence", inner_loop_convergence(100)));
    }
    if matches!(suite, Suite::Bounds | Suite::All) {
        out.push(check("bounds.equality_at_optimum", equality_at_optimum(50)));
        out.push(check("bounds.gradient_equivalence", gradient_equivalence(20)));
        out.push(check("bounds.finite_differences", finite_differences()));
    }
    if matches!(suite, Suite::Sandwich | Suite::All) {
        out.push(check("sandwich.ordering", sandwich(100)));
    }
    if matches!(suite, Suite::Hutchinson | Suite::All) {
        out.push(check("hutchinson.unbiased", hutchinson_unbiased(20_000)));
        out.push(check("hutchinson.k256_spread", hutchinson_spread(256, 200)));
    }
    out
}

fn to_na(a: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_column_slice(a.rows(), a.cols(), a.data())
}

fn from_na(a: &DMatrix<f64>) -> DenseMatrix {
    DenseMatrix::from_col_major(a.nrows(), a.ncols(), a.as_slice().to_vec()).expect("shape from nalgebra")
}

fn oracle_failed() -> Error {
    Error::Domain("reference factorisation failed".into())
}

fn spd_inverse(a: &DenseMatrix) -> Result<DMatrix<f64>> {
    to_na(a).cholesky().map(|c| c.inverse()).ok_or_else(oracle_failed)
}

/// `chol(A⁻¹)` through nalgebra.
fn oracle_aux(a: &DenseMatrix) -> Result<LowerTriangular> {
    let inv = spd_inverse(a)?;
    let l = inv.cholesky().ok_or_else(oracle_failed)?.l();
    LowerTriangular::from_dense_masked(&from_na(&l))
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_lower(rng: &mut ChaCha8Rng, m: usize, diag_lo: f64, off: f64) -> Result<LowerTriangular> {
    let d = DenseMatrix::from_fn(m, m, |i, j| {
        if i == j {
            diag_lo + rng.random::<f64>()
        } else if i > j {
            off * randn(rng)
        } else {
            0.0
        }
    });
    LowerTriangular::from_dense(d)
}

/// Random SPD matrix with spectrum log-uniform in `[lo, lo · cond]`.
fn spd_with_condition(rng: &mut ChaCha8Rng, m: usize, lo: f64, cond: f64) -> DenseMatrix {
    let g = DMatrix::from_fn(m, m, |_, _| randn(rng));
    let q = g.qr().q();
    let mut eig: Vec<f64> = (0..m).map(|_| lo * cond.powf(rng.random::<f64>())).collect();
    eig[0] = lo;
    if m > 1 {
        eig[1] = lo * cond;
    }
    let d = DMatrix::from_diagonal(&DVector::from_vec(eig));
    let mut a = from_na(&(&q * d * q.transpose()));
    a.symmetrize();
    a
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn commutation(m: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(m * m, m * m);
    for i in 0..m {
        for j in 0..m {
            // vec index of X[i, j] is j·m + i; C maps it to X[j, i]
            c[(i * m + j, j * m + i)] = 1.0;
        }
    }
    c
}

/// `F⁻¹ g` for `N(0, LLᵀ)` restricted to lower-triangular `L`, built from
/// explicit Kronecker and commutation matrices.
pub(crate) fn fisher_natgrad(l: &DenseMatrix, a: &DenseMatrix) -> Result<DenseMatrix> {
    let m = l.rows();
    let ln = to_na(l);
    let linv = ln.clone().try_inverse().ok_or_else(oracle_failed)?;
    let eye = DMatrix::<f64>::identity(m, m);
    let f = commutation(m) * linv.transpose().kronecker(&linv) + eye.kronecker(&(linv.transpose() * &linv));
    let g_mat = to_na(a) * &ln - linv.transpose();
    let idx: Vec<usize> = (0..m).flat_map(|j| (j..m).map(move |i| j * m + i)).collect();
    let k = idx.len();
    let f_ll = DMatrix::from_fn(k, k, |r, c| f[(idx[r], idx[c])]);
    let g_l = DVector::from_fn(k, |r, _| g_mat.as_slice()[idx[r]]);
    let sol = f_ll.lu().solve(&g_l).ok_or_else(oracle_failed)?;
    let mut out = DenseMatrix::zeros(m, m);
    for (r, &v) in idx.iter().enumerate() {
        out.data_mut()[v] = sol[r];
    }
    Ok(out)
}

fn fisher_oracle(instances: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf15e);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let m = 2 + i % 7;
        let l = random_lower(&mut rng, m, 0.5, 0.3)?;
        let a = spd_with_condition(&mut rng, m, 0.5, 20.0);
        let got = natgrad_direction(&l, &a)?;
        let want = fisher_natgrad(l.as_dense(), &a)?;
        let scale = want.data().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let err = got
            .as_dense()
            .data()
            .iter()
            .zip(want.data())
            .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
        worst = worst.max(err / scale.max(1e-300));
    }
    Ok((
        worst < 1e-8,
        format!("{instances} instances, max relative error {worst:.2e}"),
    ))
}

/// Outcome of one ramped inner-loop run to a tight residual.
pub(crate) struct ConvergenceRun {
    pub steps: Option<usize>,
    /// Largest `r_{t+1} / r_t²` over `γ = 1` steps taken with `1e−6 < r_t < 0.1`.
    pub quadratic_constant: f64,
}

pub(crate) fn ramped_convergence(a: &DenseMatrix, budget: usize, tol: f64) -> Result<ConvergenceRun> {
    let m = a.rows();
    let mut l = LowerTriangular::scaled_identity(m, 1e-3);
    let mut sched = ScheduleState::new(NgSchedule::default());
    let one_step = StopCriterion {
        kind: StopKind::Frobenius { eps: tol },
        max_steps: 1,
    };
    let mut r = frobenius_residual(&l, a)?;
    let mut c: f64 = 0.0;
    let mut steps = 0;
    while r >= tol && steps < budget {
        let (next, rep) = inner_loop(&l, a, &mut sched, &one_step, None)?;
        l = next;
        steps += rep.t_star;
        if rep.gamma_used == Some(1.0) && r < 0.1 && r > 1e-6 {
            c = c.max(rep.final_residual / (r * r));
        }
        r = rep.final_residual;
    }
    Ok(ConvergenceRun {
        steps: (r < tol).then_some(steps),
        quadratic_constant: c,
    })
}

fn inner_loop_convergence(instances: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1007);
    let mut converged = 0;
    let mut c_max: f64 = 0.0;
    for i in 0..instances {
        let m = 2 + (i * 13) % 63;
        let cond = 10f64.powf(3.0 * rng.random::<f64>());
        let lo = 10f64.powf(rng.random_range(-2.0..0.0));
        let a = spd_with_condition(&mut rng, m, lo, cond);
        let run = ramped_convergence(&a, 60, 1e-6)?;
        if run.steps.is_some() {
            converged += 1;
        }
        c_max = c_max.max(run.quadratic_constant);
    }
    let frac = converged as f64 / instances as f64;
    Ok((
        frac >= 0.95 && c_max <= 10.0,
        format!("{converged}/{instances} below 1e-6 within 60 steps, quadratic constant {c_max:.3}"),
    ))
}

pub(crate) struct Problem {
    pub x: DenseMatrix,
    pub y: Vec<f64>,
    pub model: SvgpModel,
}

pub(crate) fn random_problem(
    seed: u64,
    flavor: Flavor,
    precond: MeanPrecond,
    bernoulli: bool,
    m: usize,
    b: usize,
) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 2;
    let z = DenseMatrix::from_fn(m, d, |_, _| 2.0 * randn(&mut rng));
    let x = DenseMatrix::from_fn(b, d, |_, _| 2.0 * randn(&mut rng));
    let y = (0..b)
        .map(|i| {
            let f = x.get(i, 0).sin() + 0.5 * x.get(i, 1);
            if bernoulli {
                if f + 0.3 * randn(&mut rng) > 0.0 {
                    1.0
                } else {
                    -1.0
                }
            } else {
                f + 0.2 * randn(&mut rng)
            }
        })
        .collect();
    let kernel = KernelSpec::new(
        0.8 + rng.random::<f64>(),
        &[0.9 + rng.random::<f64>(), 1.2 + rng.random::<f64>()],
    )?;
    let lik = if bernoulli {
        Likelihood::Bernoulli(BernoulliLik::default())
    } else {
        Likelihood::Gaussian(GaussianLik::new(0.3 + 0.5 * rng.random::<f64>())?)
    };
    let mut state = VariationalState::init(flavor, m, precond, 0.5, 1.0)?;
    state.m_tilde = (0..m).map(|_| randn(&mut rng)).collect();
    state.cov = match flavor {
        Flavor::M | Flavor::W => Covariance::Cholesky(random_lower(&mut rng, m, 0.3, 0.2)?),
        Flavor::L | Flavor::R => Covariance::LogDiag((0..m).map(|_| -1.5 + rng.random::<f64>()).collect()),
    };
    if flavor == Flavor::R {
        state.aux_l = Some(random_lower(&mut rng, m, 0.3, 0.1)?);
    }
    let model = SvgpModel::new(kernel, lik, InducingSet::new(z)?, state)?;
    Ok(Problem { x, y, model })
}

fn with_flavor(model: &SvgpModel, flavor: Flavor, precond: MeanPrecond) -> Result<SvgpModel> {
    let mut out = model.clone();
    out.state.flavor = flavor;
    out.state.mean_precond = precond;
    if flavor != Flavor::R {
        out.state.aux_l = None;
    }
    out.state.validate()?;
    Ok(out)
}

fn equality_at_optimum(instances: usize) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let m = 2 + i % 7;
        let mut p = random_problem(1000 + i as u64, Flavor::R, MeanPrecond::Full, i % 2 == 1, m, 10)?;
        p.model.state.aux_l = Some(oracle_aux(&p.model.ktilde()?)?);
        let l = with_flavor(&p.model, Flavor::L, MeanPrecond::Full)?;
        let (mr, ml) = (marginals(&p.model, &p.x)?, marginals(&l, &p.x)?);
        for n in 0..p.y.len() {
            worst = worst.max(rel(mr.mu[n], ml.mu[n])).max(rel(mr.var[n], ml.var[n]));
        }
        worst = worst.max(rel(kl_term(&p.model)?, kl_term(&l)?));
        let batch = Batch::new(&p.x, &p.y)?;
        let er = elbo(&p.model, batch, 30, TraceMode::Exact)?.elbo;
        let el = elbo(&l, batch, 30, TraceMode::Exact)?.elbo;
        worst = worst.max(rel(er, el));
    }
    Ok((
        worst < 1e-8,
        format!("{instances} instances, max relative difference {worst:.2e}"),
    ))
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

fn gradient_equivalence(instances: usize) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut naive_min = f64::INFINITY;
    for i in 0..instances {
        let m = 3 + i % 6;
        let mut p = random_problem(2000 + i as u64, Flavor::R, MeanPrecond::Full, i % 2 == 1, m, 12)?;
        p.model.state.aux_l = Some(oracle_aux(&p.model.ktilde()?)?);
        let batch = Batch::new(&p.x, &p.y)?;
        let l = with_flavor(&p.model, Flavor::L, MeanPrecond::Full)?;
        let naive = with_flavor(&p.model, Flavor::R, MeanPrecond::NaiveT)?;
        let opts = GradOptions::default();
        let g_r = gradient(&p.model, batch, 24, TraceMode::Exact, opts)?.1.flatten();
        let g_l = gradient(&l, batch, 24, TraceMode::Exact, opts)?.1.flatten();
        let g_n = gradient(&naive, batch, 24, TraceMode::Exact, opts)?.1.flatten();
        worst = worst.max(max_rel_diff(&g_r, &g_l));
        naive_min = naive_min.min(max_rel_diff(&g_n, &g_l));
    }
    Ok((
        worst < 1e-6 && naive_min > 1e-3,
        format!("{instances} instances, max relative difference {worst:.2e}, naive variant min {naive_min:.2e}"),
    ))
}

/// Largest `|analytic − central FD| / max(1, |analytic|)` over all coordinates.
pub(crate) fn fd_error(p: &Problem, mode: TraceMode<'_>, opts: GradOptions) -> Result<f64> {
    let batch = Batch::new(&p.x, &p.y)?;
    let n_total = 3 * p.y.len();
    let (_, g) = gradient(&p.model, batch, n_total, mode, opts)?;
    let params = pack(&p.model, opts.differentiate_aux);
    let flat = params.flatten();
    let gflat = g.flatten();
    if gflat.len() != flat.len() {
        return Err(Error::shape("fd_error", "gradient and parameter layouts differ"));
    }
    let eval = |v: &[f64]| -> Result<f64> {
        let mut m = p.model.clone();
        unpack(&mut m, &params.with_flat(v)?)?;
        Ok(elbo(&m, batch, n_total, mode)?.elbo)
    };
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let h = 1e-5 * flat[i].abs().max(1.0);
        let mut up = flat.clone();
        up[i] += h;
        let mut dn = flat.clone();
        dn[i] -= h;
        let fd = (eval(&up)? - eval(&dn)?) / (2.0 * h);
        worst = worst.max((fd - gflat[i]).abs() / gflat[i].abs().max(1.0));
    }
    Ok(worst)
}

fn finite_differences() -> Result<(bool, String)> {
    let cases = [
        (Flavor::M, MeanPrecond::None),
        (Flavor::W, MeanPrecond::None),
        (Flavor::L, MeanPrecond::None),
        (Flavor::L, MeanPrecond::Full),
        (Flavor::R, MeanPrecond::None),
        (Flavor::R, MeanPrecond::Full),
        (Flavor::R, MeanPrecond::NaiveT),
    ];
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (k, (flavor, precond)) in cases.into_iter().enumerate() {
        for bern in [false, true] {
            let p = random_problem(3000 + k as u64, flavor, precond, bern, 6, 12)?;
            worst = worst.max(fd_error(&p, TraceMode::Exact, GradOptions::default())?);
            count += 1;
            if flavor == Flavor::R {
                worst = worst.max(fd_error(
                    &p,
                    TraceMode::Exact,
                    GradOptions {
                        differentiate_aux: true,
                    },
                )?);
                count += 1;
            }
        }
    }
    Ok((
        worst < 1e-4,
        format!("{count} configurations, max relative error {worst:.2e}"),
    ))
}

fn sandwich(instances: usize) -> Result<(bool, String)> {
    let mut violations = 0;
    let mut gap_err: f64 = 0.0;
    let mut gap_at_opt: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a9d);
    for i in 0..instances {
        let m = 2 + i % 9;
        let p = random_problem(4000 + i as u64, Flavor::R, MeanPrecond::Full, false, m, 12)?;
        let kq = p.model.kernel_quantities(&p.x)?;
        let kt = p.model.ktilde()?;
        let s = p.model.state.s_tilde().expect("diagonal flavor");
        let sigma2 = rng.random_range(0.1..0.9) * s.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut km = kt.clone();
        km.add_scalar_diag(-sigma2);
        let mut l = LowerTriangular::scaled_identity(m, 1.0 / kt.trace().sqrt());
        for _ in 0..(i % 4) {
            l = ng_step(&l, &kt, 1.0)?;
        }
        let kinv = spd_inverse(&kt)?;
        let kuf = to_na(&kq.kuf);
        let quad = (kuf.transpose() * &kinv * &kuf).diagonal();
        let sw = variance_sandwich(&l.gram(), &km, &kt, &kq.kuf, &kq.kff, sigma2)?;
        for n in 0..kq.kff.len() {
            let exact = kq.kff[n] - quad[n];
            let tol = 1e-10 * kq.kff[n].max(1.0);
            if sw.lower[n] > exact + tol || exact > sw.upper[n] + tol {
                violations += 1;
            }
            // U − L is a difference of O(k_nn) numbers, so gaps below ~1e−6 k_nn
            // are compared at the resolution that difference can carry
            let diff = sw.upper[n] - sw.lower[n];
            gap_err = gap_err.max((sw.gap[n] - diff).abs() / sw.gap[n].abs().max(diff.abs()).max(1e-6 * kq.kff[n]));
        }
        let opt = variance_sandwich(&from_na(&kinv), &km, &kt, &kq.kuf, &kq.kff, sigma2)?;
        gap_at_opt = gap_at_opt.max(opt.gap.iter().cloned().fold(0.0, f64::max));
    }
    Ok((
        violations == 0 && gap_err < 1e-8 && gap_at_opt < 1e-8,
        format!(
            "{instances} instances, {violations} ordering violations, gap identity error {gap_err:.2e}, max gap at optimum {gap_at_opt:.2e}"
        ),
    ))
}

fn hutchinson_unbiased(draws: usize) -> Result<(bool, String)> {
    let p = random_problem(5000, Flavor::R, MeanPrecond::Full, false, 8, 16)?;
    let batch = Batch::new(&p.x, &p.y)?;
    let exact = elbo(&p.model, batch, 64, TraceMode::Exact)?.elbo;
    let mut rng = ChaCha8Rng::seed_from_u64(0x4c7);
    let mut vals = Vec::with_capacity(draws);
    for _ in 0..draws {
        let probes = ProbeBatch::rademacher(8, 1, &mut rng)?;
        vals.push(elbo(&p.model, batch, 64, TraceMode::Hutchinson(&probes))?.elbo);
    }
    let n = draws as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let z = (mean - exact).abs() / (sd / n.sqrt());
    Ok((
        z <= 4.0,
        format!("{draws} single-probe draws, |mean − exact| = {z:.2} standard errors"),
    ))
}

/// `M = 64` model on a banana-like batch with `T` close to `K̃⁻¹`.
pub(crate) fn m64_fixture() -> Result<(SvgpModel, DenseMatrix, Vec<f64>, usize)> {
    let data = crate::data_io::synth_banana_like(400, 7)?;
    let z = crate::trainer::kmeanspp_init(&data.x, 64, 7)?;
    let mut state = VariationalState::init(Flavor::R, 64, MeanPrecond::Full, 1e-1, 1e-3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    state.m_tilde = (0..64).map(|_| randn(&mut rng)).collect();
    let mut model = SvgpModel::new(
        KernelSpec::default_for_dim(2),
        Likelihood::Bernoulli(BernoulliLik::default()),
        z,
        state,
    )?;
    let kt = model.ktilde()?;
    let mut sched = ScheduleState::new(NgSchedule::default());
    let stop = StopCriterion {
        kind: StopKind::Frobenius { eps: 5e-3 },
        max_steps: 200,
    };
    let l = model.state.aux_l.clone().expect("R flavor");
    model.state.aux_l = Some(inner_loop(&l, &kt, &mut sched, &stop, None)?.0);
    let idx: Vec<usize> = (0..64).collect();
    let batch = data.subset(&idx);
    Ok((model, batch.x, batch.y, data.len()))
}

fn hutchinson_spread(k: usize, repeats: usize) -> Result<(bool, String)> {
    let (model, x, y, n) = m64_fixture()?;
    let batch = Batch::new(&x, &y)?;
    let exact = elbo(&model, batch, n, TraceMode::Exact)?.elbo;
    let mut rng = ChaCha8Rng::seed_from_u64(0x256);
    let mut vals = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let probes = ProbeBatch::rademacher(64, k, &mut rng)?;
        vals.push(elbo(&model, batch, n, TraceMode::Hutchinson(&probes))?.elbo);
    }
    let r = repeats as f64;
    let mean = vals.iter().sum::<f64>() / r;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt();
    let frac = sd / exact.abs();
    Ok((
        frac < 0.01,
        format!(
            "K = {k}: sd {sd:.3e} is {:.3}% of |bound| {:.3}",
            100.0 * frac,
            exact.abs()
        ),
    ))
}
