use super::*;
use crate::kernel::InducingSet;
use crate::likelihood::{BernoulliLik, GaussianLik};
use crate::linalg::{cholesky, factorisation_counts, reset_factorisation_counts};
use crate::natgrad::ng_step;
use crate::params::{pack, unpack};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn to_na(a: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_column_slice(a.rows(), a.cols(), a.data())
}

fn from_na(a: &DMatrix<f64>) -> DenseMatrix {
    DenseMatrix::from_col_major(a.nrows(), a.ncols(), a.as_slice().to_vec()).unwrap()
}

fn na_inverse(a: &DenseMatrix) -> DenseMatrix {
    let mut inv = from_na(&to_na(a).cholesky().unwrap().inverse());
    inv.symmetrize();
    inv
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_lower(rng: &mut ChaCha8Rng, m: usize, diag_lo: f64, off: f64) -> LowerTriangular {
    let d = DenseMatrix::from_fn(m, m, |i, j| {
        if i == j {
            diag_lo + rng.random::<f64>()
        } else if i > j {
            off * randn(rng)
        } else {
            0.0
        }
    });
    LowerTriangular::from_dense(d).unwrap()
}

struct Problem {
    x: DenseMatrix,
    y: Vec<f64>,
    model: SvgpModel,
}

fn problem(seed: u64, flavor: Flavor, precond: MeanPrecond, bernoulli: bool, m: usize, b: usize) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 2;
    let z = DenseMatrix::from_fn(m, d, |_, _| 2.0 * randn(&mut rng));
    let x = DenseMatrix::from_fn(b, d, |_, _| 2.0 * randn(&mut rng));
    let y: Vec<f64> = (0..b)
        .map(|i| {
            let f = (x.get(i, 0)).sin() + 0.5 * x.get(i, 1);
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
    )
    .unwrap();
    let lik = if bernoulli {
        Likelihood::Bernoulli(BernoulliLik::default())
    } else {
        Likelihood::Gaussian(GaussianLik::new(0.3 + 0.5 * rng.random::<f64>()).unwrap())
    };
    let mut state = VariationalState::init(flavor, m, precond, 0.5, 1.0).unwrap();
    state.m_tilde = (0..m).map(|_| randn(&mut rng)).collect();
    match flavor {
        Flavor::M | Flavor::W => state.cov = Covariance::Cholesky(random_lower(&mut rng, m, 0.3, 0.2)),
        Flavor::L | Flavor::R => state.cov = Covariance::LogDiag((0..m).map(|_| -1.5 + rng.random::<f64>()).collect()),
    }
    if flavor == Flavor::R {
        state.aux_l = Some(random_lower(&mut rng, m, 0.3, 0.1));
    }
    let model = SvgpModel::new(kernel, lik, InducingSet::new(z).unwrap(), state).unwrap();
    Problem { x, y, model }
}

/// Replaces `T` with `K̃⁻¹` computed by an independent factorisation.
fn inject_exact_t(model: &mut SvgpModel) {
    let kinv = na_inverse(&model.ktilde().unwrap());
    let l = to_na(&kinv).cholesky().unwrap().l();
    model.state.aux_l = Some(LowerTriangular::from_dense_masked(&from_na(&l)).unwrap());
}

fn as_flavor(model: &SvgpModel, flavor: Flavor, precond: MeanPrecond) -> SvgpModel {
    let mut out = model.clone();
    out.state.flavor = flavor;
    out.state.mean_precond = precond;
    if flavor != Flavor::R {
        out.state.aux_l = None;
    }
    out.state.validate().unwrap();
    out
}

fn exact_elbo(p: &Problem, model: &SvgpModel) -> BoundValue {
    elbo(model, Batch::new(&p.x, &p.y).unwrap(), p.y.len(), TraceMode::Exact).unwrap()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

/// Exact `KL[N(m, S) ‖ N(0, K_uu)]` from dense algebra.
fn gauss_kl(m: &[f64], s: &DMatrix<f64>, kuu: &DMatrix<f64>) -> f64 {
    let ch = kuu.clone().cholesky().unwrap();
    let kinv = ch.inverse();
    let mv = nalgebra::DVector::from_column_slice(m);
    let n = m.len() as f64;
    let log_det_k = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_det_s = 2.0
        * s.clone()
            .cholesky()
            .unwrap()
            .l()
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>();
    0.5 * ((&kinv * s).trace() + (mv.transpose() * &kinv * &mv)[0] - n + log_det_k - log_det_s)
}

/// `(m, S)` of `q(u)` for the diagonal flavors with effective mean vector `a`.
fn l_moments(model: &SvgpModel, a: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let kuu = to_na(&model.kuu().unwrap());
    let s = model.state.s_tilde().unwrap();
    let sinv = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(s.len(), s.iter().map(|v| 1.0 / v)));
    let prec = kuu.clone().cholesky().unwrap().inverse() + sinv;
    let cov = prec.cholesky().unwrap().inverse();
    let m = &kuu * nalgebra::DVector::from_column_slice(a);
    (m.as_slice().to_vec(), cov)
}

#[test]
fn preconditioner_examples() {
    let p = rsvgp_preconditioner(&DenseMatrix::from_diag(&[0.2]), &DenseMatrix::from_diag(&[4.0])).unwrap();
    assert!((p.get(0, 0) - 0.24).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = 16;
    let g = DenseMatrix::from_fn(m, m, |_, _| randn(&mut rng));
    let mut kt = crate::linalg::matmul_nt(&g, &g).unwrap();
    kt.add_scalar_diag(m as f64);
    let kinv = na_inverse(&kt);
    let fixed = rsvgp_preconditioner(&kinv, &kt).unwrap();
    assert!(frob_diff(&fixed, &kinv) < 1e-10 * crate::linalg::frobenius(&kinv));

    let mut l = LowerTriangular::scaled_identity(m, 1.0 / (kt.trace()).sqrt());
    for _ in 0..3 {
        l = ng_step(&l, &kt, 1.0).unwrap();
    }
    let t = l.gram();
    let resid = |q: &DenseMatrix| {
        let mut r = DenseMatrix::identity(m);
        r.axpy(-1.0, &crate::linalg::matmul(&kt, q).unwrap()).unwrap();
        crate::linalg::frobenius(&r)
    };
    let before = resid(&t);
    let after = resid(&rsvgp_preconditioner(&t, &kt).unwrap());
    // I − K̃P = (I − K̃T)²
    assert!(before > 1e-3);
    assert!(after <= before * before * (1.0 + 1e-8), "{after} vs {before}²");
    let p_dense = rsvgp_preconditioner(&t, &kt).unwrap();
    assert_eq!(p_dense.get(2, 5), p_dense.get(5, 2));
    assert!(rsvgp_preconditioner(&DenseMatrix::identity(3), &DenseMatrix::identity(4)).is_err());
}

fn frob_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    crate::linalg::frobenius(&a.sub(b).unwrap())
}

#[test]
fn zero_mean_gives_zero_predictive_mean() {
    for (flavor, precond) in [
        (Flavor::M, MeanPrecond::None),
        (Flavor::W, MeanPrecond::None),
        (Flavor::L, MeanPrecond::None),
        (Flavor::L, MeanPrecond::Full),
        (Flavor::R, MeanPrecond::None),
        (Flavor::R, MeanPrecond::Full),
    ] {
        let mut p = problem(11, flavor, precond, false, 5, 7);
        p.model.state.m_tilde = vec![0.0; 5];
        let marg = marginals(&p.model, &p.x).unwrap();
        assert!(marg.mu.iter().all(|v| *v == 0.0), "{flavor:?}");
        assert!(marg.var.iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn relaxed_flavor_matches_exact_at_optimal_t() {
    for precond in [MeanPrecond::None, MeanPrecond::Full] {
        for bern in [false, true] {
            let mut p = problem(21, Flavor::R, precond, bern, 6, 9);
            inject_exact_t(&mut p.model);
            let l = as_flavor(&p.model, Flavor::L, precond);
            let mr = marginals(&p.model, &p.x).unwrap();
            let ml = marginals(&l, &p.x).unwrap();
            for n in 0..p.y.len() {
                assert!((mr.mu[n] - ml.mu[n]).abs() < 1e-10);
                assert!((mr.var[n] - ml.var[n]).abs() < 1e-10);
            }
            assert!(close(kl_term(&p.model).unwrap(), kl_term(&l).unwrap(), 1e-9));
            assert!(close(exact_elbo(&p, &p.model).elbo, exact_elbo(&p, &l).elbo, 1e-8));
        }
    }
}

#[test]
fn preconditioned_mean_at_training_inputs_is_gp_posterior_mean() {
    let mut p = problem(5, Flavor::L, MeanPrecond::Full, false, 7, 7);
    let s2 = p.model.lik.obs_variance().unwrap();
    p.model.inducing = InducingSet::new(p.x.clone()).unwrap();
    p.model.state.cov = Covariance::LogDiag(vec![s2.ln(); 7]);
    p.model.state.m_tilde = p.y.clone();
    let mu = marginals(&p.model, &p.x).unwrap().mu;

    let k = to_na(&kernel_matrix(&p.model.kernel, &p.x, &p.x).unwrap());
    let ky = &k + DMatrix::identity(7, 7) * s2;
    let alpha = ky
        .cholesky()
        .unwrap()
        .solve(&nalgebra::DVector::from_column_slice(&p.y));
    let oracle = &k * alpha;
    for n in 0..7 {
        assert!((mu[n] - oracle[n]).abs() < 1e-8, "{} vs {}", mu[n], oracle[n]);
    }
}

#[test]
fn kl_vanishes_at_the_prior() {
    let mut p = problem(8, Flavor::M, MeanPrecond::None, false, 5, 3);
    p.model.state.m_tilde = vec![0.0; 5];
    p.model.state.cov = Covariance::Cholesky(cholesky(&p.model.kuu().unwrap()).unwrap());
    assert!(kl_term(&p.model).unwrap().abs() < 1e-9);

    let mut w = problem(8, Flavor::W, MeanPrecond::None, false, 5, 3);
    w.model.state.m_tilde = vec![0.0; 5];
    w.model.state.cov = Covariance::Cholesky(LowerTriangular::identity(5));
    assert!(kl_term(&w.model).unwrap().abs() < 1e-14);
}

#[test]
fn kl_terms_match_dense_oracle_and_are_non_negative() {
    for seed in 0..5 {
        let p = problem(100 + seed, Flavor::M, MeanPrecond::None, false, 5, 3);
        let kuu = to_na(&p.model.kuu().unwrap());
        let Covariance::Cholesky(ls) = &p.model.state.cov else {
            unreachable!()
        };
        let s = to_na(&ls.gram());
        let kl = kl_term(&p.model).unwrap();
        assert!(close(kl, gauss_kl(&p.model.state.m_tilde, &s, &kuu), 1e-9));
        assert!(kl >= 0.0);

        let w = as_flavor(&p.model, Flavor::W, MeanPrecond::None);
        let luu = kuu.clone().cholesky().unwrap().l();
        let m = &luu * nalgebra::DVector::from_column_slice(&w.state.m_tilde);
        let s_w = &luu * &s * luu.transpose();
        let kl_w = kl_term(&w).unwrap();
        assert!(close(kl_w, gauss_kl(m.as_slice(), &s_w, &kuu), 1e-8));
        assert!(kl_w >= 0.0);

        for precond in [MeanPrecond::None, MeanPrecond::Full] {
            let r = problem(200 + seed, Flavor::R, precond, false, 5, 3);
            let l = as_flavor(&r.model, Flavor::L, precond);
            let kinv = na_inverse(&l.ktilde().unwrap());
            let a = match precond {
                MeanPrecond::Full => kinv.matvec(&l.state.m_tilde).unwrap(),
                _ => l.state.m_tilde.clone(),
            };
            let (m, s) = l_moments(&l, &a);
            let oracle = gauss_kl(&m, &s, &to_na(&l.kuu().unwrap()));
            let kl_l = kl_term(&l).unwrap();
            assert!(close(kl_l, oracle, 1e-8), "{kl_l} vs {oracle}");
            assert!(kl_l >= 0.0);

            // the bound, evaluated at the mean vector R actually uses
            let t = r.model.state.aux_l.as_ref().unwrap().gram();
            let p_r = rsvgp_preconditioner(&t, &r.model.ktilde().unwrap()).unwrap();
            let a_r = match precond {
                MeanPrecond::Full => p_r.matvec(&r.model.state.m_tilde).unwrap(),
                _ => r.model.state.m_tilde.clone(),
            };
            let (m, s) = l_moments(&l, &a_r);
            let exact = gauss_kl(&m, &s, &to_na(&l.kuu().unwrap()));
            assert!(kl_term(&r.model).unwrap() >= exact - 1e-10);
        }
    }
}

#[test]
fn scalar_elbo_matches_hand_computation() {
    let (v, ell, s2, s, mt, x, z, y): (f64, f64, f64, f64, f64, f64, f64, f64) =
        (1.3, 0.7, 0.4, 0.25, 0.6, 0.5, -0.2, 1.1);
    let kernel = KernelSpec::new(v, &[ell]).unwrap();
    let lik = Likelihood::Gaussian(GaussianLik::new(s2).unwrap());
    let mut state = VariationalState::init(Flavor::L, 1, MeanPrecond::None, s, 1.0).unwrap();
    state.m_tilde = vec![mt];
    let zs = InducingSet::new(DenseMatrix::from_diag(&[z])).unwrap();
    let model = SvgpModel::new(kernel, lik, zs, state).unwrap();
    let xs = DenseMatrix::from_diag(&[x]);
    let n_total = 3;
    let b = elbo(&model, Batch::new(&xs, &[y]).unwrap(), n_total, TraceMode::Exact).unwrap();

    let kuf = v * (-(x - z).powi(2) / (2.0 * ell * ell)).exp();
    let q_s = v * s / (v + s);
    let q_m = v * mt;
    let mu = kuf / v * q_m;
    let var = v - kuf * kuf / v + kuf * kuf * q_s / (v * v);
    let ell_term = -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - ((y - mu).powi(2) + var) / (2.0 * s2);
    let kl = 0.5 * (q_s / v + q_m * q_m / v - 1.0 + v.ln() - q_s.ln());
    assert!((b.expected_loglik - ell_term).abs() < 1e-12);
    assert!((b.kl - kl).abs() < 1e-12);
    assert!((b.elbo - (3.0 * ell_term - kl)).abs() < 1e-12);
    assert_eq!(b.elbo, b.minibatch_scale * b.expected_loglik - b.kl);
}

#[test]
fn hutchinson_with_many_probes_is_close_to_exact() {
    let p = problem(31, Flavor::R, MeanPrecond::Full, false, 8, 10);
    let batch = Batch::new(&p.x, &p.y).unwrap();
    let exact = elbo(&p.model, batch, 10, TraceMode::Exact).unwrap().elbo;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let singles: Vec<f64> = (0..400)
        .map(|_| {
            let pr = ProbeBatch::rademacher(8, 1, &mut rng).unwrap();
            elbo(&p.model, batch, 10, TraceMode::Hutchinson(&pr)).unwrap().elbo
        })
        .collect();
    let mean = singles.iter().sum::<f64>() / singles.len() as f64;
    let sd = (singles.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (singles.len() - 1) as f64).sqrt();
    let k = 100_000;
    let probes = ProbeBatch::rademacher(8, k, &mut rng).unwrap();
    let est = elbo(&p.model, batch, 10, TraceMode::Hutchinson(&probes)).unwrap().elbo;
    let se = sd / (k as f64).sqrt();
    assert!((est - exact).abs() <= 3.0 * se, "{est} vs {exact}, se {se}");
}

#[test]
fn hutchinson_single_probe_is_unbiased() {
    let p = problem(32, Flavor::R, MeanPrecond::Full, true, 6, 8);
    let batch = Batch::new(&p.x, &p.y).unwrap();
    let exact = elbo(&p.model, batch, 20, TraceMode::Exact).unwrap().elbo;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let draws: Vec<f64> = (0..20_000)
        .map(|_| {
            let pr = ProbeBatch::rademacher(6, 1, &mut rng).unwrap();
            elbo(&p.model, batch, 20, TraceMode::Hutchinson(&pr)).unwrap().elbo
        })
        .collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((mean - exact).abs() <= 4.0 * sd / n.sqrt(), "{mean} vs {exact}");
}

#[test]
fn hutchinson_rejected_for_other_flavors() {
    let p = problem(1, Flavor::L, MeanPrecond::None, false, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pr = ProbeBatch::rademacher(3, 2, &mut rng).unwrap();
    let batch = Batch::new(&p.x, &p.y).unwrap();
    assert!(matches!(
        elbo(&p.model, batch, 4, TraceMode::Hutchinson(&pr)),
        Err(Error::Config(_))
    ));
}

struct SandwichCase {
    t: DenseMatrix,
    km: DenseMatrix,
    kt: DenseMatrix,
    kuf: DenseMatrix,
    kff: Vec<f64>,
    sigma2: f64,
    exact_var: Vec<f64>,
}

fn sandwich_case(seed: u64, ng_steps: usize) -> SandwichCase {
    let p = problem(seed, Flavor::R, MeanPrecond::Full, false, 8, 12);
    let kq = p.model.kernel_quantities(&p.x).unwrap();
    let kt = p.model.ktilde().unwrap();
    let s = p.model.state.s_tilde().unwrap();
    let sigma2 = 0.5 * s.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut km = kt.clone();
    km.add_scalar_diag(-sigma2);
    let mut l = LowerTriangular::scaled_identity(8, 1.0 / kt.trace().sqrt());
    for _ in 0..ng_steps {
        l = ng_step(&l, &kt, 1.0).unwrap();
    }
    let kinv = na_inverse(&kt);
    let pk = crate::linalg::matmul(&kinv, &kq.kuf).unwrap();
    let exact_var = (0..kq.kff.len())
        .map(|n| kq.kff[n] - kq.kuf.col(n).iter().zip(pk.col(n)).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    SandwichCase {
        t: l.gram(),
        km,
        kt,
        kuf: kq.kuf,
        kff: kq.kff,
        sigma2,
        exact_var,
    }
}

#[test]
fn sandwich_orders_the_exact_variance() {
    for seed in 0..10 {
        let c = sandwich_case(400 + seed, 2);
        let sw = variance_sandwich(&c.t, &c.km, &c.kt, &c.kuf, &c.kff, c.sigma2).unwrap();
        for n in 0..c.kff.len() {
            let tol = 1e-10 * c.kff[n].max(1.0);
            assert!(
                sw.lower[n] <= c.exact_var[n] + tol,
                "L {} > σ² {}",
                sw.lower[n],
                c.exact_var[n]
            );
            assert!(
                c.exact_var[n] <= sw.upper[n] + tol,
                "σ² {} > U {}",
                c.exact_var[n],
                sw.upper[n]
            );
            let scale = sw.gap[n].abs().max(1e-300);
            assert!(
                (sw.gap[n] - sw.gap_difference[n]).abs() <= 1e-8 * scale.max(1e-8 * c.kff[n]),
                "{} vs {}",
                sw.gap[n],
                sw.gap_difference[n]
            );
        }
    }
}

#[test]
fn sandwich_is_tight_at_optimal_t_and_trivial_for_zero_kernel_column() {
    let c = sandwich_case(7, 0);
    let t = na_inverse(&c.kt);
    let sw = variance_sandwich(&t, &c.km, &c.kt, &c.kuf, &c.kff, c.sigma2).unwrap();
    for n in 0..c.kff.len() {
        assert!((sw.upper[n] - c.exact_var[n]).abs() < 1e-9);
        assert!((sw.lower[n] - c.exact_var[n]).abs() < 1e-7);
        assert!(sw.gap[n].abs() < 1e-9);
    }
    let zero = DenseMatrix::zeros(8, 2);
    let sw = variance_sandwich(&c.t, &c.km, &c.kt, &zero, &[1.5, 0.7], c.sigma2).unwrap();
    assert_eq!(sw.upper, vec![1.5, 0.7]);
    assert_eq!(sw.lower, vec![1.5, 0.7]);
    assert_eq!(sw.gap, vec![0.0, 0.0]);
    assert!(matches!(
        variance_sandwich(&c.t, &c.km, &c.kt, &zero, &[1.5, 0.7], 0.0),
        Err(Error::Domain(_))
    ));
}

fn fd_check(p: &Problem, model: &SvgpModel, mode: TraceMode<'_>, opts: GradOptions, label: &str) {
    let batch = Batch::new(&p.x, &p.y).unwrap();
    let n_total = 3 * p.y.len();
    let (_, g) = gradient(model, batch, n_total, mode, opts).unwrap();
    let params = pack(model, opts.differentiate_aux);
    assert_eq!(g.len(), params.len(), "{label}");
    let flat = params.flatten();
    let gflat = g.flatten();
    let eval = |v: &[f64]| {
        let mut m = model.clone();
        unpack(&mut m, &params.with_flat(v).unwrap()).unwrap();
        elbo(&m, batch, n_total, mode).unwrap().elbo
    };
    for i in 0..flat.len() {
        let h = 1e-5 * flat[i].abs().max(1.0);
        let mut up = flat.clone();
        up[i] += h;
        let mut dn = flat.clone();
        dn[i] -= h;
        let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
        assert!(
            (fd - gflat[i]).abs() <= 1e-4 * gflat[i].abs().max(1.0),
            "{label}: coordinate {i}: analytic {} vs fd {fd}",
            gflat[i]
        );
    }
}

#[test]
fn gradients_match_finite_differences() {
    let cases = [
        (Flavor::M, MeanPrecond::None),
        (Flavor::W, MeanPrecond::None),
        (Flavor::L, MeanPrecond::None),
        (Flavor::L, MeanPrecond::Full),
        (Flavor::R, MeanPrecond::None),
        (Flavor::R, MeanPrecond::Full),
        (Flavor::R, MeanPrecond::NaiveT),
    ];
    for (k, (flavor, precond)) in cases.into_iter().enumerate() {
        for bern in [false, true] {
            let p = problem(50 + k as u64, flavor, precond, bern, 4, 6);
            let label = format!("{flavor:?}/{precond:?}/bernoulli={bern}");
            fd_check(&p, &p.model, TraceMode::Exact, GradOptions::default(), &label);
            if flavor == Flavor::R {
                let opts = GradOptions {
                    differentiate_aux: true,
                };
                fd_check(&p, &p.model, TraceMode::Exact, opts, &format!("{label}/aux"));
                let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
                let probes = ProbeBatch::rademacher(4, 3, &mut rng).unwrap();
                fd_check(
                    &p,
                    &p.model,
                    TraceMode::Hutchinson(&probes),
                    opts,
                    &format!("{label}/hutchinson"),
                );
            }
        }
    }
}

fn max_rel_diff(a: &ParamGroups, b: &ParamGroups) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[test]
fn relaxed_gradients_equal_exact_only_with_the_newton_schulz_preconditioner() {
    for bern in [false, true] {
        let mut p = problem(61, Flavor::R, MeanPrecond::Full, bern, 5, 8);
        inject_exact_t(&mut p.model);
        let batch = Batch::new(&p.x, &p.y).unwrap();
        let l = as_flavor(&p.model, Flavor::L, MeanPrecond::Full);
        let (_, g_r) = gradient(&p.model, batch, 8, TraceMode::Exact, GradOptions::default()).unwrap();
        let (_, g_l) = gradient(&l, batch, 8, TraceMode::Exact, GradOptions::default()).unwrap();
        assert!(g_r.aux.is_empty());
        assert!(max_rel_diff(&g_r, &g_l) < 1e-6, "{}", max_rel_diff(&g_r, &g_l));

        let naive = as_flavor(&p.model, Flavor::R, MeanPrecond::NaiveT);
        let (_, g_n) = gradient(&naive, batch, 8, TraceMode::Exact, GradOptions::default()).unwrap();
        assert!(max_rel_diff(&g_n, &g_l) > 1e-3, "{}", max_rel_diff(&g_n, &g_l));
    }
}

#[test]
fn relaxed_bound_lower_bounds_exact_bound() {
    for seed in 0..6 {
        // same mean vector a = m̃
        let mut p = problem(70 + seed, Flavor::R, MeanPrecond::None, seed % 2 == 1, 5, 8);
        let l = as_flavor(&p.model, Flavor::L, MeanPrecond::None);
        let e_l = exact_elbo(&p, &l).elbo;
        assert!(exact_elbo(&p, &p.model).elbo < e_l);
        inject_exact_t(&mut p.model);
        assert!(close(exact_elbo(&p, &p.model).elbo, e_l, 1e-8));

        // preconditioned R against preconditioned L at the same a = P m̃
        let r = problem(80 + seed, Flavor::R, MeanPrecond::Full, seed % 2 == 1, 5, 8);
        let kt = r.model.ktilde().unwrap();
        let t = r.model.state.aux_l.as_ref().unwrap().gram();
        let a = rsvgp_preconditioner(&t, &kt)
            .unwrap()
            .matvec(&r.model.state.m_tilde)
            .unwrap();
        let mut l = as_flavor(&r.model, Flavor::L, MeanPrecond::Full);
        l.state.m_tilde = kt.matvec(&a).unwrap();
        assert!(exact_elbo(&r, &r.model).elbo < exact_elbo(&r, &l).elbo);
    }
}

#[test]
fn gradient_treats_auxiliary_factor_as_constant() {
    let p = problem(90, Flavor::R, MeanPrecond::Full, false, 4, 5);
    let batch = Batch::new(&p.x, &p.y).unwrap();
    let (_, g) = gradient(&p.model, batch, 5, TraceMode::Exact, GradOptions::default()).unwrap();
    assert!(g.aux.is_empty());
    let (_, g_aux) = gradient(
        &p.model,
        batch,
        5,
        TraceMode::Exact,
        GradOptions {
            differentiate_aux: true,
        },
    )
    .unwrap();
    assert_eq!(g_aux.aux.len(), 10);
    assert_eq!(g.mean, g_aux.mean);
    let l = as_flavor(&p.model, Flavor::L, MeanPrecond::None);
    assert!(matches!(
        gradient(
            &l,
            batch,
            5,
            TraceMode::Exact,
            GradOptions {
                differentiate_aux: true
            }
        ),
        Err(Error::Config(_))
    ));
}

#[test]
fn relaxed_path_never_factorises() {
    let p = problem(91, Flavor::R, MeanPrecond::Full, true, 6, 7);
    let batch = Batch::new(&p.x, &p.y).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let probes = ProbeBatch::rademacher(6, 4, &mut rng).unwrap();
    reset_factorisation_counts();
    marginals(&p.model, &p.x).unwrap();
    kl_term(&p.model).unwrap();
    elbo(&p.model, batch, 7, TraceMode::Hutchinson(&probes)).unwrap();
    gradient(
        &p.model,
        batch,
        7,
        TraceMode::Exact,
        GradOptions {
            differentiate_aux: true,
        },
    )
    .unwrap();
    gradient(
        &p.model,
        batch,
        7,
        TraceMode::Hutchinson(&probes),
        GradOptions::default(),
    )
    .unwrap();
    assert_eq!(factorisation_counts().total(), 0);

    let l = as_flavor(&p.model, Flavor::L, MeanPrecond::Full);
    elbo(&l, batch, 7, TraceMode::Exact).unwrap();
    assert!(factorisation_counts().cholesky > 0);
}

#[test]
fn assembly_identity_and_state_validation() {
    let p = problem(92, Flavor::W, MeanPrecond::None, false, 3, 4);
    let b = elbo(&p.model, Batch::new(&p.x, &p.y).unwrap(), 40, TraceMode::Exact).unwrap();
    assert_eq!(b.minibatch_scale, 10.0);
    assert_eq!(b.elbo, 10.0 * b.expected_loglik - b.kl);

    assert!(VariationalState::init(Flavor::W, 3, MeanPrecond::Full, 1e-4, 1e-3).is_err());
    assert!(VariationalState::init(Flavor::L, 3, MeanPrecond::NaiveT, 1e-4, 1e-3).is_err());
    let s = VariationalState::init(Flavor::R, 3, MeanPrecond::Full, 1e-4, 1e-3).unwrap();
    assert_eq!(s.aux_l.as_ref().unwrap().get(1, 1), 1e-3);
    assert!(s.s_tilde().unwrap().iter().all(|v| (v - 1e-4).abs() < 1e-18));
    let mut bad = s.clone();
    bad.aux_l = None;
    assert!(bad.validate().is_err());
    assert!(Batch::new(&p.x, &p.y[..2]).is_err());
}
