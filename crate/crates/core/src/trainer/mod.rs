//! Outer optimisation: per-group Adam on the bound, alternating with natural
//! gradient updates of the auxiliary factor for the `R` flavor.

pub mod adam;
mod dump;
mod evaluate;
mod kmeans;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bounds::{self, Batch, Flavor, GradOptions, MeanPrecond, SvgpModel, TraceMode, VariationalState};
use crate::data_io::{Dataset, Task};
use crate::error::{Error, Result};
use crate::kernel::{kernel_matrix, KernelSpec};
use crate::likelihood::{BernoulliLik, GaussianLik, Likelihood};
use crate::linalg::{DenseMatrix, ProbeBatch};
use crate::natgrad::{self, GapContext, NgSchedule, ScheduleState, StopCriterion, StopKind};
use crate::params::{pack, unpack, ParamGroups};

pub use adam::{adam_step, AdamState};
pub use dump::{dump_model, load_model, SCHEMA};
pub use evaluate::{evaluate, evaluate_marginals, Metrics};
pub use kmeans::{grid_init, kmeanspp_init};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZPolicy {
    TrainAlways,
    /// Hold `Z` fixed for this many iterations, then train it.
    FreezeFirst(usize),
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZInit {
    KMeansPlusPlus,
    /// Uniform grid over the input range (1-D inputs only).
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    pub window: usize,
    pub factor: f64,
}

impl Default for Plateau {
    fn default() -> Self {
        Plateau {
            window: 100,
            factor: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub flavor: Flavor,
    /// Preconditioned inducing mean (`L` and `R` only).
    pub precondition: bool,
    /// Natural-gradient updates for `T` (`R` only, ignored otherwise); when
    /// off, `T` is trained by Adam together with everything else.
    pub ng: bool,
    pub num_inducing: usize,
    /// Clipped to the dataset size.
    pub batch_size: usize,
    pub iterations: usize,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub z_policy: ZPolicy,
    pub z_init: ZInit,
    pub z_lr: f64,
    pub z_beta1: f64,
    pub plateau: Option<Plateau>,
    pub ng_schedule: NgSchedule,
    pub stop: StopCriterion,
    /// Hutchinson probes per iteration; `None` evaluates traces exactly.
    pub probes: Option<usize>,
    /// Initial `s̃`.
    pub init_s_tilde: f64,
    /// Initial `L = β I`.
    pub init_aux_scale: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            flavor: Flavor::R,
            precondition: true,
            ng: true,
            num_inducing: 64,
            batch_size: 100,
            iterations: 20_000,
            base_lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            z_policy: ZPolicy::FreezeFirst(1000),
            z_init: ZInit::KMeansPlusPlus,
            z_lr: 1e-3,
            z_beta1: 0.99,
            plateau: Some(Plateau::default()),
            ng_schedule: NgSchedule::default(),
            stop: StopCriterion::default(),
            probes: None,
            init_s_tilde: 1e-4,
            init_aux_scale: 1e-3,
            eval_every: 250,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Toy 1-D regression setting: `M = 10` on a grid, `B = M`, frozen `Z`,
    /// fixed learning rate `5e-3`, one NG step with `γ = 1` per iteration.
    pub fn snelson_preset() -> Self {
        TrainConfig {
            num_inducing: 10,
            batch_size: 10,
            iterations: 10_000,
            base_lr: 5e-3,
            z_policy: ZPolicy::Frozen,
            z_init: ZInit::Grid,
            plateau: None,
            ng_schedule: NgSchedule::Constant { gamma: 1.0 },
            stop: single_ng_step(),
            ..TrainConfig::default()
        }
    }

    /// Toy 2-D classification setting: `M = 64` from k-means++, `B = M`,
    /// frozen `Z`, fixed learning rate `1e-2`, one NG step per iteration.
    pub fn banana_preset() -> Self {
        TrainConfig {
            num_inducing: 64,
            batch_size: 64,
            base_lr: 1e-2,
            z_init: ZInit::KMeansPlusPlus,
            ..TrainConfig::snelson_preset()
        }
    }

    /// Short label in the `W`, `L(P)`, `R(NP)` style.
    pub fn variant_label(&self) -> String {
        let mut suffix = String::new();
        if self.flavor == Flavor::R && self.ng {
            suffix.push('N');
        }
        if self.precondition {
            suffix.push('P');
        }
        if suffix.is_empty() {
            self.flavor.name().to_string()
        } else {
            format!("{}({suffix})", self.flavor.name())
        }
    }

    pub fn mean_precond(&self) -> MeanPrecond {
        if self.precondition {
            MeanPrecond::Full
        } else {
            MeanPrecond::None
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_inducing == 0 || self.batch_size == 0 || self.iterations == 0 || self.eval_every == 0 {
            return bad("counts must be at least 1");
        }
        if self.precondition && matches!(self.flavor, Flavor::M | Flavor::W) {
            return bad("mean preconditioning applies to the L and R flavors only");
        }
        if self.probes.is_some() && self.flavor != Flavor::R {
            return bad("Hutchinson probes apply to the R flavor only");
        }
        if self.probes == Some(0) {
            return bad("probe count must be at least 1");
        }
        if !(self.base_lr > 0.0) || !(self.z_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(0.0..1.0).contains(&self.z_beta1)
        {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("Adam eps must be positive");
        }
        if let Some(p) = self.plateau {
            if p.window == 0 || !(p.factor > 0.0 && p.factor < 1.0) {
                return bad("plateau needs window >= 1 and factor in (0, 1)");
            }
        }
        if !(self.init_s_tilde > 0.0) || !(self.init_aux_scale > 0.0) {
            return bad("initial scales must be positive");
        }
        self.ng_schedule.validate()?;
        self.stop.validate()
    }

    fn uses_ng(&self) -> bool {
        self.flavor == Flavor::R && self.ng
    }
}

fn single_ng_step() -> StopCriterion {
    StopCriterion {
        kind: StopKind::Frobenius { eps: 1e-12 },
        max_steps: 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    /// Minibatch ELBO before the Adam step.
    pub elbo_estimate: f64,
    pub t_star: usize,
    /// `‖LᵀK̃L − I‖_F / √M` after the NG loop (`R` only).
    pub ng_residual: Option<f64>,
    pub gamma_used: Option<f64>,
    pub lr_used: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub iter: usize,
    pub nlpd: f64,
    pub rmse_or_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub evals: Vec<EvalRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str = "iter,elbo_estimate,t_star,ng_residual,gamma_used,lr_used,wall_ms";
    pub const EVAL_CSV_HEADER: &'static str = "iter,nlpd,rmse_or_error";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:e},{},{},{},{:e},{:.3}\n",
                r.iter,
                r.elbo_estimate,
                r.t_star,
                opt(r.ng_residual),
                opt(r.gamma_used),
                r.lr_used,
                r.wall_ms
            ));
        }
        s
    }

    pub fn evals_to_csv(&self) -> String {
        let mut s = String::from(Self::EVAL_CSV_HEADER);
        s.push('\n');
        for e in &self.evals {
            s.push_str(&format!("{},{:e},{:e}\n", e.iter, e.nlpd, e.rmse_or_error));
        }
        s
    }

    /// Equality ignoring wall-clock times.
    pub fn same_values(&self, other: &TrainTrace) -> bool {
        let strip = |t: &TrainTrace| -> Vec<TraceRow> {
            t.rows
                .iter()
                .map(|r| TraceRow {
                    wall_ms: 0.0,
                    ..r.clone()
                })
                .collect()
        };
        strip(self) == strip(other) && self.evals == other.evals
    }

    /// Counts of `t*` values, index = `t*`.
    pub fn t_star_histogram(&self) -> Vec<usize> {
        let max = self.rows.iter().map(|r| r.t_star).max().unwrap_or(0);
        let mut h = vec![0; max + 1];
        for r in &self.rows {
            h[r.t_star] += 1;
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SvgpModel,
    pub trace: TrainTrace,
    /// Full-batch ELBO with exact traces at the end of training.
    pub final_elbo: f64,
    pub final_metrics: Option<Metrics>,
    pub wall_ms: f64,
}

impl TrainOutcome {
    /// `-ELBO`
    pub fn final_loss(&self) -> f64 {
        -self.final_elbo
    }
}

/// Fresh model: unit kernel variance and lengthscales, unit observation
/// variance, standard variational initialisation.
pub fn init_model(config: &TrainConfig, data: &Dataset) -> Result<SvgpModel> {
    config.validate()?;
    if config.num_inducing > data.len() {
        return Err(Error::Config(format!(
            "{} inducing points but only {} training rows",
            config.num_inducing,
            data.len()
        )));
    }
    let inducing = match config.z_init {
        ZInit::KMeansPlusPlus => kmeanspp_init(&data.x, config.num_inducing, config.seed)?,
        ZInit::Grid => grid_init(&data.x, config.num_inducing)?,
    };
    let lik = match data.task {
        Task::Regression => Likelihood::Gaussian(GaussianLik::new(1.0)?),
        Task::Binary => Likelihood::Bernoulli(BernoulliLik::default()),
    };
    let state = VariationalState::init(
        config.flavor,
        config.num_inducing,
        config.mean_precond(),
        config.init_s_tilde,
        config.init_aux_scale,
    )?;
    SvgpModel::new(KernelSpec::default_for_dim(data.dim()), lik, inducing, state)
}

struct Sampler {
    perm: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Sampler {
    fn new(n: usize, batch: usize) -> Self {
        Sampler {
            perm: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
        }
    }

    /// Uniform without replacement within an epoch; the epoch's tail that
    /// cannot fill a batch is dropped and the order reshuffled.
    fn next(&mut self, rng: &mut ChaCha8Rng) -> &[usize] {
        if self.pos + self.batch > self.perm.len() {
            self.perm.shuffle(rng);
            self.pos = 0;
        }
        let s = &self.perm[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        s
    }
}

struct Optimiser {
    hyper: AdamState,
    mean: AdamState,
    cov: AdamState,
    z: AdamState,
    aux: AdamState,
}

impl Optimiser {
    fn new(config: &TrainConfig, p: &ParamGroups) -> Result<Self> {
        let base = |n| AdamState::new(n, config.base_lr, config.beta1, config.beta2, config.adam_eps);
        Ok(Optimiser {
            hyper: base(p.hyper.len())?,
            mean: base(p.mean.len())?,
            cov: base(p.cov.len())?,
            z: AdamState::new(p.z.len(), config.z_lr, config.z_beta1, config.beta2, config.adam_eps)?,
            aux: base(p.aux.len())?,
        })
    }

    fn scale_lrs(&mut self, f: f64) {
        for s in [
            &mut self.hyper,
            &mut self.mean,
            &mut self.cov,
            &mut self.z,
            &mut self.aux,
        ] {
            s.lr *= f;
        }
    }

    fn step(&mut self, p: &mut ParamGroups, g: &ParamGroups, train_z: bool) -> Result<()> {
        adam_step(&mut self.hyper, &mut p.hyper, &g.hyper)?;
        adam_step(&mut self.mean, &mut p.mean, &g.mean)?;
        adam_step(&mut self.cov, &mut p.cov, &g.cov)?;
        if train_z {
            adam_step(&mut self.z, &mut p.z, &g.z)?;
        }
        if !p.aux.is_empty() {
            adam_step(&mut self.aux, &mut p.aux, &g.aux)?;
        }
        Ok(())
    }
}

/// Exponentially smoothed loss compared with its running best.
struct PlateauDetector {
    cfg: Plateau,
    alpha: f64,
    ema: Option<f64>,
    best: f64,
    since: usize,
}

impl PlateauDetector {
    fn new(cfg: Plateau) -> Self {
        let half_life = (cfg.window as f64 / 2.0).max(1.0);
        PlateauDetector {
            cfg,
            alpha: 1.0 - 0.5f64.powf(1.0 / half_life),
            ema: None,
            best: f64::INFINITY,
            since: 0,
        }
    }

    /// Returns true when the learning rates should decay.
    fn observe(&mut self, loss: f64) -> bool {
        let ema = match self.ema {
            None => loss,
            Some(e) => e + self.alpha * (loss - e),
        };
        self.ema = Some(ema);
        if ema < self.best {
            self.best = ema;
            self.since = 0;
            return false;
        }
        self.since += 1;
        if self.since >= self.cfg.window {
            self.since = 0;
            self.best = ema;
            return true;
        }
        false
    }
}

fn batch_of(data: &Dataset, idx: &[usize]) -> (DenseMatrix, Vec<f64>) {
    let x = DenseMatrix::from_fn(idx.len(), data.dim(), |i, j| data.x.get(idx[i], j));
    (x, idx.iter().map(|&i| data.y[i]).collect())
}

fn at(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::AtIteration { .. } => e,
        other => Error::AtIteration {
            iteration,
            source: Box::new(other),
        },
    }
}

pub fn train(config: &TrainConfig, data: &Dataset, test: Option<&Dataset>) -> Result<TrainOutcome> {
    let mut trace = TrainTrace::default();
    train_into(config, data, test, &mut trace)
}

/// As [`train`], writing rows into `trace` as they are produced so that a
/// caller still has them if training fails.
pub fn train_into(
    config: &TrainConfig,
    data: &Dataset,
    test: Option<&Dataset>,
    trace: &mut TrainTrace,
) -> Result<TrainOutcome> {
    let model = init_model(config, data)?;
    train_model_into(config, model, data, test, trace)
}

/// Trains an already initialised model.
pub fn train_model_into(
    config: &TrainConfig,
    mut model: SvgpModel,
    data: &Dataset,
    test: Option<&Dataset>,
    trace: &mut TrainTrace,
) -> Result<TrainOutcome> {
    config.validate()?;
    if model.flavor() != config.flavor {
        return Err(Error::Config("model flavor differs from configuration".into()));
    }
    let gap_needed = matches!(config.stop.kind, StopKind::ElboGap { .. });
    if gap_needed && config.uses_ng() && model.lik.obs_variance().is_none() {
        return Err(Error::Config(
            "the ELBO-gap criterion needs a Gaussian likelihood".into(),
        ));
    }
    let start = Instant::now();
    let n = data.len();
    let m = model.num_inducing();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(config.seed);
    probe_rng.set_stream(1);
    let mut sampler = Sampler::new(n, config.batch_size);
    let adam_aux = config.flavor == Flavor::R && !config.ng;
    let opts = GradOptions {
        differentiate_aux: adam_aux,
    };
    let mut opt = Optimiser::new(config, &pack(&model, adam_aux))?;
    let mut plateau = config.plateau.map(PlateauDetector::new);
    let mut schedule = ScheduleState::new(config.ng_schedule);

    for iter in 0..config.iterations {
        let ctx = at(iter);
        let (bx, by) = batch_of(data, sampler.next(&mut rng));
        let scale = n as f64 / by.len() as f64;

        let (mut t_star, mut ng_residual, mut gamma_used) = (0, None, None);
        if config.flavor == Flavor::R {
            let kt = model.ktilde().map_err(&ctx)?;
            let l = model.state.aux_l.clone().expect("R state has an auxiliary factor");
            if config.ng {
                let kuf;
                let gap = if gap_needed {
                    kuf = kernel_matrix(&model.kernel, model.inducing.locations(), &bx).map_err(&ctx)?;
                    let s = model.state.s_tilde().expect("R state has diagonal S̃");
                    Some(GapContext {
                        kuf: &kuf,
                        sigma2: 0.5 * s.iter().copied().fold(f64::INFINITY, f64::min),
                        sigma2_obs: model.lik.obs_variance().expect("checked above"),
                        scale,
                    })
                } else {
                    None
                };
                let (l_new, report) =
                    natgrad::inner_loop(&l, &kt, &mut schedule, &config.stop, gap.as_ref()).map_err(&ctx)?;
                model.state.aux_l = Some(l_new);
                t_star = report.t_star;
                ng_residual = Some(report.final_residual);
                gamma_used = report.gamma_used;
            } else {
                ng_residual = Some(natgrad::frobenius_residual(&l, &kt).map_err(&ctx)?);
            }
        }

        let probes = match config.probes {
            Some(k) => Some(ProbeBatch::rademacher(m, k, &mut probe_rng).map_err(&ctx)?),
            None => None,
        };
        let mode = match &probes {
            Some(p) => TraceMode::Hutchinson(p),
            None => TraceMode::Exact,
        };
        let batch = Batch::new(&bx, &by).map_err(&ctx)?;
        let (value, grad) = bounds::gradient(&model, batch, n, mode, opts).map_err(&ctx)?;
        if !value.elbo.is_finite() {
            return Err(ctx(Error::NonFinite {
                iteration: iter,
                what: "ELBO".into(),
            }));
        }
        if !grad.is_finite() {
            return Err(ctx(Error::NonFinite {
                iteration: iter,
                what: "gradient".into(),
            }));
        }
        let lr_used = opt.hyper.lr;
        let train_z = match config.z_policy {
            ZPolicy::TrainAlways => true,
            ZPolicy::FreezeFirst(k) => iter >= k,
            ZPolicy::Frozen => false,
        };
        let mut params = pack(&model, adam_aux);
        opt.step(&mut params, &grad, train_z).map_err(&ctx)?;
        unpack(&mut model, &params).map_err(&ctx)?;

        if let Some(p) = plateau.as_mut() {
            if p.observe(-value.elbo) {
                opt.scale_lrs(p.cfg.factor);
            }
        }
        trace.rows.push(TraceRow {
            iter,
            elbo_estimate: value.elbo,
            t_star,
            ng_residual,
            gamma_used,
            lr_used,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        let last = iter + 1 == config.iterations;
        if let Some(t) = test {
            if (iter + 1) % config.eval_every == 0 || last {
                let met = evaluate(&model, t).map_err(&ctx)?;
                trace.evals.push(EvalRow {
                    iter,
                    nlpd: met.nlpd,
                    rmse_or_error: met.rmse_or_error,
                });
            }
        }
    }

    let end = config.iterations;
    let full = Batch::new(&data.x, &data.y).map_err(at(end))?;
    let final_elbo = bounds::elbo(&model, full, n, TraceMode::Exact).map_err(at(end))?.elbo;
    let final_metrics = match test {
        Some(t) => Some(evaluate(&model, t).map_err(at(end))?),
        None => None,
    };
    Ok(TrainOutcome {
        model,
        trace: trace.clone(),
        final_elbo,
        final_metrics,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
