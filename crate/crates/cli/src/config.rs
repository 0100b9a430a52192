//! Run configuration: a TOML document over a named preset, then command-line
//! overrides. The resolved form is written next to every run's outputs.

use std::path::{Path, PathBuf};

use ifsvgp::bounds::Flavor;
use ifsvgp::data_io::{load_csv, split, standardise, synth_banana_like, synth_snelson_like, Dataset, Task};
use ifsvgp::natgrad::{NgSchedule, StopCriterion, StopKind};
use ifsvgp::trainer::{Plateau, TrainConfig, ZInit, ZPolicy};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `default`, `snelson` or `banana`; selects the values every other key
    /// falls back to.
    pub preset: String,
    /// `snelson`, `banana` or `csv:PATH`
    pub dataset: String,
    /// Target column for CSV data.
    pub target: String,
    /// `regression` or `classification`, CSV data only.
    pub task: String,
    /// Rows drawn for the synthetic datasets.
    pub n: usize,
    /// Share of rows held out for evaluation; 0 evaluates on the training set.
    pub test_fraction: f64,
    pub out: PathBuf,

    pub flavor: String,
    pub precondition: bool,
    pub ng: bool,
    pub num_inducing: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// `train`, `frozen` or `freeze:N`
    pub z_policy: String,
    /// `kmeans++` or `grid`
    pub z_init: String,
    pub z_lr: f64,
    pub z_beta1: f64,
    /// 0 disables plateau decay.
    pub plateau_window: usize,
    pub plateau_factor: f64,
    /// `ramp` (geometric from `gamma0` to `gamma` over `ramp_steps`) or `constant`
    pub ng_schedule: String,
    pub gamma0: f64,
    pub gamma: f64,
    pub ramp_steps: u64,
    /// `frobenius` or `gap`
    pub criterion: String,
    pub epsilon: f64,
    pub max_ng_steps: usize,
    /// Hutchinson probes; absent means exact traces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probes: Option<usize>,
    pub init_s_tilde: f64,
    pub init_aux_scale: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, CliError> {
        let (tc, dataset, n, test_fraction) = match name {
            "default" => (TrainConfig::default(), "banana", 5300, 0.1),
            "snelson" => (TrainConfig::snelson_preset(), "snelson", 200, 0.0),
            "banana" => (TrainConfig::banana_preset(), "banana", 5300, 0.0),
            other => {
                return Err(CliError::Config(format!(
                    "unknown preset {other:?} (default, snelson, banana)"
                )))
            }
        };
        let (ng_schedule, gamma0, gamma, ramp_steps) = match tc.ng_schedule {
            NgSchedule::Constant { gamma } => ("constant", 1e-5, gamma, 10),
            NgSchedule::LogLinear { gamma0, gamma_t, steps } => ("ramp", gamma0, gamma_t, steps),
        };
        let (criterion, epsilon) = match tc.stop.kind {
            StopKind::Frobenius { eps } => ("frobenius", eps),
            StopKind::ElboGap { eps } => ("gap", eps),
        };
        let plateau = tc.plateau.unwrap_or_default();
        Ok(RunConfig {
            preset: name.into(),
            dataset: dataset.into(),
            target: "y".into(),
            task: "regression".into(),
            n,
            test_fraction,
            out: PathBuf::from("out"),
            flavor: tc.flavor.name().into(),
            precondition: tc.precondition,
            ng: tc.ng,
            num_inducing: tc.num_inducing,
            batch_size: tc.batch_size,
            iterations: tc.iterations,
            lr: tc.base_lr,
            beta1: tc.beta1,
            beta2: tc.beta2,
            adam_eps: tc.adam_eps,
            z_policy: match tc.z_policy {
                ZPolicy::TrainAlways => "train".into(),
                ZPolicy::Frozen => "frozen".into(),
                ZPolicy::FreezeFirst(k) => format!("freeze:{k}"),
            },
            z_init: match tc.z_init {
                ZInit::KMeansPlusPlus => "kmeans++".into(),
                ZInit::Grid => "grid".into(),
            },
            z_lr: tc.z_lr,
            z_beta1: tc.z_beta1,
            plateau_window: if tc.plateau.is_some() { plateau.window } else { 0 },
            plateau_factor: plateau.factor,
            ng_schedule: ng_schedule.into(),
            gamma0,
            gamma,
            ramp_steps,
            criterion: criterion.into(),
            epsilon,
            max_ng_steps: tc.stop.max_steps,
            probes: tc.probes,
            init_s_tilde: tc.init_s_tilde,
            init_aux_scale: tc.init_aux_scale,
            eval_every: tc.eval_every,
            seed: tc.seed,
        })
    }

    /// Reads a config file; keys it leaves out take the values of its preset.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|err| CliError::Config(format!("{}: {err}", path.display())))?;
        Self::parse(&text).map_err(|err| match err {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let file: toml::Table = toml::from_str(text).map_err(|err| CliError::Config(err.to_string()))?;
        let preset = match file.get("preset") {
            None => "default",
            Some(toml::Value::String(s)) => s.as_str(),
            Some(_) => return Err(CliError::Config("preset must be a string".into())),
        };
        let mut table = toml::Table::try_from(Self::preset(preset)?).expect("presets serialise");
        table.extend(file);
        toml::Value::Table(table)
            .try_into()
            .map_err(|err: toml::de::Error| CliError::Config(err.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let flavor = parse_flavor(&self.flavor)?;
        let z_policy = match self.z_policy.as_str() {
            "train" => ZPolicy::TrainAlways,
            "frozen" => ZPolicy::Frozen,
            s => match s.strip_prefix("freeze:").and_then(|k| k.parse().ok()) {
                Some(k) => ZPolicy::FreezeFirst(k),
                None => return bad(format!("z_policy must be train, frozen or freeze:N, got {s:?}")),
            },
        };
        let z_init = match self.z_init.as_str() {
            "kmeans++" => ZInit::KMeansPlusPlus,
            "grid" => ZInit::Grid,
            s => return bad(format!("z_init must be kmeans++ or grid, got {s:?}")),
        };
        let ng_schedule = match self.ng_schedule.as_str() {
            "constant" => NgSchedule::Constant { gamma: self.gamma },
            "ramp" => NgSchedule::LogLinear {
                gamma0: self.gamma0,
                gamma_t: self.gamma,
                steps: self.ramp_steps,
            },
            s => return bad(format!("ng_schedule must be ramp or constant, got {s:?}")),
        };
        let kind = match self.criterion.as_str() {
            "frobenius" => StopKind::Frobenius { eps: self.epsilon },
            "gap" => StopKind::ElboGap { eps: self.epsilon },
            s => return bad(format!("criterion must be frobenius or gap, got {s:?}")),
        };
        let tc = TrainConfig {
            flavor,
            precondition: self.precondition,
            ng: self.ng,
            num_inducing: self.num_inducing,
            batch_size: self.batch_size,
            iterations: self.iterations,
            base_lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            z_policy,
            z_init,
            z_lr: self.z_lr,
            z_beta1: self.z_beta1,
            plateau: (self.plateau_window > 0).then_some(Plateau {
                window: self.plateau_window,
                factor: self.plateau_factor,
            }),
            ng_schedule,
            stop: StopCriterion {
                kind,
                max_steps: self.max_ng_steps,
            },
            probes: self.probes,
            init_s_tilde: self.init_s_tilde,
            init_aux_scale: self.init_aux_scale,
            eval_every: self.eval_every,
            seed: self.seed,
        };
        tc.validate()?;
        Ok(tc)
    }

    /// Training and evaluation sets. Synthetic data is drawn with the run
    /// seed; held-out splits are standardised with training statistics.
    pub fn datasets(&self) -> Result<(Dataset, Option<Dataset>), CliError> {
        let data = match self.dataset.as_str() {
            "snelson" => synth_snelson_like(self.n, self.seed)?,
            "banana" => synth_banana_like(self.n, self.seed)?,
            s => match s.strip_prefix("csv:") {
                Some(path) => {
                    let task = match self.task.as_str() {
                        "regression" => Task::Regression,
                        "classification" => Task::Binary,
                        t => {
                            return Err(CliError::Config(format!(
                                "task must be regression or classification, got {t:?}"
                            )))
                        }
                    };
                    load_csv(Path::new(path), &self.target, task)?
                }
                None => {
                    return Err(CliError::Config(format!(
                        "dataset must be snelson, banana or csv:PATH, got {s:?}"
                    )))
                }
            },
        };
        if self.test_fraction == 0.0 {
            return Ok((data, None));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CliError::Config(format!(
                "test_fraction must lie in [0, 1), got {}",
                self.test_fraction
            )));
        }
        let (train, test) = split(&data, 1.0 - self.test_fraction, self.seed)?;
        let (train, test, _) = standardise(&train, &test)?;
        Ok((train, Some(test)))
    }
}

pub fn parse_flavor(s: &str) -> Result<Flavor, CliError> {
    match s {
        "M" | "m" => Ok(Flavor::M),
        "W" | "w" => Ok(Flavor::W),
        "L" | "l" => Ok(Flavor::L),
        "R" | "r" => Ok(Flavor::R),
        _ => Err(CliError::Config(format!("flavor must be one of M, W, L, R, got {s:?}"))),
    }
}

/// A comparison entry in label form: `W`, `L(P)`, `R(NP)`, `R(N)`, ...
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub flavor: Flavor,
    pub ng: bool,
    pub precondition: bool,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let (head, flags) = match s.split_once('(') {
            Some((h, rest)) => match rest.strip_suffix(')') {
                Some(f) if !f.is_empty() => (h, f),
                _ => return Err(CliError::Config(format!("malformed variant {s:?}"))),
            },
            None => (s, ""),
        };
        let flavor = parse_flavor(head)?;
        let ng = flags.contains('N');
        let precondition = flags.contains('P');
        if flags.chars().any(|c| c != 'N' && c != 'P') || (ng && flavor != Flavor::R) {
            return Err(CliError::Config(format!(
                "malformed variant {s:?}: flags are N (R only) and P"
            )));
        }
        Ok(Variant {
            flavor,
            ng,
            precondition,
        })
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        cfg.flavor = self.flavor.name().into();
        cfg.ng = self.ng;
        cfg.precondition = self.precondition;
    }
}
