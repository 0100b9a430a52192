use std::fs;
use std::path::Path;
use std::process::Command;

use ifsvgp::data_io::Task;
use ifsvgp::trainer::{dump_model, evaluate, train_into, TrainTrace};
use ifsvgp::verify::{self, Suite};
use serde_json::json;

use crate::config::{RunConfig, Variant};
use crate::{CliError, Criterion, RunArgs, VariantArgs};

pub const CONFIG_FILE: &str = "config.toml";
pub const TRACE_FILE: &str = "trace.csv";
pub const EVALS_FILE: &str = "evals.csv";
pub const DUMP_FILE: &str = "model.dump";
pub const METRICS_FILE: &str = "metrics.json";
pub const MERGED_FILE: &str = "compare.csv";
pub const FINAL_FILE: &str = "final_losses.csv";

fn resolve(run: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &run.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset("default")?,
    };
    if let Some(eps) = run.epsilon {
        cfg.epsilon = eps;
    }
    if let Some(c) = run.criterion {
        cfg.criterion = match c {
            Criterion::Frobenius => "frobenius",
            Criterion::Gap => "gap",
        }
        .into();
    }
    if let Some(p) = &run.probes {
        cfg.probes = match p.as_str() {
            "exact" => None,
            s => Some(
                s.parse()
                    .map_err(|_| CliError::Config(format!("--probes takes a count or `exact`, got {s:?}")))?,
            ),
        };
    }
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &run.out {
        cfg.out = out.clone();
    }
    if let Some(d) = &run.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(t) = &run.target {
        cfg.target = t.clone();
    }
    Ok(cfg)
}

fn apply_variant(cfg: &mut RunConfig, v: &VariantArgs) -> Result<(), CliError> {
    if let Some(first) = v.flavor.first() {
        if v.flavor.iter().any(|f| f != first) {
            return Err(CliError::Config(format!(
                "conflicting --flavor values: {}",
                v.flavor.join(", ")
            )));
        }
        cfg.flavor = first.clone();
    }
    if let Some(p) = v.precondition {
        cfg.precondition = p.on();
    }
    if let Some(n) = v.ng {
        cfg.ng = n.on();
    }
    Ok(())
}

fn write(dir: &Path, name: &str, body: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|err| CliError::Config(format!("{}: {err}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|err| CliError::Config(format!("{}: {err}", dir.display())))
}

/// Trains with a resolved config, writing every output into `cfg.out`.
fn run_train(cfg: &RunConfig) -> Result<(), CliError> {
    let tc = cfg.train_config()?;
    let (data, test) = cfg.datasets()?;
    let dir = &cfg.out;
    create_dir(dir)?;
    write(dir, CONFIG_FILE, &cfg.to_toml())?;

    let mut trace = TrainTrace::default();
    let result = train_into(&tc, &data, test.as_ref(), &mut trace);
    write(dir, TRACE_FILE, &trace.to_csv())?;
    write(dir, EVALS_FILE, &trace.evals_to_csv())?;
    let outcome = result?;

    let (metrics, eval_set) = match outcome.final_metrics {
        Some(m) => (m, "test"),
        None => (evaluate(&outcome.model, &data)?, "train"),
    };
    write(dir, DUMP_FILE, &dump_model(&outcome.model, tc.seed))?;
    let label = tc.variant_label();
    let summary = json!({
        "variant": label,
        "dataset": cfg.dataset,
        "seed": tc.seed,
        "iterations": tc.iterations,
        "final_elbo": outcome.final_elbo,
        "final_loss": outcome.final_loss(),
        "nlpd": metrics.nlpd,
        (if data.task == Task::Regression { "rmse" } else { "error" }): metrics.rmse_or_error,
        "eval_set": eval_set,
        "wall_ms": outcome.wall_ms,
        "t_star_histogram": outcome.trace.t_star_histogram(),
    });
    write(
        dir,
        METRICS_FILE,
        &(serde_json::to_string_pretty(&summary).expect("json") + "\n"),
    )?;
    println!(
        "{label}: final -ELBO {:.6}, NLPD {:.4} ({eval_set}), {:.1}s, outputs in {}",
        outcome.final_loss(),
        metrics.nlpd,
        outcome.wall_ms / 1e3,
        dir.display()
    );
    Ok(())
}

pub fn train(run: &RunArgs, variant: &VariantArgs) -> Result<(), CliError> {
    let mut cfg = resolve(run)?;
    apply_variant(&mut cfg, variant)?;
    run_train(&cfg)
}

fn dir_name(label: &str) -> String {
    label.replace('(', "_").replace(')', "")
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|err| CliError::Numeric(format!("{}: {err}", path.display())))
}

/// `(iter, -elbo_estimate)` pairs from a trace file.
fn loss_trace(path: &Path) -> Result<Vec<(usize, f64)>, CliError> {
    let bad = || CliError::Numeric(format!("{}: malformed trace", path.display()));
    read(path)?
        .lines()
        .skip(1)
        .map(|line| {
            let mut cols = line.split(',');
            let iter = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            let elbo: f64 = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            Ok((iter, -elbo))
        })
        .collect()
}

pub fn compare(run: &RunArgs, labels: &[String], parallel: bool) -> Result<(), CliError> {
    let base = resolve(run)?;
    let variants = labels
        .iter()
        .map(|l| Variant::parse(l))
        .collect::<Result<Vec<_>, _>>()?;
    let mut runs: Vec<(String, RunConfig)> = Vec::new();
    for v in &variants {
        let mut cfg = base.clone();
        v.apply(&mut cfg);
        let label = cfg.train_config()?.variant_label();
        if runs.iter().any(|(l, _)| *l == label) {
            return Err(CliError::Config(format!("variant {label} given twice")));
        }
        cfg.out = base.out.join(dir_name(&label));
        runs.push((label, cfg));
    }
    create_dir(&base.out)?;
    write(&base.out, CONFIG_FILE, &base.to_toml())?;

    if parallel {
        let exe = std::env::current_exe().map_err(|err| CliError::Config(err.to_string()))?;
        let mut children = Vec::new();
        for (label, cfg) in &runs {
            create_dir(&cfg.out)?;
            write(&cfg.out, CONFIG_FILE, &cfg.to_toml())?;
            let child = Command::new(&exe)
                .arg("train")
                .arg("--config")
                .arg(cfg.out.join(CONFIG_FILE))
                .spawn()
                .map_err(|err| CliError::Config(format!("cannot start {}: {err}", exe.display())))?;
            children.push((label, child));
        }
        let mut worst: Option<(u8, String)> = None;
        for (label, mut child) in children {
            let status = child.wait().map_err(|err| CliError::Numeric(err.to_string()))?;
            if !status.success() {
                let code = status.code().unwrap_or(3).clamp(1, 255) as u8;
                if worst.as_ref().is_none_or(|(c, _)| code > *c) {
                    worst = Some((code, format!("{label} exited with status {code}")));
                }
            }
        }
        if let Some((code, msg)) = worst {
            return Err(if code == 2 {
                CliError::Config(msg)
            } else {
                CliError::Numeric(msg)
            });
        }
    } else {
        for (_, cfg) in &runs {
            run_train(cfg)?;
        }
    }

    let mut merged = String::from("flavor,iter,loss\n");
    let mut table = String::from("flavor,final_loss\n");
    println!("{:<8} {:>16}", "variant", "final -ELBO");
    for (label, cfg) in &runs {
        for (iter, loss) in loss_trace(&cfg.out.join(TRACE_FILE))? {
            merged.push_str(&format!("{label},{iter},{loss}\n"));
        }
        let metrics: serde_json::Value = serde_json::from_str(&read(&cfg.out.join(METRICS_FILE))?)
            .map_err(|err| CliError::Numeric(format!("{}: {err}", cfg.out.join(METRICS_FILE).display())))?;
        let final_loss = metrics["final_loss"].as_f64().unwrap_or(f64::NAN);
        table.push_str(&format!("{label},{final_loss}\n"));
        println!("{label:<8} {final_loss:>16.6}");
    }
    write(&base.out, MERGED_FILE, &merged)?;
    write(&base.out, FINAL_FILE, &table)?;
    Ok(())
}

pub fn verify(suite: &str) -> Result<(), CliError> {
    let suite: Suite = suite.parse()?;
    let checks = verify::run(suite);
    for c in &checks {
        println!("{c}");
    }
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.to_string())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::ChecksFailed(failed))
    }
}
