use ifsvgp::bounds::{self, Batch, Flavor, GradOptions, TraceMode};
use ifsvgp::data_io::{synth_banana_like, synth_snelson_like, Dataset};
use ifsvgp::linalg::{factorisation_counts, reset_factorisation_counts};
use ifsvgp::natgrad::{inner_loop_calls, reset_inner_loop_calls};
use ifsvgp::params::{pack, unpack};
use ifsvgp::trainer::{dump_model, evaluate, load_model, train, train_into, TrainConfig, TrainTrace, ZPolicy};
use ifsvgp::Error;
use nalgebra::{DMatrix, DVector};

fn snelson(iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        seed,
        ..TrainConfig::snelson_preset()
    }
}

fn variant(flavor: Flavor, precondition: bool, ng: bool, base: TrainConfig) -> TrainConfig {
    TrainConfig {
        flavor,
        precondition,
        ng,
        ..base
    }
}

#[test]
fn identical_inputs_give_identical_traces() {
    let data = synth_snelson_like(200, 4).unwrap();
    let test = synth_snelson_like(50, 5).unwrap();
    let cfg = TrainConfig {
        eval_every: 50,
        ..snelson(300, 4)
    };
    let a = train(&cfg, &data, Some(&test)).unwrap();
    let b = train(&cfg, &data, Some(&test)).unwrap();
    assert!(a.trace.same_values(&b.trace));
    assert_eq!(a.model, b.model);
    assert_eq!(a.final_elbo.to_bits(), b.final_elbo.to_bits());
    assert_eq!(a.trace.evals.len(), 6);

    let c = train(&TrainConfig { seed: 5, ..cfg }, &data, Some(&test)).unwrap();
    assert!(!a.trace.same_values(&c.trace));
}

#[test]
fn trace_rows_are_complete_and_finite() {
    let data = synth_snelson_like(200, 0).unwrap();
    let out = train(&snelson(50, 0), &data, None).unwrap();
    assert_eq!(out.trace.rows.len(), 50);
    for (i, r) in out.trace.rows.iter().enumerate() {
        assert_eq!(r.iter, i);
        assert!(r.elbo_estimate.is_finite() && r.lr_used > 0.0 && r.wall_ms >= 0.0);
        assert!(r.ng_residual.unwrap().is_finite());
        assert_eq!(r.t_star, 1);
        assert_eq!(r.gamma_used, Some(1.0));
    }
    let csv = out.trace.to_csv();
    assert!(csv.starts_with(TrainTrace::CSV_HEADER));
    assert_eq!(csv.lines().count(), 51);
}

#[test]
fn baselines_never_touch_natural_gradients() {
    let data = synth_snelson_like(200, 1).unwrap();
    for (flavor, pre) in [
        (Flavor::M, false),
        (Flavor::W, false),
        (Flavor::L, false),
        (Flavor::L, true),
    ] {
        reset_inner_loop_calls();
        let out = train(&variant(flavor, pre, true, snelson(40, 1)), &data, None).unwrap();
        assert_eq!(inner_loop_calls(), 0, "{flavor:?}");
        assert!(out.trace.rows.iter().all(|r| r.t_star == 0 && r.ng_residual.is_none()));
    }
    reset_inner_loop_calls();
    train(&snelson(40, 1), &data, None).unwrap();
    assert_eq!(inner_loop_calls(), 40);
}

#[test]
fn relaxed_training_never_factorises() {
    let data = synth_banana_like(300, 2).unwrap();
    let test = synth_banana_like(60, 3).unwrap();
    let base = TrainConfig {
        iterations: 30,
        num_inducing: 16,
        batch_size: 32,
        eval_every: 10,
        seed: 2,
        ..TrainConfig::default()
    };
    let configs = [
        base.clone(),
        TrainConfig {
            probes: Some(8),
            ..base.clone()
        },
        variant(Flavor::R, false, false, base.clone()),
        TrainConfig {
            z_policy: ZPolicy::TrainAlways,
            ..variant(Flavor::R, true, false, base.clone())
        },
    ];
    for cfg in configs {
        reset_factorisation_counts();
        let out = train(&cfg, &data, Some(&test)).unwrap();
        assert_eq!(factorisation_counts().total(), 0, "{}", cfg.variant_label());
        assert!(out.final_metrics.is_some());
    }
    reset_factorisation_counts();
    train(&variant(Flavor::L, true, false, base), &data, None).unwrap();
    assert!(factorisation_counts().cholesky > 0);
}

#[test]
fn gradient_holds_the_auxiliary_factor_fixed() {
    let data = synth_snelson_like(200, 3).unwrap();
    let out = train(&snelson(100, 3), &data, None).unwrap();
    let model = out.model;
    let idx: Vec<usize> = (0..12).collect();
    let sub = data.subset(&idx);
    let batch = Batch::new(&sub.x, &sub.y).unwrap();
    let (_, g) = bounds::gradient(&model, batch, 200, TraceMode::Exact, GradOptions::default()).unwrap();
    let params = pack(&model, false);
    assert!(g.aux.is_empty() && params.aux.is_empty());
    assert_eq!(g.len(), params.len());

    // differentiate ξ ↦ ELBO(ξ, L) with L frozen at its current value
    let flat = params.flatten();
    let gflat = g.flatten();
    let eval = |v: &[f64]| {
        let mut m = model.clone();
        unpack(&mut m, &params.with_flat(v).unwrap()).unwrap();
        assert_eq!(m.state.aux_l, model.state.aux_l);
        bounds::elbo(&m, batch, 200, TraceMode::Exact).unwrap().elbo
    };
    for i in 0..flat.len() {
        let h = 1e-5 * flat[i].abs().max(1.0);
        let (mut up, mut dn) = (flat.clone(), flat.clone());
        up[i] += h;
        dn[i] -= h;
        let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
        assert!(
            (fd - gflat[i]).abs() <= 1e-4 * gflat[i].abs().max(1.0),
            "{i}: {} vs {fd}",
            gflat[i]
        );
    }
}

fn max_smoothed_drop(trace: &TrainTrace, from: usize, window: usize) -> f64 {
    let e: Vec<f64> = trace.rows.iter().map(|r| r.elbo_estimate).collect();
    let ma: Vec<f64> = (from..=e.len() - window)
        .map(|i| e[i..i + window].iter().sum::<f64>() / window as f64)
        .collect();
    ma.windows(2).map(|w| w[0] - w[1]).fold(f64::MIN, f64::max)
}

#[test]
fn smoothed_elbo_keeps_rising_with_frozen_inducing_points() {
    // Full batches make the per-iteration ELBO exact, so the smoothed curve is
    // free of sampling noise.
    for seed in 0..3 {
        let data = synth_snelson_like(200, seed).unwrap();
        let base = TrainConfig {
            batch_size: 200,
            ..snelson(3000, seed)
        };
        for cfg in [
            base.clone(),
            variant(Flavor::L, true, false, base.clone()),
            variant(Flavor::W, false, false, base.clone()),
        ] {
            let out = train(&cfg, &data, None).unwrap();
            let drop = max_smoothed_drop(&out.trace, 500, 200);
            assert!(
                drop <= 1e-3,
                "{} seed {seed}: smoothed ELBO fell by {drop}",
                cfg.variant_label()
            );
        }
    }
}

#[test]
fn banana_classifier_is_accurate() {
    let data = synth_banana_like(2000, 11).unwrap();
    let test = synth_banana_like(1000, 12).unwrap();
    let cfg = TrainConfig {
        iterations: 2000,
        seed: 11,
        ..TrainConfig::banana_preset()
    };
    let out = train(&cfg, &data, Some(&test)).unwrap();
    let err = out.final_metrics.unwrap().rmse_or_error;
    assert!(err < 0.15, "test error {err}");
}

#[test]
fn plateau_decay_only_lowers_learning_rates() {
    let data = synth_snelson_like(200, 6).unwrap();
    let cfg = TrainConfig {
        plateau: Some(ifsvgp::trainer::Plateau {
            window: 20,
            factor: 0.5,
        }),
        ..snelson(1200, 6)
    };
    let out = train(&cfg, &data, None).unwrap();
    let lrs: Vec<f64> = out.trace.rows.iter().map(|r| r.lr_used).collect();
    assert_eq!(lrs[0], cfg.base_lr);
    assert!(lrs.windows(2).all(|w| w[1] == w[0] || w[1] == 0.5 * w[0]));
    assert!(lrs.last().unwrap() < &cfg.base_lr);
}

#[test]
fn configuration_errors_are_reported() {
    let data = synth_snelson_like(8, 0).unwrap();
    let too_many = TrainConfig {
        num_inducing: 9,
        ..snelson(5, 0)
    };
    assert!(matches!(train(&too_many, &data, None), Err(Error::Config(_))));
    let bad_precond = variant(Flavor::W, true, false, snelson(5, 0));
    assert!(matches!(train(&bad_precond, &data, None), Err(Error::Config(_))));
    let probes_on_l = TrainConfig {
        probes: Some(4),
        ..variant(Flavor::L, false, false, snelson(5, 0))
    };
    assert!(matches!(train(&probes_on_l, &data, None), Err(Error::Config(_))));
}

#[test]
fn divergence_is_reported_with_iteration_and_partial_trace() {
    let data = synth_snelson_like(200, 0).unwrap();
    let cfg = TrainConfig {
        base_lr: 1e6,
        ..variant(Flavor::M, false, false, snelson(200, 0))
    };
    let mut trace = TrainTrace::default();
    match train_into(&cfg, &data, None, &mut trace) {
        Err(Error::AtIteration { iteration, .. }) => assert_eq!(trace.rows.len(), iteration),
        other => panic!("expected a training failure, got {:?}", other.map(|o| o.final_elbo)),
    }
}

fn trained(flavor: Flavor, precondition: bool, ng: bool, data: &Dataset) -> ifsvgp::bounds::SvgpModel {
    train(&variant(flavor, precondition, ng, snelson(150, 9)), data, None)
        .unwrap()
        .model
}

#[test]
fn dumps_reproduce_evaluation_bit_for_bit() {
    let data = synth_snelson_like(200, 9).unwrap();
    let test = synth_snelson_like(40, 10).unwrap();
    for (flavor, pre, ng) in [
        (Flavor::M, false, false),
        (Flavor::W, false, false),
        (Flavor::L, true, false),
        (Flavor::R, true, true),
        (Flavor::R, false, false),
    ] {
        let model = trained(flavor, pre, ng, &data);
        let text = dump_model(&model, 9);
        let (back, seed) = load_model(&text).unwrap();
        assert_eq!(seed, 9);
        assert_eq!(back, model);
        let (a, b) = (evaluate(&model, &test).unwrap(), evaluate(&back, &test).unwrap());
        assert_eq!(a.nlpd.to_bits(), b.nlpd.to_bits());
        assert_eq!(a.rmse_or_error.to_bits(), b.rmse_or_error.to_bits());
    }
    let banana = synth_banana_like(200, 1).unwrap();
    let cfg = TrainConfig {
        num_inducing: 8,
        batch_size: 32,
        iterations: 20,
        ..TrainConfig::banana_preset()
    };
    let model = train(&cfg, &banana, None).unwrap().model;
    let (back, _) = load_model(&dump_model(&model, 0)).unwrap();
    assert_eq!(back, model);
}

#[test]
fn dump_rejects_foreign_documents() {
    let data = synth_snelson_like(50, 0).unwrap();
    let model = trained(Flavor::W, false, false, &data);
    let text = dump_model(&model, 0);
    let renamed = text.replace("ifsvgp-model/1", "ifsvgp-model/99");
    assert!(matches!(load_model(&renamed), Err(Error::Dump(_))));
    let extra = text.replacen('{', "{\"surprise\": 1,", 1);
    assert!(matches!(load_model(&extra), Err(Error::Dump(_))));
    assert!(matches!(load_model("not json"), Err(Error::Dump(_))));
}

fn rows_of(v: &serde_json::Value) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect())
        .collect();
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

/// Reads the dump as plain JSON and scores the test points with nalgebra.
fn scripted_nlpd(dump: &str, test: &Dataset) -> f64 {
    let doc: serde_json::Value = serde_json::from_str(dump).unwrap();
    assert_eq!(doc["flavor"], "W");
    let var = doc["kernel"]["log_variance"].as_f64().unwrap().exp();
    let ls: Vec<f64> = doc["kernel"]["log_lengthscales"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap().exp())
        .collect();
    let noise = doc["likelihood"]["log_obs_variance"].as_f64().unwrap().exp();
    let z = rows_of(&doc["inducing"]);
    let ls_s = rows_of(&doc["covariance"]["lower"]);
    let m_tilde = DVector::from_iterator(
        z.nrows(),
        doc["m_tilde"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()),
    );
    let jitter = doc["jitter"].as_f64().unwrap();
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).zip(&ls).map(|((x, y), l)| ((x - y) / l).powi(2)).sum();
        var * (-0.5 * d2).exp()
    };
    let m = z.nrows();
    let zr = |i: usize| z.row(i).iter().cloned().collect::<Vec<f64>>();
    let kuu = DMatrix::from_fn(m, m, |i, j| k(&zr(i), &zr(j)) + if i == j { jitter } else { 0.0 });
    let luu = kuu.cholesky().unwrap().l();
    let mut total = 0.0;
    for n in 0..test.len() {
        let xn = test.x.row(n);
        let kun = DVector::from_fn(m, |i, _| k(&zr(i), &xn));
        let a = luu.solve_lower_triangular(&kun).unwrap();
        let mu = a.dot(&m_tilde);
        let b = ls_s.transpose() * &a;
        let v = var - a.norm_squared() + b.norm_squared() + noise;
        total += 0.5 * (2.0 * std::f64::consts::PI * v).ln() + (test.y[n] - mu).powi(2) / (2.0 * v);
    }
    total / test.len() as f64 + test.transform.target_std.ln()
}

#[test]
fn nlpd_matches_a_scripted_recomputation_from_a_dump() {
    let data = synth_snelson_like(200, 13).unwrap();
    let test = synth_snelson_like(10, 14).unwrap();
    let model = trained(Flavor::W, false, false, &data);
    let text = dump_model(&model, 13);
    let ours = evaluate(&load_model(&text).unwrap().0, &test).unwrap().nlpd;
    let oracle = scripted_nlpd(&text, &test);
    assert!(
        (ours - oracle).abs() <= 1e-10 * oracle.abs().max(1.0),
        "{ours} vs {oracle}"
    );
}
