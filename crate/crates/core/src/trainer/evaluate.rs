//! Held-out scoring.

use crate::bounds::{marginals, Marginals, SvgpModel};
use crate::data_io::{Dataset, Task};
use crate::error::{Error, Result};
use crate::likelihood::Likelihood;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Mean negative log predictive density, in original target units.
    pub nlpd: f64,
    /// RMSE (regression, original units) or misclassification rate.
    pub rmse_or_error: f64,
}

/// Scores `y` under predictive marginals of the latent function.
///
/// `target_std` rescales regression scores back to original units: the NLPD
/// gains `log target_std` and the RMSE is multiplied by it. Classification
/// predicts `+1` when `P(y = +1) ≥ 0.5`.
pub fn evaluate_marginals(
    lik: &Likelihood,
    marg: &Marginals,
    y: &[f64],
    task: Task,
    target_std: f64,
) -> Result<Metrics> {
    if marg.mu.len() != y.len() || y.is_empty() {
        return Err(Error::shape("evaluate", "marginals and targets differ in length"));
    }
    let n = y.len() as f64;
    let mut nlpd = 0.0;
    let mut score = 0.0;
    for ((yn, mu), var) in y.iter().zip(&marg.mu).zip(&marg.var) {
        nlpd -= lik.log_predictive(*yn, *mu, *var);
        score += match task {
            Task::Regression => (yn - mu).powi(2),
            Task::Binary => {
                let p = lik
                    .positive_probability(*mu, *var)
                    .ok_or_else(|| Error::Config("classification needs the Bernoulli likelihood".into()))?;
                let pred = if p >= 0.5 { 1.0 } else { -1.0 };
                if pred != *yn {
                    1.0
                } else {
                    0.0
                }
            }
        };
    }
    Ok(match task {
        Task::Regression => Metrics {
            nlpd: nlpd / n + target_std.ln(),
            rmse_or_error: (score / n).sqrt() * target_std,
        },
        Task::Binary => Metrics {
            nlpd: nlpd / n,
            rmse_or_error: score / n,
        },
    })
}

pub fn evaluate(model: &SvgpModel, test: &Dataset) -> Result<Metrics> {
    let marg = marginals(model, &test.x)?;
    evaluate_marginals(&model.lik, &marg, &test.y, test.task, test.transform.target_std)
}
