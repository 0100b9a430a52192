//! Versioned JSON model dumps.

use serde::{Deserialize, Serialize};

use crate::bounds::{Covariance, Flavor, MeanPrecond, SvgpModel, VariationalState};
use crate::error::{Error, Result};
use crate::kernel::{InducingSet, KernelSpec};
use crate::likelihood::{BernoulliLik, GaussianLik, Likelihood};
use crate::linalg::{DenseMatrix, LowerTriangular};

pub const SCHEMA: &str = "ifsvgp-model/1";

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LikDto {
    Gaussian { log_obs_variance: f64 },
    Bernoulli { quadrature_order: usize },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum CovDto {
    /// Rows of the lower-triangular factor.
    Cholesky {
        lower: Vec<Vec<f64>>,
    },
    LogDiag {
        log_s: Vec<f64>,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDto {
    schema: String,
    flavor: String,
    mean_precond: String,
    jitter: f64,
    kernel: KernelSpec,
    likelihood: LikDto,
    /// Rows of `Z`.
    inducing: Vec<Vec<f64>>,
    m_tilde: Vec<f64>,
    covariance: CovDto,
    aux_l: Option<Vec<Vec<f64>>>,
    seed: u64,
}

fn rows(a: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..a.rows()).map(|i| a.row(i)).collect()
}

fn lower(r: &[Vec<f64>]) -> Result<LowerTriangular> {
    LowerTriangular::from_dense(DenseMatrix::from_rows(r).map_err(|e| Error::Dump(e.to_string()))?)
        .map_err(|e| Error::Dump(e.to_string()))
}

fn flavor_from(s: &str) -> Result<Flavor> {
    Ok(match s {
        "M" => Flavor::M,
        "W" => Flavor::W,
        "L" => Flavor::L,
        "R" => Flavor::R,
        other => return Err(Error::Dump(format!("unknown flavor {other:?}"))),
    })
}

fn precond_name(p: MeanPrecond) -> &'static str {
    match p {
        MeanPrecond::None => "none",
        MeanPrecond::Full => "full",
        MeanPrecond::NaiveT => "naive_t",
    }
}

fn precond_from(s: &str) -> Result<MeanPrecond> {
    Ok(match s {
        "none" => MeanPrecond::None,
        "full" => MeanPrecond::Full,
        "naive_t" => MeanPrecond::NaiveT,
        other => return Err(Error::Dump(format!("unknown preconditioner {other:?}"))),
    })
}

/// Serialises everything `evaluate` needs, plus the training seed.
pub fn dump_model(model: &SvgpModel, seed: u64) -> String {
    let st = &model.state;
    let dto = ModelDto {
        schema: SCHEMA.to_string(),
        flavor: st.flavor.name().to_string(),
        mean_precond: precond_name(st.mean_precond).to_string(),
        jitter: st.jitter,
        kernel: model.kernel.clone(),
        likelihood: match &model.lik {
            Likelihood::Gaussian(g) => LikDto::Gaussian {
                log_obs_variance: g.log_obs_variance,
            },
            Likelihood::Bernoulli(b) => LikDto::Bernoulli {
                quadrature_order: b.quadrature_order(),
            },
        },
        inducing: rows(model.inducing.locations()),
        m_tilde: st.m_tilde.clone(),
        covariance: match &st.cov {
            Covariance::Cholesky(l) => CovDto::Cholesky {
                lower: rows(l.as_dense()),
            },
            Covariance::LogDiag(v) => CovDto::LogDiag { log_s: v.clone() },
        },
        aux_l: st.aux_l.as_ref().map(|l| rows(l.as_dense())),
        seed,
    };
    serde_json::to_string_pretty(&dto).expect("model dump serialises")
}

/// Inverse of [`dump_model`]; returns the model and its seed.
pub fn load_model(text: &str) -> Result<(SvgpModel, u64)> {
    let dto: ModelDto = serde_json::from_str(text).map_err(|e| Error::Dump(e.to_string()))?;
    if dto.schema != SCHEMA {
        return Err(Error::Dump(format!("unsupported schema {:?}", dto.schema)));
    }
    let kernel = KernelSpec::from_log(dto.kernel.log_variance, dto.kernel.log_lengthscales)?;
    let lik = match dto.likelihood {
        LikDto::Gaussian { log_obs_variance } => {
            if !log_obs_variance.is_finite() {
                return Err(Error::Dump("observation log-variance must be finite".into()));
            }
            Likelihood::Gaussian(GaussianLik { log_obs_variance })
        }
        LikDto::Bernoulli { quadrature_order } => Likelihood::Bernoulli(BernoulliLik::new(quadrature_order)?),
    };
    let z = DenseMatrix::from_rows(&dto.inducing).map_err(|e| Error::Dump(e.to_string()))?;
    let state = VariationalState {
        flavor: flavor_from(&dto.flavor)?,
        m_tilde: dto.m_tilde,
        cov: match dto.covariance {
            CovDto::Cholesky { lower: r } => Covariance::Cholesky(lower(&r)?),
            CovDto::LogDiag { log_s } => Covariance::LogDiag(log_s),
        },
        aux_l: dto.aux_l.as_deref().map(lower).transpose()?,
        mean_precond: precond_from(&dto.mean_precond)?,
        jitter: dto.jitter,
    };
    let model = SvgpModel::new(kernel, lik, InducingSet::new(z)?, state)?;
    Ok((model, dto.seed))
}
