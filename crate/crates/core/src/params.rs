//! Unconstrained parameter vectors, grouped for the optimiser.
//!
//! Triangular factors are packed column by column (lower part only) with the
//! diagonal stored as its logarithm.

use crate::bounds::{Covariance, SvgpModel};
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, LowerTriangular};

/// Parameters (or gradients) split into the groups that get separate Adam
/// moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGroups {
    /// `[log variance, log lengthscales…, likelihood params…]`
    pub hyper: Vec<f64>,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    /// Inducing locations, column-major `M x D`.
    pub z: Vec<f64>,
    /// Auxiliary factor of `T`; empty unless it is optimised by gradient.
    pub aux: Vec<f64>,
}

impl ParamGroups {
    pub fn zeros_like(other: &ParamGroups) -> Self {
        ParamGroups {
            hyper: vec![0.0; other.hyper.len()],
            mean: vec![0.0; other.mean.len()],
            cov: vec![0.0; other.cov.len()],
            z: vec![0.0; other.z.len()],
            aux: vec![0.0; other.aux.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.hyper.len() + self.mean.len() + self.cov.len() + self.z.len() + self.aux.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn groups(&self) -> [&Vec<f64>; 5] {
        [&self.hyper, &self.mean, &self.cov, &self.z, &self.aux]
    }

    fn groups_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.hyper,
            &mut self.mean,
            &mut self.cov,
            &mut self.z,
            &mut self.aux,
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.groups().iter().flat_map(|g| g.iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten) using `self` for the group sizes.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ParamGroups> {
        if flat.len() != self.len() {
            return Err(Error::shape(
                "ParamGroups::with_flat",
                format!("{} values for {} slots", flat.len(), self.len()),
            ));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for g in out.groups_mut() {
            let n = g.len();
            g.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

pub fn pack_lower_logdiag(l: &LowerTriangular) -> Vec<f64> {
    let n = l.dim();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        out.push(l.get(j, j).ln());
        for i in (j + 1)..n {
            out.push(l.get(i, j));
        }
    }
    out
}

pub fn unpack_lower_logdiag(values: &[f64], n: usize) -> Result<LowerTriangular> {
    if values.len() != n * (n + 1) / 2 {
        return Err(Error::shape(
            "unpack_lower_logdiag",
            format!("{} values for dimension {n}", values.len()),
        ));
    }
    let mut m = DenseMatrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        m.set(j, j, values[k].exp());
        k += 1;
        for i in (j + 1)..n {
            m.set(i, j, values[k]);
            k += 1;
        }
    }
    LowerTriangular::from_dense(m)
}

/// Maps an adjoint of a lower-triangular factor to its packed log-diagonal
/// coordinates.
pub fn pack_lower_adjoint(adj: &DenseMatrix, l: &LowerTriangular) -> Vec<f64> {
    let n = l.dim();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        out.push(adj.get(j, j) * l.get(j, j));
        for i in (j + 1)..n {
            out.push(adj.get(i, j));
        }
    }
    out
}

/// Current unconstrained parameters. `include_aux` adds the auxiliary factor
/// (only meaningful for the relaxed flavor).
pub fn pack(model: &SvgpModel, include_aux: bool) -> ParamGroups {
    let mut hyper = vec![model.kernel.log_variance];
    hyper.extend_from_slice(&model.kernel.log_lengthscales);
    hyper.extend(model.lik.params());
    let cov = match &model.state.cov {
        Covariance::Cholesky(l) => pack_lower_logdiag(l),
        Covariance::LogDiag(v) => v.clone(),
    };
    let aux = match (&model.state.aux_l, include_aux) {
        (Some(l), true) => pack_lower_logdiag(l),
        _ => Vec::new(),
    };
    ParamGroups {
        hyper,
        mean: model.state.m_tilde.clone(),
        cov,
        z: model.inducing.locations().data().to_vec(),
        aux,
    }
}

/// Writes `p` back into `model`. An empty `aux` group leaves the auxiliary
/// factor untouched.
pub fn unpack(model: &mut SvgpModel, p: &ParamGroups) -> Result<()> {
    let d = model.kernel.dim();
    let m = model.inducing.num_inducing();
    if p.hyper.len() != 1 + d + model.lik.num_params() || p.mean.len() != m || p.z.len() != m * d {
        return Err(Error::shape("unpack", "parameter groups do not match the model"));
    }
    if !p.is_finite() {
        return Err(Error::Domain("parameters must be finite".into()));
    }
    model.kernel.log_variance = p.hyper[0];
    model.kernel.log_lengthscales.copy_from_slice(&p.hyper[1..1 + d]);
    model.lik.set_params(&p.hyper[1 + d..]);
    model.state.m_tilde.copy_from_slice(&p.mean);
    model.state.cov = match &model.state.cov {
        Covariance::Cholesky(_) => Covariance::Cholesky(unpack_lower_logdiag(&p.cov, m)?),
        Covariance::LogDiag(_) => {
            if p.cov.len() != m {
                return Err(Error::shape("unpack", "diagonal covariance length"));
            }
            Covariance::LogDiag(p.cov.clone())
        }
    };
    model.inducing.locations_mut().data_mut().copy_from_slice(&p.z);
    if !p.aux.is_empty() {
        model.state.aux_l = Some(unpack_lower_logdiag(&p.aux, m)?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lower_packing_round_trips() {
        let l = LowerTriangular::from_dense(
            DenseMatrix::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.5, 1.5, 0.0], vec![-1.0, 0.25, 0.75]]).unwrap(),
        )
        .unwrap();
        let packed = pack_lower_logdiag(&l);
        assert_eq!(packed.len(), 6);
        assert_eq!(packed[0], 2f64.ln());
        let back = unpack_lower_logdiag(&packed, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((back.get(i, j) - l.get(i, j)).abs() < 1e-15);
            }
        }
        assert!(unpack_lower_logdiag(&packed, 2).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let p = ParamGroups {
            hyper: vec![1.0, 2.0],
            mean: vec![3.0],
            cov: vec![4.0, 5.0],
            z: vec![6.0],
            aux: vec![],
        };
        let flat = p.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(p.with_flat(&flat).unwrap(), p);
        assert!(p.with_flat(&flat[..3]).is_err());
    }
}
