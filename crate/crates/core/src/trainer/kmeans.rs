//! Inducing-point initialisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::InducingSet;
use crate::linalg::DenseMatrix;

const LLOYD_ITERATIONS: usize = 10;

fn sq_dist(x: &DenseMatrix, i: usize, c: &DenseMatrix, k: usize) -> f64 {
    (0..x.cols()).map(|d| (x.get(i, d) - c.get(k, d)).powi(2)).sum()
}

/// k-means++ seeding (D² sampling) followed by 10 Lloyd iterations.
pub fn kmeanspp_init(x: &DenseMatrix, m: usize, seed: u64) -> Result<InducingSet> {
    let n = x.rows();
    if m == 0 || m > n {
        return Err(Error::Config(format!(
            "cannot pick {m} inducing points from {n} inputs"
        )));
    }
    let d = x.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; n];
    let mut centres = DenseMatrix::zeros(m, d);
    let first = rng.random_range(0..n);
    chosen[first] = true;
    for j in 0..d {
        centres.set(0, j, x.get(first, j));
    }
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x, i, &centres, 0)).collect();
    for k in 1..m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 {
                    pick = Some(i);
                    if u < *w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // only duplicates of existing centres remain
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        for j in 0..d {
            centres.set(k, j, x.get(pick, j));
        }
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(x, i, &centres, k));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..LLOYD_ITERATIONS {
        for (i, a) in assign.iter_mut().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for k in 0..m {
                let dist = sq_dist(x, i, &centres, k);
                if dist < best.0 {
                    best = (dist, k);
                }
            }
            *a = best.1;
        }
        let mut sums = DenseMatrix::zeros(m, d);
        let mut counts = vec![0usize; m];
        for (i, &k) in assign.iter().enumerate() {
            counts[k] += 1;
            for j in 0..d {
                sums.add_at(k, j, x.get(i, j));
            }
        }
        for k in 0..m {
            if counts[k] > 0 {
                for j in 0..d {
                    centres.set(k, j, sums.get(k, j) / counts[k] as f64);
                }
            }
        }
    }
    InducingSet::new(centres)
}

/// `m` evenly spaced points spanning the range of a single input column.
pub fn grid_init(x: &DenseMatrix, m: usize) -> Result<InducingSet> {
    if x.cols() != 1 {
        return Err(Error::Config("grid initialisation needs one-dimensional inputs".into()));
    }
    if m == 0 || x.rows() == 0 {
        return Err(Error::Config(
            "grid initialisation needs inputs and at least one point".into(),
        ));
    }
    let col = x.col(0);
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = (0..m)
        .map(|k| {
            if m == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * k as f64 / (m - 1) as f64
            }
        })
        .collect();
    InducingSet::new(DenseMatrix::from_col_major(m, 1, z)?)
}
