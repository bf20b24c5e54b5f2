//! Cross-sectional least squares on polynomials of the standardized state.
//!
//! Normal equations are accumulated per fixed block of paths and reduced in
//! block order, so the fit does not depend on the worker count.

use rayon::prelude::*;

use crate::linalg::cholesky_until;

pub(crate) const BLOCK: usize = 4096;
const RANK_TOL: f64 = 1e-10;
/// Ridge weight relative to the path count, on standardized powers.
const RIDGE: f64 = 1e-6;

/// Polynomial design on `u = (x − mean) / sd`.
#[derive(Debug, Clone)]
pub(crate) struct Design {
    mean: f64,
    inv_sd: f64,
    /// Degree actually used after rank fallback.
    pub degree: usize,
    chol: crate::linalg::Cholesky,
}

fn powers(u: f64, out: &mut [f64]) {
    let mut v = 1.0;
    for o in out.iter_mut() {
        *o = v;
        v *= u;
    }
}

fn ordered_sum(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for part in parts {
        for (a, p) in acc.iter_mut().zip(part) {
            *a += p;
        }
    }
    acc
}

impl Design {
    /// Builds the Gram matrix of `1, u, …, u^degree`; falls back to the
    /// largest well-conditioned leading degree. `None` only when even the
    /// constant fails, i.e. there are no paths.
    pub fn new(x: &[f64], degree: usize) -> Option<Self> {
        let n = x.len();
        if n == 0 {
            return None;
        }
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        let inv_sd = if sd > 1e-12 * (1.0 + mean.abs()) { 1.0 / sd } else { 0.0 };
        let m = degree + 1;
        let parts: Vec<Vec<f64>> = x
            .par_chunks(BLOCK)
            .map(|xs| {
                let mut g = vec![0.0; m * m];
                let mut b = vec![0.0; m];
                for &xv in xs {
                    powers((xv - mean) * inv_sd, &mut b);
                    for i in 0..m {
                        for j in 0..=i {
                            g[i * m + j] += b[i] * b[j];
                        }
                    }
                }
                g
            })
            .collect();
        let mut gram = ordered_sum(parts, m * m);
        for i in 0..m {
            for j in 0..i {
                gram[j * m + i] = gram[i * m + j];
            }
        }
        let g00 = gram[0];
        let rank = cholesky_until(&gram, m, RANK_TOL, |k| gram[k * m + k].max(g00)).rank;
        if rank == 0 {
            return None;
        }
        // Ridge on the non-intercept columns keeps the fit continuous when
        // near-duplicate states split apart (lattice-valued jump paths under
        // a small perturbation); the intercept equation, and with it the
        // cross-sectional mean, is untouched.
        let mut reg = vec![0.0; rank * rank];
        for i in 0..rank {
            for j in 0..rank {
                reg[i * rank + j] = gram[i * m + j];
            }
            if i > 0 {
                reg[i * rank + i] += RIDGE * g00;
            }
        }
        let chol = cholesky_until(&reg, rank, RANK_TOL, |k| reg[k * rank + k].max(g00));
        debug_assert_eq!(chol.rank, rank);
        Some(Self {
            mean,
            inv_sd,
            degree: rank - 1,
            chol,
        })
    }

    fn width(&self) -> usize {
        self.chol.n
    }

    /// Coefficients for each target column; `targets(p, out)` writes the
    /// `n_targets` responses of path `p`.
    pub fn fit<T>(&self, x: &[f64], n_targets: usize, targets: T) -> Vec<Vec<f64>>
    where
        T: Fn(usize, &mut [f64]) + Sync,
    {
        let m = self.width();
        let parts: Vec<Vec<f64>> = x
            .par_chunks(BLOCK)
            .enumerate()
            .map(|(blk, xs)| {
                let mut rhs = vec![0.0; n_targets * m];
                let mut b = vec![0.0; m];
                let mut t = vec![0.0; n_targets];
                for (off, &xv) in xs.iter().enumerate() {
                    powers((xv - self.mean) * self.inv_sd, &mut b);
                    targets(blk * BLOCK + off, &mut t);
                    for (c, &tv) in t.iter().enumerate() {
                        for j in 0..m {
                            rhs[c * m + j] += b[j] * tv;
                        }
                    }
                }
                rhs
            })
            .collect();
        let rhs = ordered_sum(parts, n_targets * m);
        let r = self.degree + 1;
        (0..n_targets)
            .map(|c| self.chol.solve(&rhs[c * m..c * m + r]))
            .collect()
    }

    pub fn eval(&self, coef: &[f64], x: f64) -> f64 {
        let u = (x - self.mean) * self.inv_sd;
        coef.iter().rev().fold(0.0, |acc, &c| acc * u + c)
    }
}
