//! Teugels martingale basis: orthonormal polynomials of `μ(dx) = x²ν(dx) + σ²δ₀(dx)`.
//!
//! The Gram matrix of the monomials `1, x, …, x^{K-1}` under μ is the Hankel
//! matrix `G_{ij} = μ_{i+j}`. Writing `G = L Lᵀ`, the rows of `L⁻¹` are the
//! monomial coefficients of the orthonormal polynomials `q₀, …, q_{K-1}`.
//! With `pᵢ(x) = x q_{i-1}(x)`, the Teugels martingales are
//! `Hⁱ = Σ_{j ≤ i} a_{ij} Y^{(j)}` where `a_{ij}` is the coefficient of `xʲ`
//! in `pᵢ`.
//!
//! A measure supported on `n` points only admits `n` independent
//! polynomials, so the factorization stops at the first pivot whose residual
//! falls below the rank tolerance; that index is `K_eff`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::levy_model::{LevyModel, MomentTable};
use crate::linalg::cholesky_until;
use crate::quadrature::{QuadConfig, QuadratureError};

/// Largest supported basis size; the monomial representation is not trusted
/// beyond it.
pub const K_MAX: usize = 10;

pub const DEFAULT_RANK_TOL: f64 = 1e-12;

pub const BASIS_FORMAT_HEADER: &str = "# teugels-basis v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("basis size {0} outside 1..={K_MAX}")]
    InvalidSize(usize),
    #[error("rank tolerance {0} outside (0, 1)")]
    InvalidTolerance(f64),
    #[error("moment table holds μ₀..μ_{have}, basis of size {k} needs μ up to index {need}")]
    NotEnoughMoments { k: usize, have: usize, need: usize },
    #[error("μ₀ = {0} ≤ 0: the measure carries no mass")]
    DegenerateMeasure(f64),
    #[error("Hankel moment matrix is indefinite at pivot {pivot} (residual {residual})")]
    NumericalBreakdown { pivot: usize, residual: f64 },
    #[error("quadrature failed: {0}")]
    Quadrature(#[from] QuadratureError),
    #[error("malformed basis file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeugelsBasis {
    pub k_requested: usize,
    pub k_eff: usize,
    /// `q[i]` holds the coefficients of `q_i` (degree `i`), lowest first.
    pub q: Vec<Vec<f64>>,
    /// `p[i]` holds the coefficients of `p_{i+1}(x) = x q_i(x)`.
    pub p: Vec<Vec<f64>>,
    /// Lower-triangular `K_eff x K_eff`; `a[i][j]` maps `Y^{(j+1)}` into `H^{i+1}`.
    pub a: Vec<Vec<f64>>,
    pub q_at_zero: Vec<f64>,
}

/// Horner evaluation of `Σ c_k x^k`.
pub fn evaluate_poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

pub fn build_basis(moments: &MomentTable, k: usize, rank_tol: f64) -> Result<TeugelsBasis, BasisError> {
    if k == 0 || k > K_MAX {
        return Err(BasisError::InvalidSize(k));
    }
    if !(rank_tol > 0.0 && rank_tol < 1.0) {
        return Err(BasisError::InvalidTolerance(rank_tol));
    }
    let need = 2 * k - 2;
    if moments.mu.len() < need + 1 {
        return Err(BasisError::NotEnoughMoments {
            k,
            have: moments.mu.len().saturating_sub(1),
            need,
        });
    }
    let mu0 = moments.mu[0];
    if !(mu0 > 0.0) {
        return Err(BasisError::DegenerateMeasure(mu0));
    }

    let mut hankel = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            hankel[i * k + j] = moments.mu[i + j];
        }
    }
    let chol = cholesky_until(&hankel, k, rank_tol, |p| mu0.max(hankel[p * k + p]));
    if let Some(residual) = chol.stop_residual {
        let scale = mu0.max(hankel[chol.rank * k + chol.rank]);
        if residual <= -rank_tol * scale || residual.is_nan() {
            return Err(BasisError::NumericalBreakdown {
                pivot: chol.rank,
                residual,
            });
        }
    }
    let k_eff = chol.rank;
    let inv = chol.lower_inverse();

    let q: Vec<Vec<f64>> = (0..k_eff)
        .map(|i| inv[i * k_eff..i * k_eff + i + 1].to_vec())
        .collect();
    let p: Vec<Vec<f64>> = q
        .iter()
        .map(|qi| std::iter::once(0.0).chain(qi.iter().copied()).collect())
        .collect();
    let a: Vec<Vec<f64>> = (0..k_eff)
        .map(|i| (0..k_eff).map(|j| p[i].get(j + 1).copied().unwrap_or(0.0)).collect())
        .collect();
    let q_at_zero = q.iter().map(|qi| qi[0]).collect();

    Ok(TeugelsBasis {
        k_requested: k,
        k_eff,
        q,
        p,
        a,
        q_at_zero,
    })
}

impl TeugelsBasis {
    /// Gram matrix `∫ q_i q_j dμ`, computed from the model's atoms, Gaussian
    /// weight and density rather than from the moment table.
    pub fn gram_under(&self, model: &LevyModel, quad: &QuadConfig) -> Result<Vec<Vec<f64>>, QuadratureError> {
        let n = self.k_eff;
        let mut g = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let (qi, qj) = (&self.q[i], &self.q[j]);
                let jumps = model.integrate_jumps(|x| x * x * evaluate_poly(qi, x) * evaluate_poly(qj, x), quad)?;
                let v = model.gaussian_var * self.q_at_zero[i] * self.q_at_zero[j] + jumps;
                g[i][j] = v;
                g[j][i] = v;
            }
        }
        Ok(g)
    }

    /// `max |∫ q_i q_j dμ − δ_ij|`.
    pub fn orthonormality_residual(&self, model: &LevyModel) -> Result<f64, QuadratureError> {
        let g = self.gram_under(model, &lemma_quad())?;
        Ok(max_identity_gap(&g, |_, _| 0.0))
    }

    /// Serializes to the versioned structured-text export.
    pub fn to_export_string(&self) -> String {
        let body = toml::to_string(&BasisFile {
            format_version: 1,
            basis: self.clone(),
        })
        .expect("basis always serializes");
        format!("{BASIS_FORMAT_HEADER}\n{body}")
    }

    pub fn from_export_str(text: &str) -> Result<Self, BasisError> {
        let first = text.lines().next().unwrap_or_default();
        if first.trim() != BASIS_FORMAT_HEADER {
            return Err(BasisError::Format(format!("missing header line {BASIS_FORMAT_HEADER:?}")));
        }
        let file: BasisFile = toml::from_str(text).map_err(|e| BasisError::Format(e.to_string()))?;
        if file.format_version != 1 {
            return Err(BasisError::Format(format!(
                "unsupported format_version {}",
                file.format_version
            )));
        }
        let b = file.basis;
        if b.q.len() != b.k_eff || b.a.len() != b.k_eff || b.q_at_zero.len() != b.k_eff {
            return Err(BasisError::Format("inconsistent K_eff".into()));
        }
        Ok(b)
    }
}

#[derive(Serialize, Deserialize)]
struct BasisFile {
    format_version: u32,
    basis: TeugelsBasis,
}

fn lemma_quad() -> QuadConfig {
    QuadConfig {
        rel_tol: 1e-12,
        abs_tol: 1e-15,
        ..QuadConfig::default()
    }
}

fn max_identity_gap<F: Fn(usize, usize) -> f64>(g: &[Vec<f64>], shift: F) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..g.len() {
        for j in 0..g.len() {
            let target = if i == j { 1.0 } else { 0.0 } - shift(i, j);
            worst = worst.max((g[i][j] - target).abs());
        }
    }
    worst
}

/// Residual of the polynomial link between `p` and `q`:
/// `max_{i,j} |∫ p_i p_j dν − (δ_ij − σ² q_{i-1}(0) q_{j-1}(0))|`.
pub fn check_lemma_identity(basis: &TeugelsBasis, model: &LevyModel) -> Result<f64, BasisError> {
    let n = basis.k_eff;
    let quad = lemma_quad();
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let (pi, pj) = (&basis.p[i], &basis.p[j]);
            let v = model.integrate_jumps(|x| evaluate_poly(pi, x) * evaluate_poly(pj, x), &quad)?;
            g[i][j] = v;
            g[j][i] = v;
        }
    }
    let s2 = model.gaussian_var;
    Ok(max_identity_gap(&g, |i, j| s2 * basis.q_at_zero[i] * basis.q_at_zero[j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy_model::{moments, Atom};

    fn basis_for(model: &LevyModel, k: usize) -> TeugelsBasis {
        let m = moments(model, 2 * k + 2).unwrap();
        build_basis(&m, k, DEFAULT_RANK_TOL).unwrap()
    }

    #[test]
    fn horner() {
        assert_eq!(evaluate_poly(&[1.0], 5.0), 1.0);
        assert_eq!(evaluate_poly(&[0.0, 1.0], 3.0), 3.0);
        assert_eq!(evaluate_poly(&[1.0, 2.0, 3.0], 2.0), 17.0);
        assert_eq!(evaluate_poly(&[], 2.0), 0.0);
    }

    #[test]
    fn brownian_basis_is_rank_one() {
        let b = basis_for(&LevyModel::brownian(), 4);
        assert_eq!(b.k_eff, 1);
        assert_eq!(b.q, vec![vec![1.0]]);
        assert_eq!(b.a, vec![vec![1.0]]);
        assert_eq!(check_lemma_identity(&b, &LevyModel::brownian()).unwrap(), 0.0);
    }

    #[test]
    fn unit_poisson_basis() {
        let model = LevyModel::poisson(1.0);
        let b = basis_for(&model, 3);
        assert_eq!(b.k_eff, 1);
        assert_eq!(b.q[0], vec![1.0]);
        assert_eq!(b.p[0], vec![0.0, 1.0]);
        assert_eq!(b.a[0][0], 1.0);
        assert!(check_lemma_identity(&b, &model).unwrap() < 1e-15);
    }

    #[test]
    fn poisson_lemma_residual_by_hand() {
        // ν = λδ₁, σ² = 0: q₀ = 1/√λ, p₁(1)² λ = 1 = δ₁₁ − 0.
        for &lambda in &[0.25, 2.0, 9.0] {
            let model = LevyModel::poisson(lambda);
            let b = basis_for(&model, 3);
            assert!((b.q_at_zero[0] - 1.0 / f64::sqrt(lambda)).abs() < 1e-15);
            let by_hand = (lambda * b.p[0][1] * b.p[0][1] - 1.0).abs();
            let r = check_lemma_identity(&b, &model).unwrap();
            assert!((r - by_hand).abs() < 1e-15);
            assert!(r < 1e-14);
        }
    }

    #[test]
    fn symmetric_two_atom_gaussian_matches_exact_cholesky() {
        // μ = (3, 0, 2, 0, 2); exact L⁻¹ from symbolic Cholesky:
        // q0 = 1/√3, q1 = x/√2, q2 = -√6/3 + (√6/2) x²
        let model = LevyModel::with_atoms(
            1.0,
            vec![Atom { mass: 1.0, location: 1.0 }, Atom { mass: 1.0, location: -1.0 }],
        );
        let m = moments(&model, 8).unwrap();
        assert_eq!(&m.mu[..5], &[3.0, 0.0, 2.0, 0.0, 2.0]);
        let b = build_basis(&m, 3, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(b.k_eff, 3);
        let s6 = 6f64.sqrt();
        let expected = [
            vec![1.0 / 3f64.sqrt()],
            vec![0.0, 1.0 / 2f64.sqrt()],
            vec![-s6 / 3.0, 0.0, s6 / 2.0],
        ];
        for (got, want) in b.q.iter().zip(expected.iter()) {
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-14, "{got:?} vs {want:?}");
            }
        }
        // a is lower triangular with positive diagonal, a_ij = coefficient of x^j in p_i
        for i in 0..3 {
            assert!(b.a[i][i] > 0.0);
            for j in 0..3 {
                if j > i {
                    assert_eq!(b.a[i][j], 0.0);
                } else {
                    assert_eq!(b.a[i][j], b.q[i][j]);
                }
            }
        }
        assert!(b.orthonormality_residual(&model).unwrap() < 1e-12);
        assert!(check_lemma_identity(&b, &model).unwrap() < 1e-12);
        // fourth request is capped at three support points
        let b4 = basis_for(&model, 5);
        assert_eq!(b4.k_eff, 3);
    }

    #[test]
    fn errors() {
        let m = moments(&LevyModel::brownian(), 4).unwrap();
        assert_eq!(build_basis(&m, 0, 1e-12), Err(BasisError::InvalidSize(0)));
        assert_eq!(build_basis(&m, 11, 1e-12), Err(BasisError::InvalidSize(11)));
        assert!(matches!(build_basis(&m, 4, 1e-12), Err(BasisError::NotEnoughMoments { .. })));
        assert_eq!(build_basis(&m, 2, 1.5), Err(BasisError::InvalidTolerance(1.5)));
        let zero = MomentTable {
            m: vec![0.0; 4],
            mu: vec![0.0; 3],
        };
        assert_eq!(build_basis(&zero, 2, 1e-12), Err(BasisError::DegenerateMeasure(0.0)));
        // indefinite "moments": μ₂ < μ₁²/μ₀
        let bad = MomentTable {
            m: vec![0.0; 4],
            mu: vec![1.0, 1.0, 0.5],
        };
        assert!(matches!(build_basis(&bad, 2, 1e-12), Err(BasisError::NumericalBreakdown { pivot: 1, .. })));
    }

    #[test]
    fn export_round_trip() {
        let model = LevyModel::with_atoms(
            0.5,
            vec![Atom { mass: 0.3, location: 0.7 }, Atom { mass: 1.1, location: -1.3 }],
        );
        let b = basis_for(&model, 4);
        let text = b.to_export_string();
        assert!(text.starts_with(BASIS_FORMAT_HEADER));
        assert_eq!(TeugelsBasis::from_export_str(&text).unwrap(), b);
        assert!(TeugelsBasis::from_export_str("k_eff = 1").is_err());
    }
}
