//! Lévy triplet, jump measure and power moments.
//!
//! The jump measure is a finite sum of atoms `α δ_β` plus an optional
//! density. Moments of the atoms are exact sums; densities go through
//! adaptive quadrature with an explicit divergence guard.
//!
//! The process is `L_t = drift·t + σ W_t + Σ_{s ≤ t} ΔL_s`, so the first
//! moment is `m₁ = drift + ∫ z ν(dz)` and `mᵢ = ∫ zⁱ ν(dz)` for `i ≥ 2`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadrature::{integrate, QuadConfig, QuadratureError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LevyError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("jump measure fails ∫(1∧z²)ν(dz) < ∞: {0}")]
    NonIntegrableMeasure(String),
    #[error("jump measure fails the exponential tail condition at alpha = {alpha}: {detail}")]
    ExponentialTailViolation { alpha: f64, detail: String },
    #[error("moment quadrature failed for order {order}: {source}")]
    QuadratureFailure {
        order: usize,
        #[source]
        source: QuadratureError,
    },
}

/// Point mass `mass · δ_location` of the jump measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub mass: f64,
    pub location: f64,
}

/// Built-in symmetric densities, selectable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    /// `scale · e^{-rate |z|}` on `inner ≤ |z| ≤ outer`.
    ExpTail {
        scale: f64,
        rate: f64,
        inner: f64,
        outer: f64,
    },
    /// `height` on `inner ≤ |z| ≤ outer`.
    UniformBand { height: f64, inner: f64, outer: f64 },
}

type DensityFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Absolutely continuous part of the jump measure.
#[derive(Clone)]
pub struct JumpDensity {
    name: String,
    support: Vec<(f64, f64)>,
    pdf: DensityFn,
}

impl fmt::Debug for JumpDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JumpDensity")
            .field("name", &self.name)
            .field("support", &self.support)
            .finish()
    }
}

impl JumpDensity {
    /// Arbitrary nonnegative density on a union of intervals (endpoints may be
    /// infinite).
    pub fn custom<F>(name: &str, support: Vec<(f64, f64)>, pdf: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.to_string(),
            support,
            pdf: Arc::new(pdf),
        }
    }

    pub fn from_spec(spec: &DensitySpec) -> Self {
        match *spec {
            DensitySpec::ExpTail {
                scale,
                rate,
                inner,
                outer,
            } => Self::custom(
                "exp_tail",
                vec![(-outer, -inner), (inner, outer)],
                move |z| scale * (-rate * z.abs()).exp(),
            ),
            DensitySpec::UniformBand {
                height,
                inner,
                outer,
            } => Self::custom("uniform_band", vec![(-outer, -inner), (inner, outer)], move |_| {
                height
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn support(&self) -> &[(f64, f64)] {
        &self.support
    }

    pub fn pdf(&self, z: f64) -> f64 {
        (self.pdf)(z)
    }

    /// `∫ h(z) ν_density(dz)` over the declared support.
    pub fn integrate<H: Fn(f64) -> f64>(&self, h: H, cfg: &QuadConfig) -> Result<f64, QuadratureError> {
        let mut total = 0.0;
        for &(a, b) in &self.support {
            // A vanishing density wins over an overflowing weight.
            total += integrate(
                |z| match (self.pdf)(z) {
                    d if d == 0.0 => 0.0,
                    d => h(z) * d,
                },
                a,
                b,
                cfg,
            )?;
        }
        Ok(total)
    }
}

#[derive(Debug, Clone)]
pub struct LevyModel {
    pub drift: f64,
    /// Variance rate σ² of the Gaussian part; also the δ₀ weight of μ.
    pub gaussian_var: f64,
    pub atoms: Vec<Atom>,
    pub density: Option<JumpDensity>,
    pub exp_moment_alpha: f64,
}

impl LevyModel {
    /// Standard Brownian motion: ν = 0, σ² = 1.
    pub fn brownian() -> Self {
        Self {
            drift: 0.0,
            gaussian_var: 1.0,
            atoms: Vec::new(),
            density: None,
            exp_moment_alpha: 1.0,
        }
    }

    /// Pure-jump Poisson process with unit jumps at rate `intensity`.
    pub fn poisson(intensity: f64) -> Self {
        Self {
            drift: 0.0,
            gaussian_var: 0.0,
            atoms: vec![Atom {
                mass: intensity,
                location: 1.0,
            }],
            density: None,
            exp_moment_alpha: 1.0,
        }
    }

    pub fn with_atoms(gaussian_var: f64, atoms: Vec<Atom>) -> Self {
        Self {
            drift: 0.0,
            gaussian_var,
            atoms,
            density: None,
            exp_moment_alpha: 1.0,
        }
    }

    pub fn is_finite_activity_atoms_only(&self) -> bool {
        self.density.is_none()
    }

    /// `∫ h dν` over atoms and density.
    pub fn integrate_jumps<H: Fn(f64) -> f64>(&self, h: H, cfg: &QuadConfig) -> Result<f64, QuadratureError> {
        let atoms: f64 = self.atoms.iter().map(|a| a.mass * h(a.location)).sum();
        let dens = match &self.density {
            Some(d) => d.integrate(&h, cfg)?,
            None => 0.0,
        };
        Ok(atoms + dens)
    }

    fn check_fields(&self) -> Result<(), LevyError> {
        if !self.drift.is_finite() {
            return Err(LevyError::InvalidModel("drift must be finite".into()));
        }
        if !(self.gaussian_var >= 0.0 && self.gaussian_var.is_finite()) {
            return Err(LevyError::InvalidModel(format!(
                "gaussian_var must be a finite nonnegative number, got {}",
                self.gaussian_var
            )));
        }
        if !(self.exp_moment_alpha > 0.0 && self.exp_moment_alpha.is_finite()) {
            return Err(LevyError::InvalidModel(format!(
                "exp_moment_alpha must be positive, got {}",
                self.exp_moment_alpha
            )));
        }
        for (i, a) in self.atoms.iter().enumerate() {
            if !(a.mass > 0.0 && a.mass.is_finite()) {
                return Err(LevyError::InvalidModel(format!(
                    "atom {i}: mass must be strictly positive, got {}",
                    a.mass
                )));
            }
            if a.location == 0.0 || !a.location.is_finite() {
                return Err(LevyError::InvalidModel(format!(
                    "atom {i}: location must be finite and nonzero, got {}",
                    a.location
                )));
            }
            if self.atoms[..i].iter().any(|b| b.location == a.location) {
                return Err(LevyError::InvalidModel(format!(
                    "atom {i}: duplicate location {}",
                    a.location
                )));
            }
        }
        if let Some(d) = &self.density {
            for &(a, b) in d.support() {
                if !(a <= b) {
                    return Err(LevyError::InvalidModel(format!(
                        "density {}: empty or reversed support interval ({a}, {b})",
                        d.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationOptions {
    pub quad: QuadConfig,
    /// Cut-off ε of the exponential tail integral over `|z| ≥ ε`.
    pub tail_epsilon: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            quad: QuadConfig {
                rel_tol: 1e-10,
                ..QuadConfig::default()
            },
            tail_epsilon: 1.0,
        }
    }
}

/// Computed integrals of a model that passed validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValidationReport {
    /// `∫(1∧z²) ν(dz)`.
    pub small_jump_integral: f64,
    /// `∫_{|z| ≥ ε} e^{α|z|} ν(dz)`.
    pub exp_tail_integral: f64,
    pub tail_epsilon: f64,
    pub alpha: f64,
}

pub fn validate_model(model: &LevyModel) -> Result<ValidationReport, LevyError> {
    validate_model_with(model, &ValidationOptions::default())
}

pub fn validate_model_with(model: &LevyModel, opts: &ValidationOptions) -> Result<ValidationReport, LevyError> {
    model.check_fields()?;
    let small = model
        .integrate_jumps(|z| (z * z).min(1.0), &opts.quad)
        .map_err(|e| LevyError::NonIntegrableMeasure(e.to_string()))?;
    let alpha = model.exp_moment_alpha;
    let eps = opts.tail_epsilon;
    let tail = model
        .integrate_jumps(
            |z| if z.abs() >= eps { (alpha * z.abs()).exp() } else { 0.0 },
            &opts.quad,
        )
        .map_err(|e| LevyError::ExponentialTailViolation {
            alpha,
            detail: e.to_string(),
        })?;
    Ok(ValidationReport {
        small_jump_integral: small,
        exp_tail_integral: tail,
        tail_epsilon: eps,
        alpha,
    })
}

/// Power moments `m₁..m_N` of L and moments `μ₀..μ_{N-2}` of
/// `μ(dx) = x² ν(dx) + σ² δ₀(dx)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    /// `m[i - 1] = mᵢ`.
    pub m: Vec<f64>,
    /// `mu[k] = μ_k`.
    pub mu: Vec<f64>,
}

impl MomentTable {
    pub fn m(&self, i: usize) -> f64 {
        self.m[i - 1]
    }

    pub fn mu(&self, k: usize) -> f64 {
        self.mu[k]
    }

    pub fn order(&self) -> usize {
        self.m.len()
    }
}

/// Computes the moment table through order `order ≥ 2`. Density moments use
/// quadrature at relative tolerance 1e-10 (see [`moments_with`]).
pub fn moments(model: &LevyModel, order: usize) -> Result<MomentTable, LevyError> {
    moments_with(
        model,
        order,
        &QuadConfig {
            rel_tol: 1e-10,
            abs_tol: 1e-300,
            ..QuadConfig::default()
        },
    )
}

pub fn moments_with(model: &LevyModel, order: usize, quad: &QuadConfig) -> Result<MomentTable, LevyError> {
    if order < 2 {
        return Err(LevyError::InvalidModel(format!(
            "moment order must be at least 2, got {order}"
        )));
    }
    model.check_fields()?;
    let mut m = Vec::with_capacity(order);
    for i in 1..=order {
        let exp = i as i32;
        let mut v: f64 = model.atoms.iter().map(|a| a.mass * a.location.powi(exp)).sum();
        if let Some(d) = &model.density {
            v += d
                .integrate(|z| z.powi(exp), quad)
                .map_err(|source| LevyError::QuadratureFailure { order: i, source })?;
        }
        if i == 1 {
            v += model.drift;
        }
        m.push(v);
    }
    let mut mu = Vec::with_capacity(order - 1);
    mu.push(m[1] + model.gaussian_var);
    for k in 1..=(order - 2) {
        mu.push(m[k + 1]);
    }
    Ok(MomentTable { m, mu })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brownian_passes_with_zero_integrals() {
        let r = validate_model(&LevyModel::brownian()).unwrap();
        assert_eq!(r.small_jump_integral, 0.0);
        assert_eq!(r.exp_tail_integral, 0.0);
    }

    #[test]
    fn single_atom_exp_tail_is_half_e() {
        let model = LevyModel::with_atoms(
            0.0,
            vec![Atom {
                mass: 0.5,
                location: 1.0,
            }],
        );
        let r = validate_model(&model).unwrap();
        assert_eq!(r.exp_tail_integral, 0.5 * std::f64::consts::E);
        assert_eq!(r.small_jump_integral, 0.5);
    }

    #[test]
    fn gaussian_square_density_on_unit_band_is_finite() {
        // ∫_1^2 e^{z} e^{z²} dz and ∫_1^2 e^{z²} dz, 30-digit reference quadrature.
        const TAIL: f64 = 86.834_040_471_312_074_962_853_355_868;
        const SMALL: f64 = 14.989_976_019_600_048_615_932_355_867;
        let mut model = LevyModel::brownian();
        model.density = Some(JumpDensity::custom("gauss_sq", vec![(1.0, 2.0)], |z| (z * z).exp()));
        let r = validate_model(&model).unwrap();
        assert!((r.exp_tail_integral - TAIL).abs() <= 1e-9 * TAIL, "{}", r.exp_tail_integral);
        assert!((r.small_jump_integral - SMALL).abs() <= 1e-9 * SMALL);
    }

    #[test]
    fn heavy_tail_violates_exponential_condition() {
        let mut model = LevyModel::brownian();
        model.exp_moment_alpha = 2.0;
        model.density = Some(JumpDensity::from_spec(&DensitySpec::ExpTail {
            scale: 1.0,
            rate: 1.0,
            inner: 0.5,
            outer: f64::INFINITY,
        }));
        match validate_model(&model) {
            Err(LevyError::ExponentialTailViolation { alpha, .. }) => assert_eq!(alpha, 2.0),
            other => panic!("expected tail violation, got {other:?}"),
        }
        model.exp_moment_alpha = 0.5;
        assert!(validate_model(&model).is_ok());
    }

    #[test]
    fn non_integrable_small_jumps_are_rejected() {
        let mut model = LevyModel::brownian();
        // |z|^{-4} near zero: ∫ z²·z⁻⁴ diverges at 0
        model.density = Some(JumpDensity::custom("singular", vec![(0.0, 1.0)], |z| z.powi(-4)));
        assert!(matches!(
            validate_model(&model),
            Err(LevyError::NonIntegrableMeasure(_))
        ));
    }

    #[test]
    fn invalid_atoms_are_rejected() {
        let bad_mass = LevyModel::with_atoms(1.0, vec![Atom { mass: 0.0, location: 1.0 }]);
        assert!(matches!(validate_model(&bad_mass), Err(LevyError::InvalidModel(_))));
        let at_zero = LevyModel::with_atoms(1.0, vec![Atom { mass: 1.0, location: 0.0 }]);
        assert!(matches!(validate_model(&at_zero), Err(LevyError::InvalidModel(_))));
        let dup = LevyModel::with_atoms(
            1.0,
            vec![Atom { mass: 1.0, location: 0.5 }, Atom { mass: 2.0, location: 0.5 }],
        );
        assert!(matches!(validate_model(&dup), Err(LevyError::InvalidModel(_))));
    }

    #[test]
    fn atom_moment_arithmetic() {
        let model = LevyModel::with_atoms(0.0, vec![Atom { mass: 2.0, location: 0.5 }]);
        let t = moments(&model, 4).unwrap();
        assert_eq!(t.m(3), 0.25);
        assert_eq!(t.mu(0), 0.5);
        assert_eq!(t.mu(1), 0.25);
    }

    #[test]
    fn brownian_moments() {
        let t = moments(&LevyModel::brownian(), 8).unwrap();
        assert!(t.m[1..].iter().all(|&v| v == 0.0));
        assert_eq!(t.mu(0), 1.0);
        assert!(t.mu[1..].iter().all(|&v| v == 0.0));
        assert_eq!(t.mu.len(), 7);
    }

    #[test]
    fn drift_enters_first_moment_only() {
        let mut model = LevyModel::poisson(2.0);
        model.drift = 0.3;
        let t = moments(&model, 4).unwrap();
        assert!((t.m(1) - 2.3).abs() < 1e-15);
        assert_eq!(t.m(2), 2.0);
    }

    #[test]
    fn exp_tail_density_moments_match_reference() {
        // 2∫_{0.1}^{10} z^k e^{-z} dz, 30-digit reference quadrature
        const M2: f64 = 3.988_303_804_856_895_009_510_839_379;
        const M4: f64 = 46.595_867_291_761_059_140_837_937_99;
        let mut model = LevyModel::brownian();
        model.density = Some(JumpDensity::from_spec(&DensitySpec::ExpTail {
            scale: 1.0,
            rate: 1.0,
            inner: 0.1,
            outer: 10.0,
        }));
        let t = moments(&model, 4).unwrap();
        assert!((t.m(2) - M2).abs() <= 1e-10 * M2);
        assert!((t.m(4) - M4).abs() <= 1e-10 * M4);
        assert!(t.m(3).abs() < 1e-10, "odd moment of symmetric density");
        assert!((t.mu(0) - (M2 + 1.0)).abs() <= 1e-10 * M2);
    }

    #[test]
    fn moments_are_bit_deterministic() {
        let mut model = LevyModel::brownian();
        model.density = Some(JumpDensity::from_spec(&DensitySpec::UniformBand {
            height: 0.7,
            inner: 0.2,
            outer: 1.5,
        }));
        let a = moments(&model, 10).unwrap();
        let b = moments(&model, 10).unwrap();
        assert_eq!(a, b);
    }
}
