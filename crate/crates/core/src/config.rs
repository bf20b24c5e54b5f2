//! Run configuration: one TOML document for model, basis, grid, problem,
//! solver and experiment settings.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{ComparisonOptions, Direction, LinearCase, PerturbationSpec, Target};
use crate::fbsde_problem::families::{LinearCoefficients, SaturatingCoefficients};
use crate::fbsde_problem::{FbsdeProblem, InitialLaw, ProbeOptions};
use crate::levy_model::{validate_model, Atom, DensitySpec, JumpDensity, LevyModel};
use crate::solver::SolverConfig;
use crate::teugels_basis::{DEFAULT_RANK_TOL, K_MAX};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config value `{path}`: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub drift: f64,
    pub gaussian_var: f64,
    pub exp_moment_alpha: f64,
    pub atoms: Vec<Atom>,
    pub density: Option<DensitySpec>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            drift: 0.0,
            gaussian_var: 1.0,
            exp_moment_alpha: 1.0,
            atoms: Vec::new(),
            density: None,
        }
    }
}

impl ModelSection {
    pub fn build(&self) -> Result<LevyModel, ConfigError> {
        let model = LevyModel {
            drift: self.drift,
            gaussian_var: self.gaussian_var,
            atoms: self.atoms.clone(),
            density: self.density.as_ref().map(JumpDensity::from_spec),
            exp_moment_alpha: self.exp_moment_alpha,
        };
        validate_model(&model).map_err(|e| invalid("model", e.to_string()))?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisSection {
    pub k: usize,
    pub rank_tol: f64,
}

impl Default for BasisSection {
    fn default() -> Self {
        Self {
            k: 3,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub n_steps: usize,
}

fn default_steps() -> usize {
    50
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Zero,
    /// `f = 0, σ¹ = 1, g = c, φ = id`.
    Oracle,
    /// Every coefficient at level `λ` on the first channel.
    Coupled,
    /// Mean-reverting coupling at level `λ` with `σ_y = 0`, `f_y = −σ_x f_z`.
    H2Coupled,
    Linear,
    Saturating,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaturationTerms {
    pub drift_sat: f64,
    pub vol_sat: Vec<f64>,
    pub driver_sat: f64,
    pub terminal_sat: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    pub family: Family,
    /// Driver constant of the oracle family.
    pub c: Option<f64>,
    /// Coupling level of the coupled family.
    pub lambda: Option<f64>,
    pub coefficients: Option<LinearCoefficients>,
    pub saturation: Option<SaturationTerms>,
    pub initial: InitialLaw,
    /// Declared λ; defaults to the value implied by the coefficients.
    pub lipschitz: Option<f64>,
    /// Declared λ₀; defaults to the value implied by the coefficients.
    pub terminal_lipschitz: Option<f64>,
}

impl ProblemSection {
    pub fn build(&self, channels: usize, horizon: f64) -> Result<FbsdeProblem, ConfigError> {
        let linear = |name: &str| {
            self.coefficients
                .clone()
                .ok_or_else(|| invalid("problem.coefficients", format!("family `{name}` needs coefficients")))
        };
        let coeffs = match self.family {
            Family::Zero => LinearCoefficients::default(),
            Family::Oracle => LinearCoefficients::martingale_oracle(self.c.unwrap_or(0.0)),
            Family::Coupled | Family::H2Coupled => {
                let l = self
                    .lambda
                    .ok_or_else(|| invalid("problem.lambda", "coupled families need lambda"))?;
                if !(l >= 0.0 && l.is_finite()) {
                    return Err(invalid("problem.lambda", "must be finite and nonnegative"));
                }
                if self.family == Family::Coupled {
                    LinearCoefficients::coupled(l)
                } else {
                    LinearCoefficients::h2_coupled(l)
                }
            }
            Family::Linear | Family::Saturating => linear(if self.family == Family::Linear {
                "linear"
            } else {
                "saturating"
            })?,
        };
        let vectors = [&coeffs.drift_z, &coeffs.vol_x, &coeffs.vol_y, &coeffs.vol_const, &coeffs.driver_z];
        if vectors.iter().any(|v| v.len() > channels) {
            return Err(invalid(
                "problem.coefficients",
                format!("channel vectors are longer than the basis rank {channels}"),
            ));
        }
        let mut problem = if self.family == Family::Saturating {
            let s = self.saturation.clone().unwrap_or_default();
            if s.vol_sat.len() > channels {
                return Err(invalid("problem.saturation.vol_sat", "longer than the basis rank"));
            }
            SaturatingCoefficients {
                linear: coeffs,
                drift_sat: s.drift_sat,
                vol_sat: s.vol_sat,
                driver_sat: s.driver_sat,
                terminal_sat: s.terminal_sat,
            }
            .into_problem(channels, horizon, self.initial)
        } else {
            coeffs.into_problem(channels, horizon, self.initial)
        };
        if let InitialLaw::Normal { var, .. } = self.initial {
            if !(var >= 0.0 && var.is_finite()) {
                return Err(invalid("problem.initial.var", "must be finite and nonnegative"));
            }
        }
        for (path, v, slot) in [
            ("problem.lipschitz", self.lipschitz, &mut problem.lipschitz),
            ("problem.terminal_lipschitz", self.terminal_lipschitz, &mut problem.terminal_lipschitz),
        ] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(invalid(path, "must be finite and nonnegative"));
                }
                *slot = v;
            }
        }
        Ok(problem)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Stability,
    Convergence,
    Comparison,
    Linear,
    Brackets,
    H2,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Stability => "stability",
            ExperimentKind::Convergence => "convergence",
            ExperimentKind::Comparison => "comparison",
            ExperimentKind::Linear => "linear",
            ExperimentKind::Brackets => "brackets",
            ExperimentKind::H2 => "h2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: Option<ExperimentKind>,
    pub perturbation: PerturbationSpec,
    /// Convergence ladder `ε_n = scale · 2⁻ⁿ`, `n = 1..=levels`.
    pub levels: usize,
    pub scale: f64,
    /// Comparison: problem 1 is problem 0 shifted by `shift · direction`.
    pub shift_targets: Vec<Target>,
    pub shift: f64,
    pub shift_direction: Direction,
    pub comparison: ComparisonOptions,
    /// Linear cases; the built-in suite when absent.
    pub linear_cases: Option<Vec<LinearCase>>,
    pub bracket_paths: usize,
    /// Largest accepted |z| in the bracket check.
    pub bracket_bound: f64,
    pub h2: ProbeOptions,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            kind: None,
            perturbation: PerturbationSpec::default(),
            levels: 6,
            scale: 1.0,
            shift_targets: vec![Target::Driver],
            shift: 0.1,
            shift_direction: Direction::Constant,
            comparison: ComparisonOptions::default(),
            linear_cases: None,
            bracket_paths: 100_000,
            bracket_bound: 4.0,
            h2: ProbeOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub basis: BasisSection,
    pub grid: GridSection,
    #[serde(default)]
    pub problem: ProblemSection,
    /// `steps_per_segment` is taken from `grid.n_steps`.
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

/// Parses a config document, reporting the failing field path.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Parse {
        path: "<document>".into(),
        message: e.to_string(),
    })?;
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    cfg.solver.steps_per_segment = cfg.grid.n_steps;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.grid.horizon > 0.0 && self.grid.horizon.is_finite()) {
            return Err(invalid("grid.horizon", "must be positive and finite"));
        }
        if self.grid.n_steps == 0 {
            return Err(invalid("grid.n_steps", "must be positive"));
        }
        if self.basis.k == 0 || self.basis.k > K_MAX {
            return Err(invalid("basis.k", format!("must lie in 1..={K_MAX}")));
        }
        if !(self.basis.rank_tol > 0.0 && self.basis.rank_tol < 1.0) {
            return Err(invalid("basis.rank_tol", "must lie in (0, 1)"));
        }
        self.solver.validate().map_err(|e| invalid("solver", e.to_string()))?;
        let e = &self.experiment;
        if e.levels == 0 {
            return Err(invalid("experiment.levels", "must be positive"));
        }
        if !e.scale.is_finite() || !e.shift.is_finite() {
            return Err(invalid("experiment", "scale and shift must be finite"));
        }
        if e.bracket_paths < 2 {
            return Err(invalid("experiment.bracket_paths", "needs at least two paths"));
        }
        if !(e.h2.fd_step > 0.0) || !(e.comparison.h2.fd_step > 0.0) {
            return Err(invalid("experiment.h2.fd_step", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
seed = 7

[model]
gaussian_var = 0.5
atoms = [{ mass = 1.0, location = 1.0 }, { mass = 0.5, location = -2.0 }]

[basis]
k = 4

[grid]
horizon = 0.5
n_steps = 20

[problem]
family = "coupled"
lambda = 0.2
initial = { kind = "normal", mean = 1.0, var = 0.25 }

[solver]
n_paths = 2000
picard_tol = 1e-5

[experiment]
kind = "stability"
perturbation = { targets = ["phi", "sigma"], direction = "sine", magnitudes = [0.1, 0.05] }
"#;

    #[test]
    fn parses_full_document() {
        let c = parse_config(FULL).unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.model.atoms.len(), 2);
        assert_eq!(c.basis.k, 4);
        assert_eq!(c.solver.steps_per_segment, 20);
        assert_eq!(c.solver.n_paths, 2000);
        assert_eq!(c.solver.regression_degree, 5);
        assert_eq!(c.experiment.kind, Some(ExperimentKind::Stability));
        assert_eq!(c.experiment.perturbation.targets, vec![Target::Terminal, Target::Diffusion]);
        let p = c.problem.build(3, c.grid.horizon).unwrap();
        assert!((p.lipschitz - 0.2).abs() < 1e-15);
        assert_eq!(p.initial, InitialLaw::Normal { mean: 1.0, var: 0.25 });
    }

    #[test]
    fn missing_horizon_names_the_field() {
        let err = parse_config("[grid]\nn_steps = 10\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("grid"), "{msg}");
        assert!(msg.contains("horizon"), "{msg}");
    }

    #[test]
    fn unknown_field_is_reported_with_path() {
        let err = parse_config("[grid]\nhorizon = 1.0\n[solver]\nn_pathz = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("solver"), "{msg}");
        assert!(msg.contains("n_pathz"), "{msg}");
    }

    #[test]
    fn wrong_type_is_reported_with_path() {
        let err = parse_config("[grid]\nhorizon = \"one\"\n").unwrap_err();
        assert!(err.to_string().contains("grid.horizon"), "{err}");
    }

    #[test]
    fn range_checks() {
        assert!(parse_config("[grid]\nhorizon = -1.0\n").is_err());
        assert!(parse_config("[grid]\nhorizon = 1.0\n[basis]\nk = 11\n").is_err());
        assert!(parse_config("[grid]\nhorizon = 1.0\n[solver]\ndelta_shrink = 2.0\n").is_err());
    }

    #[test]
    fn family_requirements() {
        let c = parse_config("[grid]\nhorizon = 1.0\n[problem]\nfamily = \"coupled\"\n").unwrap();
        assert!(c.problem.build(1, 1.0).is_err());
        let c = parse_config("[grid]\nhorizon = 1.0\n[problem]\nfamily = \"linear\"\n").unwrap();
        assert!(c.problem.build(1, 1.0).is_err());
        let c = parse_config(
            "[grid]\nhorizon = 1.0\n[problem]\nfamily = \"linear\"\ncoefficients = { drift_z = [1.0, 2.0] }\n",
        )
        .unwrap();
        assert!(c.problem.build(1, 1.0).is_err());
        assert!(c.problem.build(2, 1.0).is_ok());
    }

    #[test]
    fn bad_model_is_rejected() {
        let c = parse_config("[grid]\nhorizon = 1.0\n[model]\natoms = [{ mass = -1.0, location = 1.0 }]\n").unwrap();
        assert!(c.model.build().is_err());
    }
}
