//! Decoupled sweeps, Picard iteration and backward gluing for coupled FBSDEs.
//!
//! Conditional expectations are least-squares regressions on polynomials of
//! the forward state; `Z` is the projection `E[Y_{k+1} ΔH^i | X_k] / Δt`.

mod glue;
mod picard;
pub(crate) mod regression;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fbsde_problem::{InitialLaw, SolutionTriple};
use crate::levy_model::LevyModel;
use crate::path_engine::{simulate, PathBundle, PathError, TimeGrid};
use crate::teugels_basis::TeugelsBasis;

pub use glue::{
    estimate_delta, glue_solve, glue_solve_segments, glue_solve_with_plan, lipschitz_budget, plan_glue,
    plan_segments, GlueOutcome, GluePlan, TerminalFunction,
};
pub use picard::{decoupled_sweep, picard_solve, PicardOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("regression design is singular at step {step} even at degree 0")]
    RegressionSingular { step: usize },
    #[error("Picard map is not contracting after {iterations} iterations (ratios {ratios:?}); shrink the horizon")]
    NoContraction { iterations: usize, ratios: Vec<f64> },
    #[error("Picard iteration did not reach tolerance in {iterations} iterations (last distance {last_distance})")]
    MaxIterExceeded { iterations: usize, last_distance: f64 },
    #[error("no contracting horizon found above {floor} (horizon {horizon})")]
    DeltaUnderflow { floor: f64, horizon: f64 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("path simulation failed: {0}")]
    Path(String),
}

impl From<PathError> for SolverError {
    fn from(e: PathError) -> Self {
        SolverError::Path(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub n_paths: usize,
    /// Set from the grid section when read from a run config.
    #[serde(skip_deserializing)]
    pub steps_per_segment: usize,
    pub regression_degree: usize,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    pub delta_shrink: f64,
    /// Largest observed Picard ratio accepted when searching for δ.
    pub delta_ratio: f64,
    pub pilot_paths: usize,
    pub x_grid_points: usize,
    /// Paths per x-grid point in the backward gluing pass.
    pub grid_paths: usize,
    pub grid_min_half_width: f64,
    /// Constant `c` of the terminal-function Lipschitz budget.
    pub budget_constant: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            steps_per_segment: 50,
            regression_degree: 5,
            picard_tol: 1e-4,
            picard_max_iter: 50,
            delta_shrink: 0.5,
            delta_ratio: 0.9,
            pilot_paths: 2_000,
            x_grid_points: 17,
            grid_paths: 4_000,
            grid_min_half_width: 1.0,
            budget_constant: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.to_string()));
        if self.n_paths == 0 || self.pilot_paths == 0 || self.grid_paths == 0 {
            return bad("path counts must be positive");
        }
        if self.steps_per_segment == 0 {
            return bad("steps_per_segment must be positive");
        }
        if self.regression_degree == 0 {
            return bad("regression_degree must be at least 1");
        }
        if !(self.picard_tol > 0.0 && self.picard_tol.is_finite()) {
            return bad("picard_tol must be positive");
        }
        if self.picard_max_iter == 0 {
            return bad("picard_max_iter must be positive");
        }
        if !(self.delta_shrink > 0.0 && self.delta_shrink < 1.0) {
            return bad("delta_shrink must lie in (0, 1)");
        }
        if !(self.delta_ratio > 0.0 && self.delta_ratio < 1.0) {
            return bad("delta_ratio must lie in (0, 1)");
        }
        if self.x_grid_points < 2 {
            return bad("x_grid_points must be at least 2");
        }
        if !(self.grid_min_half_width > 0.0 && self.grid_min_half_width.is_finite()) {
            return bad("grid_min_half_width must be positive");
        }
        if !(self.budget_constant > 0.0 && self.budget_constant.is_finite()) {
            return bad("budget_constant must be positive");
        }
        Ok(())
    }
}

/// Driving noise: a Lévy model together with its Teugels basis.
#[derive(Debug, Clone)]
pub struct Noise {
    pub model: LevyModel,
    pub basis: TeugelsBasis,
}

impl Noise {
    pub fn new(model: LevyModel, basis: TeugelsBasis) -> Self {
        Self { model, basis }
    }

    pub fn channels(&self) -> usize {
        self.basis.k_eff
    }

    pub fn bundle(&self, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathBundle, SolverError> {
        Ok(simulate(&self.model, &self.basis, grid, n_paths, seed)?)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for an auxiliary stream of a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

pub(crate) const PILOT_STREAM: u64 = u64::MAX;
pub(crate) const DELTA_STREAM: u64 = u64::MAX - 1;

/// `X_0` per path from the bundle's reserved normals.
pub fn initial_states(law: &InitialLaw, bundle: &PathBundle) -> Vec<f64> {
    bundle.initial_normal.iter().map(|&z| law.sample(z)).collect()
}

/// `(E[sup|ΔX|² + sup|ΔY|²] + E∫‖ΔZ‖² dt)^{1/2}` with a delta-method
/// standard error.
pub fn m2_distance_se(a: &SolutionTriple, b: &SolutionTriple) -> Result<(f64, f64), SolverError> {
    if !a.same_layout(b) {
        return Err(SolverError::GridMismatch(format!(
            "{} paths x {} steps x {} channels vs {} x {} x {}",
            a.n_paths,
            a.n_steps(),
            a.channels,
            b.n_paths,
            b.n_steps(),
            b.channels
        )));
    }
    let v = a.path_sq_norms(Some(b));
    let (mean, se) = mean_se(&v);
    let d = mean.sqrt();
    let se_d = if d > 0.0 { se / (2.0 * d) } else { 0.0 };
    Ok((d, se_d))
}

pub fn m2_distance(a: &SolutionTriple, b: &SolutionTriple) -> Result<f64, SolverError> {
    m2_distance_se(a, b).map(|(d, _)| d)
}

/// Sample mean and its standard error.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
