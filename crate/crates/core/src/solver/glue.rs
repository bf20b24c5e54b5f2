//! Horizon selection and backward gluing over `[0, T]`.
//!
//! The horizon is cut into `n` equal segments. Walking backwards, each
//! segment is solved from a grid of deterministic start states with the next
//! segment's value function as terminal data; the resulting `Y` at the
//! segment start defines the previous terminal function. A forward pass then
//! solves every segment on one bundle, starting from where the previous one
//! ended.

use rayon::prelude::*;
use serde::Serialize;

use super::picard::{picard_segment, picard_solve, Segment};
use super::{
    derive_seed, initial_states, mean_se, Noise, PicardOutcome, SolverConfig, SolverError, DELTA_STREAM,
    PILOT_STREAM,
};
use crate::fbsde_problem::{FbsdeProblem, SolutionTriple};
use crate::path_engine::TimeGrid;

/// Piecewise-linear value function on an increasing x-grid, continued
/// linearly outside it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TerminalFunction {
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
    pub lipschitz_estimate: f64,
}

impl TerminalFunction {
    pub fn new(xs: Vec<f64>, values: Vec<f64>) -> Self {
        assert_eq!(xs.len(), values.len());
        assert!(!xs.is_empty());
        let lipschitz_estimate = xs
            .windows(2)
            .zip(values.windows(2))
            .map(|(x, v)| ((v[1] - v[0]) / (x[1] - x[0])).abs())
            .fold(0.0, f64::max);
        Self {
            xs,
            values,
            lipschitz_estimate,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if n == 1 {
            return self.values[0];
        }
        let i = self.xs.partition_point(|&g| g <= x).clamp(1, n - 1) - 1;
        let (x0, x1) = (self.xs[i], self.xs[i + 1]);
        let w = (x - x0) / (x1 - x0);
        self.values[i] + w * (self.values[i + 1] - self.values[i])
    }
}

/// `c ([λ₀ + 1] e^{(2λ + λ²) T} − 1)`.
pub fn lipschitz_budget(c: f64, lambda: f64, lambda0: f64, horizon: f64) -> f64 {
    c * ((lambda0 + 1.0) * ((2.0 * lambda + lambda * lambda) * horizon).exp() - 1.0)
}

/// Largest tested horizon on which the Picard map contracts.
///
/// Starts at `min(T, 1)` and shrinks by `delta_shrink` until a pilot Picard
/// run converges with every ratio after the first at most `delta_ratio`.
pub fn estimate_delta(problem: &FbsdeProblem, noise: &Noise, cfg: &SolverConfig, seed: u64) -> Result<f64, SolverError> {
    cfg.validate()?;
    let horizon = problem.horizon;
    let floor = 1e-4 * horizon;
    let mut t_try = horizon.min(1.0);
    let pilot_seed = derive_seed(seed, DELTA_STREAM);
    loop {
        if t_try < floor {
            return Err(SolverError::DeltaUnderflow { floor, horizon });
        }
        let grid = TimeGrid::uniform(t_try, cfg.steps_per_segment)?;
        let bundle = noise.bundle(&grid, cfg.pilot_paths, pilot_seed)?;
        let sub = problem.clone().with_horizon(t_try);
        match picard_solve(&sub, &bundle, cfg) {
            Ok(out) if out.max_ratio_after_first() <= cfg.delta_ratio => {
                log::debug!("delta accepted at {t_try} after {} iterations", out.iterations);
                return Ok(t_try);
            }
            Ok(out) => log::debug!("delta {t_try} rejected: ratios {:?}", out.ratios),
            Err(e @ (SolverError::NoContraction { .. } | SolverError::MaxIterExceeded { .. })) => {
                log::debug!("delta {t_try} rejected: {e}")
            }
            Err(e) => return Err(e),
        }
        t_try *= cfg.delta_shrink;
    }
}

/// Segment count, boundary times and the x-grids of the intermediate
/// terminal functions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GluePlan {
    pub delta: f64,
    pub segments: usize,
    /// `T_0 = 0, …, T_n = T`.
    pub boundaries: Vec<f64>,
    /// x-grid at `T_1, …, T_{n-1}`.
    pub x_grids: Vec<Vec<f64>>,
}

pub fn plan_glue(problem: &FbsdeProblem, noise: &Noise, cfg: &SolverConfig, seed: u64) -> Result<GluePlan, SolverError> {
    let delta = estimate_delta(problem, noise, cfg, seed)?;
    let n = ((problem.horizon / delta) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let mut plan = plan_segments(problem, noise, cfg, seed, n)?;
    plan.delta = delta;
    Ok(plan)
}

/// Plan with a forced segment count. Grids cover mean ± 6 sd of a pilot
/// forward pass with `Y = Z = 0`.
pub fn plan_segments(
    problem: &FbsdeProblem,
    noise: &Noise,
    cfg: &SolverConfig,
    seed: u64,
    n: usize,
) -> Result<GluePlan, SolverError> {
    cfg.validate()?;
    if n == 0 {
        return Err(SolverError::InvalidConfig("segment count must be positive".into()));
    }
    let horizon = problem.horizon;
    let boundaries: Vec<f64> = (0..=n)
        .map(|i| if i == n { horizon } else { horizon * i as f64 / n as f64 })
        .collect();
    let mut x_grids = Vec::new();
    if n > 1 {
        let m = cfg.steps_per_segment;
        let grid = TimeGrid::uniform(horizon, n * m)?;
        let bundle = noise.bundle(&grid, cfg.pilot_paths, derive_seed(seed, PILOT_STREAM))?;
        let x0 = initial_states(&problem.initial, &bundle);
        let zero = SolutionTriple::zero(grid.clone(), 0.0, bundle.n_paths, bundle.k_eff);
        let identity = |x: f64| x;
        let seg = Segment {
            problem,
            bundle: &bundle,
            t_start: 0.0,
            x0: &x0,
            terminal: &identity,
        };
        let pilot = super::picard::sweep(&seg, &zero, 1)?;
        for i in 1..n {
            let col: Vec<f64> = (0..bundle.n_paths).map(|p| pilot.x_at(p, i * m)).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64).sqrt();
            let half = (6.0 * sd).max(cfg.grid_min_half_width);
            let k = cfg.x_grid_points;
            x_grids.push(
                (0..k)
                    .map(|j| mean - half + 2.0 * half * j as f64 / (k - 1) as f64)
                    .collect(),
            );
        }
    }
    Ok(GluePlan {
        delta: horizon / n as f64,
        segments: n,
        boundaries,
        x_grids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlueOutcome {
    #[serde(skip)]
    pub solution: SolutionTriple,
    pub plan: GluePlan,
    /// Forward-pass Picard record per segment.
    pub segments: Vec<PicardOutcome>,
    /// `G_1, …, G_{n-1}`.
    pub terminal_functions: Vec<TerminalFunction>,
    pub budget: f64,
    /// Indices `i` of terminal functions `G_i` over budget.
    pub budget_breaches: Vec<usize>,
}

pub fn glue_solve(problem: &FbsdeProblem, noise: &Noise, cfg: &SolverConfig, seed: u64) -> Result<GlueOutcome, SolverError> {
    let plan = plan_glue(problem, noise, cfg, seed)?;
    glue_solve_with_plan(problem, noise, cfg, &plan, seed)
}

pub fn glue_solve_segments(
    problem: &FbsdeProblem,
    noise: &Noise,
    cfg: &SolverConfig,
    seed: u64,
    n: usize,
) -> Result<GlueOutcome, SolverError> {
    let plan = plan_segments(problem, noise, cfg, seed, n)?;
    glue_solve_with_plan(problem, noise, cfg, &plan, seed)
}

pub fn glue_solve_with_plan(
    problem: &FbsdeProblem,
    noise: &Noise,
    cfg: &SolverConfig,
    plan: &GluePlan,
    seed: u64,
) -> Result<GlueOutcome, SolverError> {
    cfg.validate()?;
    let n = plan.segments;
    let m = cfg.steps_per_segment;
    if plan.boundaries.len() != n + 1 || plan.x_grids.len() != n.saturating_sub(1) {
        return Err(SolverError::InvalidConfig("glue plan is inconsistent".into()));
    }
    let grid = TimeGrid::uniform(problem.horizon, n * m)?;
    let bundle = noise.bundle(&grid, cfg.n_paths, seed)?;
    let budget = lipschitz_budget(
        cfg.budget_constant,
        problem.lipschitz,
        problem.terminal_lipschitz,
        problem.horizon,
    );
    if n == 1 {
        let out = picard_solve(problem, &bundle, cfg)?;
        return Ok(GlueOutcome {
            solution: out.solution.clone(),
            plan: plan.clone(),
            segments: vec![out],
            terminal_functions: Vec::new(),
            budget,
            budget_breaches: Vec::new(),
        });
    }

    let phi = |x: f64| (problem.terminal)(x);
    // Backward: terminal functions G_{n-1}, …, G_1.
    let mut gs: Vec<TerminalFunction> = Vec::with_capacity(n - 1);
    let mut breaches = Vec::new();
    for i in (2..=n).rev() {
        let sub_grid = grid.slice((i - 1) * m, i * m);
        let sub_bundle = noise.bundle(&sub_grid, cfg.grid_paths, derive_seed(seed, i as u64))?;
        let next = gs.last().cloned();
        let terminal = |x: f64| match &next {
            Some(g) => g.eval(x),
            None => phi(x),
        };
        let xs = &plan.x_grids[i - 2];
        let values: Vec<f64> = xs
            .par_iter()
            .map(|&x| {
                let x0 = vec![x; cfg.grid_paths];
                let seg = Segment {
                    problem,
                    bundle: &sub_bundle,
                    t_start: plan.boundaries[i - 1],
                    x0: &x0,
                    terminal: &terminal,
                };
                picard_segment(&seg, cfg).map(|o| o.solution.y0)
            })
            .collect::<Result<_, _>>()?;
        let g = TerminalFunction::new(xs.clone(), values);
        log::debug!("G_{} Lipschitz estimate {}", i - 1, g.lipschitz_estimate);
        if g.lipschitz_estimate > budget {
            log::warn!(
                "terminal function G_{} has Lipschitz estimate {} above budget {budget}",
                i - 1,
                g.lipschitz_estimate
            );
            breaches.push(i - 1);
        }
        gs.push(g);
    }
    gs.reverse();
    breaches.reverse();

    // Forward: stitch the segments on the full bundle.
    let np = cfg.n_paths;
    let k = bundle.k_eff;
    let mut x0 = initial_states(&problem.initial, &bundle);
    let mut stitched = SolutionTriple::zero(grid.clone(), 0.0, np, k);
    let mut records = Vec::with_capacity(n);
    let total = n * m;
    for i in 1..=n {
        let sub_bundle = bundle.slice_steps((i - 1) * m, i * m);
        let g = if i < n { Some(&gs[i - 1]) } else { None };
        let terminal = |x: f64| match g {
            Some(g) => g.eval(x),
            None => phi(x),
        };
        let seg = Segment {
            problem,
            bundle: &sub_bundle,
            t_start: plan.boundaries[i - 1],
            x0: &x0,
            terminal: &terminal,
        };
        let out = picard_segment(&seg, cfg)?;
        log::debug!("forward segment {i}: {} iterations, ratios {:?}", out.iterations, out.ratios);
        let s = &out.solution;
        let last = if i == n { m } else { m - 1 };
        for p in 0..np {
            for j in 0..=last {
                let at = p * (total + 1) + (i - 1) * m + j;
                stitched.x[at] = s.x_at(p, j);
                stitched.y[at] = s.y_at(p, j);
            }
            let dst = (p * total + (i - 1) * m) * k;
            stitched.z[dst..dst + m * k].copy_from_slice(&s.z[p * m * k..(p + 1) * m * k]);
        }
        if i == 1 {
            stitched.y0 = s.y0;
            stitched.y0_se = s.y0_se;
            stitched.y0_targets = s.y0_targets.clone();
        }
        x0 = (0..np).map(|p| s.x_at(p, m)).collect();
        records.push(out);
    }
    debug_assert_eq!(mean_se(&stitched.y0_targets).0, stitched.y0);
    Ok(GlueOutcome {
        solution: stitched,
        plan: plan.clone(),
        segments: records,
        terminal_functions: gs,
        budget,
        budget_breaches: breaches,
    })
}
