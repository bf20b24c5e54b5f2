//! Seeded stability, convergence and comparison experiments.
//!
//! Two-problem experiments share one glue plan and one bundle seed, so any
//! difference between the solutions comes from the data alone.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fbsde_problem::families::LinearCoefficients;
use crate::fbsde_problem::{check_h2, FbsdeProblem, InitialLaw, ProbeOptions, SolutionTriple};
use crate::solver::{glue_solve_with_plan, m2_distance_se, mean_se, plan_glue, GluePlan, Noise, SolverConfig, SolverError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),
    #[error("invalid experiment: {0}")]
    Invalid(String),
}

/// Coefficient hit by a perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[serde(rename = "f")]
    Drift,
    #[serde(rename = "sigma")]
    Diffusion,
    #[serde(rename = "g")]
    Driver,
    #[serde(rename = "phi")]
    Terminal,
    #[serde(rename = "x0")]
    Initial,
}

/// Bounded direction `Δh(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Constant,
    Sine,
    Tanh,
}

impl Direction {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Direction::Constant => 1.0,
            Direction::Sine => x.sin(),
            Direction::Tanh => x.tanh(),
        }
    }

    pub fn lipschitz(self) -> f64 {
        match self {
            Direction::Constant => 0.0,
            Direction::Sine | Direction::Tanh => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSpec {
    pub targets: Vec<Target>,
    pub direction: Direction,
    pub magnitudes: Vec<f64>,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            targets: vec![Target::Terminal, Target::Driver],
            direction: Direction::Constant,
            magnitudes: vec![0.1, 0.01, 0.001],
        }
    }
}

impl PerturbationSpec {
    fn validate(&self) -> Result<(), AnalysisError> {
        if self.targets.is_empty() {
            return Err(AnalysisError::Invalid("perturbation has no targets".into()));
        }
        if self.magnitudes.iter().any(|e| !e.is_finite()) {
            return Err(AnalysisError::Invalid("magnitudes must be finite".into()));
        }
        Ok(())
    }
}

/// `h + ε Δh` on every target; σ is shifted on the first channel and `X_0`
/// by `ε`. Declared Lipschitz constants grow by `|ε| Lip(Δh)`.
pub fn perturb(problem: &FbsdeProblem, targets: &[Target], direction: Direction, eps: f64) -> FbsdeProblem {
    let mut p = problem.clone();
    if eps == 0.0 {
        return p;
    }
    let d = direction;
    for t in targets {
        match t {
            Target::Drift => {
                let f = problem.drift.clone();
                p = p.with_drift(move |t, x, y, z| f(t, x, y, z) + eps * d.eval(x));
            }
            Target::Diffusion => {
                let s = problem.diffusion.clone();
                p = p.with_diffusion(move |t, x, y, i| s(t, x, y, i) + if i == 0 { eps * d.eval(x) } else { 0.0 });
            }
            Target::Driver => {
                let g = problem.driver.clone();
                p = p.with_driver(move |t, x, y, z| g(t, x, y, z) + eps * d.eval(x));
            }
            Target::Terminal => {
                let phi = problem.terminal.clone();
                p = p.with_terminal(move |x| phi(x) + eps * d.eval(x));
            }
            Target::Initial => p.initial = problem.initial.shifted(eps),
        }
    }
    let bump = eps.abs() * direction.lipschitz();
    let coef = targets.iter().any(|t| matches!(t, Target::Drift | Target::Diffusion | Target::Driver));
    if coef {
        p.lipschitz = problem.lipschitz + bump;
    }
    if targets.contains(&Target::Terminal) {
        p.terminal_lipschitz = problem.terminal_lipschitz + bump;
    }
    p
}

/// `E{|ΔX₀|² + |Δφ(X_T)|² + ∫[|Δf|² + ‖Δσ‖² + |Δg|²](t, Π_t) dt}` along
/// `sol`, the solution of `p1`.
pub fn data_term(p0: &FbsdeProblem, p1: &FbsdeProblem, sol: &SolutionTriple, x0_base: &[f64]) -> f64 {
    let n = sol.n_steps();
    let k = sol.channels;
    let grid = sol.grid.points();
    let total: f64 = (0..sol.n_paths)
        .map(|p| {
            let dx0 = sol.x_at(p, 0) - x0_base[p];
            let xt = sol.x_at(p, n);
            let dphi = (p1.terminal)(xt) - (p0.terminal)(xt);
            let mut acc = dx0 * dx0 + dphi * dphi;
            for s in 0..n {
                let t = sol.t_start + grid[s];
                let (x, y, z) = (sol.x_at(p, s), sol.y_at(p, s), sol.z_at(p, s));
                let df = (p1.drift)(t, x, y, z) - (p0.drift)(t, x, y, z);
                let dg = (p1.driver)(t, x, y, z) - (p0.driver)(t, x, y, z);
                let ds: f64 = (0..k)
                    .map(|i| {
                        let v = (p1.diffusion)(t, x, y, i) - (p0.diffusion)(t, x, y, i);
                        v * v
                    })
                    .sum();
                acc += (df * df + ds + dg * dg) * sol.grid.dt(s);
            }
            acc
        })
        .sum();
    total / sol.n_paths as f64
}

/// Noise, solver settings and seed shared by the two sides of an experiment.
#[derive(Debug, Clone)]
pub struct Experiment<'a> {
    pub noise: &'a Noise,
    pub solver: &'a SolverConfig,
    pub seed: u64,
}

impl Experiment<'_> {
    pub fn plan(&self, base: &FbsdeProblem) -> Result<GluePlan, AnalysisError> {
        Ok(plan_glue(base, self.noise, self.solver, self.seed)?)
    }

    pub fn solve(&self, problem: &FbsdeProblem, plan: &GluePlan) -> Result<SolutionTriple, AnalysisError> {
        Ok(glue_solve_with_plan(problem, self.noise, self.solver, plan, self.seed)?.solution)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityRow {
    pub eps: f64,
    pub distance: f64,
    pub distance_se: f64,
    pub data_term: f64,
    /// `‖ΔΠ‖² / data term`; NaN when the data term vanishes.
    pub ratio: f64,
    pub delta_y0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub rows: Vec<StabilityRow>,
    /// `max / min` of the ratio over nonzero ε.
    pub ratio_spread: f64,
    pub zero_is_exact: bool,
    pub pass: bool,
}

/// Runs `ε = 0` and every magnitude of `spec` against the base solution.
pub fn stability_experiment(
    problem: &FbsdeProblem,
    spec: &PerturbationSpec,
    exp: &Experiment,
) -> Result<StabilityReport, AnalysisError> {
    spec.validate()?;
    let plan = exp.plan(problem)?;
    let base = exp.solve(problem, &plan)?;
    let x0_base: Vec<f64> = (0..base.n_paths).map(|p| base.x_at(p, 0)).collect();
    let mut eps_list = vec![0.0];
    eps_list.extend(spec.magnitudes.iter().copied().filter(|&e| e != 0.0));
    let mut rows = Vec::new();
    for &eps in &eps_list {
        let p1 = perturb(problem, &spec.targets, spec.direction, eps);
        let sol = exp.solve(&p1, &plan)?;
        let (distance, distance_se) = m2_distance_se(&sol, &base)?;
        let data = data_term(problem, &p1, &sol, &x0_base);
        rows.push(StabilityRow {
            eps,
            distance,
            distance_se,
            data_term: data,
            ratio: if data > 0.0 { distance * distance / data } else { f64::NAN },
            delta_y0: sol.y0 - base.y0,
        });
    }
    let zero_is_exact = rows[0].distance == 0.0 && rows[0].delta_y0 == 0.0;
    let ratios: Vec<f64> = rows[1..].iter().map(|r| r.ratio).collect();
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    let finite = !ratios.is_empty() && ratios.iter().all(|r| r.is_finite() && *r > 0.0);
    let ratio_spread = if finite { hi / lo } else { f64::NAN };
    Ok(StabilityReport {
        pass: zero_is_exact && finite && ratio_spread <= 10.0,
        rows,
        ratio_spread,
        zero_is_exact,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub level: usize,
    pub eps: f64,
    pub distance: f64,
    pub distance_se: f64,
    /// `d_n / d_{n-1}`; NaN on the first level.
    pub ratio_to_previous: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub pass: bool,
}

/// `‖Πⁿ − Π⁰‖` along `εₙ = scale · 2⁻ⁿ`, `n = 1..=levels`. Passes when the
/// distances never increase by more than two combined standard errors.
pub fn convergence_experiment(
    problem: &FbsdeProblem,
    targets: &[Target],
    direction: Direction,
    scale: f64,
    levels: usize,
    exp: &Experiment,
) -> Result<ConvergenceReport, AnalysisError> {
    if targets.is_empty() || levels == 0 || !scale.is_finite() {
        return Err(AnalysisError::Invalid("convergence ladder needs targets, levels and a finite scale".into()));
    }
    let plan = exp.plan(problem)?;
    let base = exp.solve(problem, &plan)?;
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(levels);
    for level in 1..=levels {
        let eps = scale * 0.5f64.powi(level as i32);
        let sol = exp.solve(&perturb(problem, targets, direction, eps), &plan)?;
        let (distance, distance_se) = m2_distance_se(&sol, &base)?;
        let ratio_to_previous = rows.last().map_or(f64::NAN, |r| distance / r.distance);
        rows.push(ConvergenceRow {
            level,
            eps,
            distance,
            distance_se,
            ratio_to_previous,
        });
    }
    let pass = rows
        .windows(2)
        .all(|w| w[1].distance <= w[0].distance + 2.0 * w[0].distance_se.hypot(w[1].distance_se));
    Ok(ConvergenceReport { rows, pass })
}

const PRIMES: [u32; 13] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41];

/// Radical-inverse Halton point `index` (1-based) in `[0, 1)^dim`.
pub fn halton(index: u64, dim: usize) -> Vec<f64> {
    assert!(dim <= PRIMES.len());
    PRIMES[..dim]
        .iter()
        .map(|&b| {
            let (mut i, mut f, mut r) = (index, 1.0, 0.0);
            let b = b as u64;
            while i > 0 {
                f /= b as f64;
                r += f * (i % b) as f64;
                i /= b;
            }
            r
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparisonOptions {
    /// Quasi-random points used to check the data ordering.
    pub probes: usize,
    /// Half-width of the probed box for x, y and z.
    pub radius: f64,
    pub h2: ProbeOptions,
}

impl Default for ComparisonOptions {
    fn default() -> Self {
        Self {
            probes: 10_000,
            radius: 5.0,
            h2: ProbeOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub y0_0: f64,
    pub y0_1: f64,
    pub difference: f64,
    pub std_error: f64,
    pub z_score: f64,
    pub probes: usize,
    pub pass: bool,
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

/// Probes `φ⁰ ≤ φ¹`, `g⁰ ≤ g¹` and shared `(f, σ)` on a Halton cloud.
pub fn check_ordering(p0: &FbsdeProblem, p1: &FbsdeProblem, opts: &ComparisonOptions) -> Result<(), AnalysisError> {
    if p0.channels != p1.channels || p0.horizon != p1.horizon || p0.initial != p1.initial {
        return Err(AnalysisError::HypothesisViolated(
            "problems differ in channels, horizon or initial law".into(),
        ));
    }
    let k = p0.channels;
    if 3 + k > PRIMES.len() {
        return Err(AnalysisError::Invalid(format!("too many channels for the probe cloud: {k}")));
    }
    let r = opts.radius;
    let tol = |a: f64, b: f64| 1e-12 * (1.0 + a.abs().max(b.abs()));
    let mut z = vec![0.0; k];
    for i in 1..=opts.probes as u64 {
        let u = halton(i, 3 + k);
        let t = u[0] * p0.horizon;
        let x = r * (2.0 * u[1] - 1.0);
        let y = r * (2.0 * u[2] - 1.0);
        for (zc, uc) in z.iter_mut().zip(&u[3..]) {
            *zc = r * (2.0 * uc - 1.0);
        }
        let (phi0, phi1) = ((p0.terminal)(x), (p1.terminal)(x));
        if phi0 > phi1 + tol(phi0, phi1) {
            return Err(AnalysisError::HypothesisViolated(format!("phi0({x}) = {phi0} > phi1 = {phi1}")));
        }
        let (g0, g1) = ((p0.driver)(t, x, y, &z), (p1.driver)(t, x, y, &z));
        if g0 > g1 + tol(g0, g1) {
            return Err(AnalysisError::HypothesisViolated(format!(
                "g0 = {g0} > g1 = {g1} at t = {t}, x = {x}, y = {y}"
            )));
        }
        if !close((p0.drift)(t, x, y, &z), (p1.drift)(t, x, y, &z))
            || (0..k).any(|c| !close((p0.diffusion)(t, x, y, c), (p1.diffusion)(t, x, y, c)))
        {
            return Err(AnalysisError::HypothesisViolated(format!(
                "forward coefficients differ at t = {t}, x = {x}, y = {y}"
            )));
        }
    }
    Ok(())
}

/// Initial values of two ordered problems on common random numbers.
pub fn comparison_experiment(
    p0: &FbsdeProblem,
    p1: &FbsdeProblem,
    opts: &ComparisonOptions,
    exp: &Experiment,
) -> Result<ComparisonReport, AnalysisError> {
    check_ordering(p0, p1, opts)?;
    for (name, p) in [("problem 0", p0), ("problem 1", p1)] {
        let h2 = check_h2(p, &opts.h2);
        if !h2.pass {
            return Err(AnalysisError::HypothesisViolated(format!(
                "{name} fails the derivative condition (product {}, balance {})",
                h2.max_product, h2.max_balance
            )));
        }
    }
    let plan = exp.plan(p0)?;
    let s0 = exp.solve(p0, &plan)?;
    let s1 = exp.solve(p1, &plan)?;
    let diffs: Vec<f64> = s1.y0_targets.iter().zip(&s0.y0_targets).map(|(a, b)| a - b).collect();
    let (_, std_error) = mean_se(&diffs);
    let difference = s1.y0 - s0.y0;
    let z_score = if std_error > 0.0 {
        difference / std_error
    } else if difference == 0.0 {
        0.0
    } else {
        difference.signum() * f64::INFINITY
    };
    Ok(ComparisonReport {
        y0_0: s0.y0,
        y0_1: s1.y0,
        difference,
        std_error,
        z_score,
        probes: opts.probes,
        pass: difference >= -(3.0 * std_error).max(1e-12),
    })
}

/// Linear system with zero start:
///
/// ```text
/// dX = (a1 X + b1 Y + ⟨c1, Z⟩) dt + (a2 X + b2 Y) dH
/// Y_T = P X_T + α,  driver a3 X + b3 Y + ⟨c3, Z⟩ + β
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearCase {
    pub name: String,
    pub a1: f64,
    pub b1: f64,
    pub c1: Vec<f64>,
    pub a2: Vec<f64>,
    pub b2: Vec<f64>,
    pub a3: f64,
    pub b3: f64,
    pub c3: Vec<f64>,
    pub p: f64,
    pub alpha: f64,
    pub beta: f64,
    pub horizon: f64,
    /// Known `Y_0`, when available in closed form.
    pub expected: Option<f64>,
}

impl Default for LinearCase {
    fn default() -> Self {
        Self {
            name: "linear".into(),
            a1: 0.0,
            b1: 0.0,
            c1: Vec::new(),
            a2: Vec::new(),
            b2: Vec::new(),
            a3: 0.0,
            b3: 0.0,
            c3: Vec::new(),
            p: 0.0,
            alpha: 0.0,
            beta: 0.0,
            horizon: 1.0,
            expected: None,
        }
    }
}

impl LinearCase {
    pub fn check_hypotheses(&self) -> Result<(), AnalysisError> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(AnalysisError::HypothesisViolated(format!(
                "{}: alpha = {} and beta = {} must be nonnegative",
                self.name, self.alpha, self.beta
            )));
        }
        if self.b2.iter().any(|&b| b != 0.0) && self.c1.iter().any(|&c| c != 0.0) {
            return Err(AnalysisError::HypothesisViolated(format!(
                "{}: b2 c1 must vanish componentwise",
                self.name
            )));
        }
        Ok(())
    }

    pub fn to_problem(&self, channels: usize) -> FbsdeProblem {
        LinearCoefficients {
            drift_x: self.a1,
            drift_y: self.b1,
            drift_z: self.c1.clone(),
            vol_x: self.a2.clone(),
            vol_y: self.b2.clone(),
            driver_x: self.a3,
            driver_y: self.b3,
            driver_z: self.c3.clone(),
            driver_const: self.beta,
            terminal_slope: self.p,
            terminal_const: self.alpha,
            ..LinearCoefficients::default()
        }
        .into_problem(channels, self.horizon, InitialLaw::Constant { value: 0.0 })
    }
}

/// Built-in cases with nonnegative `(α, β)`.
pub fn builtin_linear_cases() -> Vec<LinearCase> {
    let feedback_b3: f64 = 0.1;
    vec![
        LinearCase {
            name: "constant_terminal".into(),
            alpha: 1.0,
            expected: Some(1.0),
            ..LinearCase::default()
        },
        LinearCase {
            name: "pure_drift".into(),
            beta: 1.0,
            expected: Some(1.0),
            ..LinearCase::default()
        },
        // X stays at zero, so Y solves y' = −(b3 y + β), y(T) = 0.
        LinearCase {
            name: "driver_feedback".into(),
            a3: 0.1,
            b3: feedback_b3,
            beta: 0.5,
            expected: Some(0.5 * (feedback_b3.exp() - 1.0) / feedback_b3),
            ..LinearCase::default()
        },
        LinearCase {
            name: "coupled_positive".into(),
            a1: 0.1,
            b1: 0.2,
            a2: vec![0.1],
            b2: vec![0.2],
            a3: 0.1,
            b3: 0.1,
            c3: vec![0.1],
            p: 0.5,
            alpha: 0.2,
            beta: 0.3,
            ..LinearCase::default()
        },
        LinearCase {
            name: "mixed_signs".into(),
            a1: -0.2,
            b1: 0.1,
            a2: vec![0.2],
            b2: vec![0.2],
            a3: -0.2,
            b3: -0.2,
            c3: vec![-0.1],
            p: -0.5,
            alpha: 0.1,
            beta: 0.1,
            ..LinearCase::default()
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearReport {
    pub name: String,
    pub y0: f64,
    pub std_error: f64,
    pub expected: Option<f64>,
    pub pass: bool,
}

/// Solves a linear case and checks `Y_0 ≥ −3 SE`.
pub fn linear_proposition_check(case: &LinearCase, exp: &Experiment) -> Result<LinearReport, AnalysisError> {
    case.check_hypotheses()?;
    let problem = case.to_problem(exp.noise.channels());
    let plan = exp.plan(&problem)?;
    let sol = exp.solve(&problem, &plan)?;
    Ok(LinearReport {
        name: case.name.clone(),
        y0: sol.y0,
        std_error: sol.y0_se,
        expected: case.expected,
        pass: sol.y0 >= -(3.0 * sol.y0_se).max(1e-12),
    })
}
