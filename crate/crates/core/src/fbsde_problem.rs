//! FBSDE data, assumption checks and the solution container.
//!
//! The system solved is
//!
//! ```text
//! X_t = X_0 + ∫ drift(s, X, Y, Z) ds + Σ_i ∫ diffusion_i(s, X-, Y-) dH^i
//! Y_t = terminal(X_T) + ∫_t^T driver(s, X, Y, Z) ds − Σ_i ∫_t^T Z^i dH^i
//! ```
//!
//! Coefficients are pure, re-entrant closures shared behind `Arc`, so problems
//! clone cheaply and perturbed problems can wrap a base problem.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path_engine::TimeGrid;
use crate::quadrature::simpson;

pub type ScalarFn = Arc<dyn Fn(f64, f64, f64, &[f64]) -> f64 + Send + Sync>;
pub type ChannelFn = Arc<dyn Fn(f64, f64, f64, usize) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("non-finite problem data: {0}")]
    NonFiniteData(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
}

/// Law of `X_0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialLaw {
    Constant { value: f64 },
    Normal { mean: f64, var: f64 },
}

impl Default for InitialLaw {
    fn default() -> Self {
        InitialLaw::Constant { value: 0.0 }
    }
}

impl InitialLaw {
    pub fn second_moment(&self) -> f64 {
        match *self {
            InitialLaw::Constant { value } => value * value,
            InitialLaw::Normal { mean, var } => mean * mean + var,
        }
    }

    /// Maps a standard normal draw to a sample of the law.
    pub fn sample(&self, standard_normal: f64) -> f64 {
        match *self {
            InitialLaw::Constant { value } => value,
            InitialLaw::Normal { mean, var } => mean + var.sqrt() * standard_normal,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, InitialLaw::Constant { .. })
            || matches!(self, InitialLaw::Normal { var, .. } if *var == 0.0)
    }

    pub fn mean(&self) -> f64 {
        match *self {
            InitialLaw::Constant { value } => value,
            InitialLaw::Normal { mean, .. } => mean,
        }
    }

    pub fn shifted(&self, by: f64) -> Self {
        match *self {
            InitialLaw::Constant { value } => InitialLaw::Constant { value: value + by },
            InitialLaw::Normal { mean, var } => InitialLaw::Normal { mean: mean + by, var },
        }
    }
}

#[derive(Clone)]
pub struct FbsdeProblem {
    /// Forward drift `f(t, x, y, z)`.
    pub drift: ScalarFn,
    /// Forward volatility on channel `i`: `σ^i(t, x, y)`.
    pub diffusion: ChannelFn,
    /// Backward driver `g(t, x, y, z)`.
    pub driver: ScalarFn,
    /// Terminal condition `φ(x)`.
    pub terminal: TerminalFn,
    pub initial: InitialLaw,
    /// Declared Lipschitz constant λ of drift, diffusion and driver.
    pub lipschitz: f64,
    /// Declared Lipschitz constant λ₀ of the terminal condition.
    pub terminal_lipschitz: f64,
    pub horizon: f64,
    /// Number of Teugels channels the coefficients act on.
    pub channels: usize,
}

impl fmt::Debug for FbsdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FbsdeProblem")
            .field("initial", &self.initial)
            .field("lipschitz", &self.lipschitz)
            .field("terminal_lipschitz", &self.terminal_lipschitz)
            .field("horizon", &self.horizon)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl FbsdeProblem {
    /// All coefficients zero, `X_0 = 0`.
    pub fn zero(channels: usize, horizon: f64) -> Self {
        Self {
            drift: Arc::new(|_, _, _, _| 0.0),
            diffusion: Arc::new(|_, _, _, _| 0.0),
            driver: Arc::new(|_, _, _, _| 0.0),
            terminal: Arc::new(|_| 0.0),
            initial: InitialLaw::default(),
            lipschitz: 0.0,
            terminal_lipschitz: 0.0,
            horizon,
            channels,
        }
    }

    pub fn with_drift<F: Fn(f64, f64, f64, &[f64]) -> f64 + Send + Sync + 'static>(mut self, f: F) -> Self {
        self.drift = Arc::new(f);
        self
    }

    pub fn with_diffusion<F: Fn(f64, f64, f64, usize) -> f64 + Send + Sync + 'static>(mut self, f: F) -> Self {
        self.diffusion = Arc::new(f);
        self
    }

    pub fn with_driver<F: Fn(f64, f64, f64, &[f64]) -> f64 + Send + Sync + 'static>(mut self, f: F) -> Self {
        self.driver = Arc::new(f);
        self
    }

    pub fn with_terminal<F: Fn(f64) -> f64 + Send + Sync + 'static>(mut self, f: F) -> Self {
        self.terminal = Arc::new(f);
        self
    }

    pub fn with_initial(mut self, initial: InitialLaw) -> Self {
        self.initial = initial;
        self
    }

    pub fn with_lipschitz(mut self, lipschitz: f64, terminal_lipschitz: f64) -> Self {
        self.lipschitz = lipschitz;
        self.terminal_lipschitz = terminal_lipschitz;
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn diffusion_norm_sq(&self, t: f64, x: f64, y: f64) -> f64 {
        (0..self.channels)
            .map(|i| {
                let s = (self.diffusion)(t, x, y, i);
                s * s
            })
            .sum()
    }
}

/// `V₀ = (E|X₀|² + |φ(0)|² + ∫₀ᵀ [|f(t,0,0,0)|² + ‖σ(t,0,0)‖² + |g(t,0,0,0)|²] dt)^{1/2}`,
/// with the time integral by composite Simpson on `n_quad` nodes.
pub fn check_v0(problem: &FbsdeProblem, n_quad: usize) -> Result<f64, ProblemError> {
    let zeros = vec![0.0; problem.channels];
    let x0 = problem.initial.second_moment();
    let phi0 = (problem.terminal)(0.0);
    let integral = simpson(
        |t| {
            let f = (problem.drift)(t, 0.0, 0.0, &zeros);
            let g = (problem.driver)(t, 0.0, 0.0, &zeros);
            f * f + problem.diffusion_norm_sq(t, 0.0, 0.0) + g * g
        },
        0.0,
        problem.horizon,
        n_quad,
    );
    for (name, v) in [("E|X0|^2", x0), ("phi(0)", phi0), ("time integral", integral)] {
        if !v.is_finite() {
            return Err(ProblemError::NonFiniteData(format!("{name} = {v}")));
        }
    }
    Ok((x0 + phi0 * phi0 + integral).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeOptions {
    pub probes: usize,
    pub fd_step: f64,
    /// Half-width of the state box `[-radius, radius]` probed for x, y and z.
    pub radius: f64,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            probes: 1000,
            fd_step: 1e-5,
            radius: 3.0,
            seed: 0x5eed,
        }
    }
}

/// Finite-difference audit of the structural condition on derivatives:
/// `σ_y^i f_z^j = 0` for all `i, j` and `f_y + ⟨σ_x, f_z⟩ + ⟨σ_y, g_z⟩ = 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct H2Report {
    pub probes: usize,
    pub max_product: f64,
    pub max_balance: f64,
    pub tolerance: f64,
    /// Probe point `(t, x, y)` of the largest balance residual.
    pub worst_point: (f64, f64, f64),
    pub pass: bool,
}

pub fn check_h2(problem: &FbsdeProblem, opts: &ProbeOptions) -> H2Report {
    let k = problem.channels;
    let h = opts.fd_step;
    let tol = 1e-6 + 10.0 * h * h;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r = opts.radius;
    let (mut max_product, mut max_balance) = (0.0f64, 0.0f64);
    let mut worst_point = (0.0, 0.0, 0.0);
    let mut zp = vec![0.0; k];
    let mut zm = vec![0.0; k];
    for _ in 0..opts.probes {
        let t = rng.random::<f64>() * problem.horizon;
        let x = rng.random_range(-r..=r);
        let y = rng.random_range(-r..=r);
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-r..=r)).collect();
        let f = &problem.drift;
        let g = &problem.driver;
        let s = &problem.diffusion;
        let f_y = (f(t, x, y + h, &z) - f(t, x, y - h, &z)) / (2.0 * h);
        let mut f_z = vec![0.0; k];
        let mut g_z = vec![0.0; k];
        for j in 0..k {
            zp.copy_from_slice(&z);
            zm.copy_from_slice(&z);
            zp[j] += h;
            zm[j] -= h;
            f_z[j] = (f(t, x, y, &zp) - f(t, x, y, &zm)) / (2.0 * h);
            g_z[j] = (g(t, x, y, &zp) - g(t, x, y, &zm)) / (2.0 * h);
        }
        let s_x: Vec<f64> = (0..k).map(|i| (s(t, x + h, y, i) - s(t, x - h, y, i)) / (2.0 * h)).collect();
        let s_y: Vec<f64> = (0..k).map(|i| (s(t, x, y + h, i) - s(t, x, y - h, i)) / (2.0 * h)).collect();
        for &sy in &s_y {
            for &fz in &f_z {
                max_product = max_product.max((sy * fz).abs());
            }
        }
        let balance = f_y
            + s_x.iter().zip(&f_z).map(|(a, b)| a * b).sum::<f64>()
            + s_y.iter().zip(&g_z).map(|(a, b)| a * b).sum::<f64>();
        if balance.abs() > max_balance {
            max_balance = balance.abs();
            worst_point = (t, x, y);
        }
    }
    H2Report {
        probes: opts.probes,
        max_product,
        max_balance,
        tolerance: tol,
        worst_point,
        pass: max_product <= tol && max_balance <= tol,
    }
}

/// Largest sampled difference quotient of each coefficient divided by its
/// declared constant (`0/0` counts as 0, `x/0` as infinity).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzAudit {
    pub drift_ratio: f64,
    pub diffusion_ratio: f64,
    pub driver_ratio: f64,
    pub terminal_ratio: f64,
    pub pass: bool,
}

pub fn lipschitz_audit(problem: &FbsdeProblem, opts: &ProbeOptions) -> LipschitzAudit {
    let k = problem.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x11b5);
    let r = opts.radius;
    let (mut qf, mut qs, mut qg, mut qp) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..opts.probes {
        let t = rng.random::<f64>() * problem.horizon;
        let mut point = || {
            let x: f64 = rng.random_range(-r..=r);
            let y: f64 = rng.random_range(-r..=r);
            let z: Vec<f64> = (0..k).map(|_| rng.random_range(-r..=r)).collect();
            (x, y, z)
        };
        let (x1, y1, z1) = point();
        let (x2, y2, z2) = point();
        let dz = z1.iter().zip(&z2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let l1 = (x1 - x2).abs() + (y1 - y2).abs() + dz;
        let l2 = ((x1 - x2).powi(2) + (y1 - y2).powi(2)).sqrt();
        if l1 > 0.0 {
            qf = qf.max(((problem.drift)(t, x1, y1, &z1) - (problem.drift)(t, x2, y2, &z2)).abs() / l1);
            qg = qg.max(((problem.driver)(t, x1, y1, &z1) - (problem.driver)(t, x2, y2, &z2)).abs() / l1);
        }
        if l2 > 0.0 {
            let ds: f64 = (0..k)
                .map(|i| ((problem.diffusion)(t, x1, y1, i) - (problem.diffusion)(t, x2, y2, i)).powi(2))
                .sum::<f64>()
                .sqrt();
            qs = qs.max(ds / l2);
        }
        if x1 != x2 {
            qp = qp.max(((problem.terminal)(x1) - (problem.terminal)(x2)).abs() / (x1 - x2).abs());
        }
    }
    let ratio = |q: f64, declared: f64| {
        if q == 0.0 {
            0.0
        } else if declared > 0.0 {
            q / declared
        } else {
            f64::INFINITY
        }
    };
    let drift_ratio = ratio(qf, problem.lipschitz);
    let diffusion_ratio = ratio(qs, problem.lipschitz);
    let driver_ratio = ratio(qg, problem.lipschitz);
    let terminal_ratio = ratio(qp, problem.terminal_lipschitz);
    let bound = 1.0 + 1e-6;
    LipschitzAudit {
        drift_ratio,
        diffusion_ratio,
        driver_ratio,
        terminal_ratio,
        pass: [drift_ratio, diffusion_ratio, driver_ratio, terminal_ratio]
            .iter()
            .all(|&q| q <= bound),
    }
}

/// Discrete-time solution `(X, Y, Z)` on a path bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionTriple {
    /// Local grid of the solved interval, starting at zero.
    pub grid: TimeGrid,
    /// Absolute time of the first grid point.
    pub t_start: f64,
    pub n_paths: usize,
    pub channels: usize,
    /// `[path][step]`, `n_steps + 1` values per path.
    pub x: Vec<f64>,
    /// `[path][step]`, `n_steps + 1` values per path.
    pub y: Vec<f64>,
    /// `[path][step][channel]`, `n_steps` steps per path.
    pub z: Vec<f64>,
    /// Estimate of `Y_0` (its mean when `X_0` is random).
    pub y0: f64,
    pub y0_se: f64,
    /// Per-path `φ(X_T) + Σ_k g_k Δt_k`; their mean is `y0`.
    pub y0_targets: Vec<f64>,
}

impl SolutionTriple {
    pub fn zero(grid: TimeGrid, t_start: f64, n_paths: usize, channels: usize) -> Self {
        let n = grid.n_steps();
        Self {
            x: vec![0.0; n_paths * (n + 1)],
            y: vec![0.0; n_paths * (n + 1)],
            z: vec![0.0; n_paths * n * channels],
            y0: 0.0,
            y0_se: 0.0,
            y0_targets: vec![0.0; n_paths],
            grid,
            t_start,
            n_paths,
            channels,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    #[inline]
    pub fn x_at(&self, path: usize, step: usize) -> f64 {
        self.x[path * (self.n_steps() + 1) + step]
    }

    #[inline]
    pub fn y_at(&self, path: usize, step: usize) -> f64 {
        self.y[path * (self.n_steps() + 1) + step]
    }

    #[inline]
    pub fn z_at(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * self.n_steps() + step) * self.channels;
        &self.z[off..off + self.channels]
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.n_paths == other.n_paths && self.channels == other.channels && self.grid == other.grid
    }

    /// Per-path `sup|ΔX|² + sup|ΔY|² + Σ_k ‖ΔZ_k‖² Δt_k` against `other`
    /// (or against zero). Layouts must match.
    pub fn path_sq_norms(&self, other: Option<&Self>) -> Vec<f64> {
        let n = self.n_steps();
        let k = self.channels;
        (0..self.n_paths)
            .map(|p| {
                let (mut sx, mut sy, mut iz) = (0.0f64, 0.0f64, 0.0);
                for s in 0..=n {
                    let i = p * (n + 1) + s;
                    let (dx, dy) = match other {
                        Some(o) => (self.x[i] - o.x[i], self.y[i] - o.y[i]),
                        None => (self.x[i], self.y[i]),
                    };
                    sx = sx.max(dx * dx);
                    sy = sy.max(dy * dy);
                }
                for s in 0..n {
                    let off = (p * n + s) * k;
                    let dt = self.grid.dt(s);
                    for c in 0..k {
                        let d = match other {
                            Some(o) => self.z[off + c] - o.z[off + c],
                            None => self.z[off + c],
                        };
                        iz += d * d * dt;
                    }
                }
                sx + sy + iz
            })
            .collect()
    }
}

/// Monte Carlo estimate of `(E[sup|X|² + sup|Y|²] + E∫‖Z‖² dt)^{1/2}`.
pub fn solution_norm(sol: &SolutionTriple) -> f64 {
    let v = sol.path_sq_norms(None);
    (v.iter().sum::<f64>() / v.len().max(1) as f64).sqrt()
}

pub mod families {
    //! Built-in coefficient families selectable from configuration.

    use std::sync::Arc;

    use serde::{Deserialize, Serialize};

    use super::{FbsdeProblem, InitialLaw};

    fn at(v: &[f64], i: usize) -> f64 {
        v.get(i).copied().unwrap_or(0.0)
    }

    fn dot(v: &[f64], z: &[f64]) -> f64 {
        v.iter().zip(z).map(|(a, b)| a * b).sum()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    /// Affine coefficients; channel vectors shorter than the basis are
    /// zero-padded.
    ///
    /// ```text
    /// f   = drift_x x + drift_y y + ⟨drift_z, z⟩ + drift_const
    /// σ^i = vol_x[i] x + vol_y[i] y + vol_const[i]
    /// g   = driver_x x + driver_y y + ⟨driver_z, z⟩ + driver_const
    /// φ   = terminal_slope x + terminal_const
    /// ```
    #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    pub struct LinearCoefficients {
        pub drift_x: f64,
        pub drift_y: f64,
        pub drift_z: Vec<f64>,
        pub drift_const: f64,
        pub vol_x: Vec<f64>,
        pub vol_y: Vec<f64>,
        pub vol_const: Vec<f64>,
        pub driver_x: f64,
        pub driver_y: f64,
        pub driver_z: Vec<f64>,
        pub driver_const: f64,
        pub terminal_slope: f64,
        pub terminal_const: f64,
    }

    impl LinearCoefficients {
        /// `f = 0`, `σ¹ = 1`, `g = c`, `φ(x) = x`: the solution is
        /// `Y_t = X_t + c (T − t)`, `Z¹ = 1`.
        pub fn martingale_oracle(c: f64) -> Self {
            Self {
                vol_const: vec![1.0],
                driver_const: c,
                terminal_slope: 1.0,
                ..Self::default()
            }
        }

        /// Fully coupled family with every coefficient at Lipschitz level `λ`
        /// on the first channel and unit terminal slope.
        pub fn coupled(lambda: f64) -> Self {
            let v = lambda / std::f64::consts::SQRT_2;
            Self {
                drift_x: lambda,
                drift_y: lambda,
                drift_z: vec![lambda],
                vol_x: vec![v],
                vol_y: vec![v],
                vol_const: vec![1.0],
                driver_x: lambda,
                driver_y: lambda,
                driver_z: vec![lambda],
                terminal_slope: 1.0,
                ..Self::default()
            }
        }

        /// Mean-reverting coupled family satisfying (H2): `σ_y = 0` and
        /// `f_y = −σ_x f_z`. The slope `u` of the decoupling field then solves
        /// the linear equation `u' = λ(2 − 1/√2)u − λ`, so it stays bounded on
        /// any horizon.
        pub fn h2_coupled(lambda: f64) -> Self {
            let v = lambda / std::f64::consts::SQRT_2;
            Self {
                drift_x: -lambda,
                drift_y: -v * lambda,
                drift_z: vec![lambda],
                vol_x: vec![v],
                vol_const: vec![1.0],
                driver_x: lambda,
                driver_y: -lambda,
                driver_z: vec![lambda],
                terminal_slope: 1.0,
                ..Self::default()
            }
        }

        /// `(λ, λ₀)` implied by the coefficients.
        pub fn implied_lipschitz(&self) -> (f64, f64) {
            let lf = self.drift_x.abs().max(self.drift_y.abs()).max(norm(&self.drift_z));
            let lg = self.driver_x.abs().max(self.driver_y.abs()).max(norm(&self.driver_z));
            let ls = (self.vol_x.iter().chain(&self.vol_y).map(|a| a * a).sum::<f64>()).sqrt();
            (lf.max(lg).max(ls), self.terminal_slope.abs())
        }

        /// Multiplies the inhomogeneous data (constants) by `c`.
        pub fn scale_data(&self, c: f64) -> Self {
            let mut s = self.clone();
            s.drift_const *= c;
            s.vol_const.iter_mut().for_each(|v| *v *= c);
            s.driver_const *= c;
            s.terminal_const *= c;
            s
        }

        pub fn into_problem(self, channels: usize, horizon: f64, initial: InitialLaw) -> FbsdeProblem {
            let (lambda, lambda0) = self.implied_lipschitz();
            let c = Arc::new(self);
            let (cf, cs, cg, cp) = (c.clone(), c.clone(), c.clone(), c);
            let mut p = FbsdeProblem::zero(channels, horizon)
                .with_drift(move |_, x, y, z| cf.drift_x * x + cf.drift_y * y + dot(&cf.drift_z, z) + cf.drift_const)
                .with_diffusion(move |_, x, y, i| at(&cs.vol_x, i) * x + at(&cs.vol_y, i) * y + at(&cs.vol_const, i))
                .with_driver(move |_, x, y, z| {
                    cg.driver_x * x + cg.driver_y * y + dot(&cg.driver_z, z) + cg.driver_const
                })
                .with_terminal(move |x| cp.terminal_slope * x + cp.terminal_const)
                .with_initial(initial);
            p.lipschitz = lambda;
            p.terminal_lipschitz = lambda0;
            p
        }
    }

    /// Linear coefficients plus bounded `tanh(x)` saturation terms.
    #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    pub struct SaturatingCoefficients {
        #[serde(flatten)]
        pub linear: LinearCoefficients,
        pub drift_sat: f64,
        pub vol_sat: Vec<f64>,
        pub driver_sat: f64,
        pub terminal_sat: f64,
    }

    impl SaturatingCoefficients {
        pub fn implied_lipschitz(&self) -> (f64, f64) {
            let l = &self.linear;
            let lf = (l.drift_x.abs() + self.drift_sat.abs()).max(l.drift_y.abs()).max(norm(&l.drift_z));
            let lg = (l.driver_x.abs() + self.driver_sat.abs())
                .max(l.driver_y.abs())
                .max(norm(&l.driver_z));
            let channels = l.vol_x.len().max(l.vol_y.len()).max(self.vol_sat.len());
            let ls = (0..channels)
                .map(|i| (at(&l.vol_x, i).abs() + at(&self.vol_sat, i).abs()).powi(2) + at(&l.vol_y, i).powi(2))
                .sum::<f64>()
                .sqrt();
            (lf.max(lg).max(ls), l.terminal_slope.abs() + self.terminal_sat.abs())
        }

        pub fn into_problem(self, channels: usize, horizon: f64, initial: InitialLaw) -> FbsdeProblem {
            let (lambda, lambda0) = self.implied_lipschitz();
            let base = self.linear.clone().into_problem(channels, horizon, initial);
            let c = Arc::new(self);
            let (cf, cs, cg, cp) = (c.clone(), c.clone(), c.clone(), c);
            let (bf, bs, bg, bp) = (
                base.drift.clone(),
                base.diffusion.clone(),
                base.driver.clone(),
                base.terminal.clone(),
            );
            let mut p = base
                .with_drift(move |t, x, y, z| bf(t, x, y, z) + cf.drift_sat * x.tanh())
                .with_diffusion(move |t, x, y, i| bs(t, x, y, i) + at(&cs.vol_sat, i) * x.tanh())
                .with_driver(move |t, x, y, z| bg(t, x, y, z) + cg.driver_sat * x.tanh())
                .with_terminal(move |x| bp(x) + cp.terminal_sat * x.tanh());
            p.lipschitz = lambda;
            p.terminal_lipschitz = lambda0;
            p
        }
    }
}

#[cfg(test)]
mod tests {
    use super::families::{LinearCoefficients, SaturatingCoefficients};
    use super::*;

    #[test]
    fn v0_of_zero_problem() {
        assert_eq!(check_v0(&FbsdeProblem::zero(2, 1.0), 11).unwrap(), 0.0);
    }

    #[test]
    fn v0_constant_vol() {
        let p = FbsdeProblem::zero(1, 1.0).with_diffusion(|_, _, _, _| 1.0).with_terminal(|x| x);
        assert!((check_v0(&p, 5).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn v0_linear_time_drift_is_third() {
        let p = FbsdeProblem::zero(1, 1.0).with_drift(|t, _, _, _| t);
        let v = check_v0(&p, 3).unwrap();
        assert!((v * v - 1.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn v0_rejects_non_finite() {
        let p = FbsdeProblem::zero(1, 1.0).with_terminal(|_| f64::NAN);
        assert!(matches!(check_v0(&p, 5), Err(ProblemError::NonFiniteData(_))));
    }

    #[test]
    fn v0_scales_linearly() {
        let base = LinearCoefficients {
            drift_const: 0.3,
            vol_const: vec![0.7, -0.2],
            driver_const: -1.1,
            terminal_const: 0.4,
            ..Default::default()
        };
        let v1 = check_v0(&base.clone().into_problem(2, 2.0, InitialLaw::Constant { value: 0.5 }), 9).unwrap();
        for c in [0.0, 1.0, 2.0] {
            let p = base.scale_data(c).into_problem(2, 2.0, InitialLaw::Constant { value: 0.5 * c });
            assert!((check_v0(&p, 9).unwrap() - c * v1).abs() < 1e-12);
        }
    }

    #[test]
    fn h2_passes_for_state_only_coefficients() {
        let p = FbsdeProblem::zero(2, 1.0)
            .with_drift(|_, x, _, _| x.sin())
            .with_diffusion(|_, x, _, i| (i as f64 + 1.0) * x)
            .with_driver(|_, x, y, z| x + y + z[0]);
        let r = check_h2(&p, &ProbeOptions::default());
        assert!(r.pass);
        assert_eq!(r.max_product, 0.0);
        assert_eq!(r.max_balance, 0.0);
    }

    #[test]
    fn h2_detects_violation() {
        let p = FbsdeProblem::zero(1, 1.0)
            .with_drift(|_, _, _, z| z[0])
            .with_diffusion(|_, x, _, _| x);
        let r = check_h2(&p, &ProbeOptions::default());
        assert!(!r.pass);
        assert!((r.max_balance - 1.0).abs() < 1e-8, "{}", r.max_balance);
    }

    #[test]
    fn coupled_families_against_h2() {
        let opts = ProbeOptions::default();
        let p = LinearCoefficients::h2_coupled(0.7).into_problem(1, 1.0, InitialLaw::default());
        assert!(check_h2(&p, &opts).pass);
        assert_eq!(p.lipschitz, 0.7);
        let p = LinearCoefficients::coupled(0.7).into_problem(1, 1.0, InitialLaw::default());
        assert!(!check_h2(&p, &opts).pass);
    }

    #[test]
    fn h2_balanced_coupling_passes() {
        // f_y = 1, f_z = 1, σ_x = -1, σ_y = 0: 1 + (-1)(1) + 0 = 0
        let p = FbsdeProblem::zero(1, 1.0)
            .with_drift(|_, _, y, z| y + z[0])
            .with_diffusion(|_, x, y, _| -x + y * 0.0)
            .with_driver(|_, x, y, z| 0.5 * x - y + 2.0 * z[0]);
        let r = check_h2(&p, &ProbeOptions::default());
        assert!(r.pass, "{r:?}");
        assert!(r.max_balance < 1e-8);
    }

    #[test]
    fn lipschitz_audit_respects_declared_constants() {
        let lin = LinearCoefficients::coupled(0.2);
        let p = lin.into_problem(2, 1.0, InitialLaw::default());
        assert!((p.lipschitz - 0.2).abs() < 1e-15);
        let a = lipschitz_audit(&p, &ProbeOptions::default());
        assert!(a.pass, "{a:?}");
        let sat = SaturatingCoefficients {
            linear: LinearCoefficients::coupled(0.3),
            drift_sat: 0.5,
            vol_sat: vec![0.2],
            driver_sat: -0.4,
            terminal_sat: 0.25,
        };
        let p = sat.into_problem(1, 1.0, InitialLaw::default());
        assert!(lipschitz_audit(&p, &ProbeOptions::default()).pass);
        let under = p.clone().with_lipschitz(0.1, 0.1);
        assert!(!lipschitz_audit(&under, &ProbeOptions::default()).pass);
    }

    #[test]
    fn norm_of_constant_triple() {
        let grid = TimeGrid::uniform(3.0, 4).unwrap();
        let mut s = SolutionTriple::zero(grid, 0.0, 3, 2);
        assert_eq!(solution_norm(&s), 0.0);
        s.x.iter_mut().for_each(|v| *v = 1.0);
        s.y.iter_mut().for_each(|v| *v = 1.0);
        assert!((solution_norm(&s) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn initial_law() {
        let l = InitialLaw::Normal { mean: 1.0, var: 4.0 };
        assert_eq!(l.second_moment(), 5.0);
        assert_eq!(l.sample(0.5), 2.0);
        assert!(!l.is_deterministic());
        assert!(InitialLaw::Constant { value: 3.0 }.is_deterministic());
    }
}
