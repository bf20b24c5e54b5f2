use rayon::prelude::*;
use serde::Serialize;

use super::regression::Design;
use super::{initial_states, m2_distance, SolverConfig, SolverError};
use crate::fbsde_problem::{FbsdeProblem, SolutionTriple};
use crate::path_engine::PathBundle;

/// One sub-interval problem: coefficients, noise, start states and terminal
/// data. Times on the bundle grid are offset by `t_start`.
pub(crate) struct Segment<'a> {
    pub problem: &'a FbsdeProblem,
    pub bundle: &'a PathBundle,
    pub t_start: f64,
    pub x0: &'a [f64],
    pub terminal: &'a (dyn Fn(f64) -> f64 + Sync),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardOutcome {
    #[serde(skip)]
    pub solution: SolutionTriple,
    pub iterations: usize,
    /// `d(Π_m, Π_{m-1})` for `m = 1..=iterations`.
    pub distances: Vec<f64>,
    /// `d(Π_{m+1}, Π_m) / d(Π_m, Π_{m-1})`.
    pub ratios: Vec<f64>,
}

impl PicardOutcome {
    /// Largest ratio after the first, which compares against the zero seed.
    pub fn max_ratio_after_first(&self) -> f64 {
        self.ratios.iter().skip(1).fold(0.0, |m, &r| if r.is_nan() { f64::NAN } else { m.max(r) })
    }
}

fn check_channels(problem: &FbsdeProblem, bundle: &PathBundle) -> Result<(), SolverError> {
    if problem.channels != bundle.k_eff {
        return Err(SolverError::GridMismatch(format!(
            "problem acts on {} channels, bundle carries {}",
            problem.channels, bundle.k_eff
        )));
    }
    Ok(())
}

pub(crate) fn sweep(seg: &Segment, prior: &SolutionTriple, degree: usize) -> Result<SolutionTriple, SolverError> {
    let bundle = seg.bundle;
    let grid = &bundle.grid;
    let pts = grid.points();
    let n = grid.n_steps();
    let k = bundle.k_eff;
    let np = bundle.n_paths;
    let pr = seg.problem;

    let mut x = vec![0.0; np * (n + 1)];
    x.par_chunks_mut(n + 1).enumerate().for_each(|(p, xp)| {
        xp[0] = seg.x0[p];
        for s in 0..n {
            let t = seg.t_start + pts[s];
            let (xs, ys) = (xp[s], prior.y_at(p, s));
            let dh = bundle.dh(p, s);
            let mut v = xs + (pr.drift)(t, xs, ys, prior.z_at(p, s)) * grid.dt(s);
            for (i, d) in dh.iter().enumerate() {
                v += (pr.diffusion)(t, xs, ys, i) * d;
            }
            xp[s + 1] = v;
        }
    });

    let mut y = vec![0.0; np * (n + 1)];
    let mut z = vec![0.0; np * n * k];
    let mut y_next: Vec<f64> = (0..np).into_par_iter().map(|p| (seg.terminal)(x[p * (n + 1) + n])).collect();
    for (p, v) in y_next.iter().enumerate() {
        y[p * (n + 1) + n] = *v;
    }
    // Intercept regressions preserve cross-sectional means, so the mean of
    // φ(X_T) + Σ g Δt equals the mean of Y_0 while keeping the full path noise
    // in its spread.
    let mut targets = y_next.clone();
    let mut xcol = vec![0.0; np];
    let mut y_cur = vec![0.0; np];
    let mut g_dt = vec![0.0; np];
    for s in (0..n).rev() {
        for (p, v) in xcol.iter_mut().enumerate() {
            *v = x[p * (n + 1) + s];
        }
        let dt = grid.dt(s);
        let t = seg.t_start + pts[s];
        let design = Design::new(&xcol, degree).ok_or(SolverError::RegressionSingular { step: s })?;
        let cy = design.fit(&xcol, 1, |p, out| out[0] = y_next[p]);
        let yhat: Vec<f64> = xcol.par_iter().map(|&xv| design.eval(&cy[0], xv)).collect();
        // The fitted part is F_k-measurable, so removing it leaves the
        // projection unbiased and cuts its variance.
        let cz = design.fit(&xcol, k, |p, out| {
            let r = y_next[p] - yhat[p];
            for (o, d) in out.iter_mut().zip(bundle.dh(p, s)) {
                *o = r * d / dt;
            }
        });
        z.par_chunks_mut(n * k)
            .zip(y_cur.par_iter_mut())
            .zip(g_dt.par_iter_mut())
            .enumerate()
            .for_each(|(p, ((zp, yc), gd))| {
                let xv = xcol[p];
                let zs = &mut zp[s * k..(s + 1) * k];
                for (c, o) in zs.iter_mut().enumerate() {
                    *o = design.eval(&cz[c], xv);
                }
                *gd = (pr.driver)(t, xv, yhat[p], zs) * dt;
                *yc = yhat[p] + *gd;
            });
        for (tg, gd) in targets.iter_mut().zip(&g_dt) {
            *tg += gd;
        }
        for (p, v) in y_cur.iter().enumerate() {
            y[p * (n + 1) + s] = *v;
        }
        std::mem::swap(&mut y_next, &mut y_cur);
    }
    let (y0, y0_se) = super::mean_se(&targets);
    Ok(SolutionTriple {
        grid: grid.clone(),
        t_start: seg.t_start,
        n_paths: np,
        channels: k,
        x,
        y,
        z,
        y0,
        y0_se,
        y0_targets: targets,
    })
}

pub(crate) fn picard_segment(seg: &Segment, cfg: &SolverConfig) -> Result<PicardOutcome, SolverError> {
    check_channels(seg.problem, seg.bundle)?;
    let mut current = SolutionTriple::zero(seg.bundle.grid.clone(), seg.t_start, seg.bundle.n_paths, seg.bundle.k_eff);
    let mut distances = Vec::new();
    let mut ratios = Vec::new();
    let mut bad_run = 0;
    for m in 1..=cfg.picard_max_iter {
        let next = sweep(seg, &current, cfg.regression_degree)?;
        let d = m2_distance(&next, &current)?;
        if let Some(&prev) = distances.last() {
            let r: f64 = d / prev;
            ratios.push(r);
            if r >= 1.0 || !r.is_finite() {
                bad_run += 1;
            } else {
                bad_run = 0;
            }
        }
        distances.push(d);
        current = next;
        if d < cfg.picard_tol {
            return Ok(PicardOutcome {
                solution: current,
                iterations: m,
                distances,
                ratios,
            });
        }
        if bad_run >= 3 || !d.is_finite() {
            return Err(SolverError::NoContraction { iterations: m, ratios });
        }
    }
    Err(SolverError::MaxIterExceeded {
        iterations: cfg.picard_max_iter,
        last_distance: *distances.last().unwrap_or(&f64::NAN),
    })
}

fn check_horizon(problem: &FbsdeProblem, bundle: &PathBundle) -> Result<(), SolverError> {
    let h = bundle.grid.horizon();
    if (h - problem.horizon).abs() > 1e-12 * problem.horizon.max(1.0) {
        return Err(SolverError::GridMismatch(format!(
            "problem horizon {} differs from bundle horizon {h}",
            problem.horizon
        )));
    }
    check_channels(problem, bundle)
}

/// One application of the decoupled map: forward Euler driven by the prior
/// `(Y, Z)`, then backward regression with terminal `φ(X̃_T)`.
pub fn decoupled_sweep(
    problem: &FbsdeProblem,
    bundle: &PathBundle,
    prior: &SolutionTriple,
    cfg: &SolverConfig,
) -> Result<SolutionTriple, SolverError> {
    check_horizon(problem, bundle)?;
    if prior.n_paths != bundle.n_paths || prior.grid != bundle.grid || prior.channels != bundle.k_eff {
        return Err(SolverError::GridMismatch("prior does not live on the bundle".into()));
    }
    let x0 = initial_states(&problem.initial, bundle);
    let terminal = |x: f64| (problem.terminal)(x);
    let seg = Segment {
        problem,
        bundle,
        t_start: 0.0,
        x0: &x0,
        terminal: &terminal,
    };
    sweep(&seg, prior, cfg.regression_degree)
}

/// Picard iteration from `Π₀ = 0` on the whole bundle horizon.
pub fn picard_solve(problem: &FbsdeProblem, bundle: &PathBundle, cfg: &SolverConfig) -> Result<PicardOutcome, SolverError> {
    cfg.validate()?;
    check_horizon(problem, bundle)?;
    let x0 = initial_states(&problem.initial, bundle);
    let terminal = |x: f64| (problem.terminal)(x);
    let seg = Segment {
        problem,
        bundle,
        t_start: 0.0,
        x0: &x0,
        terminal: &terminal,
    };
    picard_segment(&seg, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde_problem::families::LinearCoefficients;
    use crate::fbsde_problem::{solution_norm, InitialLaw};
    use crate::levy_model::LevyModel;
    use crate::path_engine::TimeGrid;
    use crate::solver::Noise;
    use crate::teugels_basis::build_basis;

    fn noise(model: LevyModel) -> Noise {
        let m = crate::levy_model::moments(&model, 10).unwrap();
        let b = build_basis(&m, 3, 1e-12).unwrap();
        Noise::new(model, b)
    }

    fn rms(v: impl Iterator<Item = f64>) -> f64 {
        let (s, n) = v.fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
        (s / n as f64).sqrt()
    }

    #[test]
    fn zero_problem_gives_zero_triple() {
        let nz = noise(LevyModel::brownian());
        let b = nz.bundle(&TimeGrid::uniform(1.0, 10).unwrap(), 200, 3).unwrap();
        let p = FbsdeProblem::zero(1, 1.0);
        let prior = SolutionTriple::zero(b.grid.clone(), 0.0, 200, 1);
        let s = decoupled_sweep(&p, &b, &prior, &SolverConfig::default()).unwrap();
        assert_eq!(s, prior);
        let out = picard_solve(&p, &b, &SolverConfig::default()).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(solution_norm(&out.solution), 0.0);
    }

    #[test]
    fn martingale_oracle_y_tracks_x() {
        let nz = noise(LevyModel::brownian());
        let b = nz.bundle(&TimeGrid::uniform(1.0, 50).unwrap(), 10_000, 11).unwrap();
        let p = LinearCoefficients::martingale_oracle(0.0).into_problem(1, 1.0, InitialLaw::default());
        let prior = SolutionTriple::zero(b.grid.clone(), 0.0, b.n_paths, 1);
        let s = decoupled_sweep(&p, &b, &prior, &SolverConfig::default()).unwrap();
        let ey = rms(s.x.iter().zip(&s.y).map(|(x, y)| y - x));
        let ez = rms(s.z.iter().map(|z| z - 1.0));
        assert!(ey <= 5e-2, "Y rms {ey}");
        assert!(ez <= 5e-2, "Z rms {ez}");
    }

    #[test]
    fn constant_driver_oracle() {
        // Y_0 = X_0 + cT for f = 0, σ¹ = 1, g = c, φ = id.
        let nz = noise(LevyModel::brownian());
        let b = nz.bundle(&TimeGrid::uniform(1.0, 50).unwrap(), 10_000, 5).unwrap();
        let p = LinearCoefficients::martingale_oracle(0.3)
            .into_problem(1, 1.0, InitialLaw::Constant { value: 0.5 });
        let out = picard_solve(&p, &b, &SolverConfig::default()).unwrap();
        let s = &out.solution;
        assert!((s.y0 - 0.8).abs() <= 3.0 * s.y0_se, "{} ± {}", s.y0, s.y0_se);
        assert!(out.iterations <= 2);
    }

    #[test]
    fn decoupled_problem_fixes_after_two_iterations() {
        let nz = noise(LevyModel::poisson(1.0));
        let b = nz.bundle(&TimeGrid::uniform(1.0, 20).unwrap(), 2000, 8).unwrap();
        let mut c = LinearCoefficients::martingale_oracle(0.2);
        c.drift_x = 0.3;
        c.driver_y = 0.4;
        c.driver_z = vec![0.5];
        let p = c.into_problem(1, 1.0, InitialLaw::Constant { value: 1.0 });
        let out = picard_solve(&p, &b, &SolverConfig::default()).unwrap();
        assert_eq!(out.iterations, 2);
        assert_eq!(*out.distances.last().unwrap(), 0.0);
    }

    #[test]
    fn coupled_family_contracts() {
        let nz = noise(LevyModel::brownian());
        let b = nz.bundle(&TimeGrid::uniform(0.25, 50).unwrap(), 4000, 21).unwrap();
        let p = LinearCoefficients::coupled(0.2).into_problem(1, 0.25, InitialLaw::Constant { value: 1.0 });
        let out = picard_solve(&p, &b, &SolverConfig::default()).unwrap();
        assert!(out.ratios.iter().skip(1).all(|&r| r < 1.0), "{:?}", out.ratios);
        assert!(out.iterations <= 10);
        // one more application barely moves y0
        let again = decoupled_sweep(&p, &b, &out.solution, &SolverConfig::default()).unwrap();
        assert!((again.y0 - out.solution.y0).abs() <= 1e-4);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let nz = noise(LevyModel::brownian());
        let b = nz.bundle(&TimeGrid::uniform(1.0, 5).unwrap(), 10, 1).unwrap();
        let p = FbsdeProblem::zero(2, 1.0);
        assert!(matches!(
            picard_solve(&p, &b, &SolverConfig::default()),
            Err(SolverError::GridMismatch(_))
        ));
        let p = FbsdeProblem::zero(1, 2.0);
        assert!(matches!(
            picard_solve(&p, &b, &SolverConfig::default()),
            Err(SolverError::GridMismatch(_))
        ));
    }
}
