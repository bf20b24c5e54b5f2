//! Path simulation of the Teugels martingales for Brownian plus finite-activity
//! atomic jump measures.
//!
//! Every (path, step) pair owns a counter-based substream: ChaCha8 keyed by the
//! master seed, stream = path index, word position = `step << 32`. A path's
//! draws therefore do not depend on how paths are split into worker blocks.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::levy_model::LevyModel;
use crate::teugels_basis::TeugelsBasis;

pub const BUNDLE_FORMAT_HEADER: &str = "# teugels-bundle v1";

/// Word region reserved for the per-path initial-law draw.
const INITIAL_REGION: u128 = 1 << 35;

#[derive(Debug, Error)]
pub enum PathError {
    #[error("path simulation supports atoms plus a Gaussian part only; density {0:?} cannot be simulated")]
    UnsupportedMeasure(String),
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("invalid simulation request: {0}")]
    InvalidRequest(String),
    #[error("bundle I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("bundle CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed bundle file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self, PathError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(PathError::InvalidGrid(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(PathError::InvalidGrid("n_steps must be positive".into()));
        }
        let mut points: Vec<f64> = (0..=n_steps).map(|k| horizon * k as f64 / n_steps as f64).collect();
        points[n_steps] = horizon;
        Ok(Self { points })
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self, PathError> {
        if points.len() < 2 || points[0] != 0.0 {
            return Err(PathError::InvalidGrid("grid needs t0 = 0 and at least one step".into()));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) || !points.iter().all(|t| t.is_finite()) {
            return Err(PathError::InvalidGrid("grid points must be finite and strictly increasing".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn n_steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn dt(&self, step: usize) -> f64 {
        self.points[step + 1] - self.points[step]
    }

    /// Sub-grid of steps `start..end`, shifted to start at zero.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let t0 = self.points[start];
        Self {
            points: self.points[start..=end].iter().map(|t| t - t0).collect(),
        }
    }
}

/// Simulated driving noise on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub k_eff: usize,
    /// Teugels increments, `[path][step][channel]`.
    pub dh: Vec<f64>,
    /// Standard Brownian increments `ΔW ~ N(0, Δt)`, `[path][step]`.
    pub db: Vec<f64>,
    /// One standard normal per path for sampling a random initial state.
    pub initial_normal: Vec<f64>,
    /// Optional `(time, size)` jump records per path.
    pub jump_log: Option<Vec<Vec<(f64, f64)>>>,
    pub seed: u64,
}

impl PathBundle {
    #[inline]
    pub fn dh(&self, path: usize, step: usize) -> &[f64] {
        let n = self.grid.n_steps();
        let off = (path * n + step) * self.k_eff;
        &self.dh[off..off + self.k_eff]
    }

    #[inline]
    pub fn db(&self, path: usize, step: usize) -> f64 {
        self.db[path * self.grid.n_steps() + step]
    }

    /// `H^i_T` per path, `[path][channel]`.
    pub fn terminal_values(&self) -> Vec<f64> {
        let n = self.grid.n_steps();
        let k = self.k_eff;
        let mut out = vec![0.0; self.n_paths * k];
        for p in 0..self.n_paths {
            for s in 0..n {
                let d = self.dh(p, s);
                for i in 0..k {
                    out[p * k + i] += d[i];
                }
            }
        }
        out
    }

    /// Copies steps `start..end` into a new bundle on the shifted sub-grid.
    pub fn slice_steps(&self, start: usize, end: usize) -> Self {
        let n = self.grid.n_steps();
        assert!(start < end && end <= n);
        let k = self.k_eff;
        let m = end - start;
        let mut dh = Vec::with_capacity(self.n_paths * m * k);
        let mut db = Vec::with_capacity(self.n_paths * m);
        for p in 0..self.n_paths {
            dh.extend_from_slice(&self.dh[(p * n + start) * k..(p * n + end) * k]);
            db.extend_from_slice(&self.db[p * n + start..p * n + end]);
        }
        let jump_log = self.jump_log.as_ref().map(|log| {
            let (t0, t1) = (self.grid.points()[start], self.grid.points()[end]);
            log.iter()
                .map(|js| {
                    js.iter()
                        .filter(|(t, _)| *t > t0 && *t <= t1)
                        .map(|&(t, s)| (t - t0, s))
                        .collect()
                })
                .collect()
        });
        Self {
            grid: self.grid.slice(start, end),
            n_paths: self.n_paths,
            k_eff: k,
            dh,
            db,
            initial_normal: self.initial_normal.clone(),
            jump_log,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimulateOptions {
    pub record_jumps: bool,
}

fn substream(base: &ChaCha8Rng, path: usize, region: u128) -> ChaCha8Rng {
    let mut rng = base.clone();
    rng.set_stream(path as u64);
    rng.set_word_pos(region << 32);
    rng
}

pub fn simulate(
    model: &LevyModel,
    basis: &TeugelsBasis,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle, PathError> {
    simulate_with(model, basis, grid, n_paths, seed, SimulateOptions::default())
}

pub fn simulate_with(
    model: &LevyModel,
    basis: &TeugelsBasis,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    opts: SimulateOptions,
) -> Result<PathBundle, PathError> {
    if let Some(d) = &model.density {
        return Err(PathError::UnsupportedMeasure(d.name().to_string()));
    }
    if n_paths == 0 {
        return Err(PathError::InvalidRequest("n_paths must be positive".into()));
    }
    let n = grid.n_steps();
    if (n as u128) >= INITIAL_REGION {
        return Err(PathError::InvalidRequest(format!("too many steps: {n}")));
    }
    let k = basis.k_eff;
    // Power moments m_j of the jump part, j = 1..=k (the drift cancels in Y^{(1)}).
    let jump_moments: Vec<f64> = (1..=k)
        .map(|j| model.atoms.iter().map(|a| a.mass * a.location.powi(j as i32)).sum())
        .collect();
    let sigma = model.gaussian_var.sqrt();
    let base = ChaCha8Rng::seed_from_u64(seed);

    let mut dh = vec![0.0; n_paths * n * k];
    let mut db = vec![0.0; n_paths * n];
    let mut initial_normal = vec![0.0; n_paths];
    let mut logs: Vec<Vec<(f64, f64)>> = vec![Vec::new(); if opts.record_jumps { n_paths } else { 0 }];

    let per_path = |p: usize, dh_p: &mut [f64], db_p: &mut [f64], z0: &mut f64, log: Option<&mut Vec<(f64, f64)>>| {
        let mut log = log;
        let mut counts = vec![0u64; model.atoms.len()];
        let mut dy = vec![0.0; k];
        for s in 0..n {
            let dt = grid.dt(s);
            let t0 = grid.points()[s];
            let mut rng = substream(&base, p, s as u128);
            let dw: f64 = if sigma > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * dt.sqrt()
            } else {
                0.0
            };
            for (c, atom) in counts.iter_mut().zip(&model.atoms) {
                let rate = atom.mass * dt;
                *c = Poisson::new(rate).map(|d| d.sample(&mut rng) as u64).unwrap_or(0);
            }
            // ΔY^{(j)} = Σ (ΔL)^j − Δt m_j, with the Gaussian part in j = 1 only.
            for j in 0..k {
                let power = (j + 1) as i32;
                let sum: f64 = counts
                    .iter()
                    .zip(&model.atoms)
                    .map(|(&c, a)| c as f64 * a.location.powi(power))
                    .sum();
                dy[j] = sum - dt * jump_moments[j];
            }
            dy[0] += sigma * dw;
            let out = &mut dh_p[s * k..(s + 1) * k];
            for i in 0..k {
                out[i] = (0..=i).map(|j| basis.a[i][j] * dy[j]).sum();
            }
            db_p[s] = dw;
            if let Some(log) = log.as_deref_mut() {
                for (&c, a) in counts.iter().zip(&model.atoms) {
                    for _ in 0..c {
                        let u: f64 = rng.random();
                        log.push((t0 + u * dt, a.location));
                    }
                }
            }
        }
        if let Some(log) = log {
            log.sort_by(|x, y| x.0.total_cmp(&y.0));
        }
        let mut rng = substream(&base, p, INITIAL_REGION);
        *z0 = StandardNormal.sample(&mut rng);
    };

    let chunk = n * k;
    if opts.record_jumps {
        dh.par_chunks_mut(chunk.max(1))
            .zip(db.par_chunks_mut(n))
            .zip(initial_normal.par_iter_mut())
            .zip(logs.par_iter_mut())
            .enumerate()
            .for_each(|(p, (((dh_p, db_p), z0), log))| per_path(p, dh_p, db_p, z0, Some(log)));
    } else {
        dh.par_chunks_mut(chunk.max(1))
            .zip(db.par_chunks_mut(n))
            .zip(initial_normal.par_iter_mut())
            .enumerate()
            .for_each(|(p, ((dh_p, db_p), z0))| per_path(p, dh_p, db_p, z0, None));
    }

    Ok(PathBundle {
        grid: grid.clone(),
        n_paths,
        k_eff: k,
        dh,
        db,
        initial_normal,
        jump_log: opts.record_jumps.then_some(logs),
        seed,
    })
}

/// Sample covariance of the terminal values against the bracket `δ_ij T`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BracketReport {
    pub k_eff: usize,
    pub n_paths: usize,
    pub horizon: f64,
    /// `cov[i][j] = Ĉov(H^i_T, H^j_T)`.
    pub cov: Vec<Vec<f64>>,
    /// `cov − δ_ij T`.
    pub error: Vec<Vec<f64>>,
    /// Standard error of each covariance entry (NaN below two paths).
    pub std_error: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    /// z-score of the sample mean of `H^i_T` against zero.
    pub mean_z: Vec<f64>,
}

impl BracketReport {
    /// True when every covariance and mean z-score is finite and within `bound`.
    pub fn passes(&self, bound: f64) -> bool {
        self.z.iter().flatten().chain(&self.mean_z).all(|z| z.is_finite() && z.abs() <= bound)
    }

    pub fn max_abs_z(&self) -> f64 {
        self.z.iter().flatten().fold(0.0, |m: f64, z| m.max(z.abs()))
    }
}

pub fn martingale_diagnostics(bundle: &PathBundle) -> BracketReport {
    let k = bundle.k_eff;
    let np = bundle.n_paths;
    let horizon = bundle.grid.horizon();
    let term = bundle.terminal_values();
    let nf = np as f64;
    let mean: Vec<f64> = (0..k).map(|i| (0..np).map(|p| term[p * k + i]).sum::<f64>() / nf).collect();
    let mut cov = vec![vec![f64::NAN; k]; k];
    let mut se = vec![vec![f64::NAN; k]; k];
    let mut z = vec![vec![f64::NAN; k]; k];
    let mut error = vec![vec![f64::NAN; k]; k];
    let mut mean_z = vec![f64::NAN; k];
    if np >= 2 {
        for i in 0..k {
            for j in 0..k {
                let prods: Vec<f64> = (0..np)
                    .map(|p| (term[p * k + i] - mean[i]) * (term[p * k + j] - mean[j]))
                    .collect();
                let c = prods.iter().sum::<f64>() / (nf - 1.0);
                let pm = prods.iter().sum::<f64>() / nf;
                let var = prods.iter().map(|v| (v - pm) * (v - pm)).sum::<f64>() / (nf - 1.0);
                let target = if i == j { horizon } else { 0.0 };
                cov[i][j] = c;
                error[i][j] = c - target;
                se[i][j] = (var / nf).sqrt();
                z[i][j] = (c - target) / se[i][j];
            }
            let var = cov[i][i];
            mean_z[i] = mean[i] / (var / nf).sqrt();
        }
    } else {
        for i in 0..k {
            for j in 0..k {
                cov[i][j] = 0.0;
                error[i][j] = if i == j { -horizon } else { 0.0 };
            }
        }
    }
    BracketReport {
        k_eff: k,
        n_paths: np,
        horizon,
        cov,
        error,
        std_error: se,
        z,
        mean_z,
    }
}

/// Writes the bundle as `path,step,channel,value` rows after a two-line
/// header. Channel `B` is the Brownian increment, `H<i>` the Teugels
/// increments and `X0` (step 0) the initial-law normal.
pub fn export_bundle<W: Write>(bundle: &PathBundle, mut out: W) -> Result<(), PathError> {
    writeln!(out, "{BUNDLE_FORMAT_HEADER}")?;
    let times: Vec<String> = bundle.grid.points().iter().map(|t| t.to_string()).collect();
    writeln!(
        out,
        "# seed={};n_paths={};k_eff={};times={}",
        bundle.seed,
        bundle.n_paths,
        bundle.k_eff,
        times.join(",")
    )?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path", "step", "channel", "value"])?;
    let n = bundle.grid.n_steps();
    for p in 0..bundle.n_paths {
        w.write_record([p.to_string(), "0".into(), "X0".into(), bundle.initial_normal[p].to_string()])?;
        for s in 0..n {
            w.write_record([p.to_string(), s.to_string(), "B".into(), bundle.db(p, s).to_string()])?;
            for (i, v) in bundle.dh(p, s).iter().enumerate() {
                w.write_record([p.to_string(), s.to_string(), format!("H{}", i + 1), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn import_bundle<R: BufRead>(mut input: R) -> Result<PathBundle, PathError> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    if line.trim_end() != BUNDLE_FORMAT_HEADER {
        return Err(PathError::Format(format!("expected header {BUNDLE_FORMAT_HEADER:?}")));
    }
    line.clear();
    input.read_line(&mut line)?;
    let meta = line
        .trim_end()
        .strip_prefix("# ")
        .ok_or_else(|| PathError::Format("missing metadata line".into()))?;
    let (mut seed, mut n_paths, mut k_eff, mut times) = (None, None, None, None);
    for field in meta.split(';') {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| PathError::Format(format!("bad metadata field {field:?}")))?;
        let bad = |_| PathError::Format(format!("bad value for {key}"));
        match key {
            "seed" => seed = Some(value.parse::<u64>().map_err(|e| bad(e.to_string()))?),
            "n_paths" => n_paths = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "k_eff" => k_eff = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "times" => {
                times = Some(
                    value
                        .split(',')
                        .map(|t| t.parse::<f64>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| bad(e.to_string()))?,
                )
            }
            _ => return Err(PathError::Format(format!("unknown metadata key {key:?}"))),
        }
    }
    let missing = |k: &str| PathError::Format(format!("metadata lacks {k}"));
    let seed = seed.ok_or_else(|| missing("seed"))?;
    let n_paths = n_paths.ok_or_else(|| missing("n_paths"))?;
    let k_eff = k_eff.ok_or_else(|| missing("k_eff"))?;
    let grid = TimeGrid::from_points(times.ok_or_else(|| missing("times"))?)?;
    let n = grid.n_steps();
    let mut dh = vec![f64::NAN; n_paths * n * k_eff];
    let mut db = vec![f64::NAN; n_paths * n];
    let mut initial_normal = vec![f64::NAN; n_paths];
    let mut r = csv::Reader::from_reader(input);
    for rec in r.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).ok_or_else(|| PathError::Format("short row".into()));
        let p: usize = get(0)?.parse().map_err(|_| PathError::Format("bad path index".into()))?;
        let s: usize = get(1)?.parse().map_err(|_| PathError::Format("bad step index".into()))?;
        let v: f64 = get(3)?.parse().map_err(|_| PathError::Format("bad value".into()))?;
        if p >= n_paths || s >= n {
            return Err(PathError::Format(format!("index ({p}, {s}) out of range")));
        }
        match get(2)? {
            "X0" => initial_normal[p] = v,
            "B" => db[p * n + s] = v,
            ch => {
                let i: usize = ch
                    .strip_prefix('H')
                    .and_then(|c| c.parse().ok())
                    .filter(|&i| i >= 1 && i <= k_eff)
                    .ok_or_else(|| PathError::Format(format!("bad channel {ch:?}")))?;
                dh[(p * n + s) * k_eff + i - 1] = v;
            }
        }
    }
    if dh.iter().chain(&db).chain(&initial_normal).any(|v| v.is_nan()) {
        return Err(PathError::Format("bundle file is missing entries".into()));
    }
    Ok(PathBundle {
        grid,
        n_paths,
        k_eff,
        dh,
        db,
        initial_normal,
        jump_log: None,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy_model::{moments, Atom};
    use crate::teugels_basis::build_basis;

    fn setup(model: &LevyModel, k: usize) -> TeugelsBasis {
        build_basis(&moments(model, 2 * k + 2).unwrap(), k, 1e-12).unwrap()
    }

    #[test]
    fn grid_invariants() {
        let g = TimeGrid::uniform(2.0, 7).unwrap();
        assert_eq!(g.points()[0], 0.0);
        assert_eq!(g.horizon(), 2.0);
        assert!(g.points().windows(2).all(|w| w[1] > w[0]));
        assert!(TimeGrid::uniform(0.0, 3).is_err());
        assert!(TimeGrid::uniform(1.0, 0).is_err());
        assert!(TimeGrid::from_points(vec![0.0, 0.5, 0.5]).is_err());
        assert!(TimeGrid::from_points(vec![0.1, 0.5]).is_err());
    }

    #[test]
    fn density_models_cannot_be_simulated() {
        let mut model = LevyModel::brownian();
        model.density = Some(crate::levy_model::JumpDensity::custom("d", vec![(1.0, 2.0)], |_| 1.0));
        let basis = setup(&LevyModel::brownian(), 1);
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        assert!(matches!(
            simulate(&model, &basis, &grid, 10, 1),
            Err(PathError::UnsupportedMeasure(_))
        ));
    }

    #[test]
    fn pure_poisson_increments_are_compensated_counts() {
        let model = LevyModel::poisson(1.0);
        let basis = setup(&model, 2);
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let b = simulate_with(&model, &basis, &grid, 50, 9, SimulateOptions { record_jumps: true }).unwrap();
        for p in 0..50 {
            let jumps = b.jump_log.as_ref().unwrap()[p].len() as f64;
            let h: f64 = (0..10).map(|s| b.dh(p, s)[0]).sum();
            assert!((h - (jumps - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_path_diagnostics_are_nan_flagged() {
        let model = LevyModel::brownian();
        let basis = setup(&model, 1);
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let b = simulate(&model, &basis, &grid, 1, 3).unwrap();
        let r = martingale_diagnostics(&b);
        assert!(r.z[0][0].is_nan());
        assert!(!r.passes(4.0));
    }

    #[test]
    fn slicing_keeps_increments() {
        let model = LevyModel::with_atoms(1.0, vec![Atom { mass: 1.0, location: 0.5 }]);
        let basis = setup(&model, 2);
        let grid = TimeGrid::uniform(1.0, 6).unwrap();
        let b = simulate(&model, &basis, &grid, 5, 4).unwrap();
        let s = b.slice_steps(2, 5);
        assert_eq!(s.grid.n_steps(), 3);
        assert!((s.grid.horizon() - 0.5).abs() < 1e-15);
        for p in 0..5 {
            for st in 0..3 {
                assert_eq!(s.dh(p, st), b.dh(p, st + 2));
                assert_eq!(s.db(p, st), b.db(p, st + 2));
            }
        }
    }

    #[test]
    fn export_import_replays_exactly() {
        let model = LevyModel::with_atoms(1.0, vec![Atom { mass: 1.0, location: 1.0 }, Atom { mass: 1.0, location: -1.0 }]);
        let basis = setup(&model, 3);
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let b = simulate(&model, &basis, &grid, 7, 11).unwrap();
        let mut buf = Vec::new();
        export_bundle(&b, &mut buf).unwrap();
        let back = import_bundle(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, b);
    }
}
