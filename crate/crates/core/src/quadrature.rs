//! Adaptive Gauss–Kronrod quadrature on finite and infinite intervals, plus
//! a composite Simpson rule for time integrals of coefficient data.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("integrand is not finite near x = {at}")]
    NonFinite { at: f64 },
    #[error("subdivision depth {depth} exceeded before reaching tolerance (estimate {estimate}, error {error})")]
    DepthExceeded { depth: u32, estimate: f64, error: f64 },
    #[error("interval budget of {max_intervals} exhausted (estimate {estimate}, error {error})")]
    TooManyIntervals {
        max_intervals: usize,
        estimate: f64,
        error: f64,
    },
    #[error("integral estimate {estimate} exceeds divergence guard {guard}")]
    Diverged { estimate: f64, guard: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Maximum bisection depth of any subinterval.
    pub max_depth: u32,
    pub max_intervals: usize,
    /// Any running estimate above this magnitude is reported as divergent.
    pub divergence_guard: f64,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-14,
            max_depth: 60,
            max_intervals: 20_000,
            divergence_guard: 1e15,
        }
    }
}

// Kronrod 15-point abscissae (positive half) and weights, with the embedded
// 7-point Gauss weights on the odd-indexed nodes.
const XK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
    depth: u32,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.error.total_cmp(&other.error) == Ordering::Equal
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Result<(f64, f64), QuadratureError> {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    if !fc.is_finite() {
        return Err(QuadratureError::NonFinite { at: c });
    }
    let mut k = WK[7] * fc;
    let mut g = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XK[j];
        let (x1, x2) = (c - dx, c + dx);
        let (f1, f2) = (f(x1), f(x2));
        if !f1.is_finite() {
            return Err(QuadratureError::NonFinite { at: x1 });
        }
        if !f2.is_finite() {
            return Err(QuadratureError::NonFinite { at: x2 });
        }
        k += WK[j] * (f1 + f2);
        if j % 2 == 1 {
            g += WG[j / 2] * (f1 + f2);
        }
    }
    Ok((k * h, ((k - g) * h).abs()))
}

fn integrate_finite<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    cfg: &QuadConfig,
) -> Result<f64, QuadratureError> {
    if a == b {
        return Ok(0.0);
    }
    let (value, error) = kronrod(f, a, b)?;
    let mut heap = BinaryHeap::new();
    heap.push(Piece {
        a,
        b,
        value,
        error,
        depth: 0,
    });
    let mut total = value;
    let mut total_err = error;
    loop {
        if total.abs() > cfg.divergence_guard {
            return Err(QuadratureError::Diverged {
                estimate: total,
                guard: cfg.divergence_guard,
            });
        }
        if total_err <= cfg.abs_tol.max(cfg.rel_tol * total.abs()) {
            // Re-sum to shed the drift of incremental updates.
            return Ok(heap.iter().map(|p| p.value).sum());
        }
        if heap.len() >= cfg.max_intervals {
            return Err(QuadratureError::TooManyIntervals {
                max_intervals: cfg.max_intervals,
                estimate: total,
                error: total_err,
            });
        }
        let worst = heap.pop().expect("heap is never empty");
        if worst.depth >= cfg.max_depth {
            return Err(QuadratureError::DepthExceeded {
                depth: cfg.max_depth,
                estimate: total,
                error: total_err,
            });
        }
        let mid = 0.5 * (worst.a + worst.b);
        let (lv, le) = kronrod(f, worst.a, mid)?;
        let (rv, re) = kronrod(f, mid, worst.b)?;
        total += lv + rv - worst.value;
        total_err += le + re - worst.error;
        heap.push(Piece {
            a: worst.a,
            b: mid,
            value: lv,
            error: le,
            depth: worst.depth + 1,
        });
        heap.push(Piece {
            a: mid,
            b: worst.b,
            value: rv,
            error: re,
            depth: worst.depth + 1,
        });
    }
}

/// Integrates `f` over `[a, b]`; either endpoint may be infinite.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    cfg: &QuadConfig,
) -> Result<f64, QuadratureError> {
    integrate_dyn(&f, a, b, cfg)
}

fn integrate_dyn(f: &dyn Fn(f64) -> f64, a: f64, b: f64, cfg: &QuadConfig) -> Result<f64, QuadratureError> {
    if a > b {
        return integrate_dyn(f, b, a, cfg).map(|v| -v);
    }
    match (a.is_finite(), b.is_finite()) {
        (true, true) => integrate_finite(&f, a, b, cfg),
        // z = a + s/(1-s), s in [0, 1)
        (true, false) => integrate_finite(
            &|s: f64| {
                let w = 1.0 - s;
                f(a + s / w) / (w * w)
            },
            0.0,
            1.0,
            cfg,
        ),
        (false, true) => integrate_finite(
            &|s: f64| {
                let w = 1.0 - s;
                f(b - s / w) / (w * w)
            },
            0.0,
            1.0,
            cfg,
        ),
        (false, false) => {
            let left = integrate_dyn(f, f64::NEG_INFINITY, 0.0, cfg)?;
            let right = integrate_dyn(f, 0.0, f64::INFINITY, cfg)?;
            Ok(left + right)
        }
    }
}

/// Composite Simpson rule with `nodes` points (rounded up to an odd count, at
/// least 3). Exact for cubics.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, nodes: usize) -> f64 {
    let mut n = nodes.max(3);
    if n % 2 == 0 {
        n += 1;
    }
    let intervals = n - 1;
    let h = (b - a) / intervals as f64;
    let mut acc = f(a) + f(b);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + h * i as f64);
    }
    acc * h / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let v = integrate(|x| 3.0 * x * x, 0.0, 2.0, &QuadConfig::default()).unwrap();
        assert!((v - 8.0).abs() < 1e-13);
    }

    #[test]
    fn semi_infinite_exponential() {
        let v = integrate(|x| (-x).exp(), 0.0, f64::INFINITY, &QuadConfig::default()).unwrap();
        assert!((v - 1.0).abs() < 1e-10);
        let v = integrate(|x| x.exp(), f64::NEG_INFINITY, 0.0, &QuadConfig::default()).unwrap();
        assert!((v - 1.0).abs() < 1e-10);
    }

    #[test]
    fn whole_line_gaussian() {
        let v = integrate(
            |x| (-0.5 * x * x).exp(),
            f64::NEG_INFINITY,
            f64::INFINITY,
            &QuadConfig::default(),
        )
        .unwrap();
        assert!((v - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn divergent_tail_is_rejected() {
        let r = integrate(|x| x.exp(), 0.0, f64::INFINITY, &QuadConfig::default());
        assert!(r.is_err(), "{r:?}");
    }

    #[test]
    fn reversed_bounds_flip_sign() {
        let v = integrate(|x| x, 1.0, 0.0, &QuadConfig::default()).unwrap();
        assert!((v + 0.5).abs() < 1e-14);
    }

    #[test]
    fn simpson_exact_on_cubic() {
        let v = simpson(|t| t * t * t + t, 0.0, 1.0, 4);
        assert!((v - 0.75).abs() < 1e-14);
    }
}
