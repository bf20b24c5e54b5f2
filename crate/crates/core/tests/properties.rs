use proptest::prelude::*;

use teugels_fbsde::fbsde_problem::families::{LinearCoefficients, SaturatingCoefficients};
use teugels_fbsde::fbsde_problem::{lipschitz_audit, solution_norm, InitialLaw, ProbeOptions, SolutionTriple};
use teugels_fbsde::levy_model::{moments, Atom, LevyModel};
use teugels_fbsde::path_engine::{simulate, TimeGrid};
use teugels_fbsde::solver::{decoupled_sweep, estimate_delta, mean_se, picard_solve, Noise, SolverConfig};
use teugels_fbsde::teugels_basis::{build_basis, check_lemma_identity, DEFAULT_RANK_TOL};

/// Atom models with well-separated nonzero locations.
fn atom_model() -> impl Strategy<Value = LevyModel> {
    (
        prop::collection::btree_set(-8i32..=8, 1..=4),
        prop::collection::vec(0.1f64..3.0, 4),
        prop_oneof![Just(0.0), 0.1f64..2.0],
    )
        .prop_filter_map("zero location", |(locs, masses, var)| {
            let atoms: Vec<Atom> = locs
                .iter()
                .zip(&masses)
                .map(|(&l, &mass)| Atom {
                    mass,
                    location: l as f64 / 4.0,
                })
                .collect();
            if atoms.iter().any(|a| a.location == 0.0) {
                return None;
            }
            Some(LevyModel::with_atoms(var, atoms))
        })
}

fn support_points(model: &LevyModel) -> usize {
    model.atoms.len() + usize::from(model.gaussian_var > 0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn basis_is_orthonormal_with_exact_rank(model in atom_model(), k in 1usize..=5) {
        let m = moments(&model, 2 * k + 2).unwrap();
        let b = build_basis(&m, k, DEFAULT_RANK_TOL).unwrap();
        prop_assert_eq!(b.k_eff, k.min(support_points(&model)));
        prop_assert!(b.orthonormality_residual(&model).unwrap() <= 1e-8);
        prop_assert!(check_lemma_identity(&b, &model).unwrap() <= 1e-8);
    }

    #[test]
    fn atom_moments_match_closed_form(model in atom_model()) {
        let t = moments(&model, 8).unwrap();
        for k in 0..=6usize {
            let mut want: f64 = model.atoms.iter().map(|a| a.mass * a.location.powi(k as i32 + 2)).sum();
            if k == 0 {
                want += model.gaussian_var;
            }
            prop_assert!((t.mu(k) - want).abs() <= 1e-12 * (1.0 + want.abs()), "k {}: {} vs {}", k, t.mu(k), want);
            if k % 2 == 0 {
                prop_assert!(t.mu(k) >= 0.0);
            }
        }
        prop_assert_eq!(moments(&model, 8).unwrap(), t);
    }

    #[test]
    fn single_atom_scale_covariance(mass in 0.1f64..4.0, loc in 0.25f64..2.0, c in 0.1f64..10.0) {
        let q0 = |mass: f64| {
            let model = LevyModel::with_atoms(0.0, vec![Atom { mass, location: loc }]);
            let m = moments(&model, 4).unwrap();
            (m.mu(0), build_basis(&m, 1, DEFAULT_RANK_TOL).unwrap().q[0][0])
        };
        let (mu0, q) = q0(mass);
        let (mu0c, qc) = q0(c * mass);
        prop_assert!((mu0c - c * mu0).abs() <= 1e-12 * mu0c);
        prop_assert!((qc - q / c.sqrt()).abs() <= 1e-12 * q);
    }

    #[test]
    fn declared_family_constants_pass_the_audit(lambda in 0.0f64..2.0, seed in any::<u64>()) {
        let opts = ProbeOptions { probes: 200, seed, ..ProbeOptions::default() };
        let init = InitialLaw::default();
        let families = [
            LinearCoefficients::coupled(lambda).into_problem(1, 1.0, init),
            LinearCoefficients::h2_coupled(lambda).into_problem(1, 1.0, init),
            LinearCoefficients::martingale_oracle(lambda).into_problem(2, 1.0, init),
            SaturatingCoefficients {
                linear: LinearCoefficients::coupled(lambda),
                drift_sat: lambda,
                vol_sat: vec![0.5 * lambda, lambda],
                driver_sat: -lambda,
                terminal_sat: lambda,
            }
            .into_problem(2, 1.0, init),
        ];
        for p in &families {
            let a = lipschitz_audit(p, &opts);
            prop_assert!(a.pass, "{:?}", a);
        }
    }
}

fn brownian() -> Noise {
    let model = LevyModel::brownian();
    let m = moments(&model, 4).unwrap();
    Noise::new(model, build_basis(&m, 1, DEFAULT_RANK_TOL).unwrap())
}

fn jump_noise() -> Noise {
    let model = LevyModel::with_atoms(
        0.5,
        vec![
            Atom {
                mass: 1.0,
                location: -0.5,
            },
            Atom {
                mass: 0.5,
                location: 1.0,
            },
        ],
    );
    let m = moments(&model, 8).unwrap();
    Noise::new(model, build_basis(&m, 3, DEFAULT_RANK_TOL).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn simulate_is_pure_and_path_prefix_stable(seed in any::<u64>(), n in 1usize..40, extra in 1usize..40) {
        let nz = jump_noise();
        let grid = TimeGrid::uniform(0.7, 6).unwrap();
        let a = simulate(&nz.model, &nz.basis, &grid, n, seed).unwrap();
        prop_assert_eq!(&a, &simulate(&nz.model, &nz.basis, &grid, n, seed).unwrap());
        // paths are independent substreams: a larger run extends a smaller one
        let b = simulate(&nz.model, &nz.basis, &grid, n + extra, seed).unwrap();
        let k = a.k_eff;
        prop_assert_eq!(&a.dh[..], &b.dh[..n * 6 * k]);
        prop_assert_eq!(&a.db[..], &b.db[..n * 6]);
        prop_assert_eq!(&a.initial_normal[..], &b.initial_normal[..n]);
        let c = simulate(&nz.model, &nz.basis, &grid, n, seed.wrapping_add(1)).unwrap();
        prop_assert_ne!(a.dh, c.dh);
    }

    #[test]
    fn forward_pass_is_adapted(seed in any::<u64>(), k in 1usize..9) {
        let nz = jump_noise();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let b = nz.bundle(&grid, 64, seed).unwrap();
        let p = LinearCoefficients::coupled(0.3).into_problem(b.k_eff, 1.0, InitialLaw::Constant { value: 0.2 });
        let cfg = SolverConfig::default();
        let prior = SolutionTriple::zero(grid.clone(), 0.0, b.n_paths, b.k_eff);
        let s0 = decoupled_sweep(&p, &b, &prior, &cfg).unwrap();
        // replace the increments of every step after k by those of other paths
        let mut scrambled = b.clone();
        let (n, ch) = (grid.n_steps(), b.k_eff);
        for path in 0..b.n_paths {
            let src = (path * 7 + 3) % b.n_paths;
            for step in k..n {
                for c in 0..ch {
                    scrambled.dh[(path * n + step) * ch + c] = b.dh[(src * n + step) * ch + c];
                }
            }
        }
        // the prior of the next Picard step is the same in both runs
        let x1 = decoupled_sweep(&p, &b, &s0, &cfg).unwrap();
        let x2 = decoupled_sweep(&p, &scrambled, &s0, &cfg).unwrap();
        for path in 0..b.n_paths {
            for step in 0..=k {
                prop_assert_eq!(x1.x_at(path, step), x2.x_at(path, step));
            }
        }
    }
}

#[test]
fn brownian_running_max_norm_reference() {
    // Independent oracle: E[max_k B²_{t_k}] on 50 uniform steps of [0, 1] is
    // 1.6386863826994431 (SE 0.00153, 10⁶ paths).
    const REFERENCE: f64 = 1.6386863826994431;
    const REFERENCE_SE: f64 = 0.00153;
    let nz = brownian();
    let grid = TimeGrid::uniform(1.0, 50).unwrap();
    let b = nz.bundle(&grid, 100_000, 2024).unwrap();
    let mut t = SolutionTriple::zero(grid, 0.0, b.n_paths, 1);
    let mut sups = Vec::with_capacity(b.n_paths);
    for p in 0..b.n_paths {
        let mut x = 0.0;
        let mut sup = 0.0f64;
        for s in 0..50 {
            x += b.dh(p, s)[0];
            t.x[p * 51 + s + 1] = x;
            sup = sup.max(x * x);
        }
        sups.push(sup);
    }
    let (mean, se) = mean_se(&sups);
    let norm = solution_norm(&t);
    assert!((norm * norm - mean).abs() < 1e-9 * mean);
    let z = (mean - REFERENCE) / se.hypot(REFERENCE_SE);
    assert!(z.abs() <= 4.0, "{mean} vs {REFERENCE}: z {z}");
}

#[test]
fn contraction_horizon_pin() {
    // Pilot-run measurement: the fully coupled λ = λ₀ = 1 family contracts
    // first at 0.125 under the default halving search.
    let p = LinearCoefficients::coupled(1.0).into_problem(1, 4.0, InitialLaw::Constant { value: 1.0 });
    let delta = estimate_delta(&p, &brownian(), &SolverConfig::default(), 1).unwrap();
    assert_eq!(delta, 0.125);
    // zero coupling contracts on the whole unit horizon
    let p = LinearCoefficients::martingale_oracle(0.5).into_problem(1, 4.0, InitialLaw::default());
    assert_eq!(estimate_delta(&p, &brownian(), &SolverConfig::default(), 1).unwrap(), 1.0);
}

#[test]
fn shrinking_horizon_does_not_raise_contraction_ratio() {
    let nz = brownian();
    let cfg = SolverConfig {
        n_paths: 4000,
        steps_per_segment: 25,
        ..SolverConfig::default()
    };
    let ratio = |h: f64| {
        let v: Vec<f64> = (0..6u64)
            .map(|seed| {
                let p = LinearCoefficients::coupled(0.3).into_problem(1, h, InitialLaw::Constant { value: 1.0 });
                let b = nz.bundle(&TimeGrid::uniform(h, 25).unwrap(), 4000, seed).unwrap();
                picard_solve(&p, &b, &cfg).unwrap().max_ratio_after_first()
            })
            .collect();
        mean_se(&v)
    };
    let (r1, s1) = ratio(0.4);
    let (r2, s2) = ratio(0.2);
    let (r4, s4) = ratio(0.1);
    assert!(r2 <= r1 + 3.0 * s1.hypot(s2), "{r1} -> {r2}");
    assert!(r4 <= r2 + 3.0 * s2.hypot(s4), "{r2} -> {r4}");
}

#[test]
fn a_priori_norm_is_at_most_linear_in_data_scale() {
    let nz = brownian();
    let cfg = SolverConfig::default();
    let b = nz.bundle(&TimeGrid::uniform(0.25, 50).unwrap(), 10_000, 3).unwrap();
    let norm = |c: f64| {
        let data = LinearCoefficients::coupled(0.2).scale_data(c);
        let p = data.into_problem(1, 0.25, InitialLaw::Constant { value: c });
        solution_norm(&picard_solve(&p, &b, &cfg).unwrap().solution)
    };
    let base = norm(1.0);
    for c in [0.5, 2.0] {
        let n = norm(c);
        assert!(n <= 1.1 * c * base, "c {c}: {n} vs {}", c * base);
    }
    assert_eq!(norm(0.0), 0.0);
}

#[test]
fn fixed_point_residual_after_convergence() {
    let nz = jump_noise();
    let cfg = SolverConfig::default();
    let b = nz.bundle(&TimeGrid::uniform(0.25, 50).unwrap(), 5000, 12).unwrap();
    let p = LinearCoefficients::coupled(0.2).into_problem(b.k_eff, 0.25, InitialLaw::Normal { mean: 0.5, var: 0.1 });
    let out = picard_solve(&p, &b, &cfg).unwrap();
    assert!(*out.distances.last().unwrap() < cfg.picard_tol);
    let again = decoupled_sweep(&p, &b, &out.solution, &cfg).unwrap();
    assert!((again.y0 - out.solution.y0).abs() <= cfg.picard_tol);
}
