use cbfswarm::intersection1d::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(policy: Policy1d) -> Corridor1dParams {
    Corridor1dParams {
        policy,
        ..Corridor1dParams::default()
    }
}

fn sorted_re(e: &[nalgebra::Complex<f64>]) -> Vec<f64> {
    let mut v: Vec<f64> = e.iter().map(|c| c.re).collect();
    v.sort_by(f64::total_cmp);
    v
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Ten random parameter sets with a PCCA curve ratio each.
fn parameter_sample() -> Vec<(Corridor1dParams, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    (0..10)
        .map(|_| {
            let p = Corridor1dParams {
                v0: [rng.random_range(1.0..3.0), rng.random_range(1.0..3.0)],
                r: rng.random_range(2.0..6.0),
                lambda: rng.random_range(0.5..2.0),
                tau: rng.random_range(0.05..0.5),
                ..Corridor1dParams::default()
            };
            (p, rng.random_range(0.5..2.0))
        })
        .collect()
}

#[test]
fn invariants_hold_on_both_active_branch() {
    for policy in [
        Policy1d::DecentralizedReciprocal,
        Policy1d::DecentralizedFollower,
        Policy1d::Ccs,
    ] {
        let p = Corridor1dParams {
            dt: 1e-3,
            t_max: 10.0,
            ..params(policy)
        };
        let traj = trajectory_1d(&Corridor1dState::new(-3.0, -4.0), &p).unwrap();
        let drift = conserved_quantity(&traj, &p).unwrap();
        assert!(drift <= 1e-6, "{policy}: {drift:e}");
    }
}

#[test]
fn centralized_does_not_conserve_square_difference() {
    let p = Corridor1dParams {
        dt: 1e-3,
        t_max: 1.0,
        v0: [2.0, 1.0],
        ..params(Policy1d::Centralized)
    };
    let traj = trajectory_1d(&Corridor1dState::new(-3.0, -4.0), &p).unwrap();
    assert!(conserved_quantity(&traj, &p).unwrap() > 0.01);
}

#[test]
fn leaving_the_branch_is_reported() {
    let p = Corridor1dParams {
        dt: 1e-3,
        t_max: 1.0,
        ..params(Policy1d::DecentralizedReciprocal)
    };
    let traj = trajectory_1d(&Corridor1dState::new(-10.0, -12.0), &p).unwrap();
    assert!(matches!(
        conserved_quantity(&traj, &p),
        Err(CorridorError::BranchViolation(_))
    ));
    assert!(matches!(
        conserved_quantity(&traj, &params(Policy1d::Pcca)),
        Err(CorridorError::NoInvariant(_))
    ));
}

#[test]
fn dr_barrier_decays_at_rate_lambda() {
    let p = Corridor1dParams {
        dt: 1e-3,
        t_max: 10.0,
        ..params(Policy1d::DecentralizedReciprocal)
    };
    let s0 = Corridor1dState::new(-3.0, -4.0);
    let h0 = s0.barrier(p.r);
    for s in trajectory_1d(&s0, &p).unwrap() {
        let want = h0 * (-p.lambda * s.t).exp();
        assert!(
            (s.barrier(p.r) - want).abs() <= 1e-6,
            "t = {}: {} vs {want}",
            s.t,
            s.barrier(p.r)
        );
    }
}

#[test]
fn jacobians_agree_and_match_closed_form_spectra() {
    for (base, mu) in parameter_sample() {
        for policy in [
            Policy1d::DecentralizedReciprocal,
            Policy1d::DecentralizedFollower,
            Policy1d::Ccs,
        ] {
            let p = base.with_policy(policy);
            let rep = equilibria(&p).unwrap();
            let rate = if policy == Policy1d::DecentralizedFollower {
                2.0 * p.lambda
            } else {
                p.lambda
            };
            for l in &rep.linearizations {
                assert!(
                    l.max_jacobian_mismatch() < 1e-5,
                    "{policy} {p:?}: {}",
                    l.max_jacobian_mismatch()
                );
                let e = sorted_re(&l.eigenvalues);
                assert!(
                    (e[0] + rate).abs() < 1e-5 && e[1].abs() < 1e-5,
                    "{policy}: {e:?}"
                );
            }
        }

        let p = base.with_policy(Policy1d::Centralized);
        let l = linearize(&centralized_equilibrium(&p), &p).unwrap();
        assert!(l.max_jacobian_mismatch() < 1e-5);
        let want = sorted(centralized_eigenvalues(&p).to_vec());
        for (a, b) in sorted_re(&l.eigenvalues).iter().zip(&want) {
            assert!((a - b).abs() < 1e-5, "{p:?}: {a} vs {b}");
        }

        let p = base.with_policy(Policy1d::Pcca);
        let l = linearize(&pcca_equilibrium(mu, &p), &p).unwrap();
        assert!(
            l.max_jacobian_mismatch() < 1e-5,
            "{}",
            l.max_jacobian_mismatch()
        );
        let want = sorted(pcca_eigenvalues(mu, &p).to_vec());
        for (a, b) in sorted_re(&l.eigenvalues).iter().zip(&want) {
            assert!((a - b).abs() < 1e-5, "{p:?} mu {mu}: {a} vs {b}");
        }
        assert!(l.eigenvalues.iter().all(|c| c.im.abs() < 1e-6));
    }
}

#[test]
fn stability_classes() {
    let expect = [
        (
            Policy1d::DecentralizedReciprocal,
            EquilibriumKind::Arc,
            Stability::DegenerateZero,
        ),
        (
            Policy1d::DecentralizedFollower,
            EquilibriumKind::Arc,
            Stability::DegenerateZero,
        ),
        (
            Policy1d::Ccs,
            EquilibriumKind::ArcPlusAxes,
            Stability::DegenerateZero,
        ),
        (
            Policy1d::Centralized,
            EquilibriumKind::Point,
            Stability::Unstable,
        ),
        (
            Policy1d::Pcca,
            EquilibriumKind::Curve1DIn4D,
            Stability::Unstable,
        ),
    ];
    for (policy, kind, stab) in expect {
        let rep = equilibria(&params(policy)).unwrap();
        assert_eq!((rep.kind, rep.stability), (kind, stab), "{policy}");
        assert!(rep.points.len() >= if kind == EquilibriumKind::Point { 1 } else { 8 });
    }
}

/// Arc start with the estimator at rest: the violation comes from filter lag.
fn pcca_violation(tau: f64) -> f64 {
    let p = Corridor1dParams {
        tau,
        dt: 1e-3,
        v0: [2.0, 1.5],
        t_max: 20.0,
        ..params(Policy1d::Pcca)
    };
    trajectory_1d(&Corridor1dState::new(-2.4, -3.2), &p)
        .unwrap()
        .iter()
        .map(|s| -s.barrier(p.r))
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn pcca_violation_scales_with_filter_constant() {
    let v: Vec<f64> = [0.2, 0.1, 0.05]
        .iter()
        .map(|&t| pcca_violation(t))
        .collect();
    for w in v.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.6..=2.4).contains(&ratio), "{v:?}");
    }
}

fn slow_manifold_constant(x: [f64; 2], w1: f64, v0: [f64; 2], tau: f64) -> f64 {
    let target = |s: &Corridor1dState| s.pos[0] * v0[1] + s.pos[1] * v0[0];
    let w2 = (x[0] * v0[1] + x[1] * v0[0] - x[1] * w1) / x[0];
    let p = Corridor1dParams {
        tau,
        dt: 1e-3,
        v0,
        t_max: 10.0,
        ..params(Policy1d::Pcca)
    };
    trajectory_1d(&Corridor1dState::new(x[0], x[1]).with_filter(w1, w2), &p)
        .unwrap()
        .iter()
        .filter(|s| s.t >= 5.0 * tau)
        .map(|s| (s.pos[1] * s.filter[0] + s.pos[0] * s.filter[1] - target(s)).abs() / tau)
        .fold(0.0, f64::max)
}

#[test]
fn filter_combination_tracks_slow_manifold() {
    // starts with z on the manifold but w away from the desired speeds
    for (x, w1, v0) in [
        ([-2.4, -3.2], 0.0, [2.0, 1.5]),
        ([-10.0, -9.5], 0.0, [2.0, 1.5]),
        ([-10.0, -9.5], 3.0, [2.0, 2.0]),
    ] {
        let c: Vec<f64> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&t| slow_manifold_constant(x, w1, v0, t))
            .collect();
        let (lo, hi) = c
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(hi <= 1.3 * lo, "{x:?}: {c:?}");
    }
}

#[test]
fn coarse_dr_sweep_has_both_outcomes() {
    let grid = SweepGrid {
        n_x2: 31,
        n_v02: 21,
        ..SweepGrid::default()
    };
    let r = sweep(
        &sweep_params(
            &Corridor1dParams::default(),
            Policy1d::DecentralizedReciprocal,
            1e6,
        ),
        &grid,
    )
    .unwrap();
    let f = r.gridlock_fraction();
    assert!(f > 0.0 && f < 1.0, "{f}");
    assert_eq!(r.t_ext.len(), 31 * 21);
}

#[test]
fn sweep_is_deterministic() {
    let grid = SweepGrid {
        n_x2: 13,
        n_v02: 9,
        ..SweepGrid::default()
    };
    let p = sweep_params(&Corridor1dParams::default(), Policy1d::Pcca, 1e6);
    let a = sweep(&p, &grid).unwrap();
    let b = sweep(&p, &grid).unwrap();
    assert_eq!(a.t_ext, b.t_ext);
    assert_eq!(a.gridlocked, b.gridlocked);
}

#[test]
fn ccs_always_gridlocks_on_coarse_grid() {
    let grid = SweepGrid {
        n_x2: 7,
        n_v02: 5,
        ..SweepGrid::default()
    };
    let r = sweep(
        &sweep_params(&Corridor1dParams::default(), Policy1d::Ccs, 1e6),
        &grid,
    )
    .unwrap();
    assert_eq!(r.gridlock_fraction(), 1.0);
}

proptest! {
    #[test]
    fn dr_agents_never_reverse(x1 in -12.0f64..-0.05, x2 in -12.0f64..-0.05, v1 in 0.5f64..3.0, v2 in 0.5f64..3.0) {
        let p = Corridor1dParams { v0: [v1, v2], ..params(Policy1d::DecentralizedReciprocal) };
        let s = Corridor1dState::new(x1, x2);
        prop_assume!(s.barrier(p.r) >= 0.0);
        let f = closed_loop_field(&s, &p).unwrap();
        prop_assert!(f[0] >= 0.0 && f[1] >= 0.0);
    }

    #[test]
    fn slacked_dr_matches_hard_form(x1 in -12.0f64..12.0, x2 in -12.0f64..12.0, v1 in 0.5f64..3.0, v2 in 0.5f64..3.0) {
        prop_assume!(x1.abs() > 0.1 && x2.abs() > 0.1);
        let hard = Corridor1dParams { v0: [v1, v2], ..params(Policy1d::DecentralizedReciprocal) };
        let soft = Corridor1dParams { slack_weight: Some(1e6), ..hard };
        let s = Corridor1dState::new(x1, x2);
        let a = closed_loop_field(&s, &hard).unwrap();
        let b = closed_loop_field(&s, &soft).unwrap();
        for i in 0..2 {
            prop_assert!((a[i] - b[i]).abs() <= 1e-4 * a[i].abs().max(1.0), "{} vs {}", a[i], b[i]);
        }
    }
}
