//! Invariants checked over random inputs.

use proptest::prelude::*;

use ctmpc_core::conformal::{interval, ConformalCalibrator, Quantile};
use ctmpc_core::kinematics::{KinematicsModel, StateVector};
use ctmpc_core::qp::{solve, QpProblem, QpSettings, QpStatus};
use ctmpc_core::stats::spearman;
use ctmpc_core::tube::{rollout, ConformalBox};

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..10.0, 1..200)
}

proptest! {
    #[test]
    fn quantile_is_nondecreasing_as_alpha_shrinks(s in scores(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let cal = ConformalCalibrator::from_scores(s).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        match (cal.quantile(lo), cal.quantile(hi)) {
            (Quantile::Finite(x), Quantile::Finite(y)) => prop_assert!(x >= y),
            (Quantile::Finite(_), Quantile::Infinite) => prop_assert!(false),
            _ => {}
        }
    }

    #[test]
    fn quantile_rank_matches_counting(s in scores(), alpha in 0.0f64..1.0) {
        let cal = ConformalCalibrator::from_scores(s.clone()).unwrap();
        let n = s.len();
        // smallest k with k >= (n + 1)(1 - alpha)
        let k = (0..=n + 1).find(|&k| k as f64 + 1e-9 >= (n + 1) as f64 * (1.0 - alpha)).unwrap();
        prop_assert_eq!(cal.rank(alpha), k);
        if let Quantile::Finite(q) = cal.quantile(alpha) {
            prop_assert!(s.iter().filter(|&&x| x <= q).count() >= k);
        }
    }

    #[test]
    fn inverse_alpha_recovers_each_score(s in scores()) {
        let cal = ConformalCalibrator::from_scores(s).unwrap();
        for &q in cal.scores() {
            let a = cal.inverse_alpha(q);
            prop_assert_eq!(cal.quantile(a), Quantile::Finite(q));
        }
    }

    #[test]
    fn interval_is_centered_and_scaled(mu in -50.0f64..50.0, sigma in 1e-3f64..5.0, q in 0.0f64..5.0) {
        let i = interval(mu, sigma, Quantile::Finite(q));
        prop_assert!((i.lo + i.hi - 2.0 * mu).abs() < 1e-9);
        prop_assert!((i.length().unwrap() - 2.0 * q * sigma).abs() < 1e-9);
    }

    #[test]
    fn kinematics_step_matches_closed_form(d in -10.0f64..100.0, dv in -20.0f64..20.0, v in 0.0f64..30.0, a in -8.0f64..8.0, dt in 0.01f64..1.0) {
        let m = KinematicsModel::new(dt).unwrap();
        let x = m.step(StateVector::new(d, dv, v), a).unwrap();
        prop_assert!((x.d - (d + dt * dv - 0.5 * dt * dt * a)).abs() < 1e-9);
        prop_assert!((x.dv - (dv - dt * a)).abs() < 1e-9);
        prop_assert!((x.v - (v + dt * a)).abs() < 1e-9);
        // the lead speed does not depend on the ego input
        prop_assert!((x.dv + x.v - (dv + v)).abs() < 1e-9);
    }

    #[test]
    fn tube_contains_every_trajectory_from_the_box(
        c in prop::array::uniform3(-20.0f64..20.0),
        h in prop::array::uniform3(0.0f64..3.0),
        u in prop::array::uniform3(0.0f64..1.0),
        accels in prop::collection::vec(-6.0f64..6.0, 1..12),
    ) {
        let m = KinematicsModel::new(0.1).unwrap();
        let b = ConformalBox {
            center: StateVector::from_array(c),
            half: h,
            quantile: Quantile::Finite(1.0),
            alpha: 0.1,
        };
        let tube = rollout(&b, &accels, &m).unwrap();
        let mut x = StateVector::from_array(std::array::from_fn(|i| c[i] - h[i] + 2.0 * h[i] * u[i]));
        let mut traj = vec![x];
        for &a in &accels {
            x = m.step(x, a).unwrap();
            traj.push(x);
        }
        prop_assert!(tube.contains_trajectory(&traj, 1e-9));
    }

    #[test]
    fn qp_solution_respects_bounds(
        diag in prop::collection::vec(0.1f64..5.0, 1..6),
        c in prop::collection::vec(-10.0f64..10.0, 6),
        width in 0.1f64..4.0,
    ) {
        let n = diag.len();
        let p = QpProblem {
            p: (0..n).map(|i| (0..n).map(|j| if i == j { diag[i] } else { 0.0 }).collect()).collect(),
            c: c[..n].to_vec(),
            g: vec![vec![1.0; n]],
            h: vec![width],
            lb: vec![-width; n],
            ub: vec![width; n],
        };
        let r = solve(&p, &QpSettings::default()).unwrap();
        prop_assert_eq!(r.status, QpStatus::Optimal);
        prop_assert!(p.primal_residual(&r.z) < 1e-6);
        prop_assert!(p.kkt_residuals(&r).max() < 1e-6);
    }

    #[test]
    fn spearman_is_one_for_increasing_maps(x in prop::collection::hash_set(-1000i32..1000, 3..40)) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
        prop_assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }
}
