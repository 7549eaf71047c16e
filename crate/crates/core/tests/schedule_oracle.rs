//! Schedule closed forms against frozen 50-digit evaluations.

use cts_core::schedule::{boundary_coeffs, ema_decay, karras_sigmas, step_schedule};
use cts_core::ScheduleConfig;
use proptest::prelude::*;

#[path = "oracles/frozen.rs"]
mod frozen;
use frozen::{COEFF_TABLE, SIGMAS_18, SIGMA_3_MID, STEP_TABLE, STEP_TABLE_K};

fn cfg(total: u64) -> ScheduleConfig {
    ScheduleConfig {
        total_train_steps: total,
        ..ScheduleConfig::default()
    }
}

fn assert_rel(actual: f64, expected: f64, tol: f64) {
    let err = if expected == 0.0 {
        actual.abs()
    } else {
        ((actual - expected) / expected).abs()
    };
    assert!(err <= tol, "{actual} vs {expected}: rel err {err:e}");
}

#[test]
fn three_level_midpoint() {
    let s = karras_sigmas(3, &cfg(1)).unwrap();
    assert_eq!(s[0], 0.002);
    assert_eq!(s[2], 80.0);
    assert_rel(s[1], SIGMA_3_MID, 1e-10);
}

#[test]
fn eighteen_levels_match_oracle() {
    let s = karras_sigmas(18, &cfg(1)).unwrap();
    for (a, e) in s.iter().zip(SIGMAS_18) {
        assert_rel(*a, e, 1e-10);
    }
}

#[test]
fn step_and_decay_schedules_match_oracle() {
    let c = cfg(STEP_TABLE_K);
    for (k, n, mu) in STEP_TABLE {
        assert_eq!(step_schedule(k, &c).unwrap(), n, "N({k})");
        assert_rel(ema_decay(k, &c).unwrap(), mu, 1e-10);
    }
}

#[test]
fn coefficients_match_oracle() {
    for (t, [skip, out, cin]) in COEFF_TABLE {
        let b = boundary_coeffs(t, &cfg(1)).unwrap();
        assert_rel(b.c_skip, skip, 1e-10);
        assert_rel(b.c_out, out, 1e-10);
        assert_rel(b.c_in, cin, 1e-10);
    }
}

proptest! {
    #[test]
    fn sigmas_strictly_increasing(n in 2usize..400, rho in 1.0f64..12.0) {
        let c = ScheduleConfig { rho, ..cfg(1) };
        let s = karras_sigmas(n, &c).unwrap();
        prop_assert_eq!(s.len(), n);
        prop_assert_eq!(s[0], c.sigma_min);
        prop_assert_eq!(s[n - 1], c.sigma_max);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn schedules_monotone_and_bounded(total in 1u64..200_000, s1 in 2u32..400, frac in 0.0f64..1.0) {
        let c = ScheduleConfig { s1, total_train_steps: total, ..cfg(1) };
        let k = (frac * total as f64) as u64;
        let n0 = step_schedule(k, &c).unwrap();
        let n1 = step_schedule((k + 1).min(total), &c).unwrap();
        prop_assert!(n0 <= n1);
        prop_assert!(c.s0 <= n0 && n0 <= c.s1 + 1);
        let m0 = ema_decay(k, &c).unwrap();
        let m1 = ema_decay((k + 1).min(total), &c).unwrap();
        prop_assert!(m0 <= m1);
        prop_assert!(c.mu0 <= m0 && m0 < 1.0);
        prop_assert_eq!(step_schedule(0, &c).unwrap(), c.s0);
        prop_assert_eq!(step_schedule(total, &c).unwrap(), c.s1 + 1);
    }

    #[test]
    fn c_skip_decreasing_and_in_range(a in 0.002f64..80.0, b in 0.002f64..80.0) {
        let c = cfg(1);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(lo < hi);
        let x = boundary_coeffs(lo, &c).unwrap();
        let y = boundary_coeffs(hi, &c).unwrap();
        prop_assert!(x.c_skip > y.c_skip);
        for v in [x, y] {
            prop_assert!(v.c_skip > 0.0 && v.c_skip <= 1.0);
            prop_assert!(v.c_out >= 0.0 && v.c_in > 0.0);
        }
    }

    #[test]
    fn schedule_functions_are_pure(k in 0u64..=1000, t in 0.002f64..80.0) {
        let c = cfg(1000);
        prop_assert_eq!(step_schedule(k, &c).unwrap(), step_schedule(k, &c).unwrap());
        prop_assert_eq!(ema_decay(k, &c).unwrap().to_bits(), ema_decay(k, &c).unwrap().to_bits());
        let a = boundary_coeffs(t, &c).unwrap();
        let b = boundary_coeffs(t, &c).unwrap();
        prop_assert_eq!(a, b);
    }
}
