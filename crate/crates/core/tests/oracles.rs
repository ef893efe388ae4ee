//! Reference values computed independently of the library and then frozen.

use ddsde::library::mean_field_ou;
use ddsde::{
    correlation_ou_closed_form, eta_ou_closed_form, extrinsic_derivative_with, Measure, MomentOrder, EstimatorOptions, Observable,
    TimeGrid,
};

fn rk4(f: impl Fn(f64, &[f64]) -> Vec<f64>, y0: &[f64], t_end: f64, steps: usize) -> Vec<f64> {
    let h = t_end / steps as f64;
    let mut y = y0.to_vec();
    let shift = |y: &[f64], k: &[f64], s: f64| y.iter().zip(k).map(|(a, b)| a + s * b).collect::<Vec<_>>();
    for i in 0..steps {
        let t = i as f64 * h;
        let k1 = f(t, &y);
        let k2 = f(t + h / 2.0, &shift(&y, &k1, h / 2.0));
        let k3 = f(t + h / 2.0, &shift(&y, &k2, h / 2.0));
        let k4 = f(t + h, &shift(&y, &k3, h));
        for j in 0..y.len() {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }
    y
}

// (m, c) for the OU model with a = 0.5, delta = 1.
fn ou_ode(t: f64) -> (f64, f64) {
    let y = rk4(|s, y| vec![-0.5 * y[0], -0.5 * y[1] + 0.5 * (-s).exp()], &[1.0, 0.0], t, 20_000);
    (y[0], y[1])
}

const C_1: f64 = 0.2386512185411911;
const ETA_1: f64 = 0.3032653298563167;
const M_1: f64 = 0.6065306597126334;
const E_INV: f64 = 0.36787944117144233;
const C_SMALL: [(f64, f64); 3] = [(0.01, 0.00496264544351426), (0.04, 0.019409234154432093), (0.16, 0.07097255742042444)];

#[test]
fn ou_ode_matches_frozen_values() {
    let (m, c) = ou_ode(1.0);
    assert!((m - M_1).abs() < 1e-12);
    assert!((c - C_1).abs() < 1e-12);
    for (t, frozen) in C_SMALL {
        assert!((ou_ode(t).1 - frozen).abs() < 1e-12, "t = {t}");
    }
    assert!((M_1 - C_1 - E_INV).abs() < 1e-15);
    assert!((M_1 - (-0.5f64).exp()).abs() < 1e-16 && (E_INV - (-1.0f64).exp()).abs() < 1e-16);
}

#[test]
fn closed_forms_match_frozen_values() {
    assert!((correlation_ou_closed_form(0.5, 1.0, 1.0) - C_1).abs() < 1e-15);
    assert!((eta_ou_closed_form(0.5, 1.0, 1.0) - ETA_1).abs() < 1e-15);
    for (t, frozen) in C_SMALL {
        assert!((correlation_ou_closed_form(0.5, 1.0, t) - frozen).abs() < 1e-15);
    }
    // Linear in the direction.
    assert!((correlation_ou_closed_form(0.5, -2.0, 1.0) + 2.0 * C_1).abs() < 1e-15);
}

/// `sup_{|f| <= 1 + |x|^k} |mu(f) - nu(f)|` by enumerating sign patterns on
/// the joint support.
fn tv_brute_force(mu: &[(f64, f64)], nu: &[(f64, f64)], k: f64) -> f64 {
    let mut support: Vec<f64> = mu.iter().chain(nu).map(|&(x, _)| x).collect();
    support.sort_by(f64::total_cmp);
    support.dedup();
    let mass = |m: &[(f64, f64)], x: f64| m.iter().filter(|&&(y, _)| y == x).map(|&(_, w)| w).sum::<f64>();
    let mut best: f64 = 0.0;
    for signs in 0u32..(1 << support.len()) {
        let mut s = 0.0;
        for (i, &x) in support.iter().enumerate() {
            let f = if signs >> i & 1 == 1 { 1.0 } else { -1.0 } * (1.0 + x.abs().powf(k));
            s += f * (mass(mu, x) - mass(nu, x));
        }
        best = best.max(s.abs());
    }
    best
}

fn measure(atoms: &[(f64, f64)]) -> Measure {
    Measure::new(atoms.iter().map(|&(x, _)| vec![x]).collect(), atoms.iter().map(|&(_, w)| w).collect()).unwrap()
}

#[test]
fn weighted_tv_matches_brute_force() {
    let cases: [(&[(f64, f64)], &[(f64, f64)]); 4] = [
        (&[(0.0, 1.0)], &[(1.0, 1.0)]),
        (&[(0.0, 0.5), (2.0, 0.5)], &[(0.0, 0.25), (-1.0, 0.75)]),
        (&[(1.0, 0.2), (-3.0, 0.3), (0.5, 0.5)], &[(1.0, 0.6), (0.5, 0.4)]),
        (&[(0.0, 1.0)], &[(0.0, 1.0)]),
    ];
    for (a, b) in cases {
        for k in [0.0, 1.0, 2.0, 0.5] {
            let tv = measure(a).weighted_tv(&measure(b), MomentOrder::new(k).unwrap()).unwrap();
            assert!((tv - tv_brute_force(a, b, k)).abs() < 1e-12, "{a:?} {b:?} k={k}");
        }
    }
    let k1 = MomentOrder::new(1.0).unwrap();
    let k0 = MomentOrder::new(0.0).unwrap();
    assert_eq!(measure(&[(0.0, 1.0)]).weighted_tv(&measure(&[(1.0, 1.0)]), k1).unwrap(), 3.0);
    assert_eq!(measure(&[(0.0, 1.0)]).weighted_tv(&measure(&[(1.0, 1.0)]), k0).unwrap(), 4.0);
}

#[test]
fn small_ou_estimate_tracks_the_ode() {
    let model = mean_field_ou::<f64>(0.5, 1).unwrap();
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let run = extrinsic_derivative_with(
        &model,
        &Measure::dirac(&[0.0]),
        &Measure::dirac(&[1.0]),
        &Observable::identity(1),
        &[0.5, 1.0],
        &grid,
        20_000,
        9,
        &EstimatorOptions::default(),
    )
    .unwrap();
    for e in &run.estimates {
        let (m, c) = ou_ode(e.t);
        // Euler bias at dt = 0.01 is well under 1%.
        let bias = 0.01 * m;
        assert!((e.value - m).abs() <= 4.0 * e.stderr + bias, "{e:?}");
        assert!((e.term_martingale - c).abs() <= 4.0 * e.stderr_martingale + bias, "{e:?}");
        assert!((e.term_semigroup - (-e.t).exp()).abs() <= bias);
    }
}
