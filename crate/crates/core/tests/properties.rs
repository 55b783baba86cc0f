use nalgebra::DMatrix;
use proptest::prelude::*;

use normbound::auxiliary::{solve_linear_aux, solve_nonlinear_aux, AuxCoefficients, AuxOptions};
use normbound::model::{derive_envelope, lipschitz_constant, LipschitzEnvelope, Monomial, PolynomialField, TrigAffineScalar};
use normbound::validate::{sample_ellipsoid, SampleMode};

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn monomial(n: usize) -> impl Strategy<Value = Monomial> {
    (
        -2.0f64..2.0,
        -1.0f64..1.0,
        0.1f64..10.0,
        proptest::collection::vec(0u32..4, n),
        0..n,
    )
        .prop_map(|(c, amp, freq, mut exps, bump)| {
            if exps.iter().all(|e| *e == 0) {
                exps[bump] = 1;
            }
            Monomial::new(TrigAffineScalar::constant(c).with_harmonic(amp, freq, 0.3), exps)
        })
}

fn field(n: usize) -> impl Strategy<Value = PolynomialField> {
    proptest::collection::vec(proptest::collection::vec(monomial(n), 0..4), n)
        .prop_map(|components| PolynomialField::new(components).unwrap())
}

fn field_and_point() -> impl Strategy<Value = (PolynomialField, Vec<f64>, f64)> {
    (2usize..4).prop_flat_map(|n| (field(n), proptest::collection::vec(-1.0f64..1.0, n), 0.0f64..10.0, 0.0f64..20.0))
        .prop_map(|(f, dir, radius, t)| {
            let d = norm(&dir).max(1e-9);
            let x = dir.iter().map(|v| v / d * radius).collect();
            (f, x, t)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn envelope_dominates_field((f, x, t) in field_and_point()) {
        let env = derive_envelope(&f);
        let rho = norm(&x);
        let fx = norm(&f.eval(t, &x));
        let l = env.eval(t, rho);
        prop_assert!(fx <= l * (1.0 + 1e-12) + 1e-12, "|f| = {fx} > L = {l}");
        prop_assert!(l <= env.eval_sup(rho) * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn lipschitz_profile_bounds_field_on_its_ball((f, x, t) in field_and_point(), extra in 0.0f64..5.0) {
        let env = derive_envelope(&f);
        let radius = norm(&x) + extra + 1e-6;
        let lin = lipschitz_constant(&env, radius).unwrap();
        let fx = norm(&f.eval(t, &x));
        prop_assert!(fx <= lin.profile(t) * norm(&x) * (1.0 + 1e-12) + 1e-12);
        prop_assert!(lin.profile(t) <= lin.l_hat * (1.0 + 1e-12));
    }

    #[test]
    fn nonlinear_curves_are_ordered_in_x0(
        p in -1.0f64..0.5,
        k in 1.0f64..3.0,
        c in 0.0f64..0.2,
        f_norm in 0.0f64..0.1,
        lo in 0.01f64..1.0,
        gap in 1e-3f64..1.0,
    ) {
        let env = LipschitzEnvelope::from_constants(&[(3, c)]);
        let coeffs = AuxCoefficients::constant(0.0, 10.0, 0.05, p, k, env, f_norm).unwrap();
        let opts = AuxOptions::default();
        let a = solve_nonlinear_aux(&coeffs, lo, &opts).unwrap();
        let b = solve_nonlinear_aux(&coeffs, lo + gap, &opts).unwrap();
        prop_assert!(a.len() >= b.len());
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!(x <= &(y + 1e-9));
        }
    }

    #[test]
    fn linear_curve_dominates_nonlinear_inside_its_ball(
        p in -1.0f64..0.2,
        k in 1.0f64..3.0,
        c in 0.0f64..0.2,
        x0 in 0.01f64..1.0,
    ) {
        let env = LipschitzEnvelope::from_constants(&[(3, c)]);
        let coeffs = AuxCoefficients::constant(0.0, 10.0, 0.05, p, k, env.clone(), 0.0).unwrap();
        let nl = solve_nonlinear_aux(&coeffs, x0, &AuxOptions::default()).unwrap();
        // the classical bound only applies while the state stays in the ball of radius R
        let radius = nl.sup().max(x0);
        prop_assume!(radius.is_finite() && nl.blow_up_time.is_none());
        let with_l = coeffs.with_lipschitz(&lipschitz_constant(&env, radius).unwrap());
        let lin = solve_linear_aux(&with_l, x0).unwrap();
        for (a, b) in nl.values.iter().zip(&lin.values) {
            prop_assert!(a <= &(b * (1.0 + 1e-6) + 1e-12), "nonlinear {a} above linear {b}");
        }
    }

    #[test]
    fn surface_samples_sit_on_the_level_set(
        entries in proptest::collection::vec(-2.0f64..2.0, 4),
        level in 0.01f64..5.0,
        seed in any::<u64>(),
    ) {
        let w = DMatrix::from_row_slice(2, 2, &entries) + DMatrix::identity(2, 2) * 5.0;
        let winv = w.clone().try_inverse().unwrap();
        let s = sample_ellipsoid(&w, level, 16, SampleMode::Surface, seed).unwrap();
        for x in &s.points {
            let z = &winv * nalgebra::DVector::from_column_slice(x);
            prop_assert!((z.norm() - level).abs() <= 1e-12 * level.max(1.0) * 10.0);
        }
        let again = sample_ellipsoid(&w, level, 16, SampleMode::Surface, seed).unwrap();
        prop_assert_eq!(s.points, again.points);
    }
}
