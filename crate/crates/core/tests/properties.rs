//! Property tests over randomized inputs.

use std::sync::Arc;

use approx::assert_relative_eq;
use proptest::prelude::*;

use finslerlab::bl::{bl_of_norm, BlIntegrator};
use finslerlab::domain::Domain;
use finslerlab::dsl::{compile_str, parse, EvalFlags, Symbols};
use finslerlab::fried::{fried_metric, BoundaryProfile, FriedScene, ShootingSpec};
use finslerlab::geometry::{christoffel, curvature_norm_sq, ExprMetric, MetricField, ScaledMetric};
use finslerlab::linalg::{mat_from_rows, Mat};
use finslerlab::norms::MinkowskiNorm;
use finslerlab::scene::Scene;
use finslerlab::transport::{transport_curve, Polyline};

fn leaf() -> impl Strategy<Value = String> {
    prop_oneof![
        (0u32..50).prop_map(|k| format!("{}", k as f64 / 4.0)),
        prop::sample::select(vec!["x1", "x2", "x3", "a"]).prop_map(str::to_string),
    ]
}

fn expr_text() -> impl Strategy<Value = String> {
    leaf().prop_recursive(4, 32, 3, |inner| {
        prop_oneof![
            (inner.clone(), prop::sample::select(vec!["+", "-", "*", "/", "^"]), inner.clone())
                .prop_map(|(a, op, b)| format!("({a}) {op} ({b})")),
            inner.clone().prop_map(|a| format!("-({a})")),
            (prop::sample::select(vec!["sin", "cos", "exp", "abs", "sqrt"]), inner.clone())
                .prop_map(|(f, a)| format!("{f}({a})")),
            (inner.clone(), inner).prop_map(|(a, b)| format!("max({a}, {b})")),
        ]
    })
}

/// Smooth expressions in x1, x2 built from everywhere-defined operations.
fn smooth_text() -> impl Strategy<Value = String> {
    let leaf = prop_oneof![
        (1u32..9).prop_map(|k| format!("{}", k as f64 / 4.0)),
        prop::sample::select(vec!["x1", "x2"]).prop_map(str::to_string),
    ];
    leaf.prop_recursive(3, 16, 2, |inner| {
        prop_oneof![
            (inner.clone(), prop::sample::select(vec!["+", "-", "*"]), inner.clone())
                .prop_map(|(a, op, b)| format!("({a}) {op} ({b})")),
            (prop::sample::select(vec!["sin", "cos", "exp"]), inner.clone()).prop_map(|(f, a)| format!("{f}(({a})/4)")),
            inner.prop_map(|a| format!("({a})^2")),
        ]
    })
}

fn sphere_chart() -> Arc<dyn MetricField> {
    Scene::builtin("sphere-chart").unwrap().metric
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parse_print_parse_is_idempotent(text in expr_text()) {
        let e = parse(&text).unwrap();
        let again = parse(&e.to_string()).unwrap();
        prop_assert_eq!(&again, &e);
        prop_assert_eq!(again.to_string(), e.to_string());
    }

    #[test]
    fn dual_derivative_matches_central_differences(
        text in smooth_text(),
        x in prop::array::uniform2(-1.0f64..1.0),
        seed in prop::array::uniform2(-1.0f64..1.0),
    ) {
        let p = compile_str(&text, &Symbols::new().vector("x", 2)).unwrap();
        let (_, d) = p.eval_dual(&x, &seed, &mut EvalFlags::default()).unwrap();
        let h = 1e-6;
        let at = |t: f64| p.eval_f64(&[x[0] + t * seed[0], x[1] + t * seed[1]]).unwrap();
        let fd = (at(h) - at(-h)) / (2.0 * h);
        prop_assert!((d - fd).abs() <= 1e-6 * d.abs().max(1.0), "{text}: dual {d}, fd {fd}");
    }

    #[test]
    fn christoffels_are_symmetric(
        a in 0.1f64..2.0,
        b in -0.3f64..0.3,
        x in prop::array::uniform2(-1.0f64..1.0),
    ) {
        let m = ExprMetric::from_strs(
            Domain::unbounded(2),
            &[&[&format!("1 + {a}*x1^2"), &format!("{b}*sin(x1*x2)")], &["", "2 + cos(x1) * x2^2"]],
        )
        .unwrap();
        let gam = christoffel(&m, &x).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    prop_assert_eq!(gam.get(k, i, j), gam.get(k, j, i));
                }
            }
        }
    }

    #[test]
    fn curvature_norm_scales_inversely_squared(
        c in 0.1f64..10.0,
        x in (0.8f64..2.0, 0.1f64..2.5),
    ) {
        let g = sphere_chart();
        let x = [x.0, x.1];
        let base = curvature_norm_sq(g.as_ref(), &x).unwrap();
        let scaled = curvature_norm_sq(&ScaledMetric { inner: g, c }, &x).unwrap();
        prop_assert!((scaled * c * c - base).abs() <= 1e-6 * base, "{base} vs {}", scaled * c * c);
    }

    #[test]
    fn finsler_fields_are_positively_homogeneous(
        which in prop::sample::select(vec!["hopf-ell4", "sphere-x-line-ell4", "randers", "linf2d", "l1-2d"]),
        lambda in 0.0f64..20.0,
        raw in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let s = Scene::builtin(which).unwrap();
        let n = s.dim();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(raw[0].to_bits());
        let x = s.domain.sample_point(&mut rng, 0.05);
        let v = &raw[..n];
        let a = s.finsler.eval(&x, v).unwrap();
        let b = s.finsler.eval(&x, &v.iter().map(|c| lambda * c).collect::<Vec<_>>()).unwrap();
        prop_assert!((b - lambda * a).abs() <= 1e-12 * (lambda * a).max(1e-300), "{which}: {a} {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn bl_scales_quadratically(lambda in 0.2f64..5.0, p in 1.5f64..6.0) {
        let integ = BlIntegrator::radial(2);
        let f = MinkowskiNorm::lp(2, p);
        let r0 = bl_of_norm(&f, &integ).unwrap();
        let r = bl_of_norm(&f.scaled(lambda), &integ).unwrap();
        let want = &r0.g_bl * (lambda * lambda);
        let tol = 3.0 * r.error_estimate.max(1e-13) * want.abs().max();
        prop_assert!((&r.g_bl - &want).abs().max() <= tol);
    }

    #[test]
    fn bl_is_linearly_equivariant(l in prop::array::uniform4(-1.0f64..1.0)) {
        let lm = mat_from_rows(&[&[1.0 + l[0], 0.5 * l[1]], &[0.5 * l[2], 1.0 + 0.5 * l[3]]]);
        prop_assume!(lm.determinant().abs() > 0.2);
        let integ = BlIntegrator::radial(2);
        let f = MinkowskiNorm::lp(2, 3.0);
        let r0 = bl_of_norm(&f, &integ).unwrap();
        let r = bl_of_norm(&f.compose_linear(&lm), &integ).unwrap();
        let want = lm.transpose() * &r0.g_bl * &lm;
        let tol = 3.0 * (r.error_estimate + r0.error_estimate) * want.abs().max();
        prop_assert!((&r.g_bl - &want).abs().max() <= tol, "{} > {tol}", (&r.g_bl - &want).abs().max());
    }

    #[test]
    fn loop_then_reverse_is_the_identity(
        x in (0.8f64..1.8, 0.2f64..2.5),
        h in 0.05f64..0.5,
    ) {
        let g = sphere_chart();
        let lp = Polyline::rectangle(&[x.0, x.1], 0, 1, h);
        let id = Mat::identity(2, 2);
        let tol = 1e-10;
        let fwd = transport_curve(g.as_ref(), &lp, &id, tol).unwrap().pop().unwrap();
        let back = transport_curve(g.as_ref(), &lp.reversed(), &fwd, tol).unwrap().pop().unwrap();
        prop_assert!((back - id).abs().max() <= 2e-8);
    }
}

fn shooting(seed: u64) -> ShootingSpec {
    ShootingSpec { directions: 48, seed, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn shooting_d_infty_is_one_lipschitz(
        x in (-2.0f64..2.0, -2.0f64..2.0),
        y in (-2.0f64..2.0, -2.0f64..2.0),
    ) {
        let x = [x.0, x.1];
        let y = [y.0, y.1];
        prop_assume!(x[0].hypot(x[1]) > 0.2 && y[0].hypot(y[1]) > 0.2);
        let s = Scene::builtin("punctured-plane").unwrap();
        let prof = BoundaryProfile::shooting(s.metric.clone(), shooting(3));
        let (a, b) = (prof.d_infty(&x).unwrap(), prof.d_infty(&y).unwrap());
        let d = (x[0] - y[0]).hypot(x[1] - y[1]);
        prop_assert!((a - b).abs() <= d + 1e-6, "|{a} - {b}| > {d}");
    }

    #[test]
    fn homothety_scales_d_infty_and_fixes_fried_metric(
        c in 0.3f64..3.0,
        x in (-2.0f64..2.0, -2.0f64..2.0),
    ) {
        let x = [x.0, x.1];
        prop_assume!(x[0].hypot(x[1]) > 0.2);
        let g = Scene::builtin("punctured-plane").unwrap().metric;
        let gs: Arc<dyn MetricField> = Arc::new(ScaledMetric { inner: g.clone(), c: c * c });
        let p0 = BoundaryProfile::shooting(g, shooting(5));
        let p1 = BoundaryProfile::shooting(gs, shooting(5));
        let (d0, d1) = (p0.d_infty(&x).unwrap(), p1.d_infty(&x).unwrap());
        assert_relative_eq!(d1, c * d0, max_relative = 1e-6);
        let f0 = fried_metric(&FriedScene::new(p0), &x).unwrap();
        let f1 = fried_metric(&FriedScene::new(p1), &x).unwrap();
        prop_assert!((f1 - &f0).abs().max() <= 1e-6 * f0.abs().max());
    }
}
