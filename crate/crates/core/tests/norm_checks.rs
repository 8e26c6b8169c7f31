use std::sync::Arc;

use proptest::prelude::*;

use finslerlab::geometry::{
    christoffel, conformal_difference, ConformalMetric, ExprScalar, MetricField, ProductStructure,
};
use finslerlab::linalg::quad_form;
use finslerlab::norms::{conformal_scale, product_finsler, DeckMap, FinslerField, MinkowskiField, MinkowskiNorm};
use finslerlab::scene::Scene;

#[test]
fn ell4_product_of_block_norms_three_and_four() {
    let s = Scene::builtin("sphere-x-line-ell4").unwrap();
    let x = [std::f64::consts::FRAC_PI_2, 0.3, -0.7];
    let f = s.finsler.eval(&x, &[3.0, 0.0, 4.0]).unwrap();
    assert!((f - 337f64.powf(0.25)).abs() <= 1e-12);
}

#[test]
fn euclidean_outer_norm_gives_the_product_riemannian_norm() {
    let s = Scene::builtin("sphere-x-line").unwrap();
    let ps = s.product.clone().unwrap();
    let f = product_finsler(&ps, MinkowskiNorm::euclidean(2)).unwrap();
    for (x, v) in [([1.0, 0.5, 2.0], [0.3, -1.2, 0.8]), ([2.2, -1.0, 0.0], [1.0, 2.0, -3.0])] {
        let want = quad_form(&ps.metric().metric(&x).unwrap(), &v).sqrt();
        assert!((f.eval(&x, &v).unwrap() - want).abs() <= 1e-12 * want);
    }
}

#[test]
fn swapping_equal_flat_blocks_leaves_the_norm_unchanged() {
    let plane = Scene::builtin("euclidean").unwrap().metric;
    let ps = ProductStructure::new(vec![plane.clone(), plane]);
    let f = product_finsler(&ps, MinkowskiNorm::lp(2, 4.0)).unwrap();
    let swap = |a: [f64; 4]| [a[2], a[3], a[0], a[1]];
    for (x, v) in [([0.1, 0.2, 0.3, 0.4], [1.0, -2.0, 0.5, 0.25]), ([-1.0, 0.0, 2.0, 1.0], [0.0, 1.0, 3.0, -1.0])] {
        let a = f.eval(&x, &v).unwrap();
        let b = f.eval(&swap(x), &swap(v)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn conformal_scale_commutes_with_deck_pullback() {
    let q = 2.5;
    let deck = DeckMap::linear("dilate", finslerlab::linalg::Mat::identity(2, 2) * q, 1.0);
    let dom = Scene::builtin("punctured-plane").unwrap().domain;
    let base: Arc<dyn FinslerField> = Arc::new(MinkowskiField { norm: MinkowskiNorm::lp(2, 4.0), domain: dom });
    let lam = |x: &[f64]| Ok(1.0 / (x[0] * x[0] + x[1] * x[1]).sqrt());
    let scaled = conformal_scale(base.clone(), Arc::new(lam));
    for (x, v) in [([0.3, -0.4], [1.0, 2.0]), ([1.5, 0.2], [-0.7, 0.1])] {
        let (y, w) = (deck.apply(&x), deck.push(&v));
        let pulled = scaled.eval(&y, &w).unwrap();
        let want = lam(&y).unwrap() * base.eval(&y, &w).unwrap();
        assert!((pulled - want).abs() <= 1e-15 * want);
        // Isometry of the Hopf field.
        assert!((pulled - scaled.eval(&x, &v).unwrap()).abs() <= 1e-12 * pulled);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conformal_difference_matches_christoffel_difference(
        a in -0.5f64..0.5,
        b in -0.5f64..0.5,
        x in (0.6f64..2.4, -2.0f64..2.0),
    ) {
        let g = Scene::builtin("sphere-chart").unwrap().metric;
        let phi = ExprScalar::parse(&format!("{a}*x1^2 + {b}*sin(x2)"), 2).unwrap();
        let x = [x.0, x.1];
        let diff = conformal_difference(g.as_ref(), &phi, &x).unwrap();
        let conf = ConformalMetric { inner: g.clone(), phi };
        let direct = christoffel(&conf, &x).unwrap();
        let base = christoffel(g.as_ref(), &x).unwrap();
        let mut worst = 0.0f64;
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    worst = worst.max((direct.get(k, i, j) - base.get(k, i, j) - diff.get(k, i, j)).abs());
                }
            }
        }
        prop_assert!(worst <= 1e-6, "{worst}");
    }

    #[test]
    fn sampled_minkowski_axioms_hold_for_lp(p in 1.0f64..8.0, seed in any::<u64>()) {
        let r = finslerlab::norms::validate_minkowski(&MinkowskiNorm::lp(3, p), 200, seed);
        prop_assert!(r.pass, "{r:?}");
    }
}
