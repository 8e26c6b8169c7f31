use std::sync::Arc;

use finslerlab::bl::{bl_field, BlIntegrator};
use finslerlab::geometry::christoffel;
use finslerlab::linalg::max_principal_angle;
use finslerlab::norms::{conformal_scale, FinslerField};
use finslerlab::scene::{load_scene, Scene};
use finslerlab::transport::{
    berwald_check, canonical_connection_check, holonomy_generators, invariant_decomposition, BerwaldSpec, LoopSpec,
};

fn decomposition_dims(scene: &str, x: &[f64], seed: u64) -> (Vec<usize>, finslerlab::transport::HolonomyDecomposition) {
    let s = Scene::builtin(scene).unwrap();
    let hs = holonomy_generators(s.metric.as_ref(), x, &LoopSpec { seed, ..Default::default() }).unwrap();
    assert!(hs.max_orthogonality_defect() <= 1e-8, "{scene}: {}", hs.max_orthogonality_defect());
    let d = invariant_decomposition(&hs, 1e-6).unwrap();
    let (off, triv) = d.defects(&hs);
    assert!(off < 1e-8 && triv < 1e-8, "{scene}: off-block {off}, trivial {triv}");
    (d.dims(), d)
}

#[test]
fn sphere_x_line_splits_off_the_line() {
    let x = [1.1, 0.4, -0.3];
    let (dims, a) = decomposition_dims("sphere-x-line", &x, 1);
    assert_eq!(dims, vec![1, 2]);
    let (_, b) = decomposition_dims("sphere-x-line", &x, 2);
    for i in 0..2 {
        assert!(max_principal_angle(&a.subspaces[i].basis, &b.subspaces[i].basis) <= 1e-6);
    }
    // V₀ is the line direction.
    assert!(a.chart_basis(0)[(2, 0)].abs() > 1.0 - 1e-12);
}

#[test]
fn round_three_sphere_is_irreducible() {
    let (dims, _) = decomposition_dims("sphere3", &[1.2, 1.4, 0.3], 1);
    assert_eq!(dims, vec![0, 3]);
}

#[test]
fn flat_space_has_only_the_trivial_factor() {
    let (dims, _) = decomposition_dims("flat3", &[0.1, 0.2, 0.3], 1);
    assert_eq!(dims, vec![3]);
}

fn ell4() -> Scene {
    Scene::builtin("sphere-x-line-ell4").unwrap()
}

#[test]
fn ell4_product_is_berwald_for_the_product_metric() {
    let s = ell4();
    let r = berwald_check(s.finsler.as_ref(), s.metric.as_ref(), &BerwaldSpec::default()).unwrap();
    assert!(r.paths_used >= 50, "{r:?}");
    assert!(r.pass, "{r:?}");
}

#[test]
fn berwald_defect_is_invariant_under_constant_scaling() {
    let s = ell4();
    let spec = BerwaldSpec { paths: 6, ..Default::default() };
    let a = berwald_check(s.finsler.as_ref(), s.metric.as_ref(), &spec).unwrap();
    let scaled = conformal_scale(s.finsler.clone(), Arc::new(|_: &[f64]| Ok(3.0)));
    let b = berwald_check(&scaled, s.metric.as_ref(), &spec).unwrap();
    assert!((a.max_defect - b.max_defect).abs() <= 1e-12);
    assert_eq!(a.pass, b.pass);
}

#[test]
fn berwald_defect_shrinks_with_the_integrator_tolerance() {
    let s = ell4();
    let defect = |ode_tol| {
        let spec = BerwaldSpec { paths: 8, ode_tol, ..Default::default() };
        berwald_check(s.finsler.as_ref(), s.metric.as_ref(), &spec).unwrap().max_defect
    };
    let d: Vec<f64> = [1e-5, 1e-7, 1e-9].into_iter().map(defect).collect();
    assert!(d[1] < d[0] && d[2] < d[1], "{d:?}");
}

#[test]
fn ell4_canonical_connection_is_bl_levi_civita() {
    let s = ell4();
    let spec = BerwaldSpec { paths: 8, tol: 1e-5, ode_tol: 1e-9, ..Default::default() };
    let r = canonical_connection_check(s.finsler.clone(), BlIntegrator::radial(3), &spec).unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn proportional_fields_share_bl_christoffels() {
    let s = ell4();
    let tripled: Arc<dyn FinslerField> = Arc::new(conformal_scale(s.finsler.clone(), Arc::new(|_: &[f64]| Ok(3.0))));
    let a = bl_field(s.finsler.clone(), None);
    let b = bl_field(tripled, None);
    let x = [1.0, 0.3, 0.7];
    let d = christoffel(&a, &x).unwrap().max_abs_diff(&christoffel(&b, &x).unwrap());
    assert!(d < 1e-8, "{d}");
}

#[test]
fn conformally_scaled_ell4_is_not_berwald() {
    let text = "scene = sphere-x-line-ell4\n[conformal]\nphi = x3\n";
    let s = load_scene(text).unwrap();
    let g = bl_field(s.finsler.clone(), None);
    let spec = BerwaldSpec { paths: 6, tol: 1e-6, ode_tol: 1e-8, ..Default::default() };
    let r = berwald_check(s.finsler.as_ref(), &g, &spec).unwrap();
    assert!(!r.pass && r.max_defect >= 1e-2, "{r:?}");
    assert!(r.witness.is_some());
}


mod holonomy_invariant {
    use std::sync::Arc;

    use finslerlab::linalg::quad_form;
    use finslerlab::norms::{FinslerField, MinkowskiNorm};
    use finslerlab::scene::Scene;
    use finslerlab::transport::{holonomy_generators, holonomy_invariant_finsler, invariant_decomposition, LoopSpec};
    use finslerlab::GeomError;

    fn decompose(s: &Scene, x: &[f64]) -> finslerlab::transport::HolonomyDecomposition {
        let hs = holonomy_generators(s.metric.as_ref(), x, &LoopSpec { seed: 1, ..Default::default() }).unwrap();
        invariant_decomposition(&hs, 1e-6).unwrap()
    }

    #[test]
    fn irreducible_with_abs_is_the_riemannian_norm() {
        let s = Scene::builtin("sphere3").unwrap();
        let dec = decompose(&s, &[1.2, 1.4, 0.3]);
        let f = holonomy_invariant_finsler(s.metric.clone(), &dec, MinkowskiNorm::new(1, "abs", true, |v| v[0].abs()))
            .unwrap();
        for (x, v) in [([1.0, 1.3, 0.5], [0.3, -1.0, 2.0]), ([1.4, 1.5, 0.1], [1.0, 0.0, 0.0])] {
            let want = quad_form(&s.metric.metric(&x).unwrap(), &v).sqrt();
            assert!((f.eval(&x, &v).unwrap() - want).abs() <= 1e-9 * want);
        }
    }

    #[test]
    fn agrees_with_the_product_construction() {
        let s = Scene::builtin("sphere-x-line-ell4").unwrap();
        let x0 = [1.1, 0.4, -0.3];
        let dec = decompose(&s, &x0);
        assert_eq!(dec.dims(), vec![1, 2]);
        let f = holonomy_invariant_finsler(s.metric.clone(), &dec, MinkowskiNorm::lp(2, 4.0)).unwrap();
        for (x, v) in [
            ([1.0, 0.7, 0.4], [0.3, -1.0, 2.0]),
            ([1.3, 0.2, -1.0], [-0.5, 0.25, 0.1]),
            ([0.9, 0.5, 2.0], [1.0, 1.0, -1.0]),
        ] {
            let a = f.eval(&x, &v).unwrap();
            let b = s.finsler.eval(&x, &v).unwrap();
            assert!((a - b).abs() <= 1e-9, "{x:?} {v:?}: {a} vs {b}");
        }
    }

    #[test]
    fn transported_frame_stays_orthonormal() {
        let s = Scene::builtin("sphere-x-line").unwrap();
        let x0 = [1.1, 0.4, -0.3];
        let dec = decompose(&s, &x0);
        let f = holonomy_invariant_finsler(s.metric.clone(), &dec, MinkowskiNorm::lp(2, 4.0)).unwrap();
        let x = [1.4, 1.0, 0.5];
        let w = f.frame_at(&x).unwrap();
        let gram = w.transpose() * s.metric.metric(&x).unwrap() * &w;
        let dev = (gram - finslerlab::linalg::Mat::identity(3, 3)).abs().max();
        assert!(dev <= 1e-8, "{dev}");
    }

    #[test]
    fn asymmetric_outer_norm_is_rejected_for_equal_blocks() {
        let s = Scene::builtin("flat3").unwrap();
        let mut dec = decompose(&s, &[0.1, 0.2, 0.3]);
        // Fake two equal 1D factors plus a trivial one.
        let id = dec.subspaces[0].basis.clone();
        dec.subspaces = (0..3)
            .map(|i| finslerlab::transport::Subspace { basis: id.columns(i, 1).into_owned(), eigenvalue: None })
            .collect();
        let skew = MinkowskiNorm::new(3, "skew", true, |v| v[0].abs() + v[1].abs() + 2.0 * v[2].abs());
        let e = holonomy_invariant_finsler(s.metric.clone(), &dec, skew).err().unwrap();
        assert!(matches!(e, GeomError::Precondition(_)), "{e}");
        let bad_dim = holonomy_invariant_finsler(s.metric.clone(), &dec, MinkowskiNorm::lp(2, 2.0)).err().unwrap();
        assert!(matches!(bad_dim, GeomError::Dimension { .. }));
    }

    #[test]
    fn resulting_field_is_homogeneous() {
        let s = Scene::builtin("sphere-x-line").unwrap();
        let dec = decompose(&s, &[1.1, 0.4, -0.3]);
        let f: Arc<dyn FinslerField> =
            Arc::new(holonomy_invariant_finsler(s.metric.clone(), &dec, MinkowskiNorm::lp(2, 4.0)).unwrap());
        let x = [1.2, 0.8, 0.0];
        let v = [0.4, -0.2, 1.5];
        let a = f.eval(&x, &v).unwrap();
        let b = f.eval(&x, &v.map(|c| 2.5 * c)).unwrap();
        assert!((b - 2.5 * a).abs() <= 1e-12 * b);
    }

    #[test]
    fn resulting_field_is_berwald_for_g() {
        let s = Scene::builtin("sphere-x-line").unwrap();
        let dec = decompose(&s, &[1.1, 0.4, -0.3]);
        let f = holonomy_invariant_finsler(s.metric.clone(), &dec, MinkowskiNorm::lp(2, 4.0)).unwrap();
        let spec = finslerlab::transport::BerwaldSpec { paths: 12, ..Default::default() };
        let r = finslerlab::transport::berwald_check(&f, s.metric.as_ref(), &spec).unwrap();
        assert!(r.pass, "{r:?}");
    }
}
