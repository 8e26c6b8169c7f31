//! The acceptance battery: ten criteria, each a list of checks.
//!
//! Every criterion draws its randomness from its own substream of the root
//! seed, so criteria can be run alone or together with identical results.

use std::time::{Duration, Instant};

use finslerlab::bl::{bl_field, bl_of_norm, BlIntegrator, BlResult};
use finslerlab::fried::{
    flat_rectangle, fried_bound_check, leaf_probe, splitting_diagnostic, BoundaryProfile,
    FriedScene, RectangleOptions, ShootingSpec, SplitSpec,
};
use finslerlab::geometry::{christoffel, conformal_difference, ConformalMetric, ExprScalar};
use finslerlab::linalg::{max_abs, max_principal_angle, quad_form, random_unit, Mat};
use finslerlab::norms::{deck_homothety_check, deck_isometry_check, deck_samples, MinkowskiNorm};
use finslerlab::ode::Termination;
use finslerlab::scene::{load_scene, Scene};
use finslerlab::transport::{
    berwald_check, canonical_connection_check, holonomy_generators, integrate_geodesic, invariant_decomposition,
    BerwaldSpec, LoopSpec,
};
use rand::Rng;
use serde_json::json;

use crate::report::Check;
use crate::seeds::{rng, substream};
use crate::CliError;

type Checks = Result<Vec<Check>, CliError>;

pub struct Criterion {
    pub id: u32,
    pub title: &'static str,
    pub budget: Duration,
    run: fn(u64) -> Checks,
}

pub struct Outcome {
    pub id: u32,
    pub title: &'static str,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn within_budget(&self) -> bool {
        self.elapsed <= self.budget
    }

    pub fn line(&self) -> String {
        let failed: Vec<&str> = self.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        format!(
            "criterion {:2} {}: {} ({} checks, {:.1} s of {} s){}",
            self.id,
            if self.pass() { "PASS" } else { "FAIL" },
            self.title,
            self.checks.len(),
            self.elapsed.as_secs_f64(),
            self.budget.as_secs(),
            if failed.is_empty() { String::new() } else { format!(" failed: {}", failed.join(", ")) }
        )
    }
}

impl Criterion {
    /// Runs the criterion; an error becomes a failing check carrying the message.
    pub fn run_with(&self, seed: u64) -> Outcome {
        let start = Instant::now();
        let sub = substream(seed, &format!("criterion-{}", self.id));
        let checks = match (self.run)(sub) {
            Ok(c) => c,
            Err(e) => vec![Check::new(&format!("c{:02}.error", self.id), f64::NAN, 0.0, false)
                .witness(json!({ "error": e.to_string() }))],
        };
        Outcome { id: self.id, title: self.title, checks, elapsed: start.elapsed(), budget: self.budget }
    }
}

pub fn criteria() -> Vec<Criterion> {
    let c = |id, title, secs, run| Criterion { id, title, budget: Duration::from_secs(secs), run };
    vec![
        c(1, "Binet-Legendre closed forms", 30, c01_bl_closed_forms),
        c(2, "Binet-Legendre scaling and equivariance", 30, c02_bl_equivariance),
        c(3, "Berwald check on the sphere x line l4 product", 60, c03_berwald_positive),
        c(4, "conformally scaled product is not Berwald", 30, c04_berwald_negative),
        c(5, "conformal connection difference", 5, c05_conformal_difference),
        c(6, "holonomy decomposition", 60, c06_holonomy),
        c(7, "Hopf scene deck map and incompleteness", 5, c07_hopf),
        c(8, "Fried metric distance bounds", 60, c08_fried_bounds),
        c(9, "flat rectangles in products", 30, c09_rectangles),
        c(10, "splitting diagnostics", 60, c10_splitting),
    ]
}

pub fn criterion(id: u32) -> Option<Criterion> {
    criteria().into_iter().find(|c| c.id == id)
}

fn rel_diff(a: &Mat, b: &Mat) -> f64 {
    max_abs(&(a - b)) / max_abs(b).max(1e-300)
}

fn rows(m: &Mat) -> serde_json::Value {
    json!(finslerlab::linalg::mat_to_rows(m))
}

fn random_spd<R: Rng>(r: &mut R, n: usize) -> Mat {
    let b = Mat::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
    &b * b.transpose() + Mat::identity(n, n) * 0.5
}

fn c01_bl_closed_forms(seed: u64) -> Checks {
    let mut r = rng(seed, "spd");
    let spd = random_spd(&mut r, 2);
    let mut diag = Mat::identity(2, 2);
    diag[(0, 0)] = 4.0;
    let cases: Vec<(&str, MinkowskiNorm, Mat)> = vec![
        ("linf", MinkowskiNorm::lp(2, f64::INFINITY), Mat::identity(2, 2) * 0.75),
        ("l1", MinkowskiNorm::lp(2, 1.0), Mat::identity(2, 2) * 1.5),
        ("euclidean2", MinkowskiNorm::euclidean(2), Mat::identity(2, 2)),
        ("euclidean3", MinkowskiNorm::euclidean(3), Mat::identity(3, 3)),
        ("quadratic_diag41", MinkowskiNorm::quadratic(&diag)?, diag.clone()),
        ("quadratic_random", MinkowskiNorm::quadratic(&spd)?, spd.clone()),
    ];
    let mut checks = Vec::new();
    for (name, norm, exact) in &cases {
        let res = bl_of_norm(norm, &BlIntegrator::lattice(norm.dim()))?;
        let d = rel_diff(&res.g_bl, exact);
        checks.push(
            Check::at_most(&format!("c01.{name}.lattice"), d, 1e-3)
                .witness(json!({ "g_bl": rows(&res.g_bl), "exact": rows(exact) })),
        );
    }
    for (i, (name, norm, exact)) in cases.iter().enumerate().filter(|(_, c)| c.1.dim() == 2) {
        let integ = BlIntegrator::monte_carlo(400_000, substream(seed, &format!("mc.{i}")));
        let res = bl_of_norm(norm, &integ)?;
        let d = rel_diff(&res.g_bl, exact);
        checks.push(
            Check::at_most(&format!("c01.{name}.monte_carlo_in_3_se"), d, 3.0 * res.error_estimate)
                .witness(json!({ "g_bl": rows(&res.g_bl), "exact": rows(exact), "standard_error": res.error_estimate })),
        );
    }
    Ok(checks)
}

fn c02_bl_equivariance(seed: u64) -> Checks {
    let base = MinkowskiNorm::lp(2, 3.0);
    let integ = BlIntegrator::lattice(2);
    let g0 = bl_of_norm(&base, &integ)?;
    let mut r = rng(seed, "maps");
    let mut checks = Vec::new();
    let compare = |name: String, got: &BlResult, want: &Mat, extra: f64| {
        let d = rel_diff(&got.g_bl, want);
        let allowed = 3.0 * (got.error_estimate + extra);
        Check::at_most(&name, d, allowed).witness(json!({ "got": rows(&got.g_bl), "expected": rows(want) }))
    };
    for k in 0..5 {
        let lambda = r.random_range(0.5..2.0);
        let scaled = bl_of_norm(&base.scaled(lambda), &integ)?;
        checks.push(compare(format!("c02.scaling.{k}"), &scaled, &(&g0.g_bl * (lambda * lambda)), g0.error_estimate));
        let l = loop {
            let m = Mat::from_fn(2, 2, |_, _| r.random_range(-1.0..1.0)) + Mat::identity(2, 2);
            if m.determinant().abs() > 0.3 {
                break m;
            }
        };
        let composed = bl_of_norm(&base.compose_linear(&l), &integ)?;
        let want = l.transpose() * &g0.g_bl * &l;
        checks.push(compare(format!("c02.linear_pullback.{k}"), &composed, &want, g0.error_estimate));
    }
    Ok(checks)
}

fn ell4() -> Result<Scene, CliError> {
    Ok(Scene::builtin("sphere-x-line-ell4")?)
}

fn c03_berwald_positive(seed: u64) -> Checks {
    let s = ell4()?;
    let spec = BerwaldSpec { seed: substream(seed, "berwald"), ..Default::default() };
    let r = berwald_check(s.finsler.as_ref(), s.metric.as_ref(), &spec)?;
    let canon_spec = BerwaldSpec { paths: 8, tol: 1e-5, ode_tol: 1e-9, seed: substream(seed, "canonical"), ..Default::default() };
    let c = canonical_connection_check(s.finsler.clone(), BlIntegrator::radial(3), &canon_spec)?;
    Ok(vec![
        Check::at_most("c03.berwald_defect", r.max_defect, 1e-6).witness(json!(r.witness)),
        Check::at_least("c03.berwald_paths", r.paths_used as f64, 50.0).witness(json!({ "exited": r.paths_exited })),
        Check::at_most("c03.canonical_field_defect", c.berwald.max_defect, 1e-5).witness(json!(c.berwald.witness)),
        Check::at_most("c03.canonical_metric_defect", c.metric_defect, 1e-5).witness(json!(c.berwald.witness)),
    ])
}

fn c04_berwald_negative(seed: u64) -> Checks {
    let s = load_scene("scene = sphere-x-line-ell4\n[conformal]\nphi = x3\n")?;
    let g = bl_field(s.finsler.clone(), None);
    let spec = BerwaldSpec { paths: 6, tol: 1e-6, ode_tol: 1e-8, seed: substream(seed, "berwald"), ..Default::default() };
    let r = berwald_check(s.finsler.as_ref(), &g, &spec)?;
    Ok(vec![
        Check::at_least("c04.defect_detected", r.max_defect, 1e-2).witness(json!(r.witness)),
        Check::new("c04.witness_present", r.witness.as_ref().map_or(0.0, |w| w.defect), 1e-2, r.witness.is_some() && !r.pass)
            .witness(json!(r.witness)),
    ])
}

fn c05_conformal_difference(seed: u64) -> Checks {
    let sphere = Scene::builtin("sphere-chart")?;
    let skew = load_scene(
        "[scene]\nname = skew3\ndim = 3\n[domain]\nlower = -1, -1, -1\nupper = 1, 1, 1\n\
         [metric]\ng11 = 2 + sin(x2)\ng12 = 0.3 * x3\ng22 = 1 + x1^2\ng23 = 0.1\ng33 = 1.5 + x1 * x2 / 4\n\
         [finsler]\nriemannian = true\n",
    )?;
    let mut r = rng(seed, "phi");
    let mut checks = Vec::new();
    for (label, scene) in [("sphere", &sphere), ("skew3", &skew)] {
        let n = scene.dim();
        for k in 0..3 {
            let a: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let last = if n == 3 { "x3" } else { "x2" };
            let text = format!("{} * x1 + {} * {last}^2 + {} * sin(x1 + x2) + {} * x1 * {last}", a[0], a[1], a[2], a[3]);
            let phi = ExprScalar::parse(&text, n)?;
            let conf = ConformalMetric { inner: scene.metric.clone(), phi: phi.clone() };
            let mut worst = (0.0f64, Vec::new());
            for _ in 0..3 {
                let x = scene.domain.sample_point(&mut r, 0.1);
                let diff = conformal_difference(scene.metric.as_ref(), &phi, &x)?;
                let direct = christoffel(&conf, &x)?;
                let base = christoffel(scene.metric.as_ref(), &x)?;
                let mut err = 0.0f64;
                for (i, v) in diff.data.iter().enumerate() {
                    err = err.max((direct.data[i] - base.data[i] - v).abs());
                }
                if err >= worst.0 {
                    worst = (err, x);
                }
            }
            checks.push(
                Check::at_most(&format!("c05.{label}.phi{k}"), worst.0, 1e-8).witness(json!({ "phi": text, "point": worst.1 })),
            );
        }
    }
    Ok(checks)
}

fn c06_holonomy(seed: u64) -> Checks {
    let cases: [(&str, Vec<f64>, Vec<usize>); 3] = [
        ("sphere-x-line", vec![1.1, 0.4, -0.3], vec![1, 2]),
        ("sphere3", vec![1.2, 1.4, 0.3], vec![0, 3]),
        ("flat3", vec![0.1, 0.2, 0.3], vec![3]),
    ];
    let mut checks = Vec::new();
    for (name, x, want) in cases {
        let s = Scene::builtin(name)?;
        let mut decs = Vec::new();
        for rep in 0..2 {
            let spec = LoopSpec { seed: substream(seed, &format!("{name}.{rep}")), ..Default::default() };
            let hs = holonomy_generators(s.metric.as_ref(), &x, &spec)?;
            let d = invariant_decomposition(&hs, 1e-6)?;
            let (off, triv) = d.defects(&hs);
            let worst = off.max(triv).max(hs.max_orthogonality_defect());
            checks.push(Check::at_most(&format!("c06.{name}.seed{rep}.invariance_defect"), worst, 1e-8).witness(json!({ "point": x })));
            checks.push(
                Check::new(&format!("c06.{name}.seed{rep}.dims"), 0.0, 0.0, d.dims() == want)
                    .witness(json!({ "dims": d.dims(), "expected": want })),
            );
            decs.push(d);
        }
        let angle = if decs[0].dims() == decs[1].dims() {
            (0..decs[0].subspaces.len())
                .map(|i| max_principal_angle(&decs[0].subspaces[i].basis, &decs[1].subspaces[i].basis))
                .fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        checks.push(Check::at_most(&format!("c06.{name}.seed_angle"), angle, 1e-6).witness(json!({ "point": x })));
    }
    Ok(checks)
}

fn c07_hopf(seed: u64) -> Checks {
    let s = Scene::builtin("hopf-ell4")?;
    let d = &s.decks[0];
    let samples = deck_samples(&s.domain, d, 200, substream(seed, "deck"));
    let iso = deck_isometry_check(s.finsler.as_ref(), d, &samples)?;
    let pts: Vec<Vec<f64>> = samples.iter().map(|(x, _)| x.clone()).collect();
    let hom = deck_homothety_check(s.metric.as_ref(), d, &pts)?;
    let mut checks = vec![
        Check::at_most("c07.deck_isometry_residual", iso.residual.max((iso.fitted_c - 1.0).abs()), 1e-12).witness(json!(iso)),
        Check::at_most("c07.flat_metric_homothety", hom.residual.max((hom.fitted_k - d.coefficient).abs()), 1e-12)
            .witness(json!(hom)),
    ];
    let mut r = rng(seed, "escape");
    let mut worst = (0.0f64, Vec::new(), false);
    for _ in 0..5 {
        let x = s.domain.sample_point(&mut r, 0.1);
        let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let v: Vec<f64> = x.iter().map(|a| -a / nx).collect();
        let p = integrate_geodesic(s.metric.as_ref(), &x, &v, 10.0 * nx, 1e-12)?;
        let err = if p.termination == Termination::DomainExit { (p.length - nx).abs() } else { f64::INFINITY };
        if !(err <= worst.0) {
            worst = (err, x, p.termination == Termination::DomainExit);
        }
    }
    checks.push(Check::at_most("c07.escape_at_norm", worst.0, 1e-6).witness(json!({ "point": worst.1, "exited": worst.2 })));
    Ok(checks)
}

fn c08_fried_bounds(seed: u64) -> Checks {
    let s = Scene::builtin("punctured-plane")?;
    let fs = FriedScene::new(BoundaryProfile::for_scene(&s, ShootingSpec::default()));
    let mut checks = Vec::new();
    let mut r = rng(seed, "pairs");
    let mut radial = (0.0f64, None);
    for _ in 0..3 {
        let u = random_unit(&mut r, 2);
        let (r1, r2) = (r.random_range(0.2..1.0), r.random_range(1.2..2.0));
        let x: Vec<f64> = u.iter().map(|a| a * r1).collect();
        let y: Vec<f64> = u.iter().map(|a| a * r2).collect();
        let rep = fried_bound_check(&fs, &x, &y, 17, 1e-3)?;
        if rep.bound_a_margin.abs() >= radial.0 {
            radial = (rep.bound_a_margin.abs(), Some(rep));
        }
    }
    checks.push(Check::at_most("c08.radial_bound_a_equality", radial.0, 1e-3).witness(json!(radial.1)));
    let mut worst_a: Option<finslerlab::fried::FriedBoundReport> = None;
    let mut worst_b: Option<finslerlab::fried::FriedBoundReport> = None;
    for _ in 0..200 {
        let x = s.domain.sample_point(&mut r, 5e-2);
        let y = s.domain.sample_point(&mut r, 5e-2);
        let rep = fried_bound_check(&fs, &x, &y, 17, 1e-3)?;
        if worst_a.as_ref().is_none_or(|w| rep.bound_a_margin < w.bound_a_margin) {
            worst_a = Some(rep.clone());
        }
        if let Some(b) = rep.bound_b_margin {
            if worst_b.as_ref().is_none_or(|w| b < w.bound_b_margin.unwrap()) {
                worst_b = Some(rep);
            }
        }
    }
    let a = worst_a.expect("pairs were sampled");
    checks.push(Check::at_least("c08.random_bound_a_margin", a.bound_a_margin, -1e-3).witness(json!(a)));
    let b_val = worst_b.as_ref().map_or(f64::INFINITY, |w| w.bound_b_margin.unwrap());
    checks.push(Check::at_least("c08.random_bound_b_margin", b_val, -1e-3).witness(json!(worst_b)));
    Ok(checks)
}

fn c09_rectangles(seed: u64) -> Checks {
    let mut checks = Vec::new();
    for name in ["line-x-punctured", "sphere-x-line"] {
        let s = Scene::builtin(name)?;
        let ps = s.product.clone().expect("product scene");
        let prof = BoundaryProfile::for_scene(&s, ShootingSpec::default());
        let mut r = rng(seed, name);
        let mut worst_k = (0.0f64, json!(null));
        let mut worst_d = (f64::NEG_INFINITY, json!(null));
        for _ in 0..10 {
            let x = s.domain.sample_point(&mut r, 0.1);
            let v = random_unit(&mut r, s.dim());
            let nv = quad_form(&s.metric.metric(&x)?, &v).sqrt();
            let ell = r.random_range(0.2..0.6) * prof.d_infty(&x)? / nv;
            let rep = flat_rectangle(s.metric.as_ref(), &ps, Some(&prof), &x, &v, ell, &RectangleOptions::default())?;
            let w = json!({ "x": x, "v": v, "ell": ell });
            if rep.gauss_curvature >= worst_k.0 {
                worst_k = (rep.gauss_curvature, w.clone());
            }
            if rep.distance_excess >= worst_d.0 {
                worst_d = (rep.distance_excess, w);
            }
        }
        checks.push(Check::at_most(&format!("c09.{name}.gauss_curvature"), worst_k.0, 1e-5).witness(worst_k.1));
        checks.push(Check::at_most(&format!("c09.{name}.distance_excess"), worst_d.0, 1e-5).witness(worst_d.1));
    }
    Ok(checks)
}

fn c10_splitting(seed: u64) -> Checks {
    let s = Scene::builtin("line-x-bumped-punctured")?;
    let ps = s.product.clone().expect("product scene");
    let mut r = rng(seed, "points");
    let points: Vec<Vec<f64>> = (0..8)
        .map(|_| {
            let rad = r.random_range(0.2..1.0);
            let th = r.random_range(0.0..std::f64::consts::TAU);
            vec![r.random_range(-2.0..2.0), rad * th.cos(), rad * th.sin()]
        })
        .collect();
    let shooting = ShootingSpec { directions: 64, refine_to: Some(1e-6), seed: substream(seed, "shooting"), ..Default::default() };
    let spec = SplitSpec { shooting: shooting.clone(), ..Default::default() };
    let rows = splitting_diagnostic(s.metric.as_ref(), &ps, &points, &spec)?;
    let by = |f: &dyn Fn(&finslerlab::fried::SplitPoint) -> f64, max: bool| {
        let p = rows
            .iter()
            .max_by(|a, b| if max { f(a).total_cmp(&f(b)) } else { f(b).total_cmp(&f(a)) })
            .expect("points");
        (f(p), json!(p))
    };
    let (r1, w1) = by(&|p| p.leaf_curvature[0], true);
    let (r2, w2) = by(&|p| p.leaf_curvature[1], false);
    let (ang, w3) = by(&|p| p.witness_angle_deg(), false);
    let bad = rows.iter().filter(|p| !p.consistent).count();
    let mut checks = vec![
        Check::at_most("c10.r1_max", r1, 1e-8).witness(w1),
        Check::new("c10.r2_min", r2, 0.1, r2 > 0.1).witness(w2),
        Check::at_least("c10.witness_angle_min_deg", ang, 80.0).witness(w3),
        Check::at_most("c10.inconsistent_points", bad as f64, 0.0).witness(json!(rows.iter().find(|p| !p.consistent))),
    ];
    let mut spread = (0.0f64, json!(null));
    let mut complete = true;
    for x in points.iter().take(2) {
        let probe = leaf_probe(s.metric.as_ref(), &ps, x, 1e3, &shooting)?;
        complete &= probe.all_reached_horizon && probe.max_r1 <= 1e-8;
        if probe.d_infty_spread >= spread.0 {
            spread = (probe.d_infty_spread, json!(probe));
        }
    }
    checks.push(Check::new("c10.leaf_geodesics_complete_and_flat", 0.0, 0.0, complete).witness(spread.1.clone()));
    checks.push(Check::at_most("c10.d_infty_spread_along_leaf", spread.0, 1e-3).witness(spread.1));
    Ok(checks)
}
