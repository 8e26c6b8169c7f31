//! Subcommands. Each turns an [`ExperimentSpec`] into a [`Report`].

use std::time::Instant;

use finslerlab::bl::{bl_field, bl_metric, BlBackend, BlIntegrator};
use finslerlab::dsl::config::FinslerSpec;
use finslerlab::dsl::parse_scene;
use finslerlab::fried::{
    fried_bound_check, leaf_probe, splitting_diagnostic, BoundaryProfile, FriedScene, ShootingSpec, SplitSpec,
};
use finslerlab::linalg::{mat_to_columns, mat_to_rows, max_abs, max_principal_angle, sym_eigen, Mat};
use finslerlab::norms::{deck_homothety_check, deck_isometry_check, deck_samples, validate_minkowski};
use finslerlab::scene::{load_scene, BoundaryModel, Scene};
use finslerlab::transport::{
    berwald_check, holonomy_generators, invariant_decomposition, BerwaldSpec, HolonomyDecomposition, LoopSpec,
};
use serde_json::{json, Value};

use crate::report::{Check, Report, Table};
use crate::seeds::{rng, substream};
use crate::spec::{resolve_scene, scene_text, ExperimentSpec};
use crate::suite;
use crate::CliError;

pub const COMMANDS: [&str; 7] = ["bl", "berwald", "holonomy", "fried", "split", "check-scene", "suite"];

/// Runs `spec.command`; `wall_clock_ms` is filled in here.
pub fn run(spec: &ExperimentSpec) -> Result<Report, CliError> {
    let start = Instant::now();
    let mut report = match spec.command.as_str() {
        "bl" => bl(spec),
        "berwald" => berwald(spec),
        "holonomy" => holonomy(spec),
        "fried" => fried(spec),
        "split" => split(spec),
        "check-scene" => check_scene(spec),
        "suite" => suite_report(spec),
        other => Err(CliError::Validation(format!("unknown command '{other}' (known: {})", COMMANDS.join(", ")))),
    }?;
    report.wall_clock_ms = start.elapsed().as_millis() as u64;
    Ok(report)
}

fn check_dim(scene: &Scene, x: &[f64], what: &str) -> Result<(), CliError> {
    if x.len() != scene.dim() {
        return Err(CliError::Validation(format!("{what} has {} coordinates, scene '{}' has dimension {}", x.len(), scene.name(), scene.dim())));
    }
    if !scene.domain.contains(x) {
        return Err(CliError::Validation(format!("{what} {x:?} lies outside the domain of '{}'", scene.name())));
    }
    Ok(())
}

/// `--point`, or a seeded sample from the scene's sampling box.
fn base_point(scene: &Scene, spec: &ExperimentSpec, op: &str) -> Result<Vec<f64>, CliError> {
    match &spec.point {
        Some(x) => {
            check_dim(scene, x, "--point")?;
            Ok(x.clone())
        }
        None => Ok(scene.domain.sample_point(&mut rng(spec.seed, op), 1e-2)),
    }
}

fn mat_json(m: &Mat) -> Value {
    json!(mat_to_rows(m))
}

fn rel_diff(a: &Mat, b: &Mat) -> f64 {
    max_abs(&(a - b)) / max_abs(b).max(1e-300)
}

fn is_riemannian(scene: &Scene) -> bool {
    scene.config.conformal.is_none() && matches!(scene.config.finsler, None | Some(FinslerSpec::Riemannian))
}

/// Exact Binet-Legendre metrics of catalog norms that do not depend on the point.
fn closed_form_bl(scene: &Scene) -> Option<Mat> {
    if scene.config.conformal.is_some() {
        return None;
    }
    match scene.name() {
        "linf2d" => Some(Mat::identity(2, 2) * 0.75),
        "l1-2d" => Some(Mat::identity(2, 2) * 1.5),
        _ => None,
    }
}

fn integrator(spec: &ExperimentSpec, n: usize) -> Result<BlIntegrator, CliError> {
    let mut integ = match spec.backend.as_deref() {
        None => BlIntegrator::default_for(n),
        Some(b) => match b.parse::<BlBackend>().map_err(CliError::Validation)? {
            BlBackend::Lattice => BlIntegrator::lattice(n),
            BlBackend::MonteCarlo => BlIntegrator::monte_carlo(spec.samples.unwrap_or(2_000_000), 0),
            BlBackend::Radial => BlIntegrator::radial(n),
        },
    };
    if let Some(r) = spec.resolution {
        integ.resolution = r;
    }
    if integ.backend == BlBackend::MonteCarlo {
        if let Some(s) = spec.samples {
            integ.resolution = s;
        }
    }
    Ok(integ.with_seed(substream(spec.seed, "bl.integrator")))
}

pub fn bl(spec: &ExperimentSpec) -> Result<Report, CliError> {
    let scene = resolve_scene(spec.scene_ref()?)?;
    let x = base_point(&scene, spec, "bl.point")?;
    let integ = integrator(spec, scene.dim())?;
    let r = bl_metric(scene.finsler.as_ref(), &x, &integ)?;
    let mc = r.backend == BlBackend::MonteCarlo;
    let tol = spec.tol.unwrap_or(if mc { 1e-2 } else { 1e-3 });
    // Monte Carlo is judged against three standard errors, quadratures against `tol`.
    let allowed = if mc { 3.0 * r.error_estimate } else { tol };
    let at = json!({ "point": x });
    let (eig, _) = sym_eigen(&r.g_bl);
    let mut checks = vec![
        Check::at_most("bl.error_estimate", r.error_estimate, tol).witness(at.clone()),
        Check::new("bl.positive_definite", eig[0], 0.0, eig[0] > 0.0).witness(at.clone()),
    ];
    if is_riemannian(&scene) {
        let d = rel_diff(&r.g_bl, &scene.metric.metric(&x)?);
        checks.push(Check::at_most("bl.matches_riemannian_metric", d, allowed).witness(at.clone()));
    }
    if let Some(exact) = closed_form_bl(&scene) {
        let d = rel_diff(&r.g_bl, &exact);
        checks.push(Check::at_most("bl.closed_form", d, allowed).witness(json!({ "point": x, "exact": mat_json(&exact) })));
    }
    let payload = json!({
        "scene": scene.name(),
        "point": x,
        "backend": r.backend,
        "resolution": integ.resolution,
        "g_bl": mat_json(&r.g_bl),
        "g_star": mat_json(&r.g_star),
        "unit_ball_volume": r.vol,
        "error_estimate": r.error_estimate,
    });
    Report::new(spec, payload, checks)
}

pub fn berwald(spec: &ExperimentSpec) -> Result<Report, CliError> {
    let scene = resolve_scene(spec.scene_ref()?)?;
    let bspec = BerwaldSpec {
        paths: spec.samples.unwrap_or(50),
        tol: spec.tol.unwrap_or(1e-6),
        seed: substream(spec.seed, "berwald"),
        ..Default::default()
    };
    // The scene metric's connection, or the Binet-Legendre one when a backend is named.
    let (r, connection) = match spec.backend {
        None => (berwald_check(scene.finsler.as_ref(), scene.metric.as_ref(), &bspec)?, "scene-metric".to_string()),
        Some(_) => {
            let g = bl_field(scene.finsler.clone(), Some(integrator(spec, scene.dim())?));
            (berwald_check(scene.finsler.as_ref(), &g, &bspec)?, format!("binet-legendre ({:?})", g.integrator().backend))
        }
    };
    let w = json!(r.witness);
    let checks = vec![
        Check::at_most("berwald.max_defect", r.max_defect, bspec.tol).witness(w.clone()),
        Check::at_most("berwald.metric_defect", r.metric_defect, bspec.tol).witness(w),
        Check::at_least("berwald.paths_used", r.paths_used as f64, bspec.paths as f64)
            .witness(json!({ "sampled": r.paths_sampled, "exited": r.paths_exited })),
    ];
    let payload = json!({ "scene": scene.name(), "connection": connection, "report": r });
    Report::new(spec, payload, checks)
}

fn decomposition_json(d: &HolonomyDecomposition) -> Value {
    let blocks: Vec<Value> = (0..d.subspaces.len())
        .map(|i| {
            json!({
                "dim": d.subspaces[i].dim(),
                "eigenvalue": d.subspaces[i].eigenvalue,
                "chart_basis": mat_to_columns(&d.chart_basis(i)),
            })
        })
        .collect();
    json!({ "dims": d.dims(), "generators": d.generators, "blocks": blocks, "warnings": d.warnings })
}

pub fn holonomy(spec: &ExperimentSpec) -> Result<Report, CliError> {
    let scene = resolve_scene(spec.scene_ref()?)?;
    let x = base_point(&scene, spec, "holonomy.point")?;
    let tol = spec.tol.unwrap_or(1e-6);
    let run = |op: &str| -> Result<_, CliError> {
        let hs = holonomy_generators(scene.metric.as_ref(), &x, &LoopSpec { seed: substream(spec.seed, op), ..Default::default() })?;
        let d = invariant_decomposition(&hs, tol)?;
        Ok((hs, d))
    };
    let (hs, d) = run("holonomy")?;
    let (_, d2) = run("holonomy.repeat")?;
    let (off, triv) = d.defects(&hs);
    let at = json!({ "point": x });
    let stable = d.dims() == d2.dims();
    let angle = if stable {
        (0..d.subspaces.len())
            .map(|i| max_principal_angle(&d.subspaces[i].basis, &d2.subspaces[i].basis))
            .fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    let checks = vec![
        Check::at_most("holonomy.orthogonality_defect", hs.max_orthogonality_defect(), 1e-8).witness(at.clone()),
        Check::at_most("holonomy.off_block_defect", off, 1e-8).witness(at.clone()),
        Check::at_most("holonomy.trivial_factor_defect", triv, 1e-8).witness(at.clone()),
        Check::at_most("holonomy.seed_stability_angle", angle, tol)
            .witness(json!({ "point": x, "dims": d.dims(), "dims_repeat": d2.dims() })),
    ];
    let payload = json!({
        "scene": scene.name(),
        "point": x,
        "loops": hs.loops.len(),
        "skipped_loops": hs.skipped,
        "decomposition": decomposition_json(&d),
    });
    Report::new(spec, payload, checks)
}

fn shooting(spec: &ExperimentSpec, op: &str) -> ShootingSpec {
    ShootingSpec { seed: substream(spec.seed, op), ..Default::default() }
}

pub fn fried(spec: &ExperimentSpec) -> Result<Report, CliError> {
    let scene = resolve_scene(spec.scene_ref()?)?;
    let tol = spec.tol.unwrap_or(1e-3);
    let res = spec.resolution.unwrap_or(17);
    let profile = BoundaryProfile::for_scene(&scene, shooting(spec, "fried.shooting"));
    let fs = FriedScene::new(profile);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = match (&spec.point, &spec.y) {
        (Some(x), Some(y)) => {
            check_dim(&scene, x, "--point")?;
            check_dim(&scene, y, "--y")?;
            vec![(x.clone(), y.clone())]
        }
        (None, None) => {
            let mut r = rng(spec.seed, "fried.pairs");
            (0..spec.samples.unwrap_or(20))
                .map(|_| (scene.domain.sample_point(&mut r, 5e-2), scene.domain.sample_point(&mut r, 5e-2)))
                .collect()
        }
        _ => return Err(CliError::Validation("fried needs both --point and --y, or neither".into())),
    };
    let mut reports = Vec::new();
    for (x, y) in &pairs {
        reports.push(fried_bound_check(&fs, x, y, res, tol)?);
    }
    let worst_a = reports.iter().min_by(|a, b| a.bound_a_margin.total_cmp(&b.bound_a_margin)).expect("non-empty");
    let worst_b = reports
        .iter()
        .filter(|r| r.bound_b_margin.is_some())
        .min_by(|a, b| a.bound_b_margin.unwrap().total_cmp(&b.bound_b_margin.unwrap()));
    let mut checks = vec![Check::at_least("fried.bound_a_margin", worst_a.bound_a_margin, -tol).witness(json!(worst_a))];
    match worst_b {
        Some(w) => checks.push(Check::at_least("fried.bound_b_margin", w.bound_b_margin.unwrap(), -tol).witness(json!(w))),
        None => checks.push(Check::new("fried.bound_b_margin", f64::INFINITY, -tol, true)),
    }
    let payload = json!({
        "scene": scene.name(),
        "d_infty": fs.profile.mode_name(),
        "resolution": res,
        "pairs": reports,
    });
    Report::new(spec, payload, checks)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn split(spec: &ExperimentSpec) -> Result<Report, CliError> {
    let scene = resolve_scene(spec.scene_ref()?)?;
    let ps = scene
        .product
        .clone()
        .ok_or_else(|| CliError::Validation(format!("scene '{}' is not a product", scene.name())))?;
    let points = match &spec.point {
        Some(x) => {
            check_dim(&scene, x, "--point")?;
            vec![x.clone()]
        }
        None => {
            let mut r = rng(spec.seed, "split.points");
            (0..spec.samples.unwrap_or(16)).map(|_| scene.domain.sample_point(&mut r, 5e-2)).collect()
        }
    };
    let sspec = SplitSpec {
        shooting: ShootingSpec { directions: 64, refine_to: Some(1e-6), ..shooting(spec, "split.shooting") },
        curvature_tol: spec.tol.unwrap_or(1e-8),
        ..Default::default()
    };
    let rows = splitting_diagnostic(scene.metric.as_ref(), &ps, &points, &sspec)?;
    let probe = leaf_probe(scene.metric.as_ref(), &ps, &points[0], 1e3, &sspec.shooting)?;
    let bad: Vec<&_> = rows.iter().filter(|r| !r.consistent).collect();
    let checks = vec![
        Check::at_most("split.inconsistent_points", bad.len() as f64, 0.0).witness(json!(bad.first())),
        Check::at_most("split.leaf_d_infty_spread", probe.d_infty_spread, 1e-3).witness(json!(probe)),
        Check::new("split.leaf_geodesics_complete", probe.geodesics as f64, 0.0, probe.all_reached_horizon)
            .witness(json!({ "base": probe.base, "horizon": probe.horizon })),
    ];
    let k = ps.blocks.len();
    let mut header: Vec<String> = (1..=scene.dim()).map(|i| format!("x{i}")).collect();
    header.extend((1..=k).map(|i| format!("R{i}")));
    header.push("witness_angle".into());
    header.push("verdict".into());
    let table_rows = rows
        .iter()
        .map(|r| {
            let mut row: Vec<String> = r.x.iter().map(|v| fmt(*v)).collect();
            row.extend(r.leaf_curvature.iter().map(|v| fmt(*v)));
            row.push(fmt(r.witness_angle_deg()));
            row.push(if r.consistent { "PASS" } else { "FAIL" }.into());
            row
        })
        .collect();
    let payload = json!({ "scene": scene.name(), "points": rows, "leaf_probe": probe });
    let mut report = Report::new(spec, payload, checks)?;
    report.table = Some(Table { header, rows: table_rows });
    Ok(report)
}

pub fn check_scene(spec: &ExperimentSpec) -> Result<Report, CliError> {
    let text = scene_text(spec.scene_ref()?)?;
    let config = parse_scene(&text).map_err(|e| CliError::Validation(e.to_string()))?;
    let normalized = config.to_text();
    let reparsed = parse_scene(&normalized).map_err(|e| CliError::Internal(format!("normalized form does not parse: {e}")))?;
    let scene = load_scene(&text).map_err(|e| CliError::Validation(e.to_string()))?;
    let tol = spec.tol.unwrap_or(1e-10);
    let mut r = rng(spec.seed, "check-scene.points");
    let points: Vec<Vec<f64>> = (0..spec.samples.unwrap_or(16)).map(|_| scene.domain.sample_point(&mut r, 1e-3)).collect();
    let mut min_eig = (f64::INFINITY, points[0].clone());
    let mut worst_axiom = (0.0f64, points[0].clone());
    let mut first_bad: Option<Vec<f64>> = None;
    for (i, x) in points.iter().enumerate() {
        let (e, _) = sym_eigen(&scene.metric.metric(x)?);
        if e[0] < min_eig.0 {
            min_eig = (e[0], x.clone());
        }
        let rep = validate_minkowski(&scene.finsler.fiber(x)?, 2000, substream(spec.seed, &format!("check-scene.axioms.{i}")));
        let worst = rep.axioms.iter().map(|a| a.max_violation).fold(0.0, f64::max);
        if worst > worst_axiom.0 {
            worst_axiom = (worst, x.clone());
        }
        if !rep.pass && first_bad.is_none() {
            first_bad = Some(x.clone());
        }
    }
    let mut checks = vec![
        Check::new("scene.normalized_roundtrip", 0.0, 0.0, reparsed == config).witness(json!({ "normalized": normalized })),
        Check::new("scene.metric_positive_definite", min_eig.0, 0.0, min_eig.0 > 0.0).witness(json!({ "point": min_eig.1 })),
        Check::new("scene.finsler_fiber_is_norm", worst_axiom.0, 0.0, first_bad.is_none())
            .witness(json!({ "point": first_bad.unwrap_or(worst_axiom.1) })),
    ];
    let mut decks = Vec::new();
    for (i, d) in scene.decks.iter().enumerate() {
        let samples = deck_samples(&scene.domain, d, 64, substream(spec.seed, &format!("check-scene.deck.{i}")));
        let iso = deck_isometry_check(scene.finsler.as_ref(), d, &samples)?;
        let pts: Vec<Vec<f64>> = samples.iter().map(|(x, _)| x.clone()).collect();
        let hom = deck_homothety_check(scene.metric.as_ref(), d, &pts)?;
        checks.push(Check::at_most(&format!("deck.{}.field_ratio_residual", d.name), iso.residual, tol).witness(json!(iso)));
        let kdiff = (hom.fitted_k - d.coefficient).abs() + hom.residual;
        checks.push(Check::at_most(&format!("deck.{}.metric_homothety", d.name), kdiff, tol).witness(json!(hom)));
        decks.push(json!({ "name": d.name, "field_ratio": iso.fitted_c, "metric_coefficient": hom.fitted_k }));
    }
    let boundary = match &scene.boundary {
        Some(BoundaryModel::ClosedForm { source, .. }) => json!({ "closed_form": source }),
        Some(BoundaryModel::Shooting { directions, horizon }) => json!({ "shooting": { "directions": directions, "horizon": horizon } }),
        None => Value::Null,
    };
    let payload = json!({
        "name": scene.name(),
        "dim": scene.dim(),
        "normalized": normalized,
        "warnings": config.warnings,
        "product_blocks": scene.product.as_ref().map(|p| p.blocks.iter().map(|(r, _)| [r.start + 1, r.end]).collect::<Vec<_>>()),
        "boundary": boundary,
        "decks": decks,
    });
    Report::new(spec, payload, checks)
}

/// The acceptance battery; all criteria run even when some fail.
pub fn suite_report(spec: &ExperimentSpec) -> Result<Report, CliError> {
    let mut checks = Vec::new();
    let mut summary = Vec::new();
    for c in suite::criteria() {
        let outcome = c.run_with(spec.seed);
        eprintln!("{}", outcome.line());
        summary.push(json!({ "id": c.id, "title": c.title, "pass": outcome.pass() }));
        checks.extend(outcome.checks);
    }
    Report::new(spec, json!({ "criteria": summary }), checks)
}
