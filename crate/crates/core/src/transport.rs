//! Geodesics, parallel transport, the Berwald check and holonomy.
//!
//! Transport is integrated jointly with the curve it follows. Along a
//! geodesic the state is `(x, v, W)` with `W` a matrix of transported
//! columns; along a prescribed [`Curve`] only `W` is integrated.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bl::{bl_field, BlIntegrator};
use crate::geometry::{christoffel, MetricField, Tensor3};
use crate::linalg::{null_space, orthonormal_frame, quad_form, random_unit, sym_eigen, Mat};
use crate::norms::FinslerField;
use crate::ode::{integrate, OdeOptions, OdeSystem, Termination};
use crate::{GeomError, Result};

fn gamma_apply(gam: &Tensor3, a: &[f64], b: &[f64], out: &mut [f64]) {
    let n = gam.n;
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..n {
            if a[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                acc += gam.get(k, i, j) * a[i] * b[j];
            }
        }
        *o = -acc;
    }
}

/// State `[x, v, W columns…]`.
struct GeodesicSystem<'a> {
    g: &'a dyn MetricField,
    n: usize,
    frames: usize,
}

impl OdeSystem for GeodesicSystem<'_> {
    fn dim(&self) -> usize {
        self.n * (2 + self.frames)
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> std::result::Result<(), ()> {
        let n = self.n;
        let (x, rest) = y.split_at(n);
        let (v, w) = rest.split_at(n);
        let gam = christoffel(self.g, x).map_err(|_| ())?;
        dy[..n].copy_from_slice(v);
        let (_, drest) = dy.split_at_mut(n);
        let (dv, dw) = drest.split_at_mut(n);
        gamma_apply(&gam, v, v, dv);
        for c in 0..self.frames {
            gamma_apply(&gam, v, &w[c * n..(c + 1) * n], &mut dw[c * n..(c + 1) * n]);
        }
        Ok(())
    }

    fn clearance(&self, y: &[f64]) -> (f64, f64) {
        let n = self.n;
        let speed = y[n..2 * n].iter().map(|a| a * a).sum::<f64>().sqrt();
        (self.g.domain().clearance(&y[..n]), speed)
    }
}

fn pack(x: &[f64], v: &[f64], w: Option<&Mat>) -> Vec<f64> {
    let mut y = x.to_vec();
    y.extend_from_slice(v);
    if let Some(w) = w {
        y.extend(w.iter());
    }
    y
}

/// End state of a geodesic flow with transported columns.
#[derive(Clone, Debug)]
pub struct FlowEnd {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Mat,
    pub t: f64,
    pub termination: Termination,
}

/// Follows the geodesic through `(x, v)` for parameter time `t1`,
/// transporting the columns of `w`.
pub fn geodesic_flow(
    g: &dyn MetricField,
    x: &[f64],
    v: &[f64],
    t1: f64,
    w: Option<&Mat>,
    tol: f64,
) -> Result<FlowEnd> {
    let n = g.dim();
    g.check(x)?;
    let frames = w.map_or(0, |w| w.ncols());
    let sys = GeodesicSystem { g, n, frames };
    let sol = integrate(&sys, 0.0, &pack(x, v, w), t1, &OdeOptions::with_tol(tol));
    let y = sol.last();
    Ok(FlowEnd {
        x: y[..n].to_vec(),
        v: y[n..2 * n].to_vec(),
        w: Mat::from_column_slice(n, frames, &y[2 * n..]),
        t: sol.t_end(),
        termination: sol.termination,
    })
}

/// A geodesic sampled at the integrator's accepted steps.
#[derive(Clone, Debug, Serialize)]
pub struct Path {
    pub ts: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub tangents: Vec<Vec<f64>>,
    /// Total `g`-arclength.
    pub length: f64,
    /// Requested arclength.
    pub horizon: f64,
    pub termination: Termination,
    pub tol: f64,
}

impl Path {
    pub fn start(&self) -> &[f64] {
        &self.points[0]
    }

    pub fn end(&self) -> &[f64] {
        self.points.last().expect("path has a start point")
    }

    /// Largest deviation of `|γ'|_g` from 1 over the samples.
    pub fn speed_drift(&self, g: &dyn MetricField) -> Result<f64> {
        let mut worst = 0.0f64;
        for (x, v) in self.points.iter().zip(&self.tangents) {
            let s = quad_form(&g.eval_unchecked(x)?, v).sqrt();
            worst = worst.max((s - 1.0).abs());
        }
        Ok(worst)
    }
}

/// Unit-speed geodesic from `x` in direction `v`, up to arclength `horizon`.
pub fn integrate_geodesic(g: &dyn MetricField, x: &[f64], v: &[f64], horizon: f64, tol: f64) -> Result<Path> {
    let n = g.dim();
    let gx = g.metric(x)?;
    if v.len() != n {
        return Err(GeomError::Dimension { expected: n, got: v.len() });
    }
    let speed = quad_form(&gx, v).sqrt();
    if !(speed > 0.0) {
        return Err(GeomError::InvalidArgument("initial velocity must be nonzero".into()));
    }
    let u: Vec<f64> = v.iter().map(|a| a / speed).collect();
    let sys = GeodesicSystem { g, n, frames: 0 };
    let sol = integrate(&sys, 0.0, &pack(x, &u, None), horizon, &OdeOptions::with_tol(tol));
    let length = sol.t_end();
    Ok(Path {
        points: sol.ys.iter().map(|y| y[..n].to_vec()).collect(),
        tangents: sol.ys.iter().map(|y| y[n..].to_vec()).collect(),
        ts: sol.ts,
        length,
        horizon,
        termination: sol.termination,
        tol,
    })
}

/// Transports `v` from the start of `path` to its end.
pub fn parallel_transport(g: &dyn MetricField, path: &Path, v: &[f64]) -> Result<Vec<f64>> {
    if path.termination != Termination::HorizonReached {
        return Err(GeomError::PathExited { arclength: path.length });
    }
    let w = Mat::from_column_slice(v.len(), 1, v);
    let end = geodesic_flow(g, path.start(), &path.tangents[0], path.horizon, Some(&w), path.tol)?;
    if end.termination != Termination::HorizonReached {
        return Err(GeomError::PathExited { arclength: end.t });
    }
    Ok(end.w.column(0).iter().copied().collect())
}

/// Transports the columns of `w` along the geodesic `t ↦ exp_x(t v)`, `t ∈ [0, 1]`.
pub fn transport_geodesic(g: &dyn MetricField, x: &[f64], v: &[f64], w: &Mat, tol: f64) -> Result<FlowEnd> {
    let end = geodesic_flow(g, x, v, 1.0, Some(w), tol)?;
    if end.termination != Termination::HorizonReached {
        return Err(GeomError::PathExited { arclength: end.t });
    }
    Ok(end)
}

/// Initial velocity `v` with `exp_x(v) = y`, by Newton shooting.
pub fn geodesic_between(g: &dyn MetricField, x: &[f64], y: &[f64], tol: f64) -> Result<Vec<f64>> {
    let guess: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
    geodesic_between_from(g, x, y, &guess, tol)
}

/// [`geodesic_between`] starting Newton from `guess`.
pub fn geodesic_between_from(g: &dyn MetricField, x: &[f64], y: &[f64], guess: &[f64], tol: f64) -> Result<Vec<f64>> {
    let n = g.dim();
    g.check(y)?;
    let shoot = |v: &[f64]| -> Option<Vec<f64>> {
        let end = geodesic_flow(g, x, v, 1.0, None, tol).ok()?;
        (end.termination == Termination::HorizonReached)
            .then(|| end.x.iter().zip(y).map(|(a, b)| a - b).collect())
    };
    let rnorm = |r: &[f64]| r.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = 1.0 + rnorm(y);
    let target = (100.0 * tol).max(1e-13) * scale;
    let mut v = guess.to_vec();
    let mut r = shoot(&v).ok_or_else(|| GeomError::Numerical("shooting start exits the domain".into()))?;
    let mut res = rnorm(&r);
    for _ in 0..40 {
        if res <= target {
            return Ok(v);
        }
        let vn = rnorm(&v).max(1e-3);
        let h = 1e-6 * vn;
        let mut jac = Mat::zeros(n, n);
        for j in 0..n {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[j] += h;
            vm[j] -= h;
            let (rp, rm) = match (shoot(&vp), shoot(&vm)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(GeomError::Numerical("shooting Jacobian left the domain".into())),
            };
            for i in 0..n {
                jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        let rhs = Mat::from_column_slice(n, 1, &r);
        let step = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| GeomError::Numerical("singular shooting Jacobian (conjugate point?)".into()))?;
        let mut lam = 1.0;
        loop {
            let cand: Vec<f64> = (0..n).map(|i| v[i] - lam * step[(i, 0)]).collect();
            if let Some(rc) = shoot(&cand) {
                let rcn = rnorm(&rc);
                if rcn < res || lam < 1e-3 {
                    v = cand;
                    r = rc;
                    res = rcn;
                    break;
                }
            }
            lam *= 0.5;
            if lam < 1e-4 {
                return Err(GeomError::Numerical("shooting failed to converge".into()));
            }
        }
    }
    if res <= 1e3 * target {
        Ok(v)
    } else {
        Err(GeomError::Numerical(format!("shooting residual {res:.3e} above {target:.1e}")))
    }
}

/// Riemannian distance estimate `|v|_g` from two-point shooting.
pub fn geodesic_distance(g: &dyn MetricField, x: &[f64], y: &[f64], tol: f64) -> Result<f64> {
    let v = geodesic_between(g, x, y, tol)?;
    Ok(quad_form(&g.metric(x)?, &v).sqrt())
}

/// A piecewise smooth chart curve; piece `k` has local parameter `s ∈ [0, 1]`.
pub trait Curve: Send + Sync {
    fn dim(&self) -> usize;
    fn pieces(&self) -> usize;
    fn point(&self, k: usize, s: f64) -> Vec<f64>;
    fn velocity(&self, k: usize, s: f64) -> Vec<f64>;
    fn describe(&self) -> String;
}

/// Straight segments between consecutive vertices.
#[derive(Clone, Debug)]
pub struct Polyline {
    pub vertices: Vec<Vec<f64>>,
}

impl Polyline {
    /// Closed coordinate rectangle `x → x+h e_i → x+h e_i+h e_j → x+h e_j → x`.
    pub fn rectangle(x: &[f64], i: usize, j: usize, h: f64) -> Polyline {
        let mut a = x.to_vec();
        let mut vs = vec![a.clone()];
        a[i] += h;
        vs.push(a.clone());
        a[j] += h;
        vs.push(a.clone());
        a[i] -= h;
        vs.push(a);
        vs.push(x.to_vec());
        Polyline { vertices: vs }
    }

    pub fn reversed(&self) -> Polyline {
        Polyline { vertices: self.vertices.iter().rev().cloned().collect() }
    }
}

impl Curve for Polyline {
    fn dim(&self) -> usize {
        self.vertices[0].len()
    }
    fn pieces(&self) -> usize {
        self.vertices.len() - 1
    }
    fn point(&self, k: usize, s: f64) -> Vec<f64> {
        let (a, b) = (&self.vertices[k], &self.vertices[k + 1]);
        a.iter().zip(b).map(|(p, q)| p + s * (q - p)).collect()
    }
    fn velocity(&self, k: usize, _s: f64) -> Vec<f64> {
        let (a, b) = (&self.vertices[k], &self.vertices[k + 1]);
        a.iter().zip(b).map(|(p, q)| q - p).collect()
    }
    fn describe(&self) -> String {
        format!("polyline({} vertices)", self.vertices.len())
    }
}

/// Uniform Catmull-Rom spline through its control points (C¹).
#[derive(Clone, Debug)]
pub struct CatmullRom {
    pub points: Vec<Vec<f64>>,
}

impl CatmullRom {
    fn controls(&self, k: usize) -> [Vec<f64>; 4] {
        let p = &self.points;
        let m = p.len();
        let reflect = |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| 2.0 * x - y).collect::<Vec<_>>();
        let p0 = if k == 0 { reflect(&p[0], &p[1]) } else { p[k - 1].clone() };
        let p3 = if k + 2 >= m { reflect(&p[m - 1], &p[m - 2]) } else { p[k + 2].clone() };
        [p0, p[k].clone(), p[k + 1].clone(), p3]
    }
}

impl Curve for CatmullRom {
    fn dim(&self) -> usize {
        self.points[0].len()
    }
    fn pieces(&self) -> usize {
        self.points.len() - 1
    }
    fn point(&self, k: usize, s: f64) -> Vec<f64> {
        let [p0, p1, p2, p3] = self.controls(k);
        (0..self.dim())
            .map(|i| {
                0.5 * (2.0 * p1[i]
                    + (p2[i] - p0[i]) * s
                    + (2.0 * p0[i] - 5.0 * p1[i] + 4.0 * p2[i] - p3[i]) * s * s
                    + (-p0[i] + 3.0 * p1[i] - 3.0 * p2[i] + p3[i]) * s * s * s)
            })
            .collect()
    }
    fn velocity(&self, k: usize, s: f64) -> Vec<f64> {
        let [p0, p1, p2, p3] = self.controls(k);
        (0..self.dim())
            .map(|i| {
                0.5 * ((p2[i] - p0[i])
                    + 2.0 * (2.0 * p0[i] - 5.0 * p1[i] + 4.0 * p2[i] - p3[i]) * s
                    + 3.0 * (-p0[i] + 3.0 * p1[i] - 3.0 * p2[i] + p3[i]) * s * s)
            })
            .collect()
    }
    fn describe(&self) -> String {
        format!("spline({} knots)", self.points.len())
    }
}

struct CurveSystem<'a> {
    g: &'a dyn MetricField,
    curve: &'a dyn Curve,
    piece: usize,
    n: usize,
    frames: usize,
}

impl OdeSystem for CurveSystem<'_> {
    fn dim(&self) -> usize {
        self.n * self.frames
    }
    fn rhs(&self, t: f64, w: &[f64], dw: &mut [f64]) -> std::result::Result<(), ()> {
        let n = self.n;
        let x = self.curve.point(self.piece, t);
        let xd = self.curve.velocity(self.piece, t);
        let gam = christoffel(self.g, &x).map_err(|_| ())?;
        for c in 0..self.frames {
            gamma_apply(&gam, &xd, &w[c * n..(c + 1) * n], &mut dw[c * n..(c + 1) * n]);
        }
        Ok(())
    }
}

/// Checks that `curve` stays inside the domain of `g` at a dense sample.
pub fn curve_inside(g: &dyn MetricField, curve: &dyn Curve) -> bool {
    (0..curve.pieces()).all(|k| (0..=32).all(|i| g.domain().contains(&curve.point(k, i as f64 / 32.0))))
}

/// Transports the columns of `w` along `curve`; returns the transported
/// matrix at the end of every piece.
pub fn transport_curve(g: &dyn MetricField, curve: &dyn Curve, w: &Mat, tol: f64) -> Result<Vec<Mat>> {
    let n = g.dim();
    if curve.dim() != n {
        return Err(GeomError::Dimension { expected: n, got: curve.dim() });
    }
    if !curve_inside(g, curve) {
        return Err(GeomError::Precondition(format!("{} leaves the domain", curve.describe())));
    }
    let frames = w.ncols();
    let mut state: Vec<f64> = w.iter().copied().collect();
    let mut out = Vec::with_capacity(curve.pieces());
    for k in 0..curve.pieces() {
        let sys = CurveSystem { g, curve, piece: k, n, frames };
        let sol = integrate(&sys, 0.0, &state, 1.0, &OdeOptions::with_tol(tol));
        if sol.termination != Termination::HorizonReached {
            return Err(GeomError::Numerical(format!(
                "transport along piece {k} of {} stopped: {:?}",
                curve.describe(),
                sol.termination
            )));
        }
        state = sol.last().to_vec();
        out.push(Mat::from_column_slice(n, frames, &state));
    }
    Ok(out)
}

/// Sampling parameters for [`berwald_check`].
#[derive(Clone, Debug)]
pub struct BerwaldSpec {
    pub paths: usize,
    pub vectors: usize,
    /// Upper bound on path size (geodesic arclength, spline radius twice this).
    pub length: f64,
    pub seed: u64,
    pub tol: f64,
    pub ode_tol: f64,
}

impl Default for BerwaldSpec {
    fn default() -> Self {
        BerwaldSpec { paths: 50, vectors: 16, length: 1.0, seed: 0, tol: 1e-6, ode_tol: 1e-11 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BerwaldWitness {
    pub path: String,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub vector: Vec<f64>,
    pub defect: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BerwaldReport {
    /// Largest relative change of `F` under transport.
    pub max_defect: f64,
    /// Largest relative change of `g` under transport.
    pub metric_defect: f64,
    pub tol: f64,
    pub pass: bool,
    pub paths_sampled: usize,
    pub paths_used: usize,
    pub paths_exited: usize,
    pub witness: Option<BerwaldWitness>,
}

struct PathOutcome {
    defect: f64,
    metric_defect: f64,
    witness: Option<BerwaldWitness>,
}

enum PathShape {
    Geodesic { v: Vec<f64>, length: f64 },
    Spline(CatmullRom),
}

fn sample_path(g: &dyn MetricField, spec: &BerwaldSpec, idx: usize) -> Result<(Vec<f64>, PathShape)> {
    let n = g.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(idx as u64);
    let x = g.domain().sample_point(&mut rng, 1e-3);
    let reach = spec.length.min(0.8 * g.domain().clearance(&x));
    if idx.is_multiple_of(2) {
        let w = random_unit(&mut rng, n);
        let s = quad_form(&g.metric(&x)?, &w).sqrt();
        let length = reach * rng.random_range(0.5..1.0);
        Ok((x, PathShape::Geodesic { v: w.iter().map(|a| a / s).collect(), length }))
    } else {
        let r = 0.5 * reach;
        let mut pts = vec![x.clone()];
        for _ in 0..4 {
            let u = random_unit(&mut rng, n);
            let rho = r * rng.random_range(0.3..1.0);
            pts.push(x.iter().zip(&u).map(|(a, b)| a + rho * b).collect());
        }
        Ok((x, PathShape::Spline(CatmullRom { points: pts })))
    }
}

/// Transport matrices at the quarter points of a sampled path.
fn checkpoints(g: &dyn MetricField, x: &[f64], shape: &PathShape, tol: f64) -> Result<(String, Vec<(Vec<f64>, Mat)>)> {
    let n = g.dim();
    let id = Mat::identity(n, n);
    match shape {
        PathShape::Geodesic { v, length } => {
            let mut out = Vec::new();
            let (mut y, mut u, mut w) = (x.to_vec(), v.iter().map(|a| a * length / 4.0).collect::<Vec<_>>(), id);
            for _ in 0..4 {
                let end = transport_geodesic(g, &y, &u, &w, tol)?;
                y = end.x;
                u = end.v;
                w = end.w;
                out.push((y.clone(), w.clone()));
            }
            Ok((format!("geodesic(length={length:.4})"), out))
        }
        PathShape::Spline(c) => {
            let ws = transport_curve(g, c, &id, tol)?;
            let pts = (0..c.pieces()).map(|k| c.point(k, 1.0));
            Ok((c.describe(), pts.zip(ws).collect()))
        }
    }
}

fn check_path(
    f: &dyn FinslerField,
    g: &dyn MetricField,
    spec: &BerwaldSpec,
    idx: usize,
) -> Result<Option<PathOutcome>> {
    let n = g.dim();
    let (x, shape) = sample_path(g, spec, idx)?;
    let (desc, cps) = match checkpoints(g, &x, &shape, spec.ode_tol) {
        Ok(c) => c,
        Err(GeomError::PathExited { .. }) | Err(GeomError::Precondition(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7e57);
    rng.set_stream(idx as u64);
    let vecs: Vec<Vec<f64>> = (0..spec.vectors.max(1)).map(|_| random_unit(&mut rng, n)).collect();
    let fx = f.fiber(&x)?;
    let gx = g.metric(&x)?;
    let gnorm = gx.norm();
    let mut out = PathOutcome { defect: 0.0, metric_defect: 0.0, witness: None };
    for (y, p) in &cps {
        let fy = f.fiber(y)?;
        let gy = g.metric(y)?;
        let md = (p.transpose() * &gy * p - &gx).norm() / gnorm;
        out.metric_defect = out.metric_defect.max(md);
        for u in &vecs {
            let pu: Vec<f64> = (p * Mat::from_column_slice(n, 1, u)).iter().copied().collect();
            let f0 = fx.eval(u);
            let d = (fy.eval(&pu) - f0).abs() / f0;
            if d > out.defect || out.witness.is_none() {
                out.defect = d;
                out.witness = Some(BerwaldWitness {
                    path: format!("#{idx} {desc}"),
                    start: x.clone(),
                    end: y.clone(),
                    vector: u.clone(),
                    defect: d,
                });
            }
        }
    }
    Ok(Some(out))
}

/// Samples geodesic and spline paths and measures how far transport in
/// the Levi-Civita connection of `g` is from preserving `F`.
pub fn berwald_check(f: &dyn FinslerField, g: &dyn MetricField, spec: &BerwaldSpec) -> Result<BerwaldReport> {
    if f.dim() != g.dim() {
        return Err(GeomError::Dimension { expected: g.dim(), got: f.dim() });
    }
    let results: Vec<Result<Option<PathOutcome>>> =
        (0..spec.paths).into_par_iter().map(|i| check_path(f, g, spec, i)).collect();
    let mut report = BerwaldReport {
        max_defect: 0.0,
        metric_defect: 0.0,
        tol: spec.tol,
        pass: false,
        paths_sampled: spec.paths,
        paths_used: 0,
        paths_exited: 0,
        witness: None,
    };
    for r in results {
        match r? {
            None => report.paths_exited += 1,
            Some(o) => {
                report.paths_used += 1;
                report.metric_defect = report.metric_defect.max(o.metric_defect);
                if report.witness.is_none() || o.defect > report.max_defect {
                    report.max_defect = o.defect;
                    report.witness = o.witness;
                }
            }
        }
    }
    report.pass = report.paths_used > 0 && report.max_defect <= spec.tol;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct CanonicalReport {
    pub berwald: BerwaldReport,
    pub metric_defect: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Transport in the Levi-Civita connection of the Binet-Legendre field
/// must preserve both `F` and the Binet-Legendre metric itself.
pub fn canonical_connection_check(
    f: Arc<dyn FinslerField>,
    integ: BlIntegrator,
    spec: &BerwaldSpec,
) -> Result<CanonicalReport> {
    let g = bl_field(f.clone(), Some(integ));
    let berwald = berwald_check(f.as_ref(), &g, spec)?;
    let metric_defect = berwald.metric_defect;
    let pass = berwald.pass && metric_defect <= spec.tol;
    Ok(CanonicalReport { berwald, metric_defect, tol: spec.tol, pass })
}

/// Loop family for [`holonomy_generators`].
#[derive(Clone, Debug)]
pub struct LoopSpec {
    /// Loop sizes as fractions of `min(clearance, 1)`.
    pub scales: Vec<f64>,
    pub triangles: usize,
    pub seed: u64,
    pub ode_tol: f64,
}

impl Default for LoopSpec {
    fn default() -> Self {
        LoopSpec { scales: vec![1e-2, 3e-2, 1e-1], triangles: 20, seed: 0, ode_tol: 1e-11 }
    }
}

#[derive(Clone, Debug)]
pub struct LoopTransport {
    pub descriptor: String,
    /// Transport in the frame basis.
    pub matrix: Mat,
    pub orthogonality_defect: f64,
}

#[derive(Clone, Debug)]
pub struct HolonomySample {
    pub base: Vec<f64>,
    /// Columns form a `g`-orthonormal basis at `base`.
    pub frame: Mat,
    pub loops: Vec<LoopTransport>,
    pub skipped: Vec<String>,
}

impl HolonomySample {
    pub fn max_orthogonality_defect(&self) -> f64 {
        self.loops.iter().map(|l| l.orthogonality_defect).fold(0.0, f64::max)
    }
}

enum LoopKind {
    Rectangle { i: usize, j: usize, h: f64 },
    Triangle { k: usize, r: f64 },
}

impl fmt::Display for LoopKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoopKind::Rectangle { i, j, h } => write!(f, "rect({},{})@{h:.3e}", i + 1, j + 1),
            LoopKind::Triangle { k, r } => write!(f, "tri{k:03}@{r:.3e}"),
        }
    }
}

fn triangle_transport(g: &dyn MetricField, x: &[f64], k: usize, r: f64, spec: &LoopSpec) -> Result<Mat> {
    let n = g.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1000 + k as u64);
    let w1: Vec<f64> = random_unit(&mut rng, n).iter().map(|a| a * r).collect();
    let w2: Vec<f64> = random_unit(&mut rng, n).iter().map(|a| a * r).collect();
    let id = Mat::identity(n, n);
    let tol = spec.ode_tol;
    let a = transport_geodesic(g, x, &w1, &id, tol)?;
    let back = geodesic_flow(g, x, &w2, 1.0, None, tol)?;
    if back.termination != Termination::HorizonReached {
        return Err(GeomError::PathExited { arclength: back.t });
    }
    let v12 = geodesic_between(g, &a.x, &back.x, tol)?;
    let b = transport_geodesic(g, &a.x, &v12, &a.w, tol)?;
    let ret: Vec<f64> = back.v.iter().map(|c| -c).collect();
    let c = transport_geodesic(g, &back.x, &ret, &b.w, tol)?;
    Ok(c.w)
}

/// Transports a frame around coordinate rectangles and geodesic triangles at `x`.
pub fn holonomy_generators(g: &dyn MetricField, x: &[f64], spec: &LoopSpec) -> Result<HolonomySample> {
    let n = g.dim();
    let gx = g.metric(x)?;
    let frame = orthonormal_frame(&gx).ok_or_else(|| GeomError::NotPositiveDefinite { point: x.to_vec() })?;
    let inv = frame.clone().try_inverse().ok_or_else(|| GeomError::Numerical("singular frame".into()))?;
    let reference = g.domain().clearance(x).min(1.0);
    let mut kinds = Vec::new();
    for &s in &spec.scales {
        for i in 0..n {
            for j in i + 1..n {
                kinds.push(LoopKind::Rectangle { i, j, h: s * reference });
            }
        }
    }
    for k in 0..spec.triangles {
        let s = spec.scales[k % spec.scales.len().max(1)];
        kinds.push(LoopKind::Triangle { k, r: s * reference });
    }
    let id = Mat::identity(n, n);
    let results: Vec<(String, Result<Mat>)> = kinds
        .par_iter()
        .map(|kind| {
            let p = match kind {
                LoopKind::Rectangle { i, j, h } => {
                    transport_curve(g, &Polyline::rectangle(x, *i, *j, *h), &id, spec.ode_tol)
                        .map(|mut v| v.pop().expect("rectangle has four pieces"))
                }
                LoopKind::Triangle { k, r } => triangle_transport(g, x, *k, *r, spec),
            };
            (kind.to_string(), p)
        })
        .collect();
    let mut loops = Vec::new();
    let mut skipped = Vec::new();
    for ((desc, p), kind) in results.into_iter().zip(&kinds) {
        match (p, kind) {
            (Ok(p), _) => {
                let h = &inv * p * &frame;
                let orthogonality_defect = (h.transpose() * &h - Mat::identity(n, n)).norm();
                loops.push(LoopTransport { descriptor: desc, matrix: h, orthogonality_defect });
            }
            (Err(e), LoopKind::Rectangle { .. }) => return Err(e),
            (Err(e), LoopKind::Triangle { .. }) => skipped.push(format!("{desc}: {e}")),
        }
    }
    loops.sort_by(|a, b| a.descriptor.cmp(&b.descriptor));
    Ok(HolonomySample { base: x.to_vec(), frame, loops, skipped })
}

#[derive(Clone, Debug)]
pub struct Subspace {
    /// Orthonormal columns in frame coordinates.
    pub basis: Mat,
    /// Eigenvalue of the generic commutant element on this block.
    pub eigenvalue: Option<f64>,
}

impl Subspace {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }
}

#[derive(Clone, Debug)]
pub struct HolonomyDecomposition {
    pub base: Vec<f64>,
    pub frame: Mat,
    /// Index 0 is the trivial-action factor `V₀`, possibly of dimension 0.
    pub subspaces: Vec<Subspace>,
    pub generators: usize,
    pub warnings: Vec<String>,
}

impl HolonomyDecomposition {
    pub fn dims(&self) -> Vec<usize> {
        self.subspaces.iter().map(Subspace::dim).collect()
    }

    /// Basis of subspace `i` in chart coordinates (`g`-orthonormal columns).
    pub fn chart_basis(&self, i: usize) -> Mat {
        &self.frame * &self.subspaces[i].basis
    }

    /// Largest off-block entry of any sampled matrix and largest deviation
    /// from the identity on `V₀`.
    pub fn defects(&self, hs: &HolonomySample) -> (f64, f64) {
        let mut off = 0.0f64;
        let mut triv = 0.0f64;
        for l in &hs.loops {
            for (a, sa) in self.subspaces.iter().enumerate() {
                for (b, sb) in self.subspaces.iter().enumerate() {
                    if a != b && sa.dim() > 0 && sb.dim() > 0 {
                        off = off.max(crate::linalg::max_abs(&(sa.basis.transpose() * &l.matrix * &sb.basis)));
                    }
                }
            }
            let v0 = &self.subspaces[0].basis;
            if v0.ncols() > 0 {
                triv = triv.max(crate::linalg::max_abs(&(&l.matrix * v0 - v0)));
            }
        }
        (off, triv)
    }
}

const COMMUTANT_SEED: u64 = 0xc0117;

/// Splits the frame space into the trivial factor and the blocks cut out
/// by a generic symmetric element of the commutant of the sampled holonomy.
pub fn invariant_decomposition(hs: &HolonomySample, tol: f64) -> Result<HolonomyDecomposition> {
    if hs.loops.is_empty() {
        return Err(GeomError::Precondition("no holonomy matrices sampled".into()));
    }
    let n = hs.frame.nrows();
    let id = Mat::identity(n, n);
    let gens: Vec<Mat> = hs
        .loops
        .iter()
        .filter_map(|l| {
            let b = &l.matrix - &id;
            let nb = b.norm();
            (nb > 1e-9).then(|| b / nb)
        })
        .collect();
    let mut warnings = Vec::new();
    let done = |subspaces, warnings| HolonomyDecomposition {
        base: hs.base.clone(),
        frame: hs.frame.clone(),
        subspaces,
        generators: gens.len(),
        warnings,
    };
    if gens.is_empty() {
        return Ok(done(vec![Subspace { basis: id, eigenvalue: None }], warnings));
    }
    let m = gens.len();
    let thr = tol * (m as f64).sqrt();
    let stacked = Mat::from_fn(m * n, n, |r, c| gens[r / n][(r % n, c)]);
    let v0 = null_space(&stacked, thr);
    let comp = if v0.ncols() == 0 { id.clone() } else { null_space(&v0.transpose(), 1e-8) };
    let k = comp.ncols();
    let mut subspaces = vec![Subspace { basis: v0, eigenvalue: None }];
    if k == 0 {
        return Ok(done(subspaces, warnings));
    }
    let restricted: Vec<Mat> = gens.iter().map(|b| comp.transpose() * b * &comp).collect();
    let mut sym_basis = Vec::new();
    for p in 0..k {
        for q in p..k {
            let mut e = Mat::zeros(k, k);
            let val = if p == q { 1.0 } else { std::f64::consts::FRAC_1_SQRT_2 };
            e[(p, q)] = val;
            e[(q, p)] = val;
            sym_basis.push(e);
        }
    }
    let mut system = Mat::zeros(m * k * k, sym_basis.len());
    for (c, e) in sym_basis.iter().enumerate() {
        for (a, b) in restricted.iter().enumerate() {
            let comm = e * b - b * e;
            for (r, v) in comm.iter().enumerate() {
                system[(a * k * k + r, c)] = *v;
            }
        }
    }
    let commutant = null_space(&system, thr);
    let mut rng = ChaCha8Rng::seed_from_u64(COMMUTANT_SEED);
    let mut x = Mat::zeros(k, k);
    for r in 0..commutant.ncols() {
        let c: f64 = rng.random_range(-1.0..1.0);
        for (s, e) in sym_basis.iter().enumerate() {
            x += e * (c * commutant[(s, r)]);
        }
    }
    if commutant.ncols() == 0 {
        warnings.push("empty commutant; identity assumed".into());
        x = Mat::identity(k, k);
    }
    let (vals, vecs) = sym_eigen(&x);
    let scale = vals.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let gap = tol * scale;
    let mut groups: Vec<Vec<usize>> = vec![vec![0]];
    for i in 1..k {
        let d = vals[i] - vals[i - 1];
        if d > gap {
            if d < 100.0 * gap {
                warnings.push(format!("eigenvalue gap {d:.2e} close to the grouping tolerance"));
            }
            groups.push(vec![i]);
        } else {
            groups.last_mut().expect("groups start non-empty").push(i);
        }
    }
    let mut blocks: Vec<Subspace> = groups
        .iter()
        .map(|grp| {
            let mut b = Mat::zeros(k, grp.len());
            for (c, &i) in grp.iter().enumerate() {
                b.set_column(c, &vecs.column(i));
            }
            let ev = grp.iter().map(|&i| vals[i]).sum::<f64>() / grp.len() as f64;
            Subspace { basis: &comp * b, eigenvalue: Some(ev) }
        })
        .collect();
    blocks.sort_by(|a, b| {
        a.dim().cmp(&b.dim()).then(a.eigenvalue.unwrap_or(0.0).total_cmp(&b.eigenvalue.unwrap_or(0.0)))
    });
    subspaces.extend(blocks);
    Ok(done(subspaces, warnings))
}

/// `F(x, v) = N(‖v₀‖, …, ‖vₘ‖)` where `vᵢ` is the component of `v` in the
/// parallel transport of the `i`-th invariant subspace along the straight
/// ray from the decomposition's base point. Empty subspaces get no slot.
pub struct HolonomyInvariantFinsler {
    g: Arc<dyn MetricField>,
    base: Vec<f64>,
    /// All nonempty subspace bases side by side, in chart coordinates.
    frame: Mat,
    blocks: Vec<std::ops::Range<usize>>,
    outer: crate::norms::MinkowskiNorm,
    tol: f64,
}

fn symmetric_under_swap(n: &crate::norms::MinkowskiNorm, i: usize, j: usize) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a4b);
    (0..64).all(|_| {
        let v: Vec<f64> = (0..n.dim()).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut w = v.clone();
        w.swap(i, j);
        let (a, b) = (n.eval(&v), n.eval(&w));
        (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300)
    })
}

pub fn holonomy_invariant_finsler(
    g: Arc<dyn MetricField>,
    dec: &HolonomyDecomposition,
    outer: crate::norms::MinkowskiNorm,
) -> Result<HolonomyInvariantFinsler> {
    let n = g.dim();
    let kept: Vec<usize> = (0..dec.subspaces.len()).filter(|&i| dec.subspaces[i].dim() > 0).collect();
    if outer.dim() != kept.len() {
        return Err(GeomError::Dimension { expected: kept.len(), got: outer.dim() });
    }
    for (a, &i) in kept.iter().enumerate() {
        for (b, &j) in kept.iter().enumerate().skip(a + 1) {
            if i > 0 && dec.subspaces[i].dim() == dec.subspaces[j].dim() && !symmetric_under_swap(&outer, a, b) {
                return Err(GeomError::Precondition(format!(
                    "outer norm is not symmetric under swapping slots {a} and {b} (subspaces of equal dimension)"
                )));
            }
        }
    }
    let mut frame = Mat::zeros(n, n);
    let mut blocks = Vec::new();
    let mut col = 0;
    for &i in &kept {
        let b = dec.chart_basis(i);
        frame.view_mut((0, col), (n, b.ncols())).copy_from(&b);
        blocks.push(col..col + b.ncols());
        col += b.ncols();
    }
    if col != n {
        return Err(GeomError::Precondition(format!("subspaces span {col} of {n} dimensions")));
    }
    Ok(HolonomyInvariantFinsler { g, base: dec.base.clone(), frame, blocks, outer, tol: 1e-10 })
}

impl HolonomyInvariantFinsler {
    /// The subspace frame transported to `x`.
    pub fn frame_at(&self, x: &[f64]) -> Result<Mat> {
        if x == self.base.as_slice() {
            return Ok(self.frame.clone());
        }
        let ray = Polyline { vertices: vec![self.base.clone(), x.to_vec()] };
        Ok(transport_curve(self.g.as_ref(), &ray, &self.frame, self.tol)?.remove(0))
    }
}

impl FinslerField for HolonomyInvariantFinsler {
    fn dim(&self) -> usize {
        self.g.dim()
    }
    fn domain(&self) -> &crate::domain::Domain {
        self.g.domain()
    }
    fn fiber(&self, x: &[f64]) -> Result<crate::norms::MinkowskiNorm> {
        let gx = self.g.metric(x)?;
        let w = self.frame_at(x)?;
        let winv = w
            .clone()
            .try_inverse()
            .ok_or_else(|| GeomError::Numerical("transported frame is singular".into()))?;
        let n = self.dim();
        let grams: Vec<Mat> = self
            .blocks
            .iter()
            .map(|r| {
                let wi = w.columns(r.start, r.len());
                wi.transpose() * &gx * wi
            })
            .collect();
        let blocks = self.blocks.clone();
        let outer = self.outer.clone();
        Ok(crate::norms::MinkowskiNorm::new(n, format!("holonomy-invariant {}", outer.name), true, move |v| {
            let c = &winv * nalgebra::DVector::from_column_slice(v);
            let norms: Vec<f64> = blocks
                .iter()
                .zip(&grams)
                .map(|(r, gi)| quad_form(gi, c.rows(r.start, r.len()).as_slice()).max(0.0).sqrt())
                .collect();
            outer.eval(&norms)
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Domain;
    use crate::geometry::ExprMetric;
    use std::f64::consts::PI;

    fn sphere() -> ExprMetric {
        let d = Domain::new(vec![0.05, f64::NEG_INFINITY], vec![PI - 0.05, f64::INFINITY], vec![]);
        ExprMetric::from_strs(d, &[&["1", "0"], &["0", "sin(x1)^2"]]).unwrap()
    }

    fn flat(n: usize) -> ExprMetric {
        let rows: Vec<Vec<&str>> = (0..n).map(|i| (0..n).map(|j| if i == j { "1" } else { "0" }).collect()).collect();
        let refs: Vec<&[&str]> = rows.iter().map(|r| r.as_slice()).collect();
        ExprMetric::from_strs(Domain::unbounded(n), &refs).unwrap()
    }

    #[test]
    fn flat_geodesic_is_a_line() {
        let p = integrate_geodesic(&flat(2), &[1.0, 2.0], &[3.0, 4.0], 5.0, 1e-10).unwrap();
        assert_eq!(p.termination, Termination::HorizonReached);
        assert!((p.end()[0] - 4.0).abs() < 1e-12 && (p.end()[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn great_circle_closes() {
        let g = sphere();
        let p = integrate_geodesic(&g, &[PI / 2.0, 0.0], &[0.0, 1.0], 2.0 * PI, 1e-12).unwrap();
        assert!((p.end()[0] - PI / 2.0).abs() < 1e-6 && (p.end()[1] - 2.0 * PI).abs() < 1e-6);
        assert!(p.speed_drift(&g).unwrap() < 1e-8);
    }

    #[test]
    fn latitude_circle_reverses_vectors() {
        let g = sphere();
        let th = PI / 3.0;
        let c = Polyline { vertices: vec![vec![th, 0.0], vec![th, 2.0 * PI]] };
        let w = transport_curve(&g, &c, &Mat::from_column_slice(2, 1, &[1.0, 0.0]), 1e-12).unwrap();
        assert!((w[0][(0, 0)] + 1.0).abs() < 1e-8 && w[0][(1, 0)].abs() < 1e-8);
    }

    #[test]
    fn shooting_recovers_velocity() {
        let g = sphere();
        let x = [1.0, 0.2];
        let v = [0.3, -0.4];
        let end = geodesic_flow(&g, &x, &v, 1.0, None, 1e-12).unwrap();
        let got = geodesic_between(&g, &x, &end.x, 1e-12).unwrap();
        assert!((got[0] - v[0]).abs() < 1e-7 && (got[1] - v[1]).abs() < 1e-7);
    }

    #[test]
    fn spline_is_c1_at_knots() {
        let c = CatmullRom { points: vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![2.0, -1.0], vec![2.5, 0.0]] };
        for k in 0..2 {
            let (a, b) = (c.velocity(k, 1.0), c.velocity(k + 1, 0.0));
            assert!((a[0] - b[0]).abs() < 1e-14 && (a[1] - b[1]).abs() < 1e-14);
            let (p, q) = (c.point(k, 1.0), c.point(k + 1, 0.0));
            assert!((p[0] - q[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn flat_holonomy_is_trivial() {
        let hs = holonomy_generators(&flat(3), &[0.1, 0.2, 0.3], &LoopSpec { triangles: 4, ..Default::default() })
            .unwrap();
        for l in &hs.loops {
            assert!(crate::linalg::max_abs(&(&l.matrix - Mat::identity(3, 3))) < 1e-10, "{}", l.descriptor);
        }
        let d = invariant_decomposition(&hs, 1e-6).unwrap();
        assert_eq!(d.dims(), vec![3]);
    }

    #[test]
    fn sphere_small_loop_matches_curvature() {
        // Transport around a small rectangle rotates by the enclosed area.
        let g = sphere();
        let (th, h) = (1.2, 1e-2);
        let c = Polyline::rectangle(&[th, 0.0], 0, 1, h);
        let p = transport_curve(&g, &c, &Mat::identity(2, 2), 1e-13).unwrap().pop().unwrap();
        let frame = orthonormal_frame(&g.metric(&[th, 0.0]).unwrap()).unwrap();
        let hm = frame.clone().try_inverse().unwrap() * p * frame;
        let area = ((th + h).cos() - th.cos()).abs() * h;
        let angle = hm[(1, 0)].atan2(hm[(0, 0)]).abs();
        assert!((angle - area).abs() < 10.0 * area * area, "{angle} vs {area}");
    }
}

