//! Boundary distance, the Fried metric `g_F = d∞⁻² g`, and the product
//! splitting diagnostics.
//!
//! `d∞` is either a closed form carried by the scene or a shooting
//! estimate. A shot geodesic yields broken paths "follow the geodesic to
//! arclength `s`, then go straight to the nearest chart boundary point"; each
//! is an actual path to the boundary, so every estimate is an upper bound.
//! The best direction is then refined by pattern search.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::domain::Domain;
use crate::geometry::{leaf_curvature_norms, MetricField, ProductStructure};
use crate::linalg::{gauss_legendre, norm, orthonormal_frame, quad_form, Mat};
use crate::norms::ScaleFn;
use crate::ode::Termination;
use crate::scene::{BoundaryModel, Scene};
use crate::transport::{geodesic_between_from, geodesic_flow, integrate_geodesic};
use crate::{GeomError, Result};

/// Direction-shooting parameters.
#[derive(Clone, Debug)]
pub struct ShootingSpec {
    pub directions: usize,
    pub horizon: f64,
    pub seed: u64,
    pub ode_tol: f64,
    /// Pattern-search refinement down to this step; `None` disables it.
    pub refine_to: Option<f64>,
}

impl Default for ShootingSpec {
    fn default() -> Self {
        ShootingSpec { directions: 256, horizon: 100.0, seed: 0, ode_tol: 1e-10, refine_to: Some(1e-9) }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DInfty {
    /// `+∞` when no boundary was reached within the horizon.
    pub value: f64,
    /// Best score over the direction set before refinement.
    pub unrefined: f64,
    /// Minimizing direction (unit `g`-length, chart coordinates).
    pub witness: Option<Vec<f64>>,
    pub witness_index: Option<usize>,
    /// Whether some shot geodesic left the domain.
    pub exited: bool,
    pub directions: usize,
    pub horizon: f64,
}

impl DInfty {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }

    pub fn display(&self) -> String {
        if self.value.is_finite() {
            format!("{}", self.value)
        } else {
            format!(">{}", self.horizon)
        }
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// Quasi-uniform Euclidean unit vectors; every prefix is itself quasi-uniform.
pub fn sphere_directions(n: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..n + 1).map(|_| rng.random_range(0.0..1.0)).collect();
    let frac = |a: f64| a - a.floor();
    let tau = std::f64::consts::TAU;
    (0..m)
        .map(|k| match n {
            1 => vec![if k % 2 == 0 { 1.0 } else { -1.0 }],
            2 => {
                let golden = 0.5 * (5f64.sqrt() - 1.0);
                let th = tau * frac(shift[0] + k as f64 * golden);
                vec![th.cos(), th.sin()]
            }
            3 => {
                let z = 1.0 - 2.0 * frac(radical_inverse(k as u64 + 1, 2) + shift[0]);
                let ph = tau * frac(radical_inverse(k as u64 + 1, 3) + shift[1]);
                let r = (1.0 - z * z).max(0.0).sqrt();
                vec![r * ph.cos(), r * ph.sin(), z]
            }
            _ => {
                let pairs = n.div_ceil(2);
                let mut v = Vec::with_capacity(2 * pairs);
                for p in 0..pairs {
                    let u1 = frac(radical_inverse(k as u64 + 1, PRIMES[2 * p % PRIMES.len()]) + shift[2 * p % n]).max(1e-12);
                    let u2 = frac(radical_inverse(k as u64 + 1, PRIMES[(2 * p + 1) % PRIMES.len()]) + shift[(2 * p + 1) % n]);
                    let r = (-2.0 * u1.ln()).sqrt();
                    v.push(r * (tau * u2).cos());
                    v.push(r * (tau * u2).sin());
                }
                v.truncate(n);
                let l = norm(&v).max(1e-300);
                v.into_iter().map(|a| a / l).collect()
            }
        })
        .collect()
}

/// `g`-length of the chart segment `a → b` by Gauss-Legendre quadrature;
/// `None` if a node leaves the domain.
pub fn segment_length(g: &dyn MetricField, a: &[f64], b: &[f64], nodes: usize) -> Option<f64> {
    let (t, w) = gauss_legendre(nodes);
    let d: Vec<f64> = b.iter().zip(a).map(|(p, q)| p - q).collect();
    let mut p = vec![0.0; a.len()];
    let mut acc = 0.0;
    for (ti, wi) in t.iter().zip(&w) {
        let s = 0.5 * (ti + 1.0);
        for i in 0..a.len() {
            p[i] = a[i] + s * d[i];
        }
        if !g.domain().contains(&p) {
            return None;
        }
        acc += 0.5 * wi * quad_form(&g.eval_unchecked(&p).ok()?, &d).max(0.0).sqrt();
    }
    Some(acc)
}

fn boundary_leg(g: &dyn MetricField, p: &[f64]) -> Option<f64> {
    let b = g.domain().nearest_boundary_point(p)?;
    segment_length(g, p, &b, 16)
}

/// Weight of the straight leg when ranking directions. Any weight ≥ 1 keeps
/// scores above the true escape length; a large one favours geodesics that
/// actually run into the boundary over "step aside, then walk straight".
const LEG_WEIGHT: f64 = 10.0;

/// Escape along the unit-speed geodesic from `x` with velocity `v`, followed
/// no further than `cutoff`: `(rank, length, exited)` where `length` is the
/// broken-path length `s + leg` at the point minimizing `rank = s + w·leg`.
fn escape_score(g: &dyn MetricField, x: &[f64], v: &[f64], cutoff: f64, spec: &ShootingSpec) -> (f64, f64, bool) {
    let horizon = spec.horizon.min(cutoff);
    let Ok(path) = integrate_geodesic(g, x, v, horizon, spec.ode_tol) else {
        return (f64::INFINITY, f64::INFINITY, false);
    };
    let dom = g.domain();
    let mut best = (f64::INFINITY, f64::INFINITY);
    let mut offer = |leg: f64, s: f64| {
        if s + LEG_WEIGHT * leg < best.0 {
            best = (s + LEG_WEIGHT * leg, s + leg);
        }
    };
    let k = path.points.len();
    for i in 0..k {
        let (p, tau, s) = (&path.points[i], &path.tangents[i], path.ts[i]);
        if i > 0 {
            if let Some(l) = boundary_leg(g, p) {
                offer(l, s);
            }
        }
        if i + 1 < k {
            let h = path.ts[i + 1] - s;
            if let Some(b) = dom.nearest_boundary_point(p) {
                let tt = crate::linalg::dot(tau, tau).max(1e-300);
                let d: Vec<f64> = b.iter().zip(p).map(|(a, c)| a - c).collect();
                let ts = crate::linalg::dot(&d, tau) / tt;
                if ts > 0.0 && ts < h {
                    let q: Vec<f64> = p.iter().zip(tau).map(|(a, c)| a + ts * c).collect();
                    if dom.contains(&q) {
                        if let Some(l) = boundary_leg(g, &q) {
                            offer(l, s + ts);
                        }
                    }
                }
            }
        }
    }
    let exited = path.termination == Termination::DomainExit;
    if exited {
        offer(boundary_leg(g, path.end()).unwrap_or(0.0), path.length);
    }
    (best.0, best.1, exited)
}

/// Shoots geodesics from `x` and returns the shortest escape found.
pub fn estimate_d_infty(g: &dyn MetricField, x: &[f64], spec: &ShootingSpec) -> Result<DInfty> {
    let n = g.dim();
    let gx = g.metric(x)?;
    let frame = orthonormal_frame(&gx).ok_or_else(|| GeomError::NotPositiveDefinite { point: x.to_vec() })?;
    let to_chart = |u: &[f64]| -> Vec<f64> { (&frame * Mat::from_column_slice(n, 1, u)).iter().copied().collect() };
    let dirs = sphere_directions(n, spec.directions, spec.seed);
    let mut best = f64::INFINITY;
    let mut value = f64::INFINITY;
    let mut idx = None;
    let mut exited = false;
    for (k, u) in dirs.iter().enumerate() {
        let (sc, len, ex) = escape_score(g, x, &to_chart(u), best, spec);
        exited |= ex;
        if sc < best {
            best = sc;
            value = len;
            idx = Some(k);
        }
    }
    let unrefined = value;
    let mut cur = idx.map(|k| dirs[k].clone());
    if let (Some(stop), Some(c)) = (spec.refine_to, cur.as_mut()) {
        let area = 2.0 * std::f64::consts::PI.powf(n as f64 / 2.0) / gamma_half(n);
        let mut delta = if n == 1 { 0.0 } else { (area / spec.directions.max(1) as f64).powf(1.0 / (n as f64 - 1.0)) };
        let mut evals = 0;
        while delta > stop && evals < 4000 {
            let mut improved = false;
            for i in 0..n {
                for sgn in [1.0, -1.0] {
                    let mut cand = c.clone();
                    cand[i] += sgn * delta;
                    let l = norm(&cand);
                    cand.iter_mut().for_each(|a| *a /= l);
                    let (sc, len, ex) = escape_score(g, x, &to_chart(&cand), best, spec);
                    evals += 1;
                    exited |= ex;
                    if sc < best {
                        best = sc;
                        value = len;
                        *c = cand;
                        improved = true;
                    }
                }
            }
            if !improved {
                delta *= 0.5;
            }
        }
    }
    Ok(DInfty {
        value,
        unrefined,
        witness: cur.map(|u| to_chart(&u)),
        witness_index: idx,
        exited,
        directions: spec.directions,
        horizon: spec.horizon,
    })
}

/// `Γ(n/2)`.
fn gamma_half(n: usize) -> f64 {
    let mut g = if n.is_multiple_of(2) { 1.0 } else { std::f64::consts::PI.sqrt() };
    let mut k = if n.is_multiple_of(2) { 1.0 } else { 0.5 };
    while k < n as f64 / 2.0 {
        g *= k;
        k += 1.0;
    }
    g
}

#[derive(Clone)]
pub enum ProfileMode {
    ClosedForm { f: ScaleFn, source: String },
    Shooting(ShootingSpec),
}

/// Pointwise `d∞` for a base metric.
#[derive(Clone)]
pub struct BoundaryProfile {
    pub metric: Arc<dyn MetricField>,
    pub mode: ProfileMode,
}

impl BoundaryProfile {
    pub fn closed_form(metric: Arc<dyn MetricField>, f: ScaleFn, source: &str) -> BoundaryProfile {
        BoundaryProfile { metric, mode: ProfileMode::ClosedForm { f, source: source.into() } }
    }

    pub fn shooting(metric: Arc<dyn MetricField>, spec: ShootingSpec) -> BoundaryProfile {
        BoundaryProfile { metric, mode: ProfileMode::Shooting(spec) }
    }

    /// The scene's closed form if it has one, otherwise shooting with `spec`.
    pub fn for_scene(scene: &Scene, spec: ShootingSpec) -> BoundaryProfile {
        match &scene.boundary {
            Some(BoundaryModel::ClosedForm { f, source }) => {
                BoundaryProfile::closed_form(scene.metric.clone(), f.clone(), source)
            }
            Some(BoundaryModel::Shooting { directions, horizon }) => BoundaryProfile::shooting(
                scene.metric.clone(),
                ShootingSpec { directions: *directions, horizon: *horizon, ..spec },
            ),
            None => BoundaryProfile::shooting(scene.metric.clone(), spec),
        }
    }

    pub fn mode_name(&self) -> String {
        match &self.mode {
            ProfileMode::ClosedForm { source, .. } => format!("closed-form: {source}"),
            ProfileMode::Shooting(s) => format!("shooting: {} directions, horizon {}", s.directions, s.horizon),
        }
    }

    pub fn d_infty(&self, x: &[f64]) -> Result<f64> {
        match &self.mode {
            ProfileMode::ClosedForm { f, .. } => {
                self.metric.check(x)?;
                f(x)
            }
            ProfileMode::Shooting(spec) => Ok(estimate_d_infty(self.metric.as_ref(), x, spec)?.value),
        }
    }
}

/// The Fried metric `d∞⁻² g` as a metric field.
#[derive(Clone)]
pub struct FriedScene {
    pub profile: BoundaryProfile,
}

impl FriedScene {
    pub fn new(profile: BoundaryProfile) -> FriedScene {
        FriedScene { profile }
    }

    pub fn base(&self) -> &dyn MetricField {
        self.profile.metric.as_ref()
    }
}

impl MetricField for FriedScene {
    fn dim(&self) -> usize {
        self.base().dim()
    }
    fn domain(&self) -> &Domain {
        self.base().domain()
    }
    fn eval_unchecked(&self, x: &[f64]) -> Result<Mat> {
        let d = self.profile.d_infty(x)?;
        if !(d.is_finite() && d > 0.0) {
            return Err(GeomError::Precondition(format!("d∞ unavailable at {x:?} (no boundary found)")));
        }
        Ok(self.base().eval_unchecked(x)? / (d * d))
    }
}

/// `g_F(x) = d∞(x)⁻² g(x)`.
pub fn fried_metric(scene: &FriedScene, x: &[f64]) -> Result<Mat> {
    scene.metric(x)
}

#[derive(Clone, Debug, Serialize)]
pub struct FriedDistance {
    pub value: f64,
    /// Length of an explicit path.
    pub upper: f64,
    pub lower: f64,
    /// Graph distance before polyline relaxation.
    pub lattice: f64,
    pub path: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, PartialEq)]
struct Node(f64, usize);

impl Eq for Node {}

impl Ord for Node {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn stencil(n: usize) -> Vec<Vec<i64>> {
    if n == 2 {
        let mut out = Vec::new();
        for a in -2i64..=2 {
            for b in -2i64..=2 {
                if (a, b) != (0, 0) && gcd(a, b) == 1 {
                    out.push(vec![a, b]);
                }
            }
        }
        return out;
    }
    let total = 3usize.pow(n as u32);
    (0..total)
        .map(|mut k| {
            (0..n)
                .map(|_| {
                    let d = (k % 3) as i64 - 1;
                    k /= 3;
                    d
                })
                .collect::<Vec<i64>>()
        })
        .filter(|o| o.iter().any(|&d| d != 0))
        .collect()
}

fn midpoint_length(g: &dyn MetricField, a: &[f64], b: &[f64]) -> Option<f64> {
    let m: Vec<f64> = a.iter().zip(b).map(|(p, q)| 0.5 * (p + q)).collect();
    if !g.domain().contains(&m) {
        return None;
    }
    let d: Vec<f64> = b.iter().zip(a).map(|(p, q)| p - q).collect();
    let v = quad_form(&g.eval_unchecked(&m).ok()?, &d);
    v.is_finite().then(|| v.max(0.0).sqrt())
}

/// Shortest lattice path from `x` to `y` over a box around both points.
fn lattice_path(g: &dyn MetricField, x: &[f64], y: &[f64], res: usize) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = x.len();
    let span: Vec<f64> = (0..n).map(|i| (x[i] - y[i]).abs()).collect();
    let ext = span.iter().cloned().fold(0.0, f64::max);
    let mut lo = vec![0.0; n];
    let mut step = vec![0.0; n];
    for i in 0..n {
        let s = span[i].max(0.5 * ext);
        lo[i] = x[i].min(y[i]) - 0.5 * s;
        step[i] = 2.0 * s / (res - 1) as f64;
    }
    let total = res.pow(n as u32);
    let coords = |mut k: usize| -> Vec<usize> {
        (0..n)
            .map(|_| {
                let c = k % res;
                k /= res;
                c
            })
            .collect()
    };
    let point = |c: &[usize]| -> Vec<f64> { (0..n).map(|i| lo[i] + c[i] as f64 * step[i]).collect() };
    let index = |c: &[i64]| -> Option<usize> {
        let mut k = 0usize;
        for i in (0..n).rev() {
            if c[i] < 0 || c[i] >= res as i64 {
                return None;
            }
            k = k * res + c[i] as usize;
        }
        Some(k)
    };
    let nearest = |p: &[f64]| -> Vec<i64> {
        (0..n).map(|i| (((p[i] - lo[i]) / step[i]).round() as i64).clamp(0, res as i64 - 1)).collect()
    };
    let (sx, sy) = (nearest(x), nearest(y));
    let (ix, iy) = (index(&sx).expect("in box"), index(&sy).expect("in box"));
    let px = point(&coords(ix));
    let py = point(&coords(iy));
    let lead = if px == x { Some(0.0) } else { midpoint_length(g, x, &px) };
    let tail = if py == y { Some(0.0) } else { midpoint_length(g, &py, y) };
    let (Some(lead), Some(tail)) = (lead, tail) else {
        return Err(GeomError::Precondition("endpoint is not connected to the lattice".into()));
    };
    let offsets = stencil(n);
    let mut dist = vec![f64::INFINITY; total];
    let mut prev = vec![usize::MAX; total];
    let mut heap = BinaryHeap::new();
    dist[ix] = 0.0;
    heap.push(Node(0.0, ix));
    while let Some(Node(d, k)) = heap.pop() {
        if d > dist[k] {
            continue;
        }
        if k == iy {
            break;
        }
        let c = coords(k);
        let p = point(&c);
        for o in &offsets {
            let cc: Vec<i64> = c.iter().zip(o).map(|(&a, &b)| a as i64 + b).collect();
            let Some(j) = index(&cc) else { continue };
            let q = point(&coords(j));
            if !g.domain().contains(&q) {
                continue;
            }
            if let Some(w) = midpoint_length(g, &p, &q) {
                let nd = d + w;
                if nd < dist[j] {
                    dist[j] = nd;
                    prev[j] = k;
                    heap.push(Node(nd, j));
                }
            }
        }
    }
    if !dist[iy].is_finite() {
        return Err(GeomError::Precondition("points are separated on the lattice".into()));
    }
    let mut path = vec![y.to_vec()];
    if py != y {
        path.push(py.clone());
    }
    let mut k = iy;
    while k != ix {
        k = prev[k];
        if k != ix {
            path.push(point(&coords(k)));
        }
    }
    if px != x {
        path.push(px);
    }
    path.push(x.to_vec());
    path.reverse();
    Ok((lead + dist[iy] + tail, path))
}

fn polyline_length(g: &dyn MetricField, pts: &[Vec<f64>], nodes: usize) -> Option<f64> {
    pts.windows(2).map(|w| segment_length(g, &w[0], &w[1], nodes)).sum()
}

/// `k + 1` points equally spaced in chart arclength along `pts`.
fn resample(pts: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let mut cum = vec![0.0];
    for w in pts.windows(2) {
        let d: Vec<f64> = w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect();
        cum.push(cum.last().unwrap() + norm(&d));
    }
    let total = *cum.last().unwrap();
    let mut out = Vec::with_capacity(k + 1);
    let mut seg = 0;
    for i in 0..=k {
        let s = total * i as f64 / k as f64;
        while seg + 1 < cum.len() - 1 && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push(pts[seg].iter().zip(&pts[seg + 1]).map(|(a, b)| a + t * (b - a)).collect());
    }
    out[0] = pts[0].clone();
    out[k] = pts[pts.len() - 1].clone();
    out
}

fn refine(pts: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * pts.len());
    for w in pts.windows(2) {
        out.push(w[0].clone());
        out.push(w[0].iter().zip(&w[1]).map(|(a, b)| 0.5 * (a + b)).collect());
    }
    out.push(pts[pts.len() - 1].clone());
    out
}

fn polyline_energy(g: &dyn MetricField, pts: &[Vec<f64>]) -> f64 {
    pts.windows(2)
        .map(|w| segment_length(g, &w[0], &w[1], 8).map_or(f64::INFINITY, |l| l * l))
        .sum()
}

/// Damped Newton minimization of the discrete energy `Σ L_i²` over all
/// interior vertices. Each segment contributes a `2n × 2n` block to the
/// Hessian, obtained by central differences.
fn relax(g: &dyn MetricField, pts: &mut [Vec<f64>], scale: f64) {
    let n = pts[0].len();
    let m = pts.len() - 1;
    if m < 2 {
        return;
    }
    let dim = (m - 1) * n;
    let h = 1e-5 * scale;
    let seg = |z: &[f64]| -> f64 { segment_length(g, &z[..n], &z[n..], 8).map_or(f64::INFINITY, |l| l * l) };
    let mut energy = polyline_energy(g, pts);
    let mut mu = 0.0;
    for _ in 0..50 {
        let mut grad = vec![0.0; dim];
        let mut hess = Mat::zeros(dim, dim);
        for s in 0..m {
            let z0: Vec<f64> = pts[s].iter().chain(&pts[s + 1]).copied().collect();
            let e0 = seg(&z0);
            let shifted = |moves: &[(usize, f64)]| {
                let mut z = z0.clone();
                for &(k, d) in moves {
                    z[k] += d;
                }
                seg(&z)
            };
            // Local variable k belongs to vertex s + k / n; endpoints are fixed.
            let global = |k: usize| -> Option<usize> {
                let v = s + k / n;
                (v >= 1 && v < m).then(|| (v - 1) * n + k % n)
            };
            for j in 0..2 * n {
                let Some(gj) = global(j) else { continue };
                let (fp, fm) = (shifted(&[(j, h)]), shifted(&[(j, -h)]));
                grad[gj] += (fp - fm) / (2.0 * h);
                hess[(gj, gj)] += (fp - 2.0 * e0 + fm) / (h * h);
                for k in 0..j {
                    let Some(gk) = global(k) else { continue };
                    let v = (shifted(&[(j, h), (k, h)]) - shifted(&[(j, h), (k, -h)]) - shifted(&[(j, -h), (k, h)])
                        + shifted(&[(j, -h), (k, -h)]))
                        / (4.0 * h * h);
                    hess[(gj, gk)] += v;
                    hess[(gk, gj)] += v;
                }
            }
        }
        if !grad.iter().all(|v| v.is_finite()) {
            return;
        }
        let gvec = Mat::from_column_slice(dim, 1, &grad);
        let step = loop {
            let damped = &hess + Mat::identity(dim, dim) * mu;
            match damped.cholesky() {
                Some(c) => break c.solve(&gvec),
                None => mu = if mu == 0.0 { 1e-8 * hess.diagonal().amax().max(1e-300) } else { mu * 10.0 },
            }
        };
        let mut lam = 1.0;
        let mut accepted = None;
        while lam > 1e-4 {
            let trial: Vec<Vec<f64>> = (0..=m)
                .map(|v| {
                    if v == 0 || v == m {
                        return pts[v].clone();
                    }
                    (0..n).map(|c| pts[v][c] - lam * step[((v - 1) * n + c, 0)]).collect()
                })
                .collect();
            let e = polyline_energy(g, &trial);
            if e <= energy {
                accepted = Some((trial, e));
                break;
            }
            lam *= 0.5;
        }
        let Some((trial, e)) = accepted else { return };
        let moved = lam * step.amax();
        pts.clone_from_slice(&trial);
        energy = e;
        mu *= 0.1;
        if moved < 1e-10 * scale {
            return;
        }
    }
}

/// Fried distance by a lattice shortest path refined into relaxed polylines
/// of 8, 16 and 32 segments.
pub fn fried_distance(scene: &FriedScene, x: &[f64], y: &[f64], resolution: usize) -> Result<FriedDistance> {
    let g: &dyn MetricField = scene;
    g.metric(x)?;
    g.metric(y)?;
    if x == y {
        return Ok(FriedDistance { value: 0.0, upper: 0.0, lower: 0.0, lattice: 0.0, path: vec![x.to_vec()] });
    }
    let res = resolution.max(5);
    let (lattice, path) = lattice_path(g, x, y, res)?;
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let scale = norm(&d);
    let mut pts = resample(&path, 8);
    relax(g, &mut pts, scale);
    let mut lens = Vec::new();
    for level in 0..3 {
        if level > 0 {
            pts = refine(&pts);
            relax(g, &mut pts, scale);
        }
        let l = polyline_length(g, &pts, 8)
            .ok_or_else(|| GeomError::Numerical("relaxed polyline left the domain".into()))?;
        lens.push(l);
    }
    let l32 = lens[2];
    let quad = (polyline_length(g, &pts, 16).unwrap_or(l32) - l32).abs();
    let upper = l32.max(polyline_length(g, &pts, 16).unwrap_or(l32));
    let value = (4.0 * l32 - lens[1]) / 3.0;
    let lower = value - (lens[1] - l32).abs() - quad;
    Ok(FriedDistance { value: value.min(upper), upper, lower, lattice, path: pts })
}

#[derive(Clone, Debug, Serialize)]
pub struct FriedBoundReport {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub d: f64,
    pub d_infty: f64,
    #[serde(rename = "d_F")]
    pub d_f: f64,
    pub d_f_bracket: (f64, f64),
    /// `d∞(x)(e^{d_F} − 1) − d`.
    pub bound_a_margin: f64,
    /// `d − d∞(x)(1 − e^{−d_F})`, only when `d < d∞(x)`.
    pub bound_b_margin: Option<f64>,
    pub tol: f64,
    pub pass: bool,
}

/// Base distance: straight chart segment on constant metrics, shooting otherwise.
pub fn base_distance(g: &dyn MetricField, x: &[f64], y: &[f64], tol: f64) -> Result<f64> {
    if x == y {
        return Ok(0.0);
    }
    if g.is_constant() {
        let d: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
        return Ok(quad_form(&g.metric(x)?, &d).sqrt());
    }
    let guess: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
    let v = geodesic_between_from(g, x, y, &guess, tol)?;
    Ok(quad_form(&g.metric(x)?, &v).sqrt())
}

/// Checks `d∞(1 − e^{−d_F}) ≤ d ≤ d∞(e^{d_F} − 1)` (the lower bound only when `d < d∞`).
pub fn fried_bound_check(scene: &FriedScene, x: &[f64], y: &[f64], resolution: usize, tol: f64) -> Result<FriedBoundReport> {
    let g = scene.base();
    let d = base_distance(g, x, y, 1e-12)?;
    let d_infty = scene.profile.d_infty(x)?;
    let fd = fried_distance(scene, x, y, resolution)?;
    let a = d_infty * fd.value.exp_m1() - d;
    let b = (d < d_infty).then(|| d + d_infty * (-fd.value).exp_m1());
    let pass = a >= -tol && b.is_none_or(|b| b >= -tol);
    Ok(FriedBoundReport {
        x: x.to_vec(),
        y: y.to_vec(),
        d,
        d_infty,
        d_f: fd.value,
        d_f_bracket: (fd.lower, fd.upper),
        bound_a_margin: a,
        bound_b_margin: b,
        tol,
        pass,
    })
}

#[derive(Clone, Debug)]
pub struct RectangleOptions {
    pub grid: usize,
    pub ode_tol: f64,
    pub tol: f64,
}

impl Default for RectangleOptions {
    fn default() -> Self {
        RectangleOptions { grid: 9, ode_tol: 1e-12, tol: 1e-5 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RectangleReport {
    /// `grid[i][j] = Φ(t_i, s_j)`.
    pub grid: Vec<Vec<Vec<f64>>>,
    pub ell: f64,
    pub degenerate: bool,
    /// Largest `|K|` of the induced metric at interior grid points.
    pub gauss_curvature: f64,
    /// Largest `d(x, Φ(t, s)) − √((t‖v₁‖)² + (s‖v₂‖)²)`.
    pub distance_excess: f64,
    pub tol: f64,
    pub pass: bool,
}

/// `γ₁(t)` and the transport of `v₂` along it; negative `t` runs backwards.
fn leg(g: &dyn MetricField, x: &[f64], v1: &[f64], v2: &[f64], t: f64, tol: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if t == 0.0 {
        return Ok((x.to_vec(), v2.to_vec()));
    }
    let dir: Vec<f64> = v1.iter().map(|a| a * t.signum()).collect();
    let w = Mat::from_column_slice(v2.len(), 1, v2);
    let end = geodesic_flow(g, x, &dir, t.abs(), Some(&w), tol)?;
    if end.termination != Termination::HorizonReached {
        return Err(GeomError::Precondition("rectangle edge leaves the domain".into()));
    }
    Ok((end.x, end.w.iter().copied().collect()))
}

/// `Φ(t, s_j)` and `∂_s Φ` for all `s_j`.
fn column(
    g: &dyn MetricField,
    x: &[f64],
    v1: &[f64],
    v2: &[f64],
    t: f64,
    ss: &[f64],
    tol: f64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let (mut p, mut u) = leg(g, x, v1, v2, t, tol)?;
    let mut out = Vec::with_capacity(ss.len());
    let mut s_prev = 0.0;
    for &s in ss {
        if s > s_prev && norm(&u) > 0.0 {
            let end = geodesic_flow(g, &p, &u, s - s_prev, None, tol)?;
            if end.termination != Termination::HorizonReached {
                return Err(GeomError::Precondition(format!(
                    "grid point Φ({t}, {s}) leaves the domain; ell is too large here"
                )));
            }
            p = end.x;
            u = end.v;
        }
        s_prev = s;
        out.push((p.clone(), u.clone()));
    }
    Ok(out)
}

/// Builds `Φ(t, s) = exp_{γ₁(t)}(s T(t))` on `[0, ℓ]²` and checks that it is
/// flat and no longer than the product Pythagoras bound.
pub fn flat_rectangle(
    g: &dyn MetricField,
    ps: &ProductStructure,
    profile: Option<&BoundaryProfile>,
    x: &[f64],
    v: &[f64],
    ell: f64,
    opts: &RectangleOptions,
) -> Result<RectangleReport> {
    let gx = g.metric(x)?;
    let v1 = ps.project(0, v);
    let v2: Vec<f64> = v.iter().zip(&v1).map(|(a, b)| a - b).collect();
    let (n1, n2) = (quad_form(&gx, &v1).sqrt(), quad_form(&gx, &v2).sqrt());
    if let Some(p) = profile {
        let d = p.d_infty(x)?;
        if ell * quad_form(&gx, v).sqrt() >= d {
            return Err(GeomError::Precondition(format!("ℓ|v| = {} is not below d∞ = {d}", ell * quad_form(&gx, v).sqrt())));
        }
    }
    let m = opts.grid.max(3);
    let h = ell / (m - 1) as f64;
    let ts: Vec<f64> = (0..m).map(|i| i as f64 * h).collect();
    let degenerate = n1 == 0.0 || n2 == 0.0;
    let delta = 1e-3 * ell;
    let mut grid = Vec::with_capacity(m);
    let mut e = vec![vec![0.0; m]; m];
    let mut f = vec![vec![0.0; m]; m];
    let mut gg = vec![vec![0.0; m]; m];
    for &t in &ts {
        let base = column(g, x, &v1, &v2, t, &ts, opts.ode_tol)?;
        grid.push(base.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>());
        if degenerate {
            continue;
        }
        let shifted: Vec<Vec<(Vec<f64>, Vec<f64>)>> = [2.0, 1.0, -1.0, -2.0]
            .iter()
            .map(|k| column(g, x, &v1, &v2, t + k * delta, &ts, opts.ode_tol))
            .collect::<Result<_>>()?;
        let i = grid.len() - 1;
        for j in 0..m {
            let phi_t: Vec<f64> = (0..x.len())
                .map(|c| {
                    (-shifted[0][j].0[c] + 8.0 * shifted[1][j].0[c] - 8.0 * shifted[2][j].0[c] + shifted[3][j].0[c])
                        / (12.0 * delta)
                })
                .collect();
            let (p, phi_s) = &base[j];
            let gp = g.eval_unchecked(p)?;
            e[i][j] = quad_form(&gp, &phi_t);
            f[i][j] = crate::linalg::bilinear(&gp, &phi_t, phi_s);
            gg[i][j] = quad_form(&gp, phi_s);
        }
    }
    let mut kmax = 0.0f64;
    if !degenerate {
        for i in 1..m - 1 {
            for j in 1..m - 1 {
                kmax = kmax.max(brioschi(&e, &f, &gg, i, j, h).abs());
            }
        }
    }
    let mut excess = f64::NEG_INFINITY;
    for (i, &t) in ts.iter().enumerate() {
        for (j, &s) in ts.iter().enumerate() {
            let y = &grid[i][j];
            let bound = ((t * n1).powi(2) + (s * n2).powi(2)).sqrt();
            let d = if y.as_slice() == x {
                0.0
            } else {
                let guess: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| t * a + s * b).collect();
                let w = geodesic_between_from(g, x, y, &guess, opts.ode_tol)?;
                quad_form(&gx, &w).sqrt()
            };
            excess = excess.max(d - bound);
        }
    }
    let pass = kmax <= opts.tol && excess <= opts.tol;
    Ok(RectangleReport { grid, ell, degenerate, gauss_curvature: kmax, distance_excess: excess, tol: opts.tol, pass })
}

/// Gauss curvature from the first fundamental form (Brioschi), by central
/// differences on a grid with spacing `h` in both parameters.
fn brioschi(e: &[Vec<f64>], f: &[Vec<f64>], g: &[Vec<f64>], i: usize, j: usize, h: f64) -> f64 {
    let dt = |a: &[Vec<f64>]| (a[i + 1][j] - a[i - 1][j]) / (2.0 * h);
    let ds = |a: &[Vec<f64>]| (a[i][j + 1] - a[i][j - 1]) / (2.0 * h);
    let dtt = |a: &[Vec<f64>]| (a[i + 1][j] - 2.0 * a[i][j] + a[i - 1][j]) / (h * h);
    let dss = |a: &[Vec<f64>]| (a[i][j + 1] - 2.0 * a[i][j] + a[i][j - 1]) / (h * h);
    let dts = |a: &[Vec<f64>]| (a[i + 1][j + 1] - a[i + 1][j - 1] - a[i - 1][j + 1] + a[i - 1][j - 1]) / (4.0 * h * h);
    let (ee, ff, gv) = (e[i][j], f[i][j], g[i][j]);
    let a = nalgebra::Matrix3::new(
        -0.5 * dss(e) + dts(f) - 0.5 * dtt(g),
        0.5 * dt(e),
        dt(f) - 0.5 * ds(e),
        ds(f) - 0.5 * dt(g),
        ee,
        ff,
        0.5 * ds(g),
        ff,
        gv,
    );
    let b = nalgebra::Matrix3::new(0.0, 0.5 * ds(e), 0.5 * dt(g), 0.5 * ds(e), ee, ff, 0.5 * dt(g), ff, gv);
    (a.determinant() - b.determinant()) / (ee * gv - ff * ff).powi(2)
}

#[derive(Clone, Debug)]
pub struct SplitSpec {
    pub shooting: ShootingSpec,
    pub curvature_tol: f64,
    /// Angles (radians) above this count as transversal.
    pub transversal_angle: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            shooting: ShootingSpec { directions: 64, refine_to: Some(1e-7), ..Default::default() },
            curvature_tol: 1e-8,
            transversal_angle: 1f64.to_radians(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SplitPoint {
    pub x: Vec<f64>,
    /// Squared curvature norm of each leaf.
    pub leaf_curvature: Vec<f64>,
    pub d_infty: f64,
    pub witness: Vec<f64>,
    /// Angle (radians) between the witness and each leaf.
    pub leaf_angles: Vec<f64>,
    pub consistent: bool,
}

impl SplitPoint {
    /// Angle between the witness and the first leaf, in degrees.
    pub fn witness_angle_deg(&self) -> f64 {
        self.leaf_angles[0].to_degrees()
    }
}

/// `g`-angle between `w` and the coordinate block `i` (block-diagonal `g`).
fn leaf_angle(ps: &ProductStructure, gx: &Mat, w: &[f64], i: usize) -> f64 {
    let p = ps.project(i, w);
    let c = (quad_form(gx, &p) / quad_form(gx, w)).clamp(0.0, 1.0).sqrt();
    c.acos()
}

/// At each point: leaf curvatures, the minimal-escape witness and its leaf
/// angles; consistent when every leaf the witness is transversal to is flat.
pub fn splitting_diagnostic(
    g: &dyn MetricField,
    ps: &ProductStructure,
    points: &[Vec<f64>],
    spec: &SplitSpec,
) -> Result<Vec<SplitPoint>> {
    points
        .iter()
        .map(|x| {
            let r = leaf_curvature_norms(ps, x)?;
            let est = estimate_d_infty(g, x, &spec.shooting)?;
            let w = est
                .witness
                .clone()
                .filter(|_| est.is_finite())
                .ok_or_else(|| GeomError::Precondition(format!("no escape witness found at {x:?}")))?;
            let gx = g.metric(x)?;
            let angles: Vec<f64> = (0..ps.blocks.len()).map(|i| leaf_angle(ps, &gx, &w, i)).collect();
            let consistent = angles.iter().zip(&r).all(|(a, ri)| *a <= spec.transversal_angle || *ri <= spec.curvature_tol);
            Ok(SplitPoint { x: x.clone(), leaf_curvature: r, d_infty: est.value, witness: w, leaf_angles: angles, consistent })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct LeafProbe {
    pub base: Vec<f64>,
    pub horizon: f64,
    pub geodesics: usize,
    pub all_reached_horizon: bool,
    /// Largest first-leaf curvature along the probe geodesics.
    pub max_r1: f64,
    pub d_infty: Vec<f64>,
    pub d_infty_spread: f64,
}

/// Follows geodesics inside the first-factor leaf through `x` and records
/// completeness, first-leaf curvature and `d∞` along them.
pub fn leaf_probe(
    g: &dyn MetricField,
    ps: &ProductStructure,
    x: &[f64],
    horizon: f64,
    shooting: &ShootingSpec,
) -> Result<LeafProbe> {
    let r = ps.blocks[0].0.clone();
    let k = r.len();
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for u in sphere_directions(k, 2 * k.max(1), shooting.seed) {
        let mut v = vec![0.0; x.len()];
        v[r.clone()].copy_from_slice(&u);
        dirs.push(v);
    }
    let mut all = true;
    let mut max_r1 = 0.0f64;
    let mut d_vals = vec![estimate_d_infty(g, x, shooting)?.value];
    for v in &dirs {
        let path = integrate_geodesic(g, x, v, horizon, shooting.ode_tol)?;
        all &= path.termination == Termination::HorizonReached;
        let stride = (path.points.len() / 16).max(1);
        for p in path.points.iter().step_by(stride) {
            max_r1 = max_r1.max(leaf_curvature_norms(ps, p)?[0]);
        }
        for frac in [1e-3, 1e-1, 1.0] {
            let target = frac * path.length;
            let idx = path.ts.iter().position(|&t| t >= target).unwrap_or(path.ts.len() - 1);
            d_vals.push(estimate_d_infty(g, &path.points[idx], shooting)?.value);
        }
    }
    let hi = d_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = d_vals.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(LeafProbe {
        base: x.to_vec(),
        horizon,
        geodesics: dirs.len(),
        all_reached_horizon: all,
        max_r1,
        d_infty: d_vals,
        d_infty_spread: hi - lo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Scene;

    fn punctured() -> Scene {
        Scene::builtin("punctured-plane").unwrap()
    }

    #[test]
    fn directions_are_unit_and_prefix_stable() {
        for n in 1..=5 {
            let a = sphere_directions(n, 40, 3);
            let b = sphere_directions(n, 80, 3);
            assert_eq!(&b[..40], &a[..]);
            assert!(a.iter().all(|u| (norm(u) - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn punctured_plane_escape_length() {
        let s = punctured();
        let spec = ShootingSpec { directions: 64, ..Default::default() };
        let est = estimate_d_infty(s.metric.as_ref(), &[1.2, -1.6], &spec).unwrap();
        assert!((est.value - 2.0).abs() < 1e-3, "{est:?}");
        let w = est.witness.clone().unwrap();
        assert!((w[0] + 0.6).abs() < 1e-3 && (w[1] - 0.8).abs() < 1e-3, "{w:?} {est:?}");
        assert!(est.unrefined >= est.value);
    }

    #[test]
    fn complete_plane_reports_horizon() {
        let s = Scene::builtin("euclidean").unwrap();
        let spec = ShootingSpec { directions: 16, horizon: 10.0, ..Default::default() };
        let est = estimate_d_infty(s.metric.as_ref(), &[0.3, 0.1], &spec).unwrap();
        assert!(!est.is_finite() && !est.exited);
        assert_eq!(est.display(), ">10");
    }

    #[test]
    fn fried_metric_on_punctured_plane() {
        let s = punctured();
        let fs = FriedScene::new(BoundaryProfile::for_scene(&s, ShootingSpec::default()));
        let m = fried_metric(&fs, &[0.0, 2.0]).unwrap();
        assert!((m[(0, 0)] - 0.25).abs() < 1e-15 && m[(0, 1)] == 0.0);
    }

    #[test]
    fn radial_fried_distance_is_log_ratio() {
        let s = punctured();
        let fs = FriedScene::new(BoundaryProfile::for_scene(&s, ShootingSpec::default()));
        let x = [0.6, 0.8];
        let y = [0.6 * std::f64::consts::E, 0.8 * std::f64::consts::E];
        let d = fried_distance(&fs, &x, &y, 33).unwrap();
        assert!((d.value - 1.0).abs() < 1e-6, "{d:?}");
        assert!(d.lower <= 1.0 + 1e-9 && d.upper >= 1.0 - 1e-9);
    }

    #[test]
    fn brioschi_of_round_sphere() {
        // E = 1, F = 0, G = sin²t on a grid: K = 1.
        let h = 1e-3;
        let t0 = 1.0;
        let mk = |f: &dyn Fn(f64) -> f64| -> Vec<Vec<f64>> {
            (0..3).map(|i| vec![f(t0 + (i as f64 - 1.0) * h); 3]).collect()
        };
        let e = mk(&|_| 1.0);
        let f = mk(&|_| 0.0);
        let g = mk(&|t: f64| t.sin().powi(2));
        assert!((brioschi(&e, &f, &g, 1, 1, h) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn line_x_punctured_witness_lies_in_the_punctured_factor() {
        let s = Scene::builtin("line-x-punctured").unwrap();
        let spec = ShootingSpec { directions: 96, ..Default::default() };
        let est = estimate_d_infty(s.metric.as_ref(), &[0.4, 0.6, 0.8], &spec).unwrap();
        assert!((est.value - 1.0).abs() < 1e-3, "{est:?}");
        let w = est.witness.unwrap();
        assert!(w[0].abs() < 1e-3 && (w[1] + 0.6).abs() < 1e-3 && (w[2] + 0.8).abs() < 1e-3, "{w:?}");
    }

    #[test]
    fn hopf_fried_metric_is_deck_invariant() {
        let s = Scene::builtin("hopf-ell4").unwrap();
        let fs = FriedScene::new(BoundaryProfile::for_scene(&s, ShootingSpec::default()));
        let d = &s.decks[0];
        for x in [[0.3, -0.7], [1.4, 0.2], [-0.05, 0.9]] {
            let y = d.apply(&x);
            let a = fried_metric(&fs, &x).unwrap();
            let b = fried_metric(&fs, &y).unwrap() * (d.coefficient * d.coefficient);
            assert!((a - b).abs().max() < 1e-14);
        }
    }

    #[test]
    fn fried_distance_is_symmetric_and_vanishes_on_the_diagonal() {
        let s = punctured();
        let fs = FriedScene::new(BoundaryProfile::for_scene(&s, ShootingSpec::default()));
        let (x, y) = ([0.5, 0.2], [-0.3, 0.9]);
        assert_eq!(fried_distance(&fs, &x, &x, 17).unwrap().value, 0.0);
        let a = fried_distance(&fs, &x, &y, 17).unwrap().value;
        let b = fried_distance(&fs, &y, &x, 17).unwrap().value;
        assert!((a - b).abs() < 1e-6, "{a} {b}");
        let dth = (0.9f64.atan2(-0.3) - 0.2f64.atan2(0.5)).abs();
        let exact = ((0.9f64.hypot(0.3) / 0.5f64.hypot(0.2)).ln().powi(2) + dth * dth).sqrt();
        assert!((a - exact).abs() < 1e-4, "{a} {exact}");
    }

    #[test]
    fn radial_pairs_nearly_saturate_the_upper_bound() {
        let s = punctured();
        let fs = FriedScene::new(BoundaryProfile::for_scene(&s, ShootingSpec::default()));
        let r = fried_bound_check(&fs, &[0.6, 0.8], &[1.8, 2.4], 17, 1e-6).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.bound_a_margin.abs() < 1e-5, "{r:?}");
    }

    #[test]
    fn flat_rectangles_on_products() {
        let s = Scene::builtin("line-x-punctured").unwrap();
        let ps = s.product.as_ref().unwrap();
        let prof = BoundaryProfile::for_scene(&s, ShootingSpec::default());
        let opts = RectangleOptions { grid: 5, ..Default::default() };
        let r = flat_rectangle(s.metric.as_ref(), ps, Some(&prof), &[0.0, 1.0, 0.5], &[1.0, -0.3, 0.4], 0.5, &opts).unwrap();
        assert!(r.pass && !r.degenerate, "{r:?}");
        let d = flat_rectangle(s.metric.as_ref(), ps, Some(&prof), &[0.0, 1.0, 0.5], &[1.0, 0.0, 0.0], 0.5, &opts).unwrap();
        assert!(d.pass && d.degenerate);
        let far = flat_rectangle(s.metric.as_ref(), ps, Some(&prof), &[0.0, 1.0, 0.5], &[1.0, -0.3, 0.4], 5.0, &opts);
        assert!(far.is_err());
    }

    #[test]
    fn bumped_product_splitting_is_consistent() {
        let s = Scene::builtin("line-x-bumped-punctured").unwrap();
        let ps = s.product.as_ref().unwrap();
        let pts = vec![vec![0.3, 0.5, 0.1], vec![-1.0, -0.2, 0.6]];
        let spec = SplitSpec { shooting: ShootingSpec { directions: 48, refine_to: Some(1e-6), ..Default::default() }, ..Default::default() };
        let out = splitting_diagnostic(s.metric.as_ref(), ps, &pts, &spec).unwrap();
        for p in &out {
            assert!(p.consistent, "{p:?}");
            assert!(p.leaf_curvature[0] == 0.0 && p.leaf_curvature[1] > 0.1);
            assert!(p.witness_angle_deg() > 89.0);
            let r = p.x[1].hypot(p.x[2]);
            assert!((p.d_infty - (r + r.powi(3) / 3.0)).abs() < 1e-3, "{p:?}");
        }
    }
}
