//! Binet-Legendre metrics.
//!
//! For a norm `F` with unit ball `K`, the dual inner product is
//! `g*(ξ, η) = (n + 2) / vol(K) · ∫_K ξ(v) η(v) dv` and the Binet-Legendre
//! metric is its inverse. Three integrators are available:
//!
//! * `Lattice`: adaptive refinement of a cubic grid over a bounding box.
//!   Cells are classified with the Lipschitz bound of `F`, so only cells
//!   near `∂K` are refined; cells wholly inside contribute exact box moments.
//! * `MonteCarlo`: uniform samples in the bounding box, in fixed chunks with
//!   one RNG stream per chunk so the result does not depend on threading.
//! * `Radial`: integration over directions using
//!   `∫_K v v^T dv = ∫_S u u^T F(u)^{-(n+2)} / (n+2) dσ`. It is smooth in the
//!   base point, which makes it the right choice for metric fields that get
//!   differentiated.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{GeomError, Result};
use crate::geometry::MetricField;
use crate::linalg::{gauss_legendre, max_abs, symmetrize, Mat};
use crate::norms::{FinslerField, MinkowskiNorm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlBackend {
    Lattice,
    MonteCarlo,
    Radial,
}

impl std::str::FromStr for BlBackend {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lattice" => Ok(BlBackend::Lattice),
            "monte-carlo" | "mc" => Ok(BlBackend::MonteCarlo),
            "radial" => Ok(BlBackend::Radial),
            _ => Err(format!("unknown backend '{s}' (lattice, monte-carlo, radial)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlIntegrator {
    pub backend: BlBackend,
    /// Lattice: base cells per axis. Monte Carlo: sample count.
    /// Radial: nodes per polar angle (the azimuth gets twice as many; in 2D
    /// this is the number of directions).
    pub resolution: usize,
    /// Lattice refinement depth below the base grid.
    pub depth: usize,
    pub seed: u64,
    /// Multiple of the estimated circumradius used for the bounding box.
    pub box_factor: f64,
    /// Unimodular change of integration coordinates `v = S u`.
    pub skew: Option<Mat>,
}

impl BlIntegrator {
    /// Lattice for `n <= 3`, Monte Carlo otherwise.
    pub fn default_for(n: usize) -> BlIntegrator {
        if n <= 3 {
            BlIntegrator::lattice(n)
        } else {
            BlIntegrator::monte_carlo(2_000_000, 0)
        }
    }

    pub fn lattice(n: usize) -> BlIntegrator {
        let (resolution, depth) = match n {
            0..=2 => (64, 8),
            _ => (32, 4),
        };
        BlIntegrator { backend: BlBackend::Lattice, resolution, depth, seed: 0, box_factor: 1.05, skew: None }
    }

    pub fn monte_carlo(samples: usize, seed: u64) -> BlIntegrator {
        BlIntegrator { backend: BlBackend::MonteCarlo, resolution: samples, depth: 0, seed, box_factor: 1.05, skew: None }
    }

    pub fn radial(n: usize) -> BlIntegrator {
        let resolution = match n {
            0..=2 => 4096,
            3 => 48,
            4 => 24,
            _ => 12,
        };
        BlIntegrator { backend: BlBackend::Radial, resolution, depth: 0, seed: 0, box_factor: 1.05, skew: None }
    }

    pub fn with_seed(mut self, seed: u64) -> BlIntegrator {
        self.seed = seed;
        self
    }
}

#[derive(Clone, Debug)]
pub struct BlResult {
    pub g_star: Mat,
    pub g_bl: Mat,
    pub vol: f64,
    /// Relative error estimate (max-entry scale).
    pub error_estimate: f64,
    pub backend: BlBackend,
    pub seed: u64,
}

struct Moments {
    vol: f64,
    second: Mat,
}

/// Circumradius estimate over the `2n` axis directions and 100 random
/// directions, plus the largest sampled `F(u)` on the unit sphere.
fn probe(norm: &MinkowskiNorm, seed: u64) -> Result<(f64, f64)> {
    let n = norm.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0b0);
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        for s in [1.0, -1.0] {
            let mut u = vec![0.0; n];
            u[i] = s;
            dirs.push(u);
        }
    }
    for _ in 0..100 {
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = crate::linalg::norm(&u);
        if r > 1e-9 {
            dirs.push(u.iter().map(|x| x / r).collect());
        }
    }
    let mut rmax = 0.0f64;
    let mut fmax = 0.0f64;
    for u in &dirs {
        let f = norm.eval(u);
        if !(f > 0.0) || !f.is_finite() {
            return Err(GeomError::Numerical(format!("degenerate norm: F({u:?}) = {f}")));
        }
        rmax = rmax.max(1.0 / f);
        fmax = fmax.max(f);
    }
    Ok((rmax, fmax))
}

fn add_box(m: &mut Moments, c: &[f64], h: f64) {
    let n = c.len();
    let vol = (2.0 * h).powi(n as i32);
    m.vol += vol;
    for i in 0..n {
        for j in 0..n {
            let v = if i == j { c[i] * c[i] + h * h / 3.0 } else { c[i] * c[j] };
            m.second[(i, j)] += vol * v;
        }
    }
}

struct Lattice<'a> {
    norm: &'a MinkowskiNorm,
    lip: f64,
    radius: f64,
    depth: usize,
}

impl Lattice<'_> {
    fn cell(&self, c: &mut Vec<f64>, h: f64, level: usize, m: &mut Moments, touch: &mut bool) {
        let n = c.len();
        let f = self.norm.eval(c);
        let rho = h * (n as f64).sqrt();
        let inside = f + self.lip * rho <= 1.0;
        let outside = f - self.lip * rho > 1.0;
        if outside {
            return;
        }
        if inside || level == self.depth {
            if inside || f <= 1.0 {
                if c.iter().any(|x| x.abs() + h >= self.radius * (1.0 - 1e-12)) {
                    *touch = true;
                }
                add_box(m, c, h);
            }
            return;
        }
        let hh = h / 2.0;
        for mask in 0..(1usize << n) {
            for i in 0..n {
                c[i] += if mask >> i & 1 == 1 { hh } else { -hh };
            }
            self.cell(c, hh, level + 1, m, touch);
            for i in 0..n {
                c[i] -= if mask >> i & 1 == 1 { hh } else { -hh };
            }
        }
    }

    fn run(&self, base: usize) -> Result<Moments> {
        let n = self.norm.dim();
        let h = self.radius / base as f64;
        let total = base.pow(n as u32);
        let parts: Vec<(Moments, bool)> = (0..total)
            .into_par_iter()
            .map(|idx| {
                let mut c = vec![0.0; n];
                let mut r = idx;
                for ci in c.iter_mut() {
                    let k = r % base;
                    r /= base;
                    *ci = -self.radius + (2 * k + 1) as f64 * h;
                }
                let mut m = Moments { vol: 0.0, second: Mat::zeros(n, n) };
                let mut touch = false;
                self.cell(&mut c, h, 0, &mut m, &mut touch);
                (m, touch)
            })
            .collect();
        let mut out = Moments { vol: 0.0, second: Mat::zeros(n, n) };
        for (m, touch) in parts {
            if touch {
                return Err(GeomError::Numerical("bounding box too small: unit ball reaches the box boundary".into()));
            }
            out.vol += m.vol;
            out.second += m.second;
        }
        Ok(out)
    }
}

fn dual_from(m: &Moments, n: usize) -> Result<Mat> {
    if !(m.vol > 0.0) {
        return Err(GeomError::Numerical("empty acceptance region".into()));
    }
    Ok(symmetrize(&(&m.second * ((n as f64 + 2.0) / m.vol))))
}

fn invert(g_star: &Mat) -> Result<Mat> {
    let inv = g_star
        .clone()
        .try_inverse()
        .ok_or_else(|| GeomError::Numerical("dual form is singular".into()))?;
    let g = symmetrize(&inv);
    if !crate::linalg::is_positive_definite(&g) {
        return Err(GeomError::Numerical("Binet-Legendre metric is not positive definite".into()));
    }
    Ok(g)
}

fn rel_diff(a: &Mat, b: &Mat) -> f64 {
    max_abs(&(a - b)) / max_abs(a).max(1e-300)
}

fn lattice_dual(norm: &MinkowskiNorm, integ: &BlIntegrator) -> Result<(Mat, f64, f64)> {
    let n = norm.dim();
    let (rmax, fmax) = probe(norm, integ.seed)?;
    let radius = rmax * integ.box_factor;
    let lip = fmax * 1.5;
    let fine = Lattice { norm, lip, radius, depth: integ.depth }.run(integ.resolution)?;
    let gs = dual_from(&fine, n)?;
    let coarse = Lattice { norm, lip, radius, depth: integ.depth.saturating_sub(1) }.run(integ.resolution)?;
    let gc = dual_from(&coarse, n)?;
    Ok((gs.clone(), fine.vol, rel_diff(&gs, &gc)))
}

const MC_CHUNK: usize = 1 << 16;

fn mc_dual(norm: &MinkowskiNorm, integ: &BlIntegrator) -> Result<(Mat, f64, f64)> {
    let n = norm.dim();
    let (rmax, _) = probe(norm, integ.seed)?;
    let radius = rmax * integ.box_factor;
    let chunks = integ.resolution.div_ceil(MC_CHUNK).max(2);
    let per_chunk = integ.resolution.div_ceil(chunks);
    let parts: Vec<(usize, Mat, bool)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(integ.seed);
            rng.set_stream(c as u64 + 1);
            let mut count = 0usize;
            let mut second = Mat::zeros(n, n);
            let mut shell = false;
            let mut v = vec![0.0; n];
            for _ in 0..per_chunk {
                for x in v.iter_mut() {
                    *x = rng.random_range(-radius..radius);
                }
                if norm.eval(&v) <= 1.0 {
                    count += 1;
                    if v.iter().any(|x| x.abs() > radius * 0.99) {
                        shell = true;
                    }
                    for i in 0..n {
                        for j in i..n {
                            second[(i, j)] += v[i] * v[j];
                        }
                    }
                }
            }
            (count, second, shell)
        })
        .collect();
    if parts.iter().any(|p| p.2) {
        return Err(GeomError::Numerical("bounding box too small: accepted sample in the box shell".into()));
    }
    let box_vol = (2.0 * radius).powi(n as i32);
    let mut count = 0usize;
    let mut second = Mat::zeros(n, n);
    let mut per: Vec<Mat> = Vec::new();
    for (c, s, _) in &parts {
        count += c;
        second += s;
        if *c > 0 {
            per.push(s * ((n as f64 + 2.0) / *c as f64));
        }
    }
    if count == 0 {
        return Err(GeomError::Numerical("empty acceptance region".into()));
    }
    let fill = |m: &Mat| {
        let mut m = m.clone();
        for i in 0..n {
            for j in 0..i {
                m[(i, j)] = m[(j, i)];
            }
        }
        m
    };
    let gs = fill(&(second * ((n as f64 + 2.0) / count as f64)));
    // Standard error from the spread of chunk estimates.
    let k = per.len() as f64;
    let mut se = 0.0f64;
    for i in 0..n {
        for j in i..n {
            let mean: f64 = per.iter().map(|m| m[(i, j)]).sum::<f64>() / k;
            let var: f64 = per.iter().map(|m| (m[(i, j)] - mean).powi(2)).sum::<f64>() / (k - 1.0);
            se = se.max((var / k).sqrt());
        }
    }
    let vol = box_vol * count as f64 / (chunks * per_chunk) as f64;
    Ok((gs.clone(), vol, se / max_abs(&gs)))
}

/// Directions and weights of the product rule on the unit sphere.
pub fn sphere_rule(n: usize, m: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let tau = std::f64::consts::TAU;
    if n == 1 {
        return (vec![vec![1.0], vec![-1.0]], vec![1.0, 1.0]);
    }
    if n == 2 {
        let dirs = (0..m)
            .map(|k| {
                let t = tau * k as f64 / m as f64;
                vec![t.cos(), t.sin()]
            })
            .collect();
        return (dirs, vec![tau / m as f64; m]);
    }
    // Polar angles θ_1..θ_{n-2} on [0, π] with weight sin^{n-1-k}, azimuth on [0, 2π).
    let (gx, gw) = gauss_legendre(m);
    let pi = std::f64::consts::PI;
    let polar: Vec<(f64, f64)> = gx.iter().zip(&gw).map(|(x, w)| ((x + 1.0) * pi / 2.0, w * pi / 2.0)).collect();
    let naz = 2 * m;
    let mut dirs = Vec::new();
    let mut weights = Vec::new();
    let mut idx = vec![0usize; n - 2];
    loop {
        let mut w = tau / naz as f64;
        let mut sin_prod = 1.0;
        let mut head = Vec::with_capacity(n);
        for (k, &i) in idx.iter().enumerate() {
            let (t, tw) = polar[i];
            head.push(sin_prod * t.cos());
            w *= tw * t.sin().powi((n - 2 - k) as i32);
            sin_prod *= t.sin();
        }
        for a in 0..naz {
            let phi = tau * a as f64 / naz as f64;
            let mut u = head.clone();
            u.push(sin_prod * phi.cos());
            u.push(sin_prod * phi.sin());
            dirs.push(u);
            weights.push(w);
        }
        let mut k = 0;
        loop {
            if k == n - 2 {
                return (dirs, weights);
            }
            idx[k] += 1;
            if idx[k] < m {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn radial_once(norm: &MinkowskiNorm, m: usize) -> Result<(Mat, f64)> {
    let n = norm.dim();
    let (dirs, weights) = sphere_rule(n, m);
    let mut second = Mat::zeros(n, n);
    let mut vol = 0.0;
    for (u, w) in dirs.iter().zip(&weights) {
        let f = norm.eval(u);
        if !(f > 0.0) || !f.is_finite() {
            return Err(GeomError::Numerical(format!("degenerate norm: F({u:?}) = {f}")));
        }
        let fn_ = f.powi(-(n as i32));
        vol += w * fn_;
        let s = w * fn_ / (f * f);
        for i in 0..n {
            for j in i..n {
                second[(i, j)] += s * u[i] * u[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            second[(i, j)] = second[(j, i)];
        }
    }
    // second moments carry 1/(n+2), the volume 1/n
    let gs = &second * (n as f64 / vol);
    Ok((gs, vol / n as f64))
}

fn radial_dual(norm: &MinkowskiNorm, integ: &BlIntegrator) -> Result<(Mat, f64, f64)> {
    let (gs, vol) = radial_once(norm, integ.resolution)?;
    let (gc, _) = radial_once(norm, (integ.resolution / 2).max(2))?;
    Ok((gs.clone(), vol, rel_diff(&gs, &gc)))
}

/// Binet-Legendre data of a single norm.
pub fn bl_of_norm(norm: &MinkowskiNorm, integ: &BlIntegrator) -> Result<BlResult> {
    let n = norm.dim();
    let (work, skew) = match &integ.skew {
        Some(s) => {
            let det = s.determinant();
            if (det.abs() - 1.0).abs() > 1e-9 {
                return Err(GeomError::InvalidArgument(format!("skew map must be unimodular, det = {det}")));
            }
            (norm.compose_linear(s), Some(s))
        }
        None => (norm.clone(), None),
    };
    let (mut gs, vol, err) = match integ.backend {
        BlBackend::Lattice => lattice_dual(&work, integ)?,
        BlBackend::MonteCarlo => mc_dual(&work, integ)?,
        BlBackend::Radial => radial_dual(&work, integ)?,
    };
    if let Some(s) = skew {
        gs = symmetrize(&(s * &gs * s.transpose()));
    }
    debug_assert_eq!(gs.nrows(), n);
    let g_bl = invert(&gs)?;
    Ok(BlResult { g_star: gs, g_bl, vol, error_estimate: err, backend: integ.backend, seed: integ.seed })
}

pub fn bl_dual_form(f: &dyn FinslerField, x: &[f64], integ: &BlIntegrator) -> Result<Mat> {
    Ok(bl_metric(f, x, integ)?.g_star)
}

pub fn bl_metric(f: &dyn FinslerField, x: &[f64], integ: &BlIntegrator) -> Result<BlResult> {
    bl_of_norm(&f.fiber(x)?, integ)
}

/// The Binet-Legendre metric of a Finsler field as a metric field, with a
/// per-point cache. Derivatives are central differences.
pub struct BlField {
    f: Arc<dyn FinslerField>,
    integ: BlIntegrator,
    cache: Mutex<HashMap<Vec<u64>, Mat>>,
}

const CACHE_LIMIT: usize = 200_000;

impl BlField {
    pub fn integrator(&self) -> &BlIntegrator {
        &self.integ
    }
}

impl MetricField for BlField {
    fn dim(&self) -> usize {
        self.f.dim()
    }
    fn domain(&self) -> &Domain {
        self.f.domain()
    }
    fn eval_unchecked(&self, x: &[f64]) -> Result<Mat> {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        if let Some(m) = self.cache.lock().unwrap().get(&key) {
            return Ok(m.clone());
        }
        let g = bl_metric(self.f.as_ref(), x, &self.integ)?.g_bl;
        let mut c = self.cache.lock().unwrap();
        if c.len() >= CACHE_LIMIT {
            c.clear();
        }
        c.insert(key, g.clone());
        Ok(g)
    }
}

/// `bl_field` with the radial integrator unless one is given.
pub fn bl_field(f: Arc<dyn FinslerField>, integ: Option<BlIntegrator>) -> BlField {
    let integ = integ.unwrap_or_else(|| BlIntegrator::radial(f.dim()));
    BlField { f, integ, cache: Mutex::new(HashMap::new()) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Mat, b: &Mat, rel: f64) -> bool {
        rel_diff(b, a) <= rel
    }

    #[test]
    fn euclidean_gives_identity_all_backends() {
        let e = MinkowskiNorm::euclidean(2);
        let id = Mat::identity(2, 2);
        for integ in [BlIntegrator::lattice(2), BlIntegrator::radial(2)] {
            let r = bl_of_norm(&e, &integ).unwrap();
            assert!(close(&r.g_bl, &id, 1e-3), "{:?}: {}", integ.backend, r.g_bl);
            assert!((r.vol - std::f64::consts::PI).abs() < 1e-3);
        }
        let r = bl_of_norm(&e, &BlIntegrator::monte_carlo(400_000, 5)).unwrap();
        assert!(rel_diff(&r.g_bl, &id) <= 4.0 * r.error_estimate + 1e-3);
    }

    #[test]
    fn linf_and_l1_closed_forms() {
        let r = bl_of_norm(&MinkowskiNorm::lp(2, f64::INFINITY), &BlIntegrator::lattice(2)).unwrap();
        assert!(close(&r.g_bl, &(Mat::identity(2, 2) * 0.75), 1e-3), "{}", r.g_bl);
        let r = bl_of_norm(&MinkowskiNorm::lp(2, 1.0), &BlIntegrator::lattice(2)).unwrap();
        assert!(close(&r.g_bl, &(Mat::identity(2, 2) * 1.5), 1e-3), "{}", r.g_bl);
    }

    #[test]
    fn quadratic_norm_reproduces_matrix_in_3d() {
        let a = crate::linalg::mat_from_rows(&[&[4.0, 0.5, 0.0], &[0.5, 1.0, 0.2], &[0.0, 0.2, 2.0]]);
        let q = MinkowskiNorm::quadratic(&a).unwrap();
        for integ in [BlIntegrator::lattice(3), BlIntegrator::radial(3)] {
            let r = bl_of_norm(&q, &integ).unwrap();
            assert!(close(&r.g_bl, &a, 1e-3), "{:?} {}", integ.backend, r.g_bl);
        }
    }

    #[test]
    fn sphere_rule_integrates_constants() {
        for n in 2..=5 {
            let (_, w) = sphere_rule(n, 16);
            let area: f64 = w.iter().sum();
            // |S^{n-1}| = 2 π^{n/2} / Γ(n/2)
            let expect = [0.0, 0.0, std::f64::consts::TAU, 4.0 * std::f64::consts::PI, 2.0 * std::f64::consts::PI.powi(2), 8.0 / 3.0 * std::f64::consts::PI.powi(2)][n];
            assert!((area - expect).abs() < 1e-10, "n={n}: {area}");
        }
    }

    #[test]
    fn skew_coordinates_do_not_change_the_result() {
        let f = MinkowskiNorm::parse("(v1^4 + v2^4)^(1/4) + 0.3*v2", 2).unwrap();
        let base = bl_of_norm(&f, &BlIntegrator::lattice(2)).unwrap();
        let mut integ = BlIntegrator::lattice(2);
        integ.skew = Some(crate::linalg::mat_from_rows(&[&[1.0, 0.7], &[0.0, 1.0]]));
        let skewed = bl_of_norm(&f, &integ).unwrap();
        let tol = 3.0 * (base.error_estimate + skewed.error_estimate);
        assert!(rel_diff(&base.g_bl, &skewed.g_bl) <= tol.max(1e-4));
    }

    #[test]
    fn small_box_is_detected() {
        let mut integ = BlIntegrator::lattice(2);
        integ.box_factor = 0.9;
        assert!(bl_of_norm(&MinkowskiNorm::euclidean(2), &integ).is_err());
    }
}
