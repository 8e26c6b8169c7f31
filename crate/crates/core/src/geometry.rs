//! Riemannian primitives on a chart: metric fields and their derivatives,
//! Christoffel symbols, the curvature tensor and its norm, and the
//! connection difference of a conformal change.
//!
//! Curvature convention:
//! `R^l_{ijk} = ∂_i Γ^l_{jk} − ∂_j Γ^l_{ik} + Γ^l_{im} Γ^m_{jk} − Γ^l_{jm} Γ^m_{ik}`,
//! so that `R(∂_i, ∂_j) ∂_k = R^l_{ijk} ∂_l`.

use std::ops::Range;
use std::sync::Arc;

use crate::domain::Domain;
use crate::dsl::{EvalFlags, Expr, Program, Symbols};
use crate::error::{GeomError, Result};
use crate::linalg::{cholesky_lower, Mat};

/// Step of central differences for first derivatives.
pub const FD_STEP: f64 = 1e-5;
/// Step of central differences for second derivatives.
pub const FD_STEP2: f64 = 1e-4;

/// A metric with its first (and optionally second) coordinate derivatives.
#[derive(Clone, Debug)]
pub struct MetricJet {
    pub g: Mat,
    /// `dg[k] = ∂_k g`
    pub dg: Vec<Mat>,
    /// `ddg[k][l] = ∂_k ∂_l g`, present for order-2 jets.
    pub ddg: Vec<Vec<Mat>>,
    /// Set when an expression was evaluated exactly at a kink.
    pub nonsmooth: bool,
}

/// A field of symmetric positive-definite matrices on a chart domain.
pub trait MetricField: Send + Sync {
    fn dim(&self) -> usize;
    fn domain(&self) -> &Domain;

    /// Raw evaluation without domain or definiteness checks.
    fn eval_unchecked(&self, x: &[f64]) -> Result<Mat>;

    /// Jet of order 1 or 2. The default uses central differences.
    fn jet(&self, x: &[f64], order: usize) -> Result<MetricJet> {
        self.check(x)?;
        fd_jet(self, x, order)
    }

    /// True when the metric is known to have constant coefficients.
    fn is_constant(&self) -> bool {
        false
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(GeomError::Dimension { expected: self.dim(), got: x.len() });
        }
        if !self.domain().contains(x) {
            return Err(GeomError::outside(x));
        }
        Ok(())
    }

    /// The metric at `x`, checked for domain membership and definiteness.
    fn metric(&self, x: &[f64]) -> Result<Mat> {
        self.check(x)?;
        let g = self.eval_unchecked(x)?;
        if cholesky_lower(&g).is_none() {
            return Err(GeomError::NotPositiveDefinite { point: x.to_vec() });
        }
        Ok(g)
    }
}

/// Central-difference jet built from `eval_unchecked`.
pub fn fd_jet<M: MetricField + ?Sized>(m: &M, x: &[f64], order: usize) -> Result<MetricJet> {
    let n = m.dim();
    let g = m.eval_unchecked(x)?;
    let h = FD_STEP;
    let mut xp = x.to_vec();
    let mut dg = Vec::with_capacity(n);
    for k in 0..n {
        xp[k] = x[k] + h;
        let gp = m.eval_unchecked(&xp)?;
        xp[k] = x[k] - h;
        let gm = m.eval_unchecked(&xp)?;
        xp[k] = x[k];
        dg.push((gp - gm) / (2.0 * h));
    }
    let mut ddg = Vec::new();
    if order >= 2 {
        let h = FD_STEP2;
        ddg = vec![vec![Mat::zeros(n, n); n]; n];
        let at = |xp: &mut Vec<f64>, a: usize, da: f64, b: usize, db: f64| -> Result<Mat> {
            xp[a] += da;
            xp[b] += db;
            let r = m.eval_unchecked(xp);
            xp[a] -= da;
            xp[b] -= db;
            r
        };
        for k in 0..n {
            let gp = at(&mut xp, k, h, k, 0.0)?;
            let gm = at(&mut xp, k, -h, k, 0.0)?;
            ddg[k][k] = (gp + gm - &g * 2.0) / (h * h);
            for l in k + 1..n {
                let pp = at(&mut xp, k, h, l, h)?;
                let pm = at(&mut xp, k, h, l, -h)?;
                let mp = at(&mut xp, k, -h, l, h)?;
                let mm = at(&mut xp, k, -h, l, -h)?;
                let d = (pp - pm - mp + mm) / (4.0 * h * h);
                ddg[k][l] = d.clone();
                ddg[l][k] = d;
            }
        }
    }
    Ok(MetricJet { g, dg, ddg, nonsmooth: false })
}

/// A scalar function on a chart with exact derivatives.
#[derive(Clone, Debug)]
pub struct ExprScalar {
    n: usize,
    program: Program,
}

impl ExprScalar {
    pub fn new(e: &Expr, n: usize) -> Result<ExprScalar> {
        let program = Program::compile(e, &Symbols::new().vector("x", n))?;
        Ok(ExprScalar { n, program })
    }

    pub fn parse(text: &str, n: usize) -> Result<ExprScalar> {
        ExprScalar::new(&crate::dsl::parse(text)?, n)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn expr(&self) -> &Expr {
        self.program.source()
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(self.program.eval_f64(x)?)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut flags = EvalFlags::default();
        let mut seed = vec![0.0; self.n];
        let mut out = vec![0.0; self.n];
        for k in 0..self.n {
            seed[k] = 1.0;
            out[k] = self.program.eval_dual(x, &seed, &mut flags)?.1;
            seed[k] = 0.0;
        }
        Ok(out)
    }

    /// Value, gradient and Hessian.
    pub fn jet2(&self, x: &[f64]) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
        let mut flags = EvalFlags::default();
        Ok(self.program.jet2(x, self.n, &mut flags)?)
    }
}

/// Metric given by entry expressions in `x1..xn`, differentiated with dual numbers.
#[derive(Clone, Debug)]
pub struct ExprMetric {
    n: usize,
    domain: Domain,
    /// Upper-triangle entries, `None` for constant zero.
    entries: Vec<Option<Program>>,
    constant: bool,
}

impl ExprMetric {
    /// `entries[(i, j)]` for `i <= j`; missing off-diagonal entries are zero.
    pub fn new(
        n: usize,
        domain: Domain,
        entries: &std::collections::BTreeMap<(usize, usize), Expr>,
    ) -> Result<ExprMetric> {
        let syms = Symbols::new().vector("x", n);
        let mut progs = vec![None; n * n];
        let mut constant = true;
        for (&(i, j), e) in entries {
            if i > j || j >= n {
                return Err(GeomError::InvalidArgument(format!("bad metric index ({i}, {j})")));
            }
            let p = Program::compile(e, &syms)?;
            match p.as_constant() {
                Some(0.0) => continue,
                Some(_) => {}
                None => constant = false,
            }
            progs[i * n + j] = Some(p);
        }
        Ok(ExprMetric { n, domain, entries: progs, constant })
    }

    /// Convenience constructor from row-major entry strings (upper triangle used).
    pub fn from_strs(domain: Domain, rows: &[&[&str]]) -> Result<ExprMetric> {
        let n = rows.len();
        let mut map = std::collections::BTreeMap::new();
        for (i, row) in rows.iter().enumerate() {
            for (j, s) in row.iter().enumerate().skip(i) {
                map.insert((i, j), crate::dsl::parse(s)?);
            }
        }
        ExprMetric::new(n, domain, &map)
    }
}

impl MetricField for ExprMetric {
    fn dim(&self) -> usize {
        self.n
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn is_constant(&self) -> bool {
        self.constant
    }

    fn eval_unchecked(&self, x: &[f64]) -> Result<Mat> {
        let n = self.n;
        let mut g = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                if let Some(p) = &self.entries[i * n + j] {
                    let v = p.eval_f64(x)?;
                    g[(i, j)] = v;
                    g[(j, i)] = v;
                }
            }
        }
        Ok(g)
    }

    fn jet(&self, x: &[f64], order: usize) -> Result<MetricJet> {
        self.check(x)?;
        let n = self.n;
        let mut flags = EvalFlags::default();
        let mut g = Mat::zeros(n, n);
        let mut dg = vec![Mat::zeros(n, n); n];
        let mut ddg = if order >= 2 { vec![vec![Mat::zeros(n, n); n]; n] } else { Vec::new() };
        let mut seed = vec![0.0; n];
        for i in 0..n {
            for j in i..n {
                let Some(p) = &self.entries[i * n + j] else { continue };
                if let Some(c) = p.as_constant() {
                    g[(i, j)] = c;
                    g[(j, i)] = c;
                    continue;
                }
                if order >= 2 {
                    let (v, grad, hess) = p.jet2(x, n, &mut flags)?;
                    g[(i, j)] = v;
                    g[(j, i)] = v;
                    for k in 0..n {
                        dg[k][(i, j)] = grad[k];
                        dg[k][(j, i)] = grad[k];
                        for l in 0..n {
                            ddg[k][l][(i, j)] = hess[k][l];
                            ddg[k][l][(j, i)] = hess[k][l];
                        }
                    }
                } else {
                    for k in 0..n {
                        seed[k] = 1.0;
                        let (v, d) = p.eval_dual(x, &seed, &mut flags)?;
                        seed[k] = 0.0;
                        g[(i, j)] = v;
                        g[(j, i)] = v;
                        dg[k][(i, j)] = d;
                        dg[k][(j, i)] = d;
                    }
                }
            }
        }
        Ok(MetricJet { g, dg, ddg, nonsmooth: flags.nonsmooth })
    }
}

/// `c · g` for a constant `c > 0`.
pub struct ScaledMetric {
    pub inner: Arc<dyn MetricField>,
    pub c: f64,
}

impl MetricField for ScaledMetric {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn domain(&self) -> &Domain {
        self.inner.domain()
    }
    fn is_constant(&self) -> bool {
        self.inner.is_constant()
    }
    fn eval_unchecked(&self, x: &[f64]) -> Result<Mat> {
        Ok(self.inner.eval_unchecked(x)? * self.c)
    }
    fn jet(&self, x: &[f64], order: usize) -> Result<MetricJet> {
        let mut j = self.inner.jet(x, order)?;
        j.g *= self.c;
        j.dg.iter_mut().for_each(|m| *m *= self.c);
        j.ddg.iter_mut().flatten().for_each(|m| *m *= self.c);
        Ok(j)
    }
}

/// `e^{2φ} g`.
pub struct ConformalMetric {
    pub inner: Arc<dyn MetricField>,
    pub phi: ExprScalar,
}

impl MetricField for ConformalMetric {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn domain(&self) -> &Domain {
        self.inner.domain()
    }
    fn eval_unchecked(&self, x: &[f64]) -> Result<Mat> {
        let f = (2.0 * self.phi.eval(x)?).exp();
        Ok(self.inner.eval_unchecked(x)? * f)
    }
    fn jet(&self, x: &[f64], order: usize) -> Result<MetricJet> {
        let n = self.dim();
        let inner = self.inner.jet(x, order)?;
        let (phi, dphi, hphi) = self.phi.jet2(x)?;
        let f = (2.0 * phi).exp();
        // derivatives of f = e^{2φ}
        let df: Vec<f64> = dphi.iter().map(|d| 2.0 * f * d).collect();
        let g = &inner.g * f;
        let dg: Vec<Mat> = (0..n).map(|k| &inner.dg[k] * f + &inner.g * df[k]).collect();
        let mut ddg = Vec::new();
        if order >= 2 {
            ddg = vec![vec![Mat::zeros(n, n); n]; n];
            for k in 0..n {
                for l in 0..n {
                    let ddf = f * (4.0 * dphi[k] * dphi[l] + 2.0 * hphi[k][l]);
                    ddg[k][l] = &inner.ddg[k][l] * f
                        + &inner.dg[k] * df[l]
                        + &inner.dg[l] * df[k]
                        + &inner.g * ddf;
                }
            }
        }
        Ok(MetricJet { g, dg, ddg, nonsmooth: inner.nonsmooth })
    }
}

/// Metric given by an opaque callback, differentiated by central differences.
pub struct FnMetric<F> {
    pub n: usize,
    pub domain: Domain,
    pub f: F,
}

impl<F: Fn(&[f64]) -> Mat + Send + Sync> MetricField for FnMetric<F> {
    fn dim(&self) -> usize {
        self.n
    }
    fn domain(&self) -> &Domain {
        &self.domain
    }
    fn eval_unchecked(&self, x: &[f64]) -> Result<Mat> {
        Ok((self.f)(x))
    }
}

/// A partition of the coordinates into blocks with a factor metric per block.
#[derive(Clone)]
pub struct ProductStructure {
    pub blocks: Vec<(Range<usize>, Arc<dyn MetricField>)>,
}

impl ProductStructure {
    pub fn new(factors: Vec<Arc<dyn MetricField>>) -> ProductStructure {
        let mut offset = 0;
        let blocks = factors
            .into_iter()
            .map(|m| {
                let r = offset..offset + m.dim();
                offset += m.dim();
                (r, m)
            })
            .collect();
        ProductStructure { blocks }
    }

    pub fn dim(&self) -> usize {
        self.blocks.last().map_or(0, |(r, _)| r.end)
    }

    /// Block-`i` components of `v`, other components zeroed.
    pub fn project(&self, i: usize, v: &[f64]) -> Vec<f64> {
        let r = &self.blocks[i].0;
        v.iter()
            .enumerate()
            .map(|(k, &c)| if r.contains(&k) { c } else { 0.0 })
            .collect()
    }

    pub fn metric(&self) -> ProductMetric {
        ProductMetric::new(self.clone())
    }
}

/// The block-diagonal metric of a product structure.
pub struct ProductMetric {
    ps: ProductStructure,
    domain: Domain,
}

impl ProductMetric {
    pub fn new(ps: ProductStructure) -> ProductMetric {
        let parts: Vec<&Domain> = ps.blocks.iter().map(|(_, m)| m.domain()).collect();
        let domain = Domain::product(&parts);
        ProductMetric { ps, domain }
    }

    pub fn with_domain(ps: ProductStructure, domain: Domain) -> ProductMetric {
        ProductMetric { ps, domain }
    }

    pub fn structure(&self) -> &ProductStructure {
        &self.ps
    }
}

impl MetricField for ProductMetric {
    fn dim(&self) -> usize {
        self.ps.dim()
    }
    fn domain(&self) -> &Domain {
        &self.domain
    }
    fn is_constant(&self) -> bool {
        self.ps.blocks.iter().all(|(_, m)| m.is_constant())
    }
    fn eval_unchecked(&self, x: &[f64]) -> Result<Mat> {
        let n = self.dim();
        let mut g = Mat::zeros(n, n);
        for (r, m) in &self.ps.blocks {
            let b = m.eval_unchecked(&x[r.clone()])?;
            g.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&b);
        }
        Ok(g)
    }
    fn jet(&self, x: &[f64], order: usize) -> Result<MetricJet> {
        self.check(x)?;
        let n = self.dim();
        let mut out = MetricJet {
            g: Mat::zeros(n, n),
            dg: vec![Mat::zeros(n, n); n],
            ddg: if order >= 2 { vec![vec![Mat::zeros(n, n); n]; n] } else { Vec::new() },
            nonsmooth: false,
        };
        for (r, m) in &self.ps.blocks {
            let j = m.jet(&x[r.clone()], order)?;
            let (s, len) = (r.start, r.len());
            out.g.view_mut((s, s), (len, len)).copy_from(&j.g);
            for k in 0..len {
                out.dg[s + k].view_mut((s, s), (len, len)).copy_from(&j.dg[k]);
                if order >= 2 {
                    for l in 0..len {
                        out.ddg[s + k][s + l].view_mut((s, s), (len, len)).copy_from(&j.ddg[k][l]);
                    }
                }
            }
            out.nonsmooth |= j.nonsmooth;
        }
        Ok(out)
    }
}

/// Dense rank-3 array indexed `[k][i][j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize) -> Tensor3 {
        Tensor3 { n, data: vec![0.0; n * n * n] }
    }
    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[(k * self.n + i) * self.n + j]
    }
    #[inline]
    pub fn set(&mut self, k: usize, i: usize, j: usize, v: f64) {
        let n = self.n;
        self.data[(k * n + i) * n + j] = v;
    }
    pub fn max_abs_diff(&self, o: &Tensor3) -> f64 {
        self.data.iter().zip(&o.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.abs()))
    }
}

/// Dense rank-4 array indexed `[l][i][j][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize) -> Tensor4 {
        Tensor4 { n, data: vec![0.0; n * n * n * n] }
    }
    #[inline]
    pub fn get(&self, l: usize, i: usize, j: usize, k: usize) -> f64 {
        let n = self.n;
        self.data[((l * n + i) * n + j) * n + k]
    }
    #[inline]
    fn add(&mut self, l: usize, i: usize, j: usize, k: usize, v: f64) {
        let n = self.n;
        self.data[((l * n + i) * n + j) * n + k] += v;
    }
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.abs()))
    }
}

fn inverse(g: &Mat, x: &[f64]) -> Result<Mat> {
    let l = cholesky_lower(g).ok_or_else(|| GeomError::NotPositiveDefinite { point: x.to_vec() })?;
    let n = g.nrows();
    let linv = l
        .solve_lower_triangular(&Mat::identity(n, n))
        .ok_or_else(|| GeomError::Numerical("singular metric".into()))?;
    Ok(linv.transpose() * linv)
}

fn christoffel_from(jet: &MetricJet, ginv: &Mat) -> Tensor3 {
    let n = jet.g.nrows();
    let mut gam = Tensor3::zeros(n);
    // first-kind symbols [ij, l] = ½(∂_i g_jl + ∂_j g_il − ∂_l g_ij)
    let mut first = vec![0.0; n * n * n];
    for i in 0..n {
        for j in i..n {
            for l in 0..n {
                let v = 0.5 * (jet.dg[i][(j, l)] + jet.dg[j][(i, l)] - jet.dg[l][(i, j)]);
                first[(i * n + j) * n + l] = v;
                first[(j * n + i) * n + l] = v;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for l in 0..n {
                    acc += ginv[(k, l)] * first[(i * n + j) * n + l];
                }
                gam.set(k, i, j, acc);
                gam.set(k, j, i, acc);
            }
        }
    }
    gam
}

/// Levi-Civita symbols `Γ^k_{ij}`, symmetric in `i, j` by construction.
pub fn christoffel(g: &dyn MetricField, x: &[f64]) -> Result<Tensor3> {
    let jet = g.jet(x, 1)?;
    let ginv = inverse(&jet.g, x)?;
    Ok(christoffel_from(&jet, &ginv))
}

/// Christoffel symbols together with the metric at `x`.
pub fn christoffel_with_metric(g: &dyn MetricField, x: &[f64]) -> Result<(Mat, Tensor3)> {
    let jet = g.jet(x, 1)?;
    let ginv = inverse(&jet.g, x)?;
    let gam = christoffel_from(&jet, &ginv);
    Ok((jet.g, gam))
}

/// `R^l_{ijk}` in the convention stated in the module docs.
pub fn riemann(g: &dyn MetricField, x: &[f64]) -> Result<Tensor4> {
    Ok(riemann_with_metric(g, x)?.1)
}

fn riemann_with_metric(g: &dyn MetricField, x: &[f64]) -> Result<(Mat, Tensor4, bool)> {
    let n = g.dim();
    let jet = g.jet(x, 2)?;
    let ginv = inverse(&jet.g, x)?;
    let gam = christoffel_from(&jet, &ginv);
    // ∂_m g^{kl} = −g^{ka} ∂_m g_{ab} g^{bl}
    let dginv: Vec<Mat> = (0..n).map(|m| -(&ginv * &jet.dg[m] * &ginv)).collect();
    // dgam[m] = ∂_m Γ^k_{ij}
    let mut dgam = vec![Tensor3::zeros(n); n];
    for m in 0..n {
        for i in 0..n {
            for j in i..n {
                let mut first = vec![0.0; n];
                let mut dfirst = vec![0.0; n];
                for l in 0..n {
                    first[l] = 0.5 * (jet.dg[i][(j, l)] + jet.dg[j][(i, l)] - jet.dg[l][(i, j)]);
                    dfirst[l] =
                        0.5 * (jet.ddg[m][i][(j, l)] + jet.ddg[m][j][(i, l)] - jet.ddg[m][l][(i, j)]);
                }
                for k in 0..n {
                    let mut acc = 0.0;
                    for l in 0..n {
                        acc += dginv[m][(k, l)] * first[l] + ginv[(k, l)] * dfirst[l];
                    }
                    dgam[m].set(k, i, j, acc);
                    dgam[m].set(k, j, i, acc);
                }
            }
        }
    }
    let mut r = Tensor4::zeros(n);
    for l in 0..n {
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                for k in 0..n {
                    let mut v = dgam[i].get(l, j, k) - dgam[j].get(l, i, k);
                    for m in 0..n {
                        v += gam.get(l, i, m) * gam.get(m, j, k) - gam.get(l, j, m) * gam.get(m, i, k);
                    }
                    r.add(l, i, j, k, v);
                }
            }
        }
    }
    Ok((jet.g, r, jet.nonsmooth))
}

/// Sectional curvature of the plane spanned by `u, v`.
pub fn sectional_curvature(g: &dyn MetricField, x: &[f64], u: &[f64], v: &[f64]) -> Result<f64> {
    let (gm, r, _) = riemann_with_metric(g, x)?;
    let n = g.dim();
    // g(R(u, v) v, u)
    let mut num = 0.0;
    for l in 0..n {
        let mut rl = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    rl += r.get(l, i, j, k) * u[i] * v[j] * v[k];
                }
            }
        }
        for a in 0..n {
            num += gm[(a, l)] * u[a] * rl;
        }
    }
    let uu = crate::linalg::quad_form(&gm, u);
    let vv = crate::linalg::quad_form(&gm, v);
    let uv = crate::linalg::bilinear(&gm, u, v);
    Ok(num / (uu * vv - uv * uv))
}

/// `‖R‖² = R_{lijk} R^{lijk}`.
pub fn curvature_norm_sq(g: &dyn MetricField, x: &[f64]) -> Result<f64> {
    Ok(curvature_norm_sq_flagged(g, x)?.0)
}

/// `‖R‖²` and whether a non-smooth point was hit while differentiating.
pub fn curvature_norm_sq_flagged(g: &dyn MetricField, x: &[f64]) -> Result<(f64, bool)> {
    if g.is_constant() {
        g.check(x)?;
        return Ok((0.0, false));
    }
    let n = g.dim();
    let (gm, r, nonsmooth) = riemann_with_metric(g, x)?;
    let ginv = inverse(&gm, x)?;
    // Lower the first index, then raise the last three.
    let mut low = Tensor4::zeros(n);
    for a in 0..n {
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let mut v = 0.0;
                    for l in 0..n {
                        v += gm[(a, l)] * r.get(l, i, j, k);
                    }
                    low.add(a, i, j, k, v);
                }
            }
        }
    }
    let mut up = Tensor4::zeros(n);
    for l in 0..n {
        for b in 0..n {
            for c in 0..n {
                for d in 0..n {
                    let mut v = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            for k in 0..n {
                                v += ginv[(b, i)] * ginv[(c, j)] * ginv[(d, k)] * r.get(l, i, j, k);
                            }
                        }
                    }
                    up.add(l, b, c, d, v);
                }
            }
        }
    }
    let total: f64 = low.data.iter().zip(&up.data).map(|(a, b)| a * b).sum();
    Ok((total.max(0.0), nonsmooth))
}

/// `Γ(e^{2φ} g) − Γ(g) = δ^k_i ∂_jφ + δ^k_j ∂_iφ − g_{ij} ∇^kφ`.
pub fn conformal_difference(g: &dyn MetricField, phi: &ExprScalar, x: &[f64]) -> Result<Tensor3> {
    let gm = g.metric(x)?;
    let ginv = inverse(&gm, x)?;
    let dphi = phi.gradient(x)?;
    let n = g.dim();
    let grad: Vec<f64> = (0..n).map(|k| (0..n).map(|l| ginv[(k, l)] * dphi[l]).sum()).collect();
    let mut t = Tensor3::zeros(n);
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let mut v = -gm[(i, j)] * grad[k];
                if k == i {
                    v += dphi[j];
                }
                if k == j {
                    v += dphi[i];
                }
                t.set(k, i, j, v);
            }
        }
    }
    Ok(t)
}

/// Squared curvature norms of each factor at the projected point.
pub fn leaf_curvature_norms(ps: &ProductStructure, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != ps.dim() {
        return Err(GeomError::Dimension { expected: ps.dim(), got: x.len() });
    }
    ps.blocks
        .iter()
        .map(|(r, m)| {
            if r.len() < 2 {
                m.check(&x[r.clone()])?;
                return Ok(0.0);
            }
            curvature_norm_sq(m.as_ref(), &x[r.clone()])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn sphere() -> ExprMetric {
        let d = Domain::new(vec![0.05, f64::NEG_INFINITY], vec![3.09, f64::INFINITY], vec![]);
        ExprMetric::from_strs(d, &[&["1", "0"], &["0", "sin(x1)^2"]]).unwrap()
    }

    fn flat(n: usize) -> ExprMetric {
        let rows: Vec<Vec<&str>> =
            (0..n).map(|i| (0..n).map(|j| if i == j { "1" } else { "0" }).collect()).collect();
        let refs: Vec<&[&str]> = rows.iter().map(|r| r.as_slice()).collect();
        ExprMetric::from_strs(Domain::unbounded(n), &refs).unwrap()
    }

    #[test]
    fn flat_christoffels_vanish() {
        let g = flat(2);
        assert!(g.is_constant());
        assert_eq!(christoffel(&g, &[0.3, -2.0]).unwrap().max_abs(), 0.0);
        assert_eq!(curvature_norm_sq(&g, &[0.3, -2.0]).unwrap(), 0.0);
    }

    #[test]
    fn sphere_christoffels() {
        let g = sphere();
        let c = christoffel(&g, &[FRAC_PI_4, 0.0]).unwrap();
        assert!((c.get(0, 1, 1) + 0.5).abs() < 1e-14);
        assert!((c.get(1, 0, 1) - 1.0).abs() < 1e-14);
        assert!((c.get(1, 1, 0) - 1.0).abs() < 1e-14);
        assert!(c.get(0, 0, 0).abs() < 1e-15);
    }

    #[test]
    fn conformally_flat_christoffels() {
        let d = Domain::unbounded(2);
        let g = ExprMetric::from_strs(d, &[&["exp(2*x1)", "0"], &["0", "exp(2*x1)"]]).unwrap();
        let c = christoffel(&g, &[0.0, 0.0]).unwrap();
        let mut expect = Tensor3::zeros(2);
        expect.set(0, 0, 0, 1.0);
        expect.set(0, 1, 1, -1.0);
        expect.set(1, 0, 1, 1.0);
        expect.set(1, 1, 0, 1.0);
        assert!(c.max_abs_diff(&expect) < 1e-14);
        let phi = ExprScalar::parse("x1", 2).unwrap();
        let diff = conformal_difference(&flat(2), &phi, &[0.0, 0.0]).unwrap();
        assert!(diff.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn sphere_curvature() {
        let g = sphere();
        let k = sectional_curvature(&g, &[FRAC_PI_4, 0.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((k - 1.0).abs() < 1e-12);
        let r = riemann(&g, &[1.0, 0.5]).unwrap();
        for l in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        assert!((r.get(l, i, j, k) + r.get(l, j, i, k)).abs() < 1e-13);
                    }
                }
            }
        }
        for x in [[0.4, 0.0], [1.3, 2.0], [2.7, -1.0]] {
            assert!((curvature_norm_sq(&g, &x).unwrap() - 4.0).abs() < 1e-10);
        }
    }

    #[test]
    fn scaling_divides_curvature_norm() {
        let g: Arc<dyn MetricField> = Arc::new(sphere());
        let s = ScaledMetric { inner: g.clone(), c: 4.0 };
        let a = curvature_norm_sq(g.as_ref(), &[1.0, 0.0]).unwrap();
        let b = curvature_norm_sq(&s, &[1.0, 0.0]).unwrap();
        assert!((b - a / 16.0).abs() < 1e-12);
    }

    #[test]
    fn finite_difference_jet_matches_dual_jet() {
        let g = sphere();
        let fd = FnMetric {
            n: 2,
            domain: g.domain().clone(),
            f: |x: &[f64]| Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, x[0].sin().powi(2)])),
        };
        let x = [1.1, 0.3];
        let a = christoffel(&g, &x).unwrap();
        let b = christoffel(&fd, &x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
        let ka = curvature_norm_sq(&g, &x).unwrap();
        let kb = curvature_norm_sq(&fd, &x).unwrap();
        assert!((ka - kb).abs() < 1e-5);
    }

    #[test]
    fn product_leaf_norms_and_mixed_components() {
        let line: Arc<dyn MetricField> = Arc::new(flat(1));
        let ps = ProductStructure::new(vec![Arc::new(sphere()), line]);
        let x = [1.0, 0.2, 5.0];
        let r = leaf_curvature_norms(&ps, &x).unwrap();
        assert!((r[0] - 4.0).abs() < 1e-10);
        assert_eq!(r[1], 0.0);
        let pm = ps.metric();
        let rt = riemann(&pm, &x).unwrap();
        for l in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        if [l, i, j, k].contains(&2) {
                            assert_eq!(rt.get(l, i, j, k), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn outside_domain_is_an_error() {
        let g = sphere();
        assert!(matches!(christoffel(&g, &[0.0, 0.0]), Err(GeomError::OutsideDomain { .. })));
    }
}
