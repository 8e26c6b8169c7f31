//! Minkowski norms, Finsler fields, and constructions built from them:
//! product norms, conformal scaling, deck maps and the Hopf quotient scene.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::domain::{Domain, Exclusion};
use crate::dsl::{Expr, NamedFn, Program, Symbols};
use crate::error::{GeomError, Result};
use crate::geometry::{curvature_norm_sq, ExprMetric, ExprScalar, MetricField, ProductStructure};
use crate::linalg::{cholesky_lower, Mat};

type NormFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// A function on `R^m` expected to be positively homogeneous, subadditive
/// and definite. The axioms are checked by [`validate_minkowski`], not assumed.
#[derive(Clone)]
pub struct MinkowskiNorm {
    dim: usize,
    f: Arc<NormFn>,
    /// Declared reversibility `F(-v) = F(v)`.
    pub reversible: bool,
    pub name: String,
}

impl fmt::Debug for MinkowskiNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MinkowskiNorm({}, dim {})", self.name, self.dim)
    }
}

impl MinkowskiNorm {
    pub fn new(
        dim: usize,
        name: impl Into<String>,
        reversible: bool,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> MinkowskiNorm {
        MinkowskiNorm { dim, f: Arc::new(f), reversible, name: name.into() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn eval(&self, v: &[f64]) -> f64 {
        (self.f)(v)
    }

    pub fn euclidean(n: usize) -> MinkowskiNorm {
        MinkowskiNorm::new(n, "euclidean", true, crate::linalg::norm)
    }

    /// `v ↦ √(vᵀ A v)`.
    pub fn quadratic(a: &Mat) -> Result<MinkowskiNorm> {
        let l = cholesky_lower(a)
            .ok_or_else(|| GeomError::InvalidArgument("quadratic norm needs a positive-definite matrix".into()))?;
        let n = a.nrows();
        Ok(MinkowskiNorm::new(n, "quadratic", true, move |v| {
            let mut acc = 0.0;
            for j in 0..n {
                let mut s = 0.0;
                for i in j..n {
                    s += l[(i, j)] * v[i];
                }
                acc += s * s;
            }
            acc.sqrt()
        }))
    }

    pub fn lp(n: usize, p: f64) -> MinkowskiNorm {
        if p.is_infinite() {
            return MinkowskiNorm::new(n, "linf", true, |v| v.iter().fold(0.0, |m, x| m.max(x.abs())));
        }
        MinkowskiNorm::new(n, format!("l{p}"), true, move |v| {
            v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
        })
    }

    /// Compiles an expression over `v1..vm`, with optional named sub-norms.
    pub fn from_expr(e: &Expr, dim: usize, named: &[(String, NamedFn)]) -> Result<MinkowskiNorm> {
        let mut syms = Symbols::new().vector("v", dim);
        for (k, f) in named {
            syms = syms.function(k, f.clone());
        }
        let p = Program::compile(e, &syms)?;
        Ok(MinkowskiNorm::from_program(p, dim, e.to_string()))
    }

    /// Compiles an expression whose variables are the given scalar names, in order.
    pub fn from_expr_vars(e: &Expr, vars: &[&str]) -> Result<MinkowskiNorm> {
        let mut syms = Symbols::new();
        for v in vars {
            syms = syms.scalar(v);
        }
        let p = Program::compile(e, &syms)?;
        Ok(MinkowskiNorm::from_program(p, vars.len(), e.to_string()))
    }

    pub fn parse(text: &str, dim: usize) -> Result<MinkowskiNorm> {
        MinkowskiNorm::from_expr(&crate::dsl::parse(text)?, dim, &[])
    }

    fn from_program(p: Program, dim: usize, name: String) -> MinkowskiNorm {
        let rev = reversible_by_sampling(dim, &|v: &[f64]| p.eval_f64(v).unwrap_or(f64::NAN));
        MinkowskiNorm::new(dim, name, rev, move |v| p.eval_f64(v).unwrap_or(f64::NAN))
    }

    /// `v ↦ λ F(v)`.
    pub fn scaled(&self, lambda: f64) -> MinkowskiNorm {
        let f = self.f.clone();
        MinkowskiNorm::new(self.dim, format!("{lambda}*{}", self.name), self.reversible, move |v| lambda * f(v))
    }

    /// `v ↦ F(L v)`.
    pub fn compose_linear(&self, l: &Mat) -> MinkowskiNorm {
        let f = self.f.clone();
        let l = l.clone();
        let n = self.dim;
        MinkowskiNorm::new(n, format!("{}∘L", self.name), self.reversible, move |v| {
            let mut w = [0.0f64; 16];
            let w = &mut w[..n];
            for i in 0..n {
                w[i] = (0..n).map(|j| l[(i, j)] * v[j]).sum();
            }
            f(w)
        })
    }
}

fn reversible_by_sampling(dim: usize, f: &dyn Fn(&[f64]) -> f64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    (0..64).all(|_| {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = v.iter().map(|x| -x).collect();
        let (a, b) = (f(&v), f(&w));
        (a - b).abs() <= 1e-12 * (1.0 + a.abs())
    })
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct AxiomReport {
    pub axiom: String,
    pub max_violation: f64,
    pub argmax_sample: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MinkowskiReport {
    pub axioms: Vec<AxiomReport>,
    /// Sampled `max |F(−v) − F(v)| / F(v)`; reported, not part of the verdict.
    pub reversibility: AxiomReport,
    pub reversible_observed: bool,
    pub tolerance: f64,
    pub pass: bool,
}

/// Worst violations of homogeneity, subadditivity and definiteness over
/// random samples.
pub fn validate_minkowski(norm: &MinkowskiNorm, samples: usize, seed: u64) -> MinkowskiReport {
    let tol = 1e-9;
    let m = norm.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let scale = rng.random_range(0.05..3.0);
        let v: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        v.iter().map(|x| x * scale).collect()
    };
    let worst = |rep: &mut AxiomReport, viol: f64, sample: Vec<f64>| {
        if viol > rep.max_violation || (viol.is_nan() && !rep.max_violation.is_nan()) {
            rep.max_violation = viol;
            rep.argmax_sample = sample;
        }
    };
    let new = |name: &str| AxiomReport { axiom: name.into(), max_violation: 0.0, argmax_sample: Vec::new() };
    let mut hom = new("homogeneity");
    let mut sub = new("subadditivity");
    let mut def = new("definiteness");
    let mut rev = new("reversibility");
    let zero = vec![0.0; m];
    worst(&mut def, norm.eval(&zero).abs(), zero);
    for _ in 0..samples.max(1) {
        let v = draw(&mut rng);
        let u = draw(&mut rng);
        let lam = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..10.0) };
        let fv = norm.eval(&v);
        let fu = norm.eval(&u);
        let lv: Vec<f64> = v.iter().map(|x| lam * x).collect();
        let h = (norm.eval(&lv) - lam * fv).abs() / (1.0f64).max(lam * fv);
        let mut s = v.clone();
        s.push(lam);
        worst(&mut hom, h, s);
        let sum: Vec<f64> = v.iter().zip(&u).map(|(a, b)| a + b).collect();
        let sa = (norm.eval(&sum) - fv - fu).max(0.0) / (1.0f64).max(fv + fu);
        let mut s = v.clone();
        s.extend(&u);
        worst(&mut sub, sa, s);
        let vn = crate::linalg::norm(&v);
        // F must stay bounded away from zero on the Euclidean unit sphere.
        let d = if fv.is_nan() || fv <= 1e-12 * vn { 1.0 } else { 0.0 };
        worst(&mut def, d, v.clone());
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        worst(&mut rev, (norm.eval(&neg) - fv).abs() / fv.max(1e-300), v);
    }
    let pass = [&hom, &sub, &def].iter().all(|a| a.max_violation <= tol);
    MinkowskiReport {
        reversible_observed: rev.max_violation <= tol,
        axioms: vec![hom, sub, def],
        reversibility: rev,
        tolerance: tol,
        pass,
    }
}

/// A field of Minkowski norms over a chart domain.
pub trait FinslerField: Send + Sync {
    fn dim(&self) -> usize;
    fn domain(&self) -> &Domain;

    /// The norm on the tangent space at `x`.
    fn fiber(&self, x: &[f64]) -> Result<MinkowskiNorm>;

    fn eval(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        Ok(self.fiber(x)?.eval(v))
    }
}

fn check_point(domain: &Domain, x: &[f64]) -> Result<()> {
    if x.len() != domain.dim() {
        return Err(GeomError::Dimension { expected: domain.dim(), got: x.len() });
    }
    if !domain.contains(x) {
        return Err(GeomError::outside(x));
    }
    Ok(())
}

/// The same norm at every point.
pub struct MinkowskiField {
    pub norm: MinkowskiNorm,
    pub domain: Domain,
}

impl FinslerField for MinkowskiField {
    fn dim(&self) -> usize {
        self.norm.dim()
    }
    fn domain(&self) -> &Domain {
        &self.domain
    }
    fn fiber(&self, x: &[f64]) -> Result<MinkowskiNorm> {
        check_point(&self.domain, x)?;
        Ok(self.norm.clone())
    }
}

/// A field given by an expression in `x1..xn, v1..vn`.
pub struct ExprFinsler {
    n: usize,
    domain: Domain,
    program: Program,
}

impl ExprFinsler {
    pub fn new(e: &Expr, n: usize, domain: Domain, named: &[(String, NamedFn)]) -> Result<ExprFinsler> {
        let mut syms = Symbols::new().vector("x", n).vector("v", n);
        for (k, f) in named {
            syms = syms.function(k, f.clone());
        }
        let program = Program::compile(e, &syms)?;
        Ok(ExprFinsler { n, domain, program })
    }

    pub fn expr(&self) -> &Expr {
        self.program.source()
    }
}

impl FinslerField for ExprFinsler {
    fn dim(&self) -> usize {
        self.n
    }
    fn domain(&self) -> &Domain {
        &self.domain
    }
    fn fiber(&self, x: &[f64]) -> Result<MinkowskiNorm> {
        check_point(&self.domain, x)?;
        let n = self.n;
        let p = self.program.clone();
        let mut base = [0.0f64; 32];
        base[..n].copy_from_slice(x);
        // Evaluate once so that domain errors surface here rather than as NaN.
        p.eval_f64(&{
            let mut s = base;
            s[n] = 1.0;
            s
        }[..2 * n])?;
        let rev = reversible_by_sampling(n, &|v: &[f64]| {
            let mut s = base;
            s[n..2 * n].copy_from_slice(v);
            p.eval_f64(&s[..2 * n]).unwrap_or(f64::NAN)
        });
        Ok(MinkowskiNorm::new(n, p.source().to_string(), rev, move |v| {
            let mut s = base;
            s[n..2 * n].copy_from_slice(v);
            p.eval_f64(&s[..2 * n]).unwrap_or(f64::NAN)
        }))
    }
}

/// The norm `√(g_x(v, v))` of a metric.
pub struct RiemannFinsler {
    pub metric: Arc<dyn MetricField>,
}

impl FinslerField for RiemannFinsler {
    fn dim(&self) -> usize {
        self.metric.dim()
    }
    fn domain(&self) -> &Domain {
        self.metric.domain()
    }
    fn fiber(&self, x: &[f64]) -> Result<MinkowskiNorm> {
        MinkowskiNorm::quadratic(&self.metric.metric(x)?)
    }
}

/// `F(x, v) = N(‖v_1‖_{g_1}, …, ‖v_m‖_{g_m})`.
pub struct ProductFinsler {
    pub ps: ProductStructure,
    pub outer: MinkowskiNorm,
    domain: Domain,
}

impl FinslerField for ProductFinsler {
    fn dim(&self) -> usize {
        self.ps.dim()
    }
    fn domain(&self) -> &Domain {
        &self.domain
    }
    fn fiber(&self, x: &[f64]) -> Result<MinkowskiNorm> {
        check_point(&self.domain, x)?;
        let mut blocks = Vec::new();
        for (r, m) in &self.ps.blocks {
            blocks.push((r.clone(), MinkowskiNorm::quadratic(&m.metric(&x[r.clone()])?)?));
        }
        let outer = self.outer.clone();
        Ok(MinkowskiNorm::new(self.dim(), "product", outer.reversible, move |v| {
            let mut w = [0.0f64; 16];
            for (i, (r, b)) in blocks.iter().enumerate() {
                w[i] = b.eval(&v[r.clone()]);
            }
            outer.eval(&w[..blocks.len()])
        }))
    }
}

fn block_is_flat(m: &dyn MetricField) -> bool {
    if m.dim() < 2 || m.is_constant() {
        return true;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..5).all(|_| {
        let x = m.domain().sample_point(&mut rng, 1e-6);
        curvature_norm_sq(m, &x).map(|r| r < 1e-20).unwrap_or(false)
    })
}

/// Product-norm field; `N` must be reversible in the coordinate of every non-flat block.
pub fn product_finsler(ps: &ProductStructure, outer: MinkowskiNorm) -> Result<ProductFinsler> {
    if outer.dim() != ps.blocks.len() {
        return Err(GeomError::Dimension { expected: ps.blocks.len(), got: outer.dim() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (i, (_, m)) in ps.blocks.iter().enumerate() {
        if block_is_flat(m.as_ref()) {
            continue;
        }
        for _ in 0..64 {
            let w: Vec<f64> = (0..outer.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut f = w.clone();
            f[i] = -f[i];
            let (a, b) = (outer.eval(&w), outer.eval(&f));
            if (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
                return Err(GeomError::Precondition(format!(
                    "outer norm is not reversible in coordinate {} of a non-flat block",
                    i + 1
                )));
            }
        }
    }
    let parts: Vec<&Domain> = ps.blocks.iter().map(|(_, m)| m.domain()).collect();
    Ok(ProductFinsler { ps: ps.clone(), outer, domain: Domain::product(&parts) })
}

impl ProductFinsler {
    pub fn with_domain(mut self, domain: Domain) -> ProductFinsler {
        self.domain = domain;
        self
    }
}

/// A positive function on the chart.
pub type ScaleFn = Arc<dyn Fn(&[f64]) -> Result<f64> + Send + Sync>;

/// `(x, v) ↦ λ(x) F(x, v)`.
pub struct ScaledFinsler {
    pub inner: Arc<dyn FinslerField>,
    pub lam: ScaleFn,
}

impl FinslerField for ScaledFinsler {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn domain(&self) -> &Domain {
        self.inner.domain()
    }
    fn fiber(&self, x: &[f64]) -> Result<MinkowskiNorm> {
        let f = self.inner.fiber(x)?;
        let l = (self.lam)(x)?;
        if !(l > 0.0) || !l.is_finite() {
            return Err(GeomError::Precondition(format!("conformal factor {l} at {x:?} is not positive")));
        }
        Ok(f.scaled(l))
    }
}

pub fn conformal_scale(f: Arc<dyn FinslerField>, lam: ScaleFn) -> ScaledFinsler {
    ScaledFinsler { inner: f, lam }
}

/// `λ = e^φ` for a chart expression `φ`.
pub fn exp_scale(phi: ExprScalar) -> ScaleFn {
    Arc::new(move |x| Ok(phi.eval(x)?.exp()))
}

/// An affine chart map `x ↦ A x + b` with a declared homothety coefficient.
#[derive(Clone, Debug)]
pub struct DeckMap {
    pub name: String,
    pub matrix: Mat,
    pub offset: Vec<f64>,
    pub coefficient: f64,
}

impl DeckMap {
    pub fn linear(name: &str, matrix: Mat, coefficient: f64) -> DeckMap {
        let n = matrix.nrows();
        DeckMap { name: name.into(), matrix, offset: vec![0.0; n], coefficient }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|i| self.offset[i] + (0..n).map(|j| self.matrix[(i, j)] * x[j]).sum::<f64>())
            .collect()
    }

    pub fn differential(&self, _x: &[f64]) -> &Mat {
        &self.matrix
    }

    pub fn push(&self, v: &[f64]) -> Vec<f64> {
        let n = v.len();
        (0..n).map(|i| (0..n).map(|j| self.matrix[(i, j)] * v[j]).sum()).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DeckReport {
    /// Least-squares `c` in `F(φ(x), Dφ v) ≈ c F(x, v)`.
    pub fitted_c: f64,
    pub residual: f64,
    pub witness: Vec<f64>,
    pub samples: usize,
}

/// Fits `F(φ(x), Dφ v) = c F(x, v)` over samples and reports the worst residual.
pub fn deck_isometry_check(f: &dyn FinslerField, d: &DeckMap, samples: &[(Vec<f64>, Vec<f64>)]) -> Result<DeckReport> {
    let mut pairs = Vec::with_capacity(samples.len());
    for (x, v) in samples {
        let y = d.apply(x);
        let a = f.eval(&y, &d.push(v))?;
        let b = f.eval(x, v)?;
        pairs.push((a, b));
    }
    let num: f64 = pairs.iter().map(|(a, b)| a * b).sum();
    let den: f64 = pairs.iter().map(|(_, b)| b * b).sum();
    let c = if den > 0.0 { num / den } else { 1.0 };
    let mut residual = 0.0;
    let mut witness = Vec::new();
    for ((a, b), (x, v)) in pairs.iter().zip(samples) {
        let r = (a - c * b).abs();
        if r > residual {
            residual = r;
            witness = x.iter().chain(v).copied().collect();
        }
    }
    Ok(DeckReport { fitted_c: c, residual, witness, samples: samples.len() })
}

#[derive(Clone, Debug, Serialize)]
pub struct HomothetyReport {
    /// Fitted `k` in `Dφᵀ g(φ(x)) Dφ ≈ k² g(x)`.
    pub fitted_k: f64,
    pub residual: f64,
    pub witness: Vec<f64>,
}

pub fn deck_homothety_check(g: &dyn MetricField, d: &DeckMap, points: &[Vec<f64>]) -> Result<HomothetyReport> {
    let mut pairs = Vec::new();
    for x in points {
        let a = d.matrix.transpose() * g.metric(&d.apply(x))? * &d.matrix;
        pairs.push((a, g.metric(x)?));
    }
    let num: f64 = pairs.iter().map(|(a, b)| a.dot(b)).sum();
    let den: f64 = pairs.iter().map(|(_, b)| b.dot(b)).sum();
    let k2 = num / den;
    let mut residual = 0.0;
    let mut witness = Vec::new();
    for ((a, b), x) in pairs.iter().zip(points) {
        let r = crate::linalg::max_abs(&(a - b * k2));
        if r > residual {
            residual = r;
            witness = x.clone();
        }
    }
    Ok(HomothetyReport { fitted_k: k2.sqrt(), residual, witness })
}

/// Random `(x, v)` pairs with `x` and `φ(x)` well inside the domain.
pub fn deck_samples(domain: &Domain, d: &DeckMap, count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = domain.dim();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let x = domain.sample_point(&mut rng, 1e-3);
        if domain.clearance(&d.apply(&x)) <= 1e-3 {
            continue;
        }
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        out.push((x, v));
    }
    out
}

/// The Hopf quotient data for a base norm `F0` and ratio `q`: the field
/// `F0(v) / ‖x‖` on the punctured space, the deck map `x ↦ q x`, and the
/// flat reference metric.
pub struct HopfScene {
    pub field: ScaledFinsler,
    pub deck: DeckMap,
    pub metric: ExprMetric,
}

pub fn hopf_scene(f0: MinkowskiNorm, q: f64) -> Result<HopfScene> {
    if !(q > 0.0) || q == 1.0 {
        return Err(GeomError::InvalidArgument(format!("Hopf ratio must be positive and not 1, got {q}")));
    }
    let n = f0.dim();
    let domain = Domain::new(
        vec![f64::NEG_INFINITY; n],
        vec![f64::INFINITY; n],
        vec![Exclusion { center: vec![Some(0.0); n], radius: 1e-8 }],
    );
    let mut entries = std::collections::BTreeMap::new();
    for i in 0..n {
        entries.insert((i, i), Expr::num(1.0));
    }
    let metric = ExprMetric::new(n, domain.clone(), &entries)?;
    let base: Arc<dyn FinslerField> = Arc::new(MinkowskiField { norm: f0, domain });
    let field = conformal_scale(base, Arc::new(|x: &[f64]| Ok(1.0 / crate::linalg::norm(x))));
    let deck = DeckMap::linear("q", Mat::identity(n, n) * q, q);
    Ok(HopfScene { field, deck, metric })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euclidean_and_ell4_validate() {
        let r = validate_minkowski(&MinkowskiNorm::euclidean(3), 1000, 1);
        assert!(r.pass);
        assert!(r.axioms.iter().all(|a| a.max_violation < 1e-12));
        let l4 = MinkowskiNorm::parse("(v1^4 + v2^4)^(1/4)", 2).unwrap();
        let r = validate_minkowski(&l4, 1000, 2);
        assert!(r.pass && r.reversible_observed && l4.reversible);
    }

    #[test]
    fn randers_is_a_norm_but_not_reversible() {
        let f = MinkowskiNorm::parse("norm(v) + 0.5*v1", 2).unwrap();
        let r = validate_minkowski(&f, 1000, 3);
        assert!(r.pass);
        assert!(!r.reversible_observed);
        assert!(!f.reversible);
    }

    #[test]
    fn non_convex_function_fails() {
        let f = MinkowskiNorm::parse("(sqrt(abs(v1)) + sqrt(abs(v2)))^2", 2).unwrap();
        let r = validate_minkowski(&f, 1000, 4);
        assert!(!r.pass);
        assert!(r.axioms[1].max_violation > 0.1);
    }

    #[test]
    fn hopf_field_is_deck_invariant() {
        let l4 = MinkowskiNorm::parse("(v1^4 + v2^4)^(1/4)", 2).unwrap();
        let h = hopf_scene(l4, 3.0).unwrap();
        let s = deck_samples(h.field.domain(), &h.deck, 200, 9);
        let r = deck_isometry_check(&h.field, &h.deck, &s).unwrap();
        assert!((r.fitted_c - 1.0).abs() < 1e-12 && r.residual < 1e-12);
        let pts: Vec<Vec<f64>> = s.iter().map(|(x, _)| x.clone()).collect();
        let k = deck_homothety_check(&h.metric, &h.deck, &pts).unwrap();
        assert!((k.fitted_k - 3.0).abs() < 1e-12 && k.residual < 1e-12);
        assert!(hopf_scene(MinkowskiNorm::euclidean(2), 1.0).is_err());
    }

    #[test]
    fn scaling_roundtrip() {
        let f: Arc<dyn FinslerField> =
            Arc::new(MinkowskiField { norm: MinkowskiNorm::lp(2, 4.0), domain: Domain::unbounded(2) });
        let phi = ExprScalar::parse("x1 + 0.3*x2^2", 2).unwrap();
        let up: Arc<dyn FinslerField> = Arc::new(conformal_scale(f.clone(), exp_scale(phi)));
        let phi_neg = ExprScalar::parse("-(x1 + 0.3*x2^2)", 2).unwrap();
        let back = conformal_scale(up, exp_scale(phi_neg));
        let (x, v) = ([0.4, -1.2], [0.7, 0.1]);
        assert!((back.eval(&x, &v).unwrap() - f.eval(&x, &v).unwrap()).abs() < 1e-15);
    }
}
