//! Scenes: a parsed configuration turned into live geometric objects.

use std::sync::Arc;

use crate::domain::Domain;
use crate::dsl::config::{block_config, BoundarySpec, FinslerSpec, MetricSpec};
use crate::dsl::{parse_scene, NamedFn, SceneConfig};
use crate::geometry::{ExprMetric, ExprScalar, MetricField, ProductMetric, ProductStructure};
use crate::norms::{
    conformal_scale, exp_scale, product_finsler, DeckMap, ExprFinsler, FinslerField, MinkowskiNorm, RiemannFinsler,
    ScaleFn,
};
use crate::{GeomError, Result};

/// How `d∞` is obtained for a scene.
#[derive(Clone)]
pub enum BoundaryModel {
    /// Exact distance to the metric boundary.
    ClosedForm { f: ScaleFn, source: String },
    Shooting { directions: usize, horizon: f64 },
}

impl std::fmt::Debug for BoundaryModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BoundaryModel::ClosedForm { source, .. } => write!(f, "ClosedForm({source})"),
            BoundaryModel::Shooting { directions, horizon } => write!(f, "Shooting({directions}, {horizon})"),
        }
    }
}

pub struct Scene {
    pub config: SceneConfig,
    pub domain: Domain,
    pub metric: Arc<dyn MetricField>,
    pub finsler: Arc<dyn FinslerField>,
    pub product: Option<ProductStructure>,
    pub decks: Vec<DeckMap>,
    pub boundary: Option<BoundaryModel>,
}

impl Scene {
    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    /// Builtin scene by name with default parameters.
    pub fn builtin(name: &str) -> Result<Scene> {
        load_scene(&format!("scene = {name}\n"))
    }

    pub fn from_config(config: SceneConfig) -> Result<Scene> {
        let n = config.dim;
        let mut blocks = Vec::new();
        let (domain, metric, product): (Domain, Arc<dyn MetricField>, _) = match &config.metric {
            MetricSpec::Entries(entries) => {
                let domain = Domain::from_spec(n, &config.domain);
                let m = ExprMetric::new(n, domain.clone(), entries)?;
                (domain, Arc::new(m), None)
            }
            MetricSpec::Product(refs) => {
                for r in refs {
                    blocks.push(Scene::from_config(block_config(r)?)?);
                }
                let parts: Vec<&Domain> = blocks.iter().map(|b| &b.domain).collect();
                let mut domain = Domain::product(&parts);
                let d = &config.domain;
                if d.lower.is_some() || d.upper.is_some() || !d.exclude.is_empty() {
                    domain = Domain::from_spec(n, d);
                }
                let ps = ProductStructure::new(blocks.iter().map(|b| b.metric.clone()).collect());
                let m = ProductMetric::with_domain(ps.clone(), domain.clone());
                (domain, Arc::new(m), Some(ps))
            }
        };
        let named: Vec<(String, NamedFn)> = config
            .norms
            .iter()
            .map(|(k, e)| (k.clone(), NamedFn { body: e.clone(), param: "v".into(), arity: n }))
            .collect();
        let mut finsler: Arc<dyn FinslerField> = match (&config.finsler, &product) {
            (None | Some(FinslerSpec::Riemannian), _) => Arc::new(RiemannFinsler { metric: metric.clone() }),
            (Some(FinslerSpec::Expr(e)), _) => Arc::new(ExprFinsler::new(e, n, domain.clone(), &named)?),
            (Some(FinslerSpec::BlockNorm(e)), Some(ps)) => {
                let names = ["a", "b", "c", "d", "e", "f", "g", "h"];
                let k = ps.blocks.len();
                if k > names.len() {
                    return Err(GeomError::InvalidArgument(format!("too many blocks ({k})")));
                }
                let outer = MinkowskiNorm::from_expr_vars(e, &names[..k])?;
                Arc::new(product_finsler(ps, outer)?.with_domain(domain.clone()))
            }
            (Some(FinslerSpec::BlockNorm(_)), None) => {
                return Err(GeomError::InvalidArgument("block_norm requires a product metric".into()))
            }
        };
        if let Some(phi) = &config.conformal {
            finsler = Arc::new(conformal_scale(finsler, exp_scale(ExprScalar::new(phi, n)?)));
        }
        let decks = config
            .decks
            .iter()
            .map(|d| {
                let rows: Vec<&[f64]> = d.matrix.iter().map(|r| r.as_slice()).collect();
                DeckMap {
                    name: d.name.clone(),
                    matrix: crate::linalg::mat_from_rows(&rows),
                    offset: d.offset.clone(),
                    coefficient: d.coefficient,
                }
            })
            .collect();
        let boundary = match &config.boundary {
            Some(BoundarySpec::ClosedForm(e)) => {
                let s = ExprScalar::new(e, n)?;
                let f: ScaleFn = Arc::new(move |x| s.eval(x));
                Some(BoundaryModel::ClosedForm { f, source: e.to_string() })
            }
            Some(BoundarySpec::Shooting { directions, horizon }) => {
                Some(BoundaryModel::Shooting { directions: *directions, horizon: *horizon })
            }
            None if !blocks.is_empty() => product_boundary(&blocks),
            None => None,
        };
        Ok(Scene { config, domain, metric, finsler, product, decks, boundary })
    }
}

/// `d∞` of a product is the smallest `d∞` over the factors.
fn product_boundary(blocks: &[Scene]) -> Option<BoundaryModel> {
    let mut parts: Vec<(std::ops::Range<usize>, ScaleFn)> = Vec::new();
    let mut sources = Vec::new();
    let mut off = 0;
    for b in blocks {
        let r = off..off + b.dim();
        off += b.dim();
        match &b.boundary {
            Some(BoundaryModel::ClosedForm { f, source }) => {
                sources.push(format!("{}[{}..{}]", source, r.start + 1, r.end));
                parts.push((r, f.clone()));
            }
            Some(BoundaryModel::Shooting { .. }) => return None,
            None if b.domain.has_boundary() => return None,
            None => {}
        }
    }
    if parts.is_empty() {
        return None;
    }
    let f: ScaleFn = Arc::new(move |x: &[f64]| {
        let mut m = f64::INFINITY;
        for (r, f) in &parts {
            m = m.min(f(&x[r.clone()])?);
        }
        Ok(m)
    });
    Some(BoundaryModel::ClosedForm { f, source: format!("min({})", sources.join(", ")) })
}

pub fn load_scene(text: &str) -> Result<Scene> {
    Scene::from_config(parse_scene(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_load() {
        for name in crate::dsl::catalog::BUILTINS {
            let s = Scene::builtin(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
            let x = s.domain.sample_point(&mut rng, 1e-3);
            s.metric.metric(&x).unwrap_or_else(|e| panic!("{name}: {e}"));
            let v: Vec<f64> = (0..s.dim()).map(|i| 0.3 + i as f64).collect();
            assert!(s.finsler.eval(&x, &v).unwrap() > 0.0, "{name}");
        }
    }

    #[test]
    fn product_boundary_is_min_of_factors() {
        let s = Scene::builtin("line-x-punctured").unwrap();
        let Some(BoundaryModel::ClosedForm { f, .. }) = &s.boundary else { panic!("no closed form") };
        assert!((f(&[7.0, 3.0, 4.0]).unwrap() - 5.0).abs() < 1e-14);
        assert!(s.product.is_some());
        assert!(Scene::builtin("sphere-x-line").unwrap().boundary.is_some());
        assert!(Scene::builtin("euclidean").unwrap().boundary.is_none());
    }

    #[test]
    fn conformal_section_scales_the_field() {
        let s = load_scene("scene = euclidean\n[conformal]\nphi = x1\n").unwrap();
        let f = s.finsler.eval(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((f - 1f64.exp()).abs() < 1e-14);
    }
}
