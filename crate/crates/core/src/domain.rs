//! Chart domains: an open box minus closed balls.
//!
//! An exclusion ball may ignore some coordinates (`None` in its center), so
//! `(*, 0, 0 | r)` removes a tube around the first axis.

use rand::Rng;

use crate::dsl::config::{DomainSpec, ExcludeSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Exclusion {
    pub center: Vec<Option<f64>>,
    pub radius: f64,
}

impl Exclusion {
    /// Euclidean distance from `x` to the center over the active coordinates.
    fn center_distance(&self, x: &[f64]) -> f64 {
        self.center
            .iter()
            .zip(x)
            .filter_map(|(c, xi)| c.map(|c| (xi - c) * (xi - c)))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub exclude: Vec<Exclusion>,
    sample_lower: Vec<f64>,
    sample_upper: Vec<f64>,
}

impl Domain {
    pub fn unbounded(n: usize) -> Domain {
        Domain::new(vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n], Vec::new())
    }

    pub fn new(lower: Vec<f64>, upper: Vec<f64>, exclude: Vec<Exclusion>) -> Domain {
        let sample_lower = lower.iter().map(|&l| if l.is_finite() { l } else { -1.0 }).collect();
        let sample_upper = upper.iter().map(|&u| if u.is_finite() { u } else { 1.0 }).collect();
        Domain { lower, upper, exclude, sample_lower, sample_upper }
    }

    pub fn from_spec(n: usize, spec: &DomainSpec) -> Domain {
        let lower = spec.lower.clone().unwrap_or_else(|| vec![f64::NEG_INFINITY; n]);
        let upper = spec.upper.clone().unwrap_or_else(|| vec![f64::INFINITY; n]);
        let exclude = spec
            .exclude
            .iter()
            .map(|ExcludeSpec { center, radius }| Exclusion { center: center.clone(), radius: *radius })
            .collect();
        let mut d = Domain::new(lower, upper, exclude);
        if let Some(l) = &spec.sample_lower {
            d.sample_lower = l.clone();
        }
        if let Some(u) = &spec.sample_upper {
            d.sample_upper = u.clone();
        }
        d
    }

    /// Cartesian product; exclusions of each factor ignore the other's coordinates.
    pub fn product(parts: &[&Domain]) -> Domain {
        let n: usize = parts.iter().map(|d| d.dim()).sum();
        let mut out = Domain::unbounded(n);
        out.lower.clear();
        out.upper.clear();
        out.sample_lower.clear();
        out.sample_upper.clear();
        let mut offset = 0;
        for d in parts {
            out.lower.extend(&d.lower);
            out.upper.extend(&d.upper);
            out.sample_lower.extend(&d.sample_lower);
            out.sample_upper.extend(&d.sample_upper);
            for ex in &d.exclude {
                let mut center = vec![None; n];
                center[offset..offset + d.dim()].copy_from_slice(&ex.center);
                out.exclude.push(Exclusion { center, radius: ex.radius });
            }
            offset += d.dim();
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().all(|v| v.is_finite()) && self.clearance(x) > 0.0
    }

    /// Euclidean chart distance from `x` to the domain boundary (negative outside).
    pub fn clearance(&self, x: &[f64]) -> f64 {
        let mut c = f64::INFINITY;
        for i in 0..self.dim() {
            c = c.min(x[i] - self.lower[i]).min(self.upper[i] - x[i]);
        }
        for ex in &self.exclude {
            c = c.min(ex.center_distance(x) - ex.radius);
        }
        c
    }

    /// The boundary point closest to `x`, if the domain has a boundary.
    pub fn nearest_boundary_point(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut consider = |d: f64, p: Vec<f64>| {
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, p));
            }
        };
        for i in 0..self.dim() {
            if self.lower[i].is_finite() {
                let mut p = x.to_vec();
                p[i] = self.lower[i];
                consider(x[i] - self.lower[i], p);
            }
            if self.upper[i].is_finite() {
                let mut p = x.to_vec();
                p[i] = self.upper[i];
                consider(self.upper[i] - x[i], p);
            }
        }
        for ex in &self.exclude {
            let r = ex.center_distance(x);
            let mut p = x.to_vec();
            for (i, c) in ex.center.iter().enumerate() {
                if let Some(c) = c {
                    p[i] = if r > 0.0 { c + (x[i] - c) * ex.radius / r } else { *c };
                }
            }
            consider(r - ex.radius, p);
        }
        best.map(|(_, p)| p)
    }

    pub fn has_boundary(&self) -> bool {
        !self.exclude.is_empty()
            || self.lower.iter().any(|l| l.is_finite())
            || self.upper.iter().any(|u| u.is_finite())
    }

    pub fn sample_box(&self) -> (&[f64], &[f64]) {
        (&self.sample_lower, &self.sample_upper)
    }

    /// Uniform point of the sample box with at least `min_clearance` to the boundary.
    pub fn sample_point<R: Rng>(&self, rng: &mut R, min_clearance: f64) -> Vec<f64> {
        for _ in 0..100_000 {
            let x: Vec<f64> = (0..self.dim())
                .map(|i| rng.random_range(self.sample_lower[i]..self.sample_upper[i]))
                .collect();
            if self.clearance(&x) > min_clearance {
                return x;
            }
        }
        panic!("sample box has no point with clearance {min_clearance}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn punctured() -> Domain {
        Domain::new(
            vec![f64::NEG_INFINITY; 2],
            vec![f64::INFINITY; 2],
            vec![Exclusion { center: vec![Some(0.0), Some(0.0)], radius: 1e-8 }],
        )
    }

    #[test]
    fn punctured_plane_clearance() {
        let d = punctured();
        assert!((d.clearance(&[3.0, 4.0]) - (5.0 - 1e-8)).abs() < 1e-15);
        assert!(!d.contains(&[0.0, 0.0]));
        let p = d.nearest_boundary_point(&[3.0, 4.0]).unwrap();
        assert!((p[0] - 0.6e-8).abs() < 1e-20);
    }

    #[test]
    fn product_exclusion_ignores_line_coordinate() {
        let line = Domain::unbounded(1);
        let d = Domain::product(&[&line, &punctured()]);
        assert_eq!(d.dim(), 3);
        assert!((d.clearance(&[100.0, 0.0, 2.0]) - 2.0).abs() < 1e-7);
        assert!(!d.contains(&[5.0, 0.0, 0.0]));
    }

    #[test]
    fn box_faces() {
        let d = Domain::new(vec![0.05, f64::NEG_INFINITY], vec![3.0, f64::INFINITY], vec![]);
        assert!((d.clearance(&[1.0, 7.0]) - 0.95).abs() < 1e-15);
        assert_eq!(d.nearest_boundary_point(&[2.5, 1.0]).unwrap(), vec![3.0, 1.0]);
        assert!(Domain::unbounded(2).nearest_boundary_point(&[1.0, 1.0]).is_none());
    }
}
