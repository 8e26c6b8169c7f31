//! Built-in scenes, generated as scene text so that they go through the
//! same parser and validation as user files.

use std::collections::BTreeMap;

pub const BUILTINS: &[&str] = &[
    "euclidean",
    "flat3",
    "line",
    "punctured-plane",
    "bumped-punctured",
    "sphere-chart",
    "sphere3",
    "sphere-x-line",
    "sphere-x-line-ell4",
    "sphere-x-sphere",
    "line-x-punctured",
    "line-x-bumped-punctured",
    "hopf-ell4",
    "randers",
    "linf2d",
    "l1-2d",
];

struct Params<'a> {
    scene: &'a str,
    given: &'a BTreeMap<String, String>,
    used: Vec<&'static str>,
}

impl Params<'_> {
    fn num(&mut self, key: &'static str, default: f64) -> Result<f64, String> {
        self.used.push(key);
        match self.given.get(key) {
            None => Ok(default),
            Some(s) => s
                .trim()
                .parse::<f64>()
                .map_err(|_| format!("{}: parameter '{key}' = '{s}' is not a number", self.scene)),
        }
    }

    fn int(&mut self, key: &'static str, default: usize) -> Result<usize, String> {
        let v = self.num(key, default as f64)?;
        if v < 1.0 || v.fract() != 0.0 {
            return Err(format!("{}: parameter '{key}' must be a positive integer", self.scene));
        }
        Ok(v as usize)
    }

    fn finish(&self) -> Result<(), String> {
        for k in self.given.keys() {
            if !self.used.contains(&k.as_str()) {
                return Err(format!("{}: unknown parameter '{k}'", self.scene));
            }
        }
        Ok(())
    }
}

fn list(v: impl IntoIterator<Item = String>) -> String {
    v.into_iter().collect::<Vec<_>>().join(", ")
}

fn rep(s: &str, n: usize) -> String {
    list((0..n).map(|_| s.to_string()))
}

fn identity_entries(n: usize, scale: &str) -> String {
    let mut s = String::new();
    for i in 1..=n {
        s.push_str(&format!("g{i}{i} = {scale}\n"));
    }
    s
}

fn flat(name: &str, n: usize) -> String {
    format!(
        "[scene]\nname = {name}\ndim = {n}\n[domain]\nsample_lower = {}\nsample_upper = {}\n[metric]\n{}[finsler]\nriemannian = true\n",
        rep("-1", n),
        rep("1", n),
        identity_entries(n, "1")
    )
}

/// Scene text of a built-in with parameter overrides applied.
pub fn builtin_text(name: &str, params: &BTreeMap<String, String>) -> Result<String, String> {
    let mut p = Params { scene: name, given: params, used: Vec::new() };
    let text = match name {
        "euclidean" => {
            let n = p.int("n", 2)?;
            flat("euclidean", n)
        }
        "flat3" => flat("flat3", 3),
        "line" => flat("line", 1),
        "punctured-plane" => {
            let eps = p.num("eps", 1e-8)?;
            let q = p.num("q", 2.0)?;
            format!(
                "[scene]\nname = punctured-plane\ndim = 2\n\
                 [domain]\nexclude = 0, 0 | {eps}\nsample_lower = -2, -2\nsample_upper = 2, 2\n\
                 [metric]\ng11 = 1\ng22 = 1\n[finsler]\nriemannian = true\n\
                 [boundary]\nd_infty = norm(x)\n\
                 [deck.q]\nmatrix = {q}, 0; 0, {q}\ncoefficient = {q}\n"
            )
        }
        "bumped-punctured" => {
            let eps = p.num("eps", 1e-8)?;
            format!(
                "[scene]\nname = bumped-punctured\ndim = 2\n\
                 [domain]\nexclude = 0, 0 | {eps}\nsample_lower = -1, -1\nsample_upper = 1, 1\n\
                 [metric]\ng11 = (1 + x1^2 + x2^2)^2\ng22 = (1 + x1^2 + x2^2)^2\n[finsler]\nriemannian = true\n\
                 [boundary]\nd_infty = norm(x) + norm(x)^3 / 3\n"
            )
        }
        "sphere-chart" => {
            let r = p.num("radius", 1.0)?;
            let m = p.num("margin", 0.05)?;
            let hi = std::f64::consts::PI - m;
            format!(
                "[scene]\nname = sphere-chart\ndim = 2\n\
                 [domain]\nlower = {m}, -inf\nupper = {hi}, inf\n\
                 sample_lower = 0.5, -3\nsample_upper = 2.6, 3\n\
                 [metric]\ng11 = {r2}\ng22 = {r2} * sin(x1)^2\n[finsler]\nriemannian = true\n\
                 [boundary]\nd_infty = {r} * min(x1 - {m}, {hi} - x1)\n",
                r2 = r * r
            )
        }
        "sphere3" => {
            let m = p.num("margin", 0.05)?;
            let hi = std::f64::consts::PI - m;
            format!(
                "[scene]\nname = sphere3\ndim = 3\n\
                 [domain]\nlower = {m}, {m}, -inf\nupper = {hi}, {hi}, inf\n\
                 sample_lower = 0.6, 0.6, -3\nsample_upper = 2.5, 2.5, 3\n\
                 [metric]\ng11 = 1\ng22 = sin(x1)^2\ng33 = sin(x1)^2 * sin(x2)^2\n[finsler]\nriemannian = true\n"
            )
        }
        "sphere-x-line" => product("sphere-x-line", "sphere-chart, line", "riemannian = true"),
        "sphere-x-line-ell4" => product(
            "sphere-x-line-ell4",
            "sphere-chart, line",
            "block_norm = (a^4 + b^4)^(1/4)",
        ),
        "sphere-x-sphere" => product(
            "sphere-x-sphere",
            "sphere-chart(radius=1), sphere-chart(radius=2)",
            "riemannian = true",
        ),
        "line-x-punctured" => product("line-x-punctured", "line, punctured-plane", "riemannian = true"),
        "line-x-bumped-punctured" => {
            product("line-x-bumped-punctured", "line, bumped-punctured", "riemannian = true")
        }
        "hopf-ell4" => {
            let n = p.int("n", 2)?;
            let q = p.num("q", 2.0)?;
            let eps = p.num("eps", 1e-8)?;
            let f0 = (1..=n).map(|i| format!("v{i}^4")).collect::<Vec<_>>().join(" + ");
            let rows: Vec<String> = (0..n)
                .map(|i| list((0..n).map(|j| if i == j { format!("{q}") } else { "0".into() })))
                .collect();
            format!(
                "[scene]\nname = hopf-ell4\ndim = {n}\n\
                 [domain]\nexclude = {} | {eps}\nsample_lower = {}\nsample_upper = {}\n\
                 [metric]\n{}[norms]\nF0 = ({f0})^(1/4)\n[finsler]\nF = 1 / norm(x) * F0(v)\n\
                 [boundary]\nd_infty = norm(x)\n\
                 [deck.q]\nmatrix = {}\ncoefficient = {q}\n",
                rep("0", n),
                rep("-2", n),
                rep("2", n),
                identity_entries(n, "1"),
                rows.join("; ")
            )
        }
        "randers" => {
            let c = p.num("c", 0.5)?;
            if c.abs() >= 1.0 {
                return Err("randers: |c| must be below 1".into());
            }
            format!(
                "[scene]\nname = randers\ndim = 2\n[domain]\nsample_lower = -1, -1\nsample_upper = 1, 1\n\
                 [metric]\ng11 = 1\ng22 = 1\n[finsler]\nF = norm(v) + {c} * v1\n"
            )
        }
        "linf2d" => "[scene]\nname = linf2d\ndim = 2\n[domain]\nsample_lower = -1, -1\nsample_upper = 1, 1\n\
                     [metric]\ng11 = 1\ng22 = 1\n[finsler]\nF = max(abs(v1), abs(v2))\n"
            .to_string(),
        "l1-2d" => "[scene]\nname = l1-2d\ndim = 2\n[domain]\nsample_lower = -1, -1\nsample_upper = 1, 1\n\
                    [metric]\ng11 = 1\ng22 = 1\n[finsler]\nF = abs(v1) + abs(v2)\n"
            .to_string(),
        other => {
            return Err(format!(
                "unknown built-in scene '{other}' (known: {})",
                BUILTINS.join(", ")
            ))
        }
    };
    p.finish()?;
    Ok(text)
}

fn product(name: &str, blocks: &str, finsler: &str) -> String {
    format!("[scene]\nname = {name}\n[metric]\nproduct = {blocks}\n[finsler]\n{finsler}\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::config::parse_scene;

    #[test]
    fn every_builtin_parses() {
        for name in BUILTINS {
            let text = builtin_text(name, &BTreeMap::new()).unwrap();
            let r = crate::dsl::config::parse_scene(&format!("scene = {name}\n"));
            assert!(r.is_ok(), "{name}: {r:?}\n{text}");
        }
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        let mut p = BTreeMap::new();
        p.insert("radius".to_string(), "2".to_string());
        assert!(builtin_text("euclidean", &p).is_err());
        assert!(parse_scene("scene = nope\n").is_err());
    }
}
