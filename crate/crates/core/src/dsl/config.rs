//! The `.scene` text format.
//!
//! A scene is a sequence of `[section]` headers followed by `key = value`
//! lines; `#` starts a comment. Keys before the first header may name a
//! built-in scene (`scene = hopf-ell4`) and override its parameters
//! (`q = 3`); any sections that follow are merged over the built-in, later
//! keys replacing earlier ones. See `docs/scene-format.md` for the grammar.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use super::ast::{parse_at, BinOp, Expr, ParseError};
use super::catalog;

#[derive(Clone, Debug, Error, PartialEq)]
#[error("{path} (line {line}): {msg}")]
pub struct ConfigError {
    pub path: String,
    pub line: usize,
    pub msg: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        ConfigError { path: path.into(), line, msg: msg.into() }
    }

    fn from_parse(path: &str, e: ParseError) -> Self {
        ConfigError::new(path, e.pos.line, format!("{:?} at column {}: {}", e.kind, e.pos.col, e.msg))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExcludeSpec {
    /// `None` coordinates are ignored, so an exclusion can remove a line or plane.
    pub center: Vec<Option<f64>>,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DomainSpec {
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub exclude: Vec<ExcludeSpec>,
    pub sample_lower: Option<Vec<f64>>,
    pub sample_upper: Option<Vec<f64>>,
}

/// A reference to a built-in scene with parameter overrides, e.g. `sphere-chart(radius=2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockRef {
    pub name: String,
    pub params: BTreeMap<String, String>,
}

impl std::fmt::Display for BlockRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name)?;
        if !self.params.is_empty() {
            let body: Vec<String> = self.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            write!(f, "({})", body.join("; "))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricSpec {
    /// Entries keyed by zero-based `(i, j)` with `i <= j` after validation.
    Entries(BTreeMap<(usize, usize), Expr>),
    Product(Vec<BlockRef>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum FinslerSpec {
    /// A norm expression in `x` and `v`.
    Expr(Expr),
    /// A norm of the block norms `a, b, c, …` of a product metric.
    BlockNorm(Expr),
    Riemannian,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BoundarySpec {
    ClosedForm(Expr),
    Shooting { directions: usize, horizon: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeckSpec {
    pub name: String,
    pub matrix: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub coefficient: f64,
}

/// A validated scene description.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub name: String,
    pub dim: usize,
    pub domain: DomainSpec,
    pub metric: MetricSpec,
    pub norms: BTreeMap<String, Expr>,
    pub finsler: Option<FinslerSpec>,
    pub conformal: Option<Expr>,
    pub boundary: Option<BoundarySpec>,
    pub decks: Vec<DeckSpec>,
    pub experiment: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

struct Entry {
    key: String,
    value: String,
    line: usize,
    col: usize,
}

struct Section {
    name: String,
    entries: Vec<Entry>,
}

fn tokenize(text: &str, line_offset: usize) -> Result<(Vec<Entry>, Vec<Section>), ConfigError> {
    let mut top = Vec::new();
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1 + line_offset;
        let content = raw.split('#').next().unwrap_or("");
        let trimmed = content.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('[') {
            if !trimmed.ends_with(']') {
                return Err(ConfigError::new("<header>", line, "unterminated section header"));
            }
            let name = trimmed[1..trimmed.len() - 1].trim().to_string();
            if name.is_empty() {
                return Err(ConfigError::new("<header>", line, "empty section name"));
            }
            sections.push(Section { name, entries: Vec::new() });
            continue;
        }
        let Some(eq) = content.find('=') else {
            return Err(ConfigError::new("<line>", line, format!("expected 'key = value', found '{trimmed}'")));
        };
        let key = content[..eq].trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::new("<line>", line, "missing key"));
        }
        let value_raw = &content[eq + 1..];
        let lead = value_raw.len() - value_raw.trim_start().len();
        let entry = Entry { key, value: value_raw.trim().to_string(), line, col: eq + 2 + lead };
        match sections.last_mut() {
            Some(s) => s.entries.push(entry),
            None => top.push(entry),
        }
    }
    Ok((top, sections))
}

fn parse_list(path: &str, line: usize, s: &str) -> Result<Vec<f64>, ConfigError> {
    s.split(',')
        .map(|t| parse_number(path, line, t.trim()))
        .collect()
}

fn parse_number(path: &str, line: usize, t: &str) -> Result<f64, ConfigError> {
    match t {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        "pi" => Ok(std::f64::consts::PI),
        _ => t
            .parse::<f64>()
            .map_err(|_| ConfigError::new(path, line, format!("'{t}' is not a number"))),
    }
}

fn parse_exclude(path: &str, line: usize, s: &str) -> Result<ExcludeSpec, ConfigError> {
    let (c, r) = s
        .split_once('|')
        .ok_or_else(|| ConfigError::new(path, line, "expected 'c1, c2, … | radius'"))?;
    let center = c
        .split(',')
        .map(|t| {
            let t = t.trim();
            if t == "*" {
                Ok(None)
            } else {
                parse_number(path, line, t).map(Some)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let radius = parse_number(path, line, r.trim())?;
    if radius <= 0.0 {
        return Err(ConfigError::new(path, line, "exclusion radius must be positive"));
    }
    Ok(ExcludeSpec { center, radius })
}

fn parse_block_refs(path: &str, line: usize, s: &str) -> Result<Vec<BlockRef>, ConfigError> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut start = 0;
    let bytes: Vec<char> = s.chars().collect();
    let mut pieces = Vec::new();
    for (i, &c) in bytes.iter().enumerate() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                pieces.push(bytes[start..i].iter().collect::<String>());
                start = i + 1;
            }
            _ => {}
        }
    }
    pieces.push(bytes[start..].iter().collect::<String>());
    for p in pieces {
        let p = p.trim();
        if p.is_empty() {
            return Err(ConfigError::new(path, line, "empty block reference"));
        }
        let (name, params) = match p.find('(') {
            Some(i) => {
                if !p.ends_with(')') {
                    return Err(ConfigError::new(path, line, format!("unterminated parameters in '{p}'")));
                }
                let mut params = BTreeMap::new();
                for kv in p[i + 1..p.len() - 1].split(';') {
                    let kv = kv.trim();
                    if kv.is_empty() {
                        continue;
                    }
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| ConfigError::new(path, line, format!("expected key=value in '{kv}'")))?;
                    params.insert(k.trim().to_string(), v.trim().to_string());
                }
                (p[..i].trim().to_string(), params)
            }
            None => (p.to_string(), BTreeMap::new()),
        };
        out.push(BlockRef { name, params });
    }
    Ok(out)
}

fn metric_index(key: &str, dim: usize) -> Option<(usize, usize)> {
    let rest = key.strip_prefix('g')?;
    let (i, j) = if let Some(r) = rest.strip_prefix('_') {
        let (a, b) = r.split_once('_')?;
        (a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)
    } else {
        let cs: Vec<char> = rest.chars().collect();
        if cs.len() != 2 {
            return None;
        }
        (cs[0].to_digit(10)? as usize, cs[1].to_digit(10)? as usize)
    };
    if i == 0 || j == 0 || i > dim || j > dim {
        return None;
    }
    Some((i - 1, j - 1))
}

struct Builder {
    name: Option<String>,
    dim: Option<(usize, usize)>,
    domain: DomainSpec,
    entries: BTreeMap<(usize, usize), (Expr, usize)>,
    raw_entries: Vec<(String, String, usize, usize)>,
    symmetrize: bool,
    product: Option<Vec<BlockRef>>,
    norms: BTreeMap<String, Expr>,
    finsler: Option<FinslerSpec>,
    conformal: Option<Expr>,
    boundary_expr: Option<Expr>,
    boundary_mode: Option<String>,
    directions: usize,
    horizon: f64,
    decks: BTreeMap<String, (Option<Vec<Vec<f64>>>, Option<Vec<f64>>, Option<f64>, usize)>,
    experiment: BTreeMap<String, String>,
    warnings: Vec<String>,
}

fn expr_of(path: &str, e: &Entry) -> Result<Expr, ConfigError> {
    parse_at(&e.value, e.line, e.col).map_err(|err| ConfigError::from_parse(path, err))
}

fn parse_bool(path: &str, e: &Entry) -> Result<bool, ConfigError> {
    match e.value.as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(ConfigError::new(path, e.line, format!("'{other}' is not a boolean"))),
    }
}

impl Builder {
    fn new() -> Self {
        Builder {
            name: None,
            dim: None,
            domain: DomainSpec::default(),
            entries: BTreeMap::new(),
            raw_entries: Vec::new(),
            symmetrize: false,
            product: None,
            norms: BTreeMap::new(),
            finsler: None,
            conformal: None,
            boundary_expr: None,
            boundary_mode: None,
            directions: 256,
            horizon: 1e3,
            decks: BTreeMap::new(),
            experiment: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    fn section(&mut self, s: &Section) -> Result<(), ConfigError> {
        let sec = s.name.as_str();
        for e in &s.entries {
            let path = format!("{sec}.{}", e.key);
            match (sec, e.key.as_str()) {
                ("scene", "name") => self.name = Some(e.value.clone()),
                ("scene", "dim") => {
                    let d: usize = e
                        .value
                        .parse()
                        .map_err(|_| ConfigError::new(&path, e.line, "dim must be a positive integer"))?;
                    if d == 0 {
                        return Err(ConfigError::new(&path, e.line, "dim must be positive"));
                    }
                    self.dim = Some((d, e.line));
                }
                ("domain", "lower") => self.domain.lower = Some(parse_list(&path, e.line, &e.value)?),
                ("domain", "upper") => self.domain.upper = Some(parse_list(&path, e.line, &e.value)?),
                ("domain", "sample_lower") => {
                    self.domain.sample_lower = Some(parse_list(&path, e.line, &e.value)?)
                }
                ("domain", "sample_upper") => {
                    self.domain.sample_upper = Some(parse_list(&path, e.line, &e.value)?)
                }
                ("domain", "exclude") => {
                    self.domain.exclude.push(parse_exclude(&path, e.line, &e.value)?)
                }
                ("metric", "symmetrize") => self.symmetrize = parse_bool(&path, e)?,
                ("metric", "product") => {
                    self.product = Some(parse_block_refs(&path, e.line, &e.value)?);
                    self.raw_entries.clear();
                }
                ("metric", _) => {
                    self.raw_entries.push((e.key.clone(), e.value.clone(), e.line, e.col));
                    self.product = None;
                }
                ("norms", name) => {
                    self.norms.insert(name.to_string(), expr_of(&path, e)?);
                }
                ("finsler", "F") => self.finsler = Some(FinslerSpec::Expr(expr_of(&path, e)?)),
                ("finsler", "block_norm") => {
                    self.finsler = Some(FinslerSpec::BlockNorm(expr_of(&path, e)?))
                }
                ("finsler", "riemannian") => {
                    if parse_bool(&path, e)? {
                        self.finsler = Some(FinslerSpec::Riemannian)
                    }
                }
                ("conformal", "phi") => self.conformal = Some(expr_of(&path, e)?),
                ("boundary", "d_infty") => {
                    self.boundary_expr = Some(expr_of(&path, e)?);
                    self.boundary_mode = Some("closed-form".into());
                }
                ("boundary", "mode") => match e.value.as_str() {
                    "shooting" | "closed-form" | "none" => self.boundary_mode = Some(e.value.clone()),
                    other => return Err(ConfigError::new(&path, e.line, format!("unknown boundary mode '{other}'"))),
                },
                ("boundary", "directions") => {
                    self.directions = e
                        .value
                        .parse()
                        .map_err(|_| ConfigError::new(&path, e.line, "directions must be an integer"))?
                }
                ("boundary", "horizon") => self.horizon = parse_number(&path, e.line, &e.value)?,
                ("experiment", k) => {
                    self.experiment.insert(k.to_string(), e.value.clone());
                }
                (s, k) if s.starts_with("deck.") => {
                    let name = s["deck.".len()..].to_string();
                    let slot = self.decks.entry(name).or_insert((None, None, None, e.line));
                    match k {
                        "matrix" => {
                            let rows = e
                                .value
                                .split(';')
                                .map(|r| parse_list(&path, e.line, r))
                                .collect::<Result<Vec<_>, _>>()?;
                            slot.0 = Some(rows);
                        }
                        "offset" => slot.1 = Some(parse_list(&path, e.line, &e.value)?),
                        "coefficient" => slot.2 = Some(parse_number(&path, e.line, &e.value)?),
                        _ => return Err(ConfigError::new(&path, e.line, "unknown deck key")),
                    }
                }
                _ => return Err(ConfigError::new(&path, e.line, "unknown key")),
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<SceneConfig, ConfigError> {
        let product_dim = match &self.product {
            Some(blocks) => {
                let mut d = 0;
                for b in blocks {
                    d += block_config(b).map_err(|e| ConfigError::new("metric.product", 0, e.to_string()))?.dim;
                }
                Some(d)
            }
            None => None,
        };
        let (dim, dim_line) = match (self.dim, product_dim) {
            (Some((d, line)), Some(pd)) if d != pd => {
                return Err(ConfigError::new("scene.dim", line, format!("product blocks have total dimension {pd}")))
            }
            (Some(d), _) => d,
            (None, Some(pd)) => (pd, 0),
            (None, None) => return Err(ConfigError::new("scene.dim", 0, "missing dimension")),
        };
        let name = self.name.clone().unwrap_or_else(|| "unnamed".to_string());

        for (key, list) in [
            ("domain.lower", &self.domain.lower),
            ("domain.upper", &self.domain.upper),
            ("domain.sample_lower", &self.domain.sample_lower),
            ("domain.sample_upper", &self.domain.sample_upper),
        ] {
            if let Some(l) = list {
                if l.len() != dim {
                    return Err(ConfigError::new(key, dim_line, format!("expected {dim} bounds, got {}", l.len())));
                }
            }
        }
        if let (Some(lo), Some(hi)) = (&self.domain.lower, &self.domain.upper) {
            if lo.iter().zip(hi).any(|(a, b)| a >= b) {
                return Err(ConfigError::new("domain", dim_line, "empty domain: lower >= upper"));
            }
        }
        for ex in &self.domain.exclude {
            if ex.center.len() != dim {
                return Err(ConfigError::new("domain.exclude", dim_line, format!("center needs {dim} coordinates")));
            }
        }

        let metric = if let Some(blocks) = self.product.take() {
            MetricSpec::Product(blocks)
        } else {
            for (key, value, line, col) in std::mem::take(&mut self.raw_entries) {
                let path = format!("metric.{key}");
                let (i, j) = metric_index(&key, dim)
                    .ok_or_else(|| ConfigError::new(&path, line, format!("not a metric entry for dim {dim}")))?;
                let e = parse_at(&value, line, col).map_err(|err| ConfigError::from_parse(&path, err))?;
                self.entries.insert((i, j), (e, line));
            }
            let mut out = BTreeMap::new();
            for i in 0..dim {
                for j in i..dim {
                    let upper = self.entries.get(&(i, j));
                    let lower = if i == j { None } else { self.entries.get(&(j, i)) };
                    let e = match (upper, lower) {
                        (Some((a, _)), Some((b, line))) if a != b => {
                            if !self.symmetrize {
                                return Err(ConfigError::new(
                                    format!("metric.g{}{}", j + 1, i + 1),
                                    *line,
                                    "asymmetric metric entries (set symmetrize = true to average them)",
                                ));
                            }
                            self.warnings.push(format!("metric entries ({}, {}) averaged", i + 1, j + 1));
                            Expr::bin(
                                BinOp::Mul,
                                Expr::num(0.5),
                                Expr::bin(BinOp::Add, a.clone(), b.clone()),
                            )
                        }
                        (Some((a, _)), _) | (None, Some((a, _))) => a.clone(),
                        (None, None) => {
                            if i == j {
                                return Err(ConfigError::new(
                                    format!("metric.g{}{}", i + 1, i + 1),
                                    dim_line,
                                    "missing diagonal entry",
                                ));
                            }
                            Expr::num(0.0)
                        }
                    };
                    out.insert((i, j), e);
                }
            }
            MetricSpec::Entries(out)
        };

        if matches!(self.finsler, Some(FinslerSpec::BlockNorm(_))) && !matches!(metric, MetricSpec::Product(_)) {
            return Err(ConfigError::new("finsler.block_norm", dim_line, "block_norm requires a product metric"));
        }

        let boundary = match self.boundary_mode.as_deref() {
            Some("closed-form") => Some(BoundarySpec::ClosedForm(self.boundary_expr.take().ok_or_else(
                || ConfigError::new("boundary.d_infty", dim_line, "closed-form mode needs d_infty"),
            )?)),
            Some("shooting") => Some(BoundarySpec::Shooting { directions: self.directions, horizon: self.horizon }),
            _ => None,
        };

        let mut decks = Vec::new();
        for (name, (m, off, k, line)) in self.decks {
            let path = format!("deck.{name}");
            let matrix = m.ok_or_else(|| ConfigError::new(format!("{path}.matrix"), line, "missing matrix"))?;
            if matrix.len() != dim || matrix.iter().any(|r| r.len() != dim) {
                return Err(ConfigError::new(format!("{path}.matrix"), line, format!("matrix must be {dim}x{dim}")));
            }
            let offset = off.unwrap_or_else(|| vec![0.0; dim]);
            if offset.len() != dim {
                return Err(ConfigError::new(format!("{path}.offset"), line, "offset has wrong length"));
            }
            let coefficient = k.unwrap_or(1.0);
            if coefficient <= 0.0 {
                return Err(ConfigError::new(format!("{path}.coefficient"), line, "coefficient must be positive"));
            }
            decks.push(DeckSpec { name, matrix, offset, coefficient });
        }

        Ok(SceneConfig {
            name,
            dim,
            domain: self.domain,
            metric,
            norms: self.norms,
            finsler: self.finsler,
            conformal: self.conformal,
            boundary,
            decks,
            experiment: self.experiment,
            warnings: self.warnings,
        })
    }
}

/// Configuration of one block of a product metric.
pub fn block_config(b: &BlockRef) -> Result<SceneConfig, ConfigError> {
    let text = catalog::builtin_text(&b.name, &b.params).map_err(|msg| ConfigError::new("metric.product", 0, msg))?;
    parse_scene(&text)
}

/// Parses scene text, expanding a leading `scene = <built-in>` reference.
pub fn parse_scene(text: &str) -> Result<SceneConfig, ConfigError> {
    let (top, sections) = tokenize(text, 0)?;
    let mut builder = Builder::new();
    let mut builtin: Option<String> = None;
    let mut params = BTreeMap::new();
    for e in &top {
        if e.key == "scene" {
            builtin = Some(e.value.clone());
        } else {
            params.insert(e.key.clone(), e.value.clone());
        }
    }
    if let Some(name) = builtin {
        let base = catalog::builtin_text(&name, &params)
            .map_err(|msg| ConfigError::new("scene", top[0].line, msg))?;
        let (_, base_sections) = tokenize(&base, 0)?;
        for s in &base_sections {
            builder.section(s)?;
        }
    } else if let Some(e) = top.first() {
        return Err(ConfigError::new(&e.key, e.line, "top-level keys require 'scene = <built-in>'"));
    }
    for s in &sections {
        builder.section(s)?;
    }
    builder.finish()
}

fn fmt_f(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f(*x)).collect::<Vec<_>>().join(", ")
}

impl SceneConfig {
    /// Canonical text form; parsing it yields an equal configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[scene]\nname = {}\ndim = {}", self.name, self.dim);
        let d = &self.domain;
        if d.lower.is_some() || d.upper.is_some() || !d.exclude.is_empty() || d.sample_lower.is_some() {
            s.push_str("\n[domain]\n");
            if let Some(l) = &d.lower {
                let _ = writeln!(s, "lower = {}", fmt_list(l));
            }
            if let Some(u) = &d.upper {
                let _ = writeln!(s, "upper = {}", fmt_list(u));
            }
            for ex in &d.exclude {
                let c: Vec<String> = ex
                    .center
                    .iter()
                    .map(|c| c.map(fmt_f).unwrap_or_else(|| "*".into()))
                    .collect();
                let _ = writeln!(s, "exclude = {} | {}", c.join(", "), fmt_f(ex.radius));
            }
            if let Some(l) = &d.sample_lower {
                let _ = writeln!(s, "sample_lower = {}", fmt_list(l));
            }
            if let Some(u) = &d.sample_upper {
                let _ = writeln!(s, "sample_upper = {}", fmt_list(u));
            }
        }
        s.push_str("\n[metric]\n");
        match &self.metric {
            MetricSpec::Entries(entries) => {
                for ((i, j), e) in entries {
                    if self.dim < 10 {
                        let _ = writeln!(s, "g{}{} = {}", i + 1, j + 1, e);
                    } else {
                        let _ = writeln!(s, "g_{}_{} = {}", i + 1, j + 1, e);
                    }
                }
            }
            MetricSpec::Product(blocks) => {
                let b: Vec<String> = blocks.iter().map(|b| b.to_string()).collect();
                let _ = writeln!(s, "product = {}", b.join(", "));
            }
        }
        if !self.norms.is_empty() {
            s.push_str("\n[norms]\n");
            for (k, e) in &self.norms {
                let _ = writeln!(s, "{k} = {e}");
            }
        }
        if let Some(f) = &self.finsler {
            s.push_str("\n[finsler]\n");
            match f {
                FinslerSpec::Expr(e) => {
                    let _ = writeln!(s, "F = {e}");
                }
                FinslerSpec::BlockNorm(e) => {
                    let _ = writeln!(s, "block_norm = {e}");
                }
                FinslerSpec::Riemannian => s.push_str("riemannian = true\n"),
            }
        }
        if let Some(phi) = &self.conformal {
            let _ = writeln!(s, "\n[conformal]\nphi = {phi}");
        }
        match &self.boundary {
            Some(BoundarySpec::ClosedForm(e)) => {
                let _ = writeln!(s, "\n[boundary]\nd_infty = {e}");
            }
            Some(BoundarySpec::Shooting { directions, horizon }) => {
                let _ = writeln!(
                    s,
                    "\n[boundary]\nmode = shooting\ndirections = {directions}\nhorizon = {}",
                    fmt_f(*horizon)
                );
            }
            None => {}
        }
        for deck in &self.decks {
            let rows: Vec<String> = deck.matrix.iter().map(|r| fmt_list(r)).collect();
            let _ = writeln!(
                s,
                "\n[deck.{}]\nmatrix = {}\noffset = {}\ncoefficient = {}",
                deck.name,
                rows.join("; "),
                fmt_list(&deck.offset),
                fmt_f(deck.coefficient)
            );
        }
        if !self.experiment.is_empty() {
            s.push_str("\n[experiment]\n");
            for (k, v) in &self.experiment {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPHERE: &str = "
[scene]
name = test-sphere
dim = 2
[domain]
lower = 0.05, -inf
upper = 3.0, inf
[metric]
g11 = 1
g22 = sin(x1)^2
[finsler]
riemannian = true
";

    #[test]
    fn parses_entries_and_fills_off_diagonal() {
        let c = parse_scene(SPHERE).unwrap();
        assert_eq!(c.dim, 2);
        match &c.metric {
            MetricSpec::Entries(e) => {
                assert_eq!(e.len(), 3);
                assert_eq!(e[&(0, 1)], Expr::num(0.0));
            }
            _ => panic!(),
        }
        assert_eq!(c.domain.lower.as_ref().unwrap()[1], f64::NEG_INFINITY);
    }

    #[test]
    fn asymmetric_entries_rejected_unless_symmetrized() {
        let text = "[scene]\ndim = 2\n[metric]\ng11 = 1\ng22 = 1\ng12 = x1\ng21 = x2\n";
        let err = parse_scene(text).unwrap_err();
        assert_eq!(err.path, "metric.g21");
        let ok = parse_scene(&format!("{text}symmetrize = true\n")).unwrap();
        assert_eq!(ok.warnings.len(), 1);
    }

    #[test]
    fn errors_name_the_offending_key() {
        let err = parse_scene("[scene]\ndim = 2\n[metric]\ng11 = 1\ng22 = (1 +\n").unwrap_err();
        assert_eq!(err.path, "metric.g22");
        assert_eq!(err.line, 5);
        let err = parse_scene("[scene]\ndim = 2\n[domain]\nlower = 0\n[metric]\ng11=1\ng22=1\n").unwrap_err();
        assert_eq!(err.path, "domain.lower");
        let err = parse_scene("[scene]\ndim = 2\n[metric]\ng11=1\n").unwrap_err();
        assert_eq!(err.path, "metric.g22");
        let err = parse_scene("[scene]\ndim = 2\n[metric]\ng11=1\ng22=1\n[bogus]\nx = 1\n").unwrap_err();
        assert_eq!(err.path, "bogus.x");
    }

    #[test]
    fn canonical_text_round_trips() {
        let c = parse_scene(SPHERE).unwrap();
        let again = parse_scene(&c.to_text()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn builtin_reference_with_override() {
        let c = parse_scene("scene = hopf-ell4\nq = 3\n").unwrap();
        assert_eq!(c.decks.len(), 1);
        assert_eq!(c.decks[0].coefficient, 3.0);
        assert_eq!(c.decks[0].matrix[0][0], 3.0);
    }

    #[test]
    fn block_refs_with_params() {
        let b = parse_block_refs("p", 1, "sphere-chart(radius=2), line").unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].params["radius"], "2");
        assert_eq!(b[1].name, "line");
        assert_eq!(b[0].to_string(), "sphere-chart(radius=2)");
    }
}
