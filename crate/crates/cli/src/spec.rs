//! Experiment specifications and scene references.

use std::path::PathBuf;

use finslerlab::scene::{load_scene, Scene};
use serde::{Deserialize, Serialize};

use crate::report::Format;
use crate::CliError;

/// Everything that determines a run; identical specs give identical reports
/// up to `wall_clock_ms`.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ExperimentSpec {
    pub command: String,
    pub scene: Option<String>,
    pub point: Option<Vec<f64>>,
    pub y: Option<Vec<f64>>,
    pub seed: u64,
    pub tol: Option<f64>,
    pub resolution: Option<usize>,
    pub samples: Option<usize>,
    pub backend: Option<String>,
    pub format: Format,
    pub out: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(command: &str) -> ExperimentSpec {
        ExperimentSpec { command: command.into(), ..Default::default() }
    }

    pub fn scene_ref(&self) -> Result<&str, CliError> {
        self.scene.as_deref().ok_or_else(|| CliError::Validation(format!("'{}' needs --scene", self.command)))
    }
}

/// Scene text for a reference: a path to a `.scene` file, a built-in name,
/// or a built-in with parameters, `name(key=value, ...)`.
pub fn scene_text(reference: &str) -> Result<String, CliError> {
    let path = std::path::Path::new(reference);
    if reference.ends_with(".scene") || path.is_file() {
        return std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{reference}: {e}")));
    }
    let (name, params) = match reference.split_once('(') {
        Some((n, rest)) => {
            let inner = rest
                .strip_suffix(')')
                .ok_or_else(|| CliError::Validation(format!("unbalanced parentheses in '{reference}'")))?;
            (n.trim(), inner)
        }
        None => (reference.trim(), ""),
    };
    let mut text = format!("scene = {name}\n");
    for kv in params.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("parameter '{kv}' is not key=value")))?;
        text.push_str(&format!("{} = {}\n", k.trim(), v.trim()));
    }
    Ok(text)
}

pub fn resolve_scene(reference: &str) -> Result<Scene, CliError> {
    load_scene(&scene_text(reference)?).map_err(|e| CliError::Validation(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_references_with_parameters() {
        assert_eq!(scene_text("punctured-plane(q=3, eps=1e-6)").unwrap(), "scene = punctured-plane\nq = 3\neps = 1e-6\n");
        assert!(resolve_scene("punctured-plane(q=3)").is_ok());
        assert!(resolve_scene("no-such-scene").is_err());
        assert!(scene_text("euclidean(n=3").is_err());
    }
}
