//! JSON model configuration.
//!
//! ```json
//! {
//!   "name": "example1",
//!   "d": 2,
//!   "builtin": "example1",
//!   "params": {"a": 0.2, "b": 0.0, "c": 1.0, "y": 0.2, "x": 1.5}
//! }
//! ```
//!
//! Custom models leave `builtin` null and list one law per phase for each
//! level, continued upwards by `tail_rule`:
//!
//! ```json
//! {
//!   "name": "binary",
//!   "d": 1,
//!   "builtin": null,
//!   "custom_levels": [[{"atoms": [
//!     {"prob": 0.6, "children": [{"level": 0, "phase": 1, "count": 2}]},
//!     {"prob": 0.4, "children": []}
//!   ]}]],
//!   "tail_rule": "shift"
//! }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    build_chain, build_custom, build_example1, build_example2, Atom, Builtin, Model, ModelError,
    OffspringLaw, TailRule, TypeId,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("config declares d = {declared} but the model has d = {actual}")]
    DimensionMismatch { declared: usize, actual: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChildSpec {
    pub level: usize,
    pub phase: usize,
    #[serde(default = "one")]
    pub count: u32,
}

fn one() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub prob: f64,
    #[serde(default)]
    pub children: Vec<ChildSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawSpec {
    pub atoms: Vec<AtomSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: Option<String>,
    pub d: Option<usize>,
    #[serde(default)]
    pub builtin: Option<Builtin>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub custom_levels: Vec<Vec<LawSpec>>,
    #[serde(default)]
    pub tail_rule: Option<TailRule>,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn build(&self) -> Result<Model, ConfigError> {
        let param = |k: &str| {
            self.params
                .get(k)
                .copied()
                .ok_or_else(|| ConfigError::MissingParam(k.to_string()))
        };
        let model = match self.builtin {
            Some(builtin) => {
                if !self.custom_levels.is_empty() {
                    return Err(ConfigError::Invalid(
                        "custom_levels given for a builtin model".into(),
                    ));
                }
                let allowed: &[&str] = match builtin {
                    Builtin::Example1 => &["a", "b", "c", "y", "x"],
                    Builtin::Example2 | Builtin::Chain => &["a", "b", "c"],
                };
                if let Some(k) = self.params.keys().find(|k| !allowed.contains(&k.as_str())) {
                    return Err(ModelError::UnknownParameter(k.clone()).into());
                }
                match builtin {
                    Builtin::Example1 => build_example1(
                        param("a")?,
                        param("b")?,
                        param("c")?,
                        param("y")?,
                        param("x")?,
                    )?,
                    Builtin::Example2 => build_example2(param("a")?, param("b")?, param("c")?)?,
                    Builtin::Chain => build_chain(param("a")?, param("b")?, param("c")?)?,
                }
            }
            None => {
                let d = self
                    .d
                    .ok_or_else(|| ConfigError::Invalid("custom model needs d".into()))?;
                let levels = self
                    .custom_levels
                    .iter()
                    .enumerate()
                    .map(|(k, row)| {
                        row.iter()
                            .enumerate()
                            .map(|(i, law)| law_of(law, k, i + 1))
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let name = self.name.as_deref().unwrap_or("custom");
                build_custom(name, d, levels, self.tail_rule.unwrap_or(TailRule::Shift))?
            }
        };
        if let Some(declared) = self.d {
            if declared != model.d() {
                return Err(ConfigError::DimensionMismatch {
                    declared,
                    actual: model.d(),
                });
            }
        }
        Ok(model)
    }
}

fn law_of(spec: &LawSpec, level: usize, phase: usize) -> Result<OffspringLaw, ConfigError> {
    let atoms = spec
        .atoms
        .iter()
        .map(|a| {
            let children = a
                .children
                .iter()
                .map(|c| (TypeId::new(c.level, c.phase), c.count))
                .collect();
            Atom::new(children, a.prob)
        })
        .collect();
    OffspringLaw::new(atoms).map_err(|reason| {
        ModelError::InvalidLaw {
            parent: TypeId::new(level, phase).to_string(),
            reason,
        }
        .into()
    })
}

/// Reads and builds the model described at `path`.
pub fn load_model(path: &Path) -> Result<Model, ConfigError> {
    ModelConfig::load(path)?.build()
}
