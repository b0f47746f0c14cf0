//! The run config file: a TOML document with backend, template, objective,
//! optimizer, gumbel and discovery blocks. Every block has full defaults, so
//! an empty file is a valid config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::BackendConfig;
use crate::discovery::DiscoveryConfig;
use crate::error::{Error, Result};
use crate::hard::GumbelConfig;
use crate::objective::Objective;
use crate::optimizer::OptimizerConfig;
use crate::prompt::{PromptTemplate, Vocabulary};

/// Template block: fixed prefix tokens plus learnable slots.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateConfig {
    /// Whitespace-separated fixed tokens placed after the start marker.
    pub prefix: String,
    pub learnable_slots: usize,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig { prefix: String::new(), learnable_slots: 1 }
    }
}

impl TemplateConfig {
    pub fn build(&self, vocab: &Vocabulary) -> Result<PromptTemplate> {
        PromptTemplate::from_prefix(vocab, &self.prefix, self.learnable_slots)
    }
}

/// Objective block of the config file; CLI flags override these fields.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    /// `class-ce`, `feature-max` or `combined`.
    pub kind: Option<String>,
    pub class: Option<usize>,
    pub feature: Option<usize>,
    pub lambda: Option<f64>,
}

impl ObjectiveConfig {
    /// Resolve to a concrete objective. The kind may be implied: a class
    /// alone means class-ce, a feature alone feature-max, both combined.
    pub fn resolve(&self) -> Result<Objective> {
        let lambda = self.lambda.unwrap_or(1.0);
        let implied = match (self.class, self.feature) {
            (Some(class), None) => Some(Objective::ClassCe { class }),
            (None, Some(feature)) => Some(Objective::FeatureMax { feature }),
            (Some(class), Some(feature)) => Some(Objective::Combined { class, feature, lambda }),
            (None, None) => None,
        };
        match self.kind.as_deref() {
            None => implied.ok_or_else(|| {
                Error::Config("objective needs a class and/or a feature".into())
            }),
            Some("class-ce") => {
                let class = self
                    .class
                    .ok_or_else(|| Error::Config("class-ce objective needs a class".into()))?;
                Ok(Objective::ClassCe { class })
            }
            Some("feature-max") => {
                let feature = self
                    .feature
                    .ok_or_else(|| Error::Config("feature-max objective needs a feature".into()))?;
                Ok(Objective::FeatureMax { feature })
            }
            Some("combined") => {
                let class = self
                    .class
                    .ok_or_else(|| Error::Config("combined objective needs a class".into()))?;
                let feature = self
                    .feature
                    .ok_or_else(|| Error::Config("combined objective needs a feature".into()))?;
                Ok(Objective::Combined { class, feature, lambda })
            }
            Some(other) => Err(Error::Config(format!(
                "unknown objective kind {other:?}; expected class-ce, feature-max or combined"
            ))),
        }
    }
}

/// The full run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; drawn from entropy and recorded when absent.
    pub seed: Option<u64>,
    pub backend: BackendConfig,
    pub template: TemplateConfig,
    pub objective: ObjectiveConfig,
    pub optimizer: OptimizerConfig,
    pub gumbel: GumbelConfig,
    pub discovery: DiscoveryConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("parse {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// The master seed, drawing one from entropy if unset (recorded by the
    /// caller so the run stays reproducible).
    pub fn resolve_seed(&mut self) -> u64 {
        match self.seed {
            Some(s) => s,
            None => {
                let s = rand::random::<u64>();
                self.seed = Some(s);
                s
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_fully_defaulted() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.backend.id, "toy");
        assert_eq!(cfg.template.learnable_slots, 1);
        assert_eq!(cfg.optimizer.steps, 200);
        assert_eq!(cfg.discovery.top_k, 5);
        assert_eq!(cfg.discovery.delta, 0.05);
        assert_eq!(cfg.discovery.sample_count, 10);
    }

    #[test]
    fn objective_resolution_rules() {
        let mut oc = ObjectiveConfig::default();
        assert!(oc.resolve().is_err());
        oc.class = Some(2);
        assert_eq!(oc.resolve().unwrap(), Objective::ClassCe { class: 2 });
        oc.feature = Some(7);
        assert_eq!(
            oc.resolve().unwrap(),
            Objective::Combined { class: 2, feature: 7, lambda: 1.0 }
        );
        oc.class = None;
        assert_eq!(oc.resolve().unwrap(), Objective::FeatureMax { feature: 7 });
        oc.kind = Some("combined".into());
        assert!(oc.resolve().is_err());
        oc.kind = Some("sideways".into());
        assert!(oc.resolve().is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.seed = Some(42);
        cfg.objective.class = Some(1);
        cfg.optimizer.steps = 50;
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, Some(42));
        assert_eq!(back.objective.class, Some(1));
        assert_eq!(back.optimizer.steps, 50);
    }

    #[test]
    fn parse_a_documented_example() {
        let text = r#"
seed = 7

[backend]
id = "toy"
world_seed = 0
steps = 4

[template]
prefix = "the shape of"
learnable_slots = 1

[objective]
kind = "class-ce"
class = 2

[optimizer]
learning_rate = 0.05
steps = 200
batch_size = 2
restarts = 3

[discovery]
delta = 0.05
sample_count = 10

[discovery.segmenter]
backend = "stub"
box_confidence_threshold = 0.35
"#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.template.prefix, "the shape of");
        assert_eq!(cfg.discovery.segmenter.backend, "stub");
    }
}
