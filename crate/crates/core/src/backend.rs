//! Backend registry: string id to generator/classifier adapter pair.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{ClassifierProbe, GeneratorBackend};
use crate::toy::{build_world, ToyWorld, ToyWorldConfig};

fn default_id() -> String {
    "toy".into()
}
fn default_preset() -> String {
    "default".into()
}

/// Backend block of the run config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Registered backend id.
    pub id: String,
    /// World seed (toy backend).
    pub world_seed: u64,
    /// Toy world preset: `default` or `tiny-vocab`.
    pub preset: String,
    /// Denoising steps K; backend default when omitted.
    pub steps: Option<usize>,
    /// Conditioning guidance knob; ignored by backends without one.
    pub guidance_scale: Option<f64>,
    /// Probe features before the nonlinearity instead of after.
    pub feature_pre_activation: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            id: default_id(),
            world_seed: 0,
            preset: default_preset(),
            steps: None,
            guidance_scale: None,
            feature_pre_activation: false,
        }
    }
}

/// A constructed backend: the generator, its classifier probe, and (for the
/// toy backend) the world itself for probe-image sourcing and ground truth.
#[derive(Clone)]
pub struct Backend {
    pub generator: Arc<dyn GeneratorBackend>,
    pub probe: Arc<ClassifierProbe>,
    pub world: Option<Arc<ToyWorld>>,
    /// Resolved denoising step count.
    pub generation_steps: usize,
}

impl Backend {
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.generator.weights_checksum().as_bytes());
        h.update(self.probe.weights_checksum().as_bytes());
        crate::pipeline::hex_digest(h)
    }
}

/// Registered backend ids.
pub fn available_backends() -> Vec<String> {
    vec!["toy".into()]
}

/// Build a backend from its config block.
pub fn build_backend(cfg: &BackendConfig) -> Result<Backend> {
    match cfg.id.as_str() {
        "toy" => {
            let world_cfg = match cfg.preset.as_str() {
                "default" => ToyWorldConfig::new(cfg.world_seed),
                "tiny-vocab" => ToyWorldConfig::tiny_vocab(cfg.world_seed),
                other => {
                    return Err(Error::Config(format!(
                        "unknown toy preset {other:?}; available: default, tiny-vocab"
                    )))
                }
            };
            let world = Arc::new(build_world(world_cfg)?);
            let steps = cfg.steps.unwrap_or_else(|| world.default_steps());
            if steps == 0 || steps > world.max_steps() {
                return Err(Error::Config(format!(
                    "steps must be in 1..={}, got {steps}",
                    world.max_steps()
                )));
            }
            let mut probe = (*world.probe()).clone();
            if cfg.feature_pre_activation {
                probe = probe.with_feature_pre_activation(true);
            }
            Ok(Backend {
                generator: world.clone(),
                probe: Arc::new(probe),
                world: Some(world),
                generation_steps: steps,
            })
        }
        other => Err(Error::UnknownBackend {
            id: other.to_string(),
            available: available_backends(),
        }),
    }
}
