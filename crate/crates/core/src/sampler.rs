//! Sampling the explanation distribution of a finished run and scoring the
//! samples under the frozen classifier.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::pipeline::{unflatten_image, ClassifierProbe, GeneratorBackend, ImageBatch, ProbeTarget};
use crate::optimizer::RunRecord;

/// A named scoring target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "index")]
pub enum ScoreTarget {
    /// Pre-softmax logit of a class.
    ClassLogit(usize),
    /// Softmax probability of a class.
    ClassProb(usize),
    /// Hidden feature response.
    Feature(usize),
}

impl std::fmt::Display for ScoreTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScoreTarget::ClassLogit(c) => write!(f, "logit:{c}"),
            ScoreTarget::ClassProb(c) => write!(f, "prob:{c}"),
            ScoreTarget::Feature(j) => write!(f, "feature:{j}"),
        }
    }
}

/// Default scoring targets for a run's objective.
pub fn default_targets(record: &RunRecord) -> Vec<ScoreTarget> {
    let mut out = Vec::new();
    if let Some(c) = record.objective.class() {
        out.push(ScoreTarget::ClassLogit(c));
        out.push(ScoreTarget::ClassProb(c));
    }
    if let Some(j) = record.objective.feature() {
        out.push(ScoreTarget::Feature(j));
    }
    out
}

/// Samples from one run's explanation distribution, with their seeds and
/// per-target responses.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub seeds: Vec<u64>,
    pub images: ImageBatch,
    /// Per-target responses, keyed by the target's display name; each vector
    /// is aligned with `seeds`.
    pub responses: BTreeMap<String, Vec<f64>>,
    pub targets: Vec<ScoreTarget>,
    /// Backend the samples came from.
    pub backend_id: String,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }
}

fn response(probe: &ClassifierProbe, image: &ndarray::Array3<f64>, target: ScoreTarget) -> Result<f64> {
    match target {
        ScoreTarget::ClassLogit(c) => probe.probe_image(image, ProbeTarget::ClassLogit(c)),
        ScoreTarget::ClassProb(c) => probe.class_prob(image, c),
        ScoreTarget::Feature(j) => probe.probe_image(image, ProbeTarget::Feature(j)),
    }
}

/// Draw `n` images from the run's final embedding under distinct seeds
/// `seed_base .. seed_base + n`, scoring each under the probe.
pub fn sample(
    record: &RunRecord,
    generator: &dyn GeneratorBackend,
    probe: &ClassifierProbe,
    n: usize,
    seed_base: u64,
) -> Result<SampleSet> {
    sample_embedding(
        &record.embedding,
        record.generation_steps,
        &default_targets(record),
        generator,
        probe,
        n,
        seed_base,
    )
    .map(|mut s| {
        s.backend_id = record.backend_id.clone();
        s
    })
}

/// Sampling from a raw embedding sequence (used both by [`sample`] and by
/// comparisons against initial embeddings).
pub fn sample_embedding(
    embedding: &crate::prompt::EmbeddingSequence,
    generation_steps: usize,
    targets: &[ScoreTarget],
    generator: &dyn GeneratorBackend,
    probe: &ClassifierProbe,
    n: usize,
    seed_base: u64,
) -> Result<SampleSet> {
    if embedding.dim() != generator.vocabulary().dim() {
        return Err(Error::ShapeMismatch {
            expected: format!(
                "embedding rows of width {} for backend {}",
                generator.vocabulary().dim(),
                generator.id()
            ),
            got: format!("width {}", embedding.dim()),
        });
    }
    for t in targets {
        match *t {
            ScoreTarget::ClassLogit(c) | ScoreTarget::ClassProb(c) => {
                probe.validate_target(ProbeTarget::ClassLogit(c))?
            }
            ScoreTarget::Feature(j) => probe.validate_target(ProbeTarget::Feature(j))?,
        }
    }

    let mut images = ImageBatch { value_range: (0.0, 1.0), ..Default::default() };
    let mut seeds = Vec::with_capacity(n);
    for i in 0..n {
        let seed = seed_base + i as u64;
        let mut g = Graph::new();
        let emb = g.constant_matrix(embedding.rows().clone());
        let z = generator.sample_latent(seed);
        let out = generator.generate(&mut g, emb, &z, generation_steps)?;
        let flat = g.vector_value(out.image);
        images.push(unflatten_image(&flat, generator.image_shape()), out.regions);
        seeds.push(seed);
    }
    images.assert_finite()?;

    let mut responses = BTreeMap::new();
    for t in targets {
        let vals: Result<Vec<f64>> = images
            .images
            .iter()
            .map(|img| response(probe, img, *t))
            .collect();
        responses.insert(t.to_string(), vals?);
    }
    Ok(SampleSet {
        seeds,
        images,
        responses,
        targets: targets.to_vec(),
        backend_id: generator.id().to_string(),
    })
}

/// Summary statistics of one target over a sample set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Stats {
        assert!(!values.is_empty());
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Stats { mean, std: var.sqrt(), min, max }
    }
}

/// Per-target summary statistics. Targets whose responses are not stored are
/// recomputed under the probe.
pub fn score(
    samples: &SampleSet,
    probe: &ClassifierProbe,
    targets: &[ScoreTarget],
) -> Result<BTreeMap<String, Stats>> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot score an empty sample set".into()));
    }
    let mut out = BTreeMap::new();
    for t in targets {
        let key = t.to_string();
        let values: Vec<f64> = match samples.responses.get(&key) {
            Some(v) => v.clone(),
            None => samples
                .images
                .images
                .iter()
                .map(|img| response(probe, img, *t))
                .collect::<Result<_>>()?,
        };
        out.insert(key, Stats::of(&values));
    }
    Ok(out)
}
