//! Frozen-model adapter contracts: generator backends, the classifier probe,
//! and the differentiable bridge between them.
//!
//! All adapters are immutable after construction and safe to share across
//! threads. Gradients flow from probe responses back to learnable prompt
//! rows through a per-step [`Graph`].

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId, PreprocessPlan};
use crate::error::{Error, Result};
use crate::prompt::Vocabulary;

/// A point in the generator's latent space together with the seed that
/// produced it.
#[derive(Debug, Clone)]
pub struct LatentCode {
    pub values: Array1<f64>,
    pub seed: u64,
}

impl LatentCode {
    /// Standard-normal latent drawn deterministically from `seed`.
    pub fn standard_normal(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = Array1::from_shape_fn(dim, |_| StandardNormal.sample(&mut rng));
        LatentCode { values, seed }
    }
}

/// Metadata describing a primitive the generator composited into an image.
/// Consumed by the segmentation stub as ground truth.
#[derive(Debug, Clone)]
pub struct PlantedRegion {
    /// Concept name (matches a segmentation prompt verbatim).
    pub concept: String,
    /// Pixel support of the primitive.
    pub mask: Arc<Array2<bool>>,
    /// Blend weight of the primitive in the final image, in [0, 1].
    pub confidence: f64,
}

/// A batch of decoded images plus per-image planted-region metadata.
#[derive(Debug, Clone, Default)]
pub struct ImageBatch {
    pub images: Vec<Array3<f64>>,
    pub regions: Vec<Vec<PlantedRegion>>,
    /// Declared pixel value range of the producing component.
    pub value_range: (f64, f64),
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, image: Array3<f64>, regions: Vec<PlantedRegion>) {
        self.images.push(image);
        self.regions.push(regions);
    }

    pub fn view(&self, i: usize) -> ImageView<'_> {
        ImageView { pixels: &self.images[i], regions: &self.regions[i] }
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (i, img) in self.images.iter().enumerate() {
            if !img.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { step: i, context: "image batch".into() });
            }
        }
        Ok(())
    }
}

/// Borrowed single image plus its metadata.
#[derive(Debug, Clone, Copy)]
pub struct ImageView<'a> {
    pub pixels: &'a Array3<f64>,
    pub regions: &'a [PlantedRegion],
}

/// One generated image inside a graph: the (flat) pixel node and the
/// planted-region metadata captured from the forward pass.
pub struct GeneratedImage {
    pub image: NodeId,
    pub regions: Vec<PlantedRegion>,
}

/// Conditional generator contract: text encoder, K-step denoiser and decoder
/// fused into one differentiable graph-building call.
pub trait GeneratorBackend: Send + Sync {
    fn id(&self) -> &str;

    fn vocabulary(&self) -> &Vocabulary;

    fn latent_dim(&self) -> usize;

    /// `(channels, height, width)` of decoded images.
    fn image_shape(&self) -> (usize, usize, usize);

    /// Default number of denoising steps (K).
    fn default_steps(&self) -> usize;

    /// Upper bound on K supported by the backend.
    fn max_steps(&self) -> usize;

    /// Draw a latent from the generator's prior; pure in `seed`.
    fn sample_latent(&self, seed: u64) -> LatentCode;

    /// Build the full conditional generation graph from an `N x d` embedding
    /// node. The returned image node is flat `(C*H*W,)`; gradients flow back
    /// to the embedding node.
    fn generate(&self, g: &mut Graph, emb: NodeId, z: &LatentCode, steps: usize) -> Result<GeneratedImage>;

    /// Checksum over every frozen weight; identical before/after any call.
    fn weights_checksum(&self) -> String;
}

/// Target of a classifier probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeTarget {
    /// Pre-softmax class logit.
    ClassLogit(usize),
    /// Response of one neuron in the penultimate fully-connected layer.
    Feature(usize),
}

impl std::fmt::Display for ProbeTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProbeTarget::ClassLogit(c) => write!(f, "class:{c}"),
            ProbeTarget::Feature(j) => write!(f, "feature:{j}"),
        }
    }
}

/// Frozen classifier with named probe points: class logits and the
/// penultimate FC layer's features. Preprocessing (resize + normalize) is
/// part of the probe and is differentiable.
#[derive(Debug, Clone)]
pub struct ClassifierProbe {
    id: String,
    preprocess: Arc<PreprocessPlan>,
    w_hidden: Arc<Array2<f64>>,
    b_hidden: Arc<Array1<f64>>,
    w_class: Arc<Array2<f64>>,
    b_class: Arc<Array1<f64>>,
    /// When true (default), feature probes return post-ReLU responses.
    feature_post_activation: bool,
    class_names: Vec<String>,
}

impl ClassifierProbe {
    pub fn new(
        id: impl Into<String>,
        preprocess: PreprocessPlan,
        w_hidden: Array2<f64>,
        b_hidden: Array1<f64>,
        w_class: Array2<f64>,
        b_class: Array1<f64>,
        class_names: Vec<String>,
    ) -> Self {
        assert_eq!(w_hidden.ncols(), preprocess.out_len());
        assert_eq!(b_hidden.len(), w_hidden.nrows());
        assert_eq!(w_class.ncols(), w_hidden.nrows());
        assert_eq!(b_class.len(), w_class.nrows());
        assert_eq!(class_names.len(), w_class.nrows());
        ClassifierProbe {
            id: id.into(),
            preprocess: Arc::new(preprocess),
            w_hidden: Arc::new(w_hidden),
            b_hidden: Arc::new(b_hidden),
            w_class: Arc::new(w_class),
            b_class: Arc::new(b_class),
            feature_post_activation: true,
            class_names,
        }
    }

    pub fn with_feature_pre_activation(mut self, pre: bool) -> Self {
        self.feature_post_activation = !pre;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn num_classes(&self) -> usize {
        self.w_class.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.w_hidden.nrows()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn preprocess_plan(&self) -> Arc<PreprocessPlan> {
        self.preprocess.clone()
    }

    /// Classification-layer weight matrix (classes x features).
    pub fn class_weights(&self) -> &Array2<f64> {
        &self.w_class
    }

    fn available(&self) -> String {
        format!(
            "classes 0..{}, features 0..{}",
            self.num_classes(),
            self.num_features()
        )
    }

    pub fn validate_target(&self, target: ProbeTarget) -> Result<()> {
        let ok = match target {
            ProbeTarget::ClassLogit(c) => c < self.num_classes(),
            ProbeTarget::Feature(j) => j < self.num_features(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::UnknownTarget { target: target.to_string(), available: self.available() })
        }
    }

    /// Graph: flat image node -> feature vector node (post- or pre-activation
    /// per configuration).
    pub fn features_node(&self, g: &mut Graph, image: NodeId) -> NodeId {
        let pre = g.preprocess(self.preprocess.clone(), image);
        let lin = g.linear(self.w_hidden.clone(), Some(self.b_hidden.clone()), pre);
        if self.feature_post_activation {
            g.relu(lin)
        } else {
            lin
        }
    }

    /// Graph: flat image node -> class logits node. Logits always consume
    /// post-activation features regardless of the probe setting.
    pub fn logits_node(&self, g: &mut Graph, image: NodeId) -> NodeId {
        let pre = g.preprocess(self.preprocess.clone(), image);
        let lin = g.linear(self.w_hidden.clone(), Some(self.b_hidden.clone()), pre);
        let act = g.relu(lin);
        g.linear(self.w_class.clone(), Some(self.b_class.clone()), act)
    }

    /// Graph: flat image node -> scalar probe response.
    pub fn probe_node(&self, g: &mut Graph, image: NodeId, target: ProbeTarget) -> Result<NodeId> {
        self.validate_target(target)?;
        Ok(match target {
            ProbeTarget::ClassLogit(c) => {
                let logits = self.logits_node(g, image);
                g.pick(logits, c)
            }
            ProbeTarget::Feature(j) => {
                let feats = self.features_node(g, image);
                g.pick(feats, j)
            }
        })
    }

    /// Probe a concrete image (inference only).
    pub fn probe_image(&self, image: &Array3<f64>, target: ProbeTarget) -> Result<f64> {
        self.validate_target(target)?;
        let mut g = Graph::new();
        let flat = flat_image_node(&mut g, image);
        let node = self.probe_node(&mut g, flat, target)?;
        Ok(g.scalar_value(node))
    }

    /// Per-image scalar responses over a batch.
    pub fn probe_batch(&self, images: &ImageBatch, target: ProbeTarget) -> Result<Vec<f64>> {
        images
            .images
            .iter()
            .map(|img| self.probe_image(img, target))
            .collect()
    }

    /// Class logits of a concrete image.
    pub fn logits(&self, image: &Array3<f64>) -> Array1<f64> {
        let mut g = Graph::new();
        let flat = flat_image_node(&mut g, image);
        let node = self.logits_node(&mut g, flat);
        g.vector_value(node)
    }

    /// All feature responses of a concrete image.
    pub fn features(&self, image: &Array3<f64>) -> Array1<f64> {
        let mut g = Graph::new();
        let flat = flat_image_node(&mut g, image);
        let node = self.features_node(&mut g, flat);
        g.vector_value(node)
    }

    /// Softmax probability of a class on a concrete image.
    pub fn class_prob(&self, image: &Array3<f64>, class: usize) -> Result<f64> {
        self.validate_target(ProbeTarget::ClassLogit(class))?;
        let logits = self.logits(image);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps = logits.mapv(|v| (v - max).exp());
        Ok(exps[class] / exps.sum())
    }

    pub fn weights_checksum(&self) -> String {
        let mut h = Sha256::new();
        for w in self.w_hidden.iter().chain(self.b_hidden.iter()) {
            h.update(w.to_le_bytes());
        }
        for w in self.w_class.iter().chain(self.b_class.iter()) {
            h.update(w.to_le_bytes());
        }
        for t in self.preprocess.taps.iter().flatten() {
            h.update((t.0 as u64).to_le_bytes());
            h.update(t.1.to_le_bytes());
        }
        hex_digest(h)
    }
}

/// Constant flat image node from a `(C,H,W)` array.
pub fn flat_image_node(g: &mut Graph, image: &Array3<f64>) -> NodeId {
    let flat = Array1::from_iter(image.iter().copied());
    g.constant_vec(flat)
}

/// Reshape a flat pixel vector into `(C,H,W)`.
pub fn unflatten_image(flat: &Array1<f64>, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_vec(shape, flat.to_vec()).expect("pixel count must match shape")
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_probe() -> ClassifierProbe {
        // 2x2 single-channel input, identity everywhere: logit c == pixel c
        let plan = PreprocessPlan::bilinear((1, 2, 2), (2, 2), vec![0.0], vec![1.0]);
        let eye4 = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
        ClassifierProbe::new(
            "identity",
            plan,
            eye4.clone(),
            Array1::zeros(4),
            eye4,
            Array1::zeros(4),
            (0..4).map(|c| format!("class{c}")).collect(),
        )
    }

    #[test]
    fn identity_final_layer_logit_equals_input_coordinate() {
        let probe = identity_probe();
        for c in 0..4 {
            let mut img = Array3::<f64>::zeros((1, 2, 2));
            img[[0, c / 2, c % 2]] = 1.0;
            let logit = probe.probe_image(&img, ProbeTarget::ClassLogit(c)).unwrap();
            assert!((logit - 1.0).abs() < 1e-12, "one-hot pixel {c} -> logit {logit}");
            let other = probe.probe_image(&img, ProbeTarget::ClassLogit((c + 1) % 4)).unwrap();
            assert!(other.abs() < 1e-12);
        }
    }

    #[test]
    fn probing_twice_is_identical() {
        let probe = identity_probe();
        let img = Array3::from_shape_fn((1, 2, 2), |(_, i, j)| (i as f64) * 0.3 + (j as f64) * 0.1);
        let a = probe.probe_image(&img, ProbeTarget::Feature(2)).unwrap();
        let b = probe.probe_image(&img, ProbeTarget::Feature(2)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn unknown_target_lists_available_probes() {
        let probe = identity_probe();
        let err = probe.probe_image(&Array3::zeros((1, 2, 2)), ProbeTarget::Feature(99)).unwrap_err();
        match err {
            Error::UnknownTarget { target, available } => {
                assert_eq!(target, "feature:99");
                assert!(available.contains("features 0..4"));
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn feature_response_matches_manual_forward_oracle() {
        // hand-rolled layer-by-layer forward pass, no graph machinery
        let plan = PreprocessPlan::bilinear((1, 4, 4), (2, 2), vec![0.4], vec![0.3]);
        let w_h = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 5 + j) as f64 * 0.23).sin());
        let b_h = Array1::from_shape_fn(6, |i| (i as f64) * 0.05 - 0.1);
        let w_c = Array2::from_shape_fn((3, 6), |(i, j)| ((i + j) as f64 * 0.11).cos());
        let b_c = Array1::zeros(3);
        let probe = ClassifierProbe::new(
            "oracle-check",
            plan.clone(),
            w_h.clone(),
            b_h.clone(),
            w_c,
            b_c,
            vec!["a".into(), "b".into(), "c".into()],
        );
        let img = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| ((i * 4 + j) as f64 * 0.19).cos());

        // oracle
        let flat: Vec<f64> = img.iter().copied().collect();
        let pre = plan.apply(&flat);
        let mut manual = vec![0.0; 6];
        for r in 0..6 {
            let mut acc = b_h[r];
            for (c, p) in pre.iter().enumerate() {
                acc += w_h[[r, c]] * p;
            }
            manual[r] = acc.max(0.0);
        }

        for j in 0..6 {
            let got = probe.probe_image(&img, ProbeTarget::Feature(j)).unwrap();
            assert!((got - manual[j]).abs() < 1e-12, "feature {j}: {got} vs {}", manual[j]);
        }
    }

    #[test]
    fn checksum_stable_across_probes() {
        let probe = identity_probe();
        let before = probe.weights_checksum();
        let img = Array3::from_elem((1, 2, 2), 0.7);
        let _ = probe.probe_image(&img, ProbeTarget::ClassLogit(0)).unwrap();
        let _ = probe.features(&img);
        assert_eq!(before, probe.weights_checksum());
    }
}
