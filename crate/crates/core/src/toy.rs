//! Desk-scale differentiable testbed: a conditional generator and a frozen
//! classifier with planted context biases.
//!
//! Images are convex blends of fixed full-frame templates (one background,
//! one centered object blob per class, plus corner context patches). The
//! blend weights come from a softmax over a latent driven by the prompt
//! conditioning, so every image is differentiable with respect to the prompt
//! embedding rows. The classifier's penultimate layer is a bank of exact
//! template detectors (dual basis over preprocessed templates), which makes
//! core/spurious ground truth analytic; only the classification layer is
//! trained, on data rendered with the planted object/context co-occurrence.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId, PreprocessPlan};
use crate::error::{Error, Result};
use crate::pipeline::{
    hex_digest, ClassifierProbe, GeneratedImage, GeneratorBackend, ImageBatch, LatentCode,
    PlantedRegion,
};
use crate::prompt::Vocabulary;

/// Ground-truth label for a planted feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantedLabel {
    Core,
    Spurious,
}

/// Build-time parameters of the toy world.
#[derive(Debug, Clone)]
pub struct ToyWorldConfig {
    pub seed: u64,
    pub num_objects: usize,
    pub num_contexts: usize,
    pub filler_words: usize,
    pub embed_dim: usize,
    pub image_size: usize,
    pub classifier_input: usize,
    /// Detector gain ladder per object; its length fixes detectors/object.
    pub detector_gains: Vec<f64>,
    /// Context patch indices planted into each class's training images.
    pub bias_table: Vec<Vec<usize>>,
    /// Scale of the conditioning drive onto primitive logits.
    pub semantic_gain: f64,
    /// Norm of semantic vocabulary embeddings.
    pub vocab_scale: f64,
    /// Norm scale of non-semantic vocabulary embeddings.
    pub filler_scale: f64,
    /// Soft clip bound on primitive logits.
    pub logit_limit: f64,
    /// Scale of the latent noise entering the denoiser.
    pub noise_gain: f64,
    /// Scale of the multiplicative noise-conditioning interaction.
    pub interaction_gain: f64,
    /// Scale of the denoiser's internal mixing matrix.
    pub mix_gain: f64,
    /// Resting logit bias of the background primitive.
    pub background_bias: f64,
    pub default_steps: usize,
    pub max_steps: usize,
    /// Pre-clip logit jitter when rendering training images.
    pub train_jitter: f64,
    pub train_samples_per_class: usize,
    pub val_samples_per_class: usize,
    pub probe_samples_per_class: usize,
    pub train_iterations: usize,
    pub train_learning_rate: f64,
    pub train_l2: f64,
    pub min_accuracy: f64,
}

impl ToyWorldConfig {
    /// Default 32-word world: 4 classes, 3 context patches, planted bias
    /// table with one unbiased class, one single-context class and one
    /// double-context class.
    pub fn new(seed: u64) -> Self {
        ToyWorldConfig {
            seed,
            num_objects: 4,
            num_contexts: 3,
            filler_words: 22,
            embed_dim: 16,
            image_size: 64,
            classifier_input: 32,
            detector_gains: vec![1.0, 0.85, 0.70, 0.55, 0.40],
            bias_table: vec![vec![], vec![0], vec![1, 2], vec![]],
            semantic_gain: 4.0,
            vocab_scale: 2.0,
            filler_scale: 0.3,
            logit_limit: 3.5,
            noise_gain: 1.0,
            interaction_gain: 1.2,
            mix_gain: 0.5,
            background_bias: 1.0,
            default_steps: 4,
            max_steps: 8,
            train_jitter: 0.35,
            train_samples_per_class: 160,
            val_samples_per_class: 40,
            probe_samples_per_class: 32,
            train_iterations: 600,
            train_learning_rate: 0.05,
            train_l2: 1e-3,
            min_accuracy: 0.95,
        }
    }

    /// Eight-word world (markers, neutral, four object words, one context
    /// word) used for exhaustive vocabulary enumeration.
    pub fn tiny_vocab(seed: u64) -> Self {
        let mut cfg = Self::new(seed);
        cfg.num_contexts = 1;
        cfg.filler_words = 0;
        cfg.bias_table = vec![vec![], vec![], vec![], vec![]];
        cfg
    }

    fn validate(&self) -> Result<()> {
        if self.num_objects < 2 {
            return Err(Error::Config("toy world needs at least 2 object classes".into()));
        }
        if self.bias_table.len() != self.num_objects {
            return Err(Error::Config(format!(
                "bias table covers {} classes, world has {}",
                self.bias_table.len(),
                self.num_objects
            )));
        }
        for (c, ctxs) in self.bias_table.iter().enumerate() {
            for m in ctxs {
                if *m >= self.num_contexts {
                    return Err(Error::Config(format!(
                        "class {c} planted with context {m}, world has {}",
                        self.num_contexts
                    )));
                }
            }
        }
        if self.detector_gains.is_empty() {
            return Err(Error::Config("detector gain ladder is empty".into()));
        }
        Ok(())
    }

    fn num_primitives(&self) -> usize {
        self.num_objects + self.num_contexts + 1
    }

    fn num_features(&self) -> usize {
        self.num_objects * self.detector_gains.len() + self.num_contexts
    }
}

const OBJECT_WORDS: [&str; 4] = ["circle", "square", "triangle", "cross"];
const CONTEXT_WORDS: [&str; 3] = ["stripes", "dots", "checker"];
const FILLER_WORDS: [&str; 22] = [
    "the", "a", "shape", "of", "texture", "picture", "photo", "with", "and", "on", "in", "color",
    "bright", "dark", "small", "large", "pattern", "style", "form", "kind", "field", "scene",
];

/// The built world: generator, classifier probe, vocabulary and planted
/// ground truth. Immutable after construction.
pub struct ToyWorld {
    config: ToyWorldConfig,
    vocab: Vocabulary,
    /// Flattened full-frame templates, one row per primitive; background last.
    templates: Arc<Array2<f64>>,
    /// Pixel support of each non-background primitive.
    supports: Vec<Arc<Array2<bool>>>,
    /// Concept word per non-background primitive.
    primitive_words: Vec<String>,
    /// Conditioning drive matrix (primitives x embed_dim).
    drive: Arc<Array2<f64>>,
    /// Denoiser mixing matrix (primitives x primitives).
    mix: Arc<Array2<f64>>,
    /// Noise/conditioning interaction projection (primitives x embed_dim).
    interaction: Arc<Array2<f64>>,
    /// Resting logit bias.
    bias: Arc<ndarray::ArrayD<f64>>,
    probe: Arc<ClassifierProbe>,
    /// Realized top-k per class with analytic labels, fixed at build time.
    planted_truth: Vec<Vec<(usize, PlantedLabel)>>,
    /// Validation accuracy achieved by the trained classification layer.
    accuracy: f64,
    /// Human-readable name of each detector feature.
    feature_names: Vec<String>,
}

/// Build a world from a config, running the sanity gates.
pub fn build_world(config: ToyWorldConfig) -> Result<ToyWorld> {
    ToyWorld::build(config)
}

impl ToyWorld {
    pub fn build(config: ToyWorldConfig) -> Result<ToyWorld> {
        config.validate()?;
        let vocab = build_vocabulary(&config)?;
        let (templates, supports, primitive_words) = build_templates(&config, &vocab);

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, b"world-weights", &[]));
        let p = config.num_primitives();
        let d = config.embed_dim;

        // Semantic directions: unit rows of an orthonormalized gaussian
        // matrix, one per word-bearing primitive. The drive matrix maps the
        // pooled prompt embedding onto primitive logits along them.
        let directions = orthonormal_rows(p - 1, d, &mut rng);
        let mut drive = Array2::<f64>::zeros((p, d));
        for i in 0..p - 1 {
            for j in 0..d {
                drive[[i, j]] = config.semantic_gain * directions[[i, j]];
            }
        }
        let mix = Array2::from_shape_fn((p, p), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * config.mix_gain / (p as f64).sqrt()
        });
        let interaction = Array2::from_shape_fn((p, d), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z / (d as f64).sqrt()
        });
        let mut bias = Array1::<f64>::zeros(p);
        bias[p - 1] = config.background_bias;

        // Vocabulary embeddings of semantic words sit on the directions.
        let vocab = attach_semantic_embeddings(&config, vocab, &directions)?;

        let preprocess = PreprocessPlan::bilinear(
            (3, config.image_size, config.image_size),
            (config.classifier_input, config.classifier_input),
            vec![0.5; 3],
            vec![0.25; 3],
        );
        let (w_hidden, b_hidden, feature_names) =
            build_detectors(&config, &templates, &preprocess, &primitive_words)?;

        let mut world = ToyWorld {
            config: config.clone(),
            vocab,
            templates: Arc::new(templates),
            supports,
            primitive_words,
            drive: Arc::new(drive),
            mix: Arc::new(mix),
            interaction: Arc::new(interaction),
            bias: Arc::new(Array1::into_dyn(bias)),
            probe: Arc::new(ClassifierProbe::new(
                "toy-uninitialized",
                preprocess.clone(),
                w_hidden.clone(),
                b_hidden.clone(),
                Array2::zeros((config.num_objects, config.num_features())),
                Array1::zeros(config.num_objects),
                (0..config.num_objects)
                    .map(|c| OBJECT_WORDS[c].to_string())
                    .collect(),
            )),
            planted_truth: vec![],
            accuracy: 0.0,
            feature_names,
        };

        // Train the classification layer on rendered data with the planted
        // co-occurrence, then gate on validation accuracy.
        let (w_class, b_class, accuracy) = world.train_classification_layer()?;
        if accuracy < config.min_accuracy {
            return Err(Error::SanityGate {
                seed: config.seed,
                diagnostics: format!(
                    "classifier validation accuracy {accuracy:.3} below required {:.2}",
                    config.min_accuracy
                ),
            });
        }
        world.probe = Arc::new(ClassifierProbe::new(
            format!("toy-{}", config.seed),
            preprocess,
            w_hidden,
            b_hidden,
            w_class,
            b_class,
            (0..config.num_objects)
                .map(|c| OBJECT_WORDS[c].to_string())
                .collect(),
        ));
        world.accuracy = accuracy;

        // Gate the realized per-class top-5 against the planted bias table
        // so core/spurious ground truth is exact by construction.
        world.planted_truth = world.derive_planted_truth()?;
        Ok(world)
    }

    pub fn config(&self) -> &ToyWorldConfig {
        &self.config
    }

    pub fn probe(&self) -> Arc<ClassifierProbe> {
        self.probe.clone()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_objects
    }

    pub fn class_name(&self, class: usize) -> &str {
        &self.probe.class_names()[class]
    }

    pub fn class_names(&self) -> &[String] {
        self.probe.class_names()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn validation_accuracy(&self) -> f64 {
        self.accuracy
    }

    /// Realized per-class ranked features with analytic labels.
    pub fn planted_truth(&self) -> &[Vec<(usize, PlantedLabel)>] {
        &self.planted_truth
    }

    /// Support mask of the object primitive backing a class.
    pub fn object_support(&self, class: usize) -> Arc<Array2<bool>> {
        self.supports[class].clone()
    }

    /// Support mask of a context primitive.
    pub fn context_support(&self, context: usize) -> Arc<Array2<bool>> {
        self.supports[self.config.num_objects + context].clone()
    }

    fn num_primitives(&self) -> usize {
        self.config.num_primitives()
    }

    /// Which object/context a detector feature reads.
    pub fn feature_kind(&self, feature: usize) -> FeatureKind {
        let per = self.config.detector_gains.len();
        let obj_features = self.config.num_objects * per;
        if feature < obj_features {
            FeatureKind::Object(feature / per)
        } else {
            FeatureKind::Context(feature - obj_features)
        }
    }

    // ---- rendering --------------------------------------------------------

    /// Render an image directly from primitive pre-clip logits.
    fn render_from_logits(&self, logits: &Array1<f64>) -> (Array3<f64>, Array1<f64>) {
        let l = self.config.logit_limit;
        let clipped = logits.mapv(|v| l * (v / l).tanh());
        let max = clipped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps = clipped.mapv(|v| (v - max).exp());
        let weights = &exps / exps.sum();
        let flat = self.templates.t().dot(&weights);
        let s = self.config.image_size;
        (
            Array3::from_shape_vec((3, s, s), flat.to_vec()).unwrap(),
            weights,
        )
    }

    /// Planted-region metadata for a blend-weight vector.
    fn regions_for_weights(&self, weights: &Array1<f64>) -> Vec<PlantedRegion> {
        (0..self.num_primitives() - 1)
            .map(|i| PlantedRegion {
                concept: self.primitive_words[i].clone(),
                mask: self.supports[i].clone(),
                confidence: weights[i],
            })
            .collect()
    }

    /// Training-distribution image for a class: its object plus every
    /// planted context patch, with logit jitter.
    pub fn reference_image(&self, class: usize, seed: u64) -> (Array3<f64>, Vec<PlantedRegion>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = self.num_primitives();
        let mut logits = Array1::<f64>::zeros(p);
        logits[p - 1] = self.config.background_bias;
        logits[class] += 3.2;
        for m in &self.config.bias_table[class] {
            logits[self.config.num_objects + m] += 3.0;
        }
        for v in logits.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += z * self.config.train_jitter;
        }
        let (img, weights) = self.render_from_logits(&logits);
        let regions = self.regions_for_weights(&weights);
        (img, regions)
    }

    /// A batch of training-distribution images for a class.
    pub fn class_probe_images(&self, class: usize, n: usize, base_seed: u64) -> ImageBatch {
        let mut batch = ImageBatch { value_range: (0.0, 1.0), ..Default::default() };
        for i in 0..n {
            let seed = mix_seed(base_seed, b"probe-image", &[class as u64, i as u64]);
            let (img, regions) = self.reference_image(class, seed);
            batch.push(img, regions);
        }
        batch
    }

    // ---- classification layer training ------------------------------------

    fn train_classification_layer(&self) -> Result<(Array2<f64>, Array1<f64>, f64)> {
        let cfg = &self.config;
        let classes = cfg.num_objects;
        let nf = cfg.num_features();

        let featurize = |tag: &[u8], per_class: usize| -> (Vec<Array1<f64>>, Vec<usize>) {
            let mut xs = Vec::with_capacity(classes * per_class);
            let mut ys = Vec::with_capacity(classes * per_class);
            for c in 0..classes {
                for i in 0..per_class {
                    let seed = mix_seed(cfg.seed, tag, &[c as u64, i as u64]);
                    let (img, _) = self.reference_image(c, seed);
                    xs.push(self.probe.features(&img));
                    ys.push(c);
                }
            }
            (xs, ys)
        };

        let (train_x, train_y) = featurize(b"train", cfg.train_samples_per_class);
        let (val_x, val_y) = featurize(b"val", cfg.val_samples_per_class);

        // Multinomial logistic regression, full-batch Adam.
        let mut w = Array2::<f64>::zeros((classes, nf));
        let mut b = Array1::<f64>::zeros(classes);
        let mut mw = Array2::<f64>::zeros((classes, nf));
        let mut vw = Array2::<f64>::zeros((classes, nf));
        let mut mb = Array1::<f64>::zeros(classes);
        let mut vb = Array1::<f64>::zeros(classes);
        let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let n = train_x.len() as f64;
        for it in 1..=cfg.train_iterations {
            let mut gw = Array2::<f64>::zeros((classes, nf));
            let mut gb = Array1::<f64>::zeros(classes);
            for (x, y) in train_x.iter().zip(&train_y) {
                let logits = w.dot(x) + &b;
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps = logits.mapv(|v| (v - max).exp());
                let soft = &exps / exps.sum();
                for c in 0..classes {
                    let err = soft[c] - if c == *y { 1.0 } else { 0.0 };
                    gb[c] += err / n;
                    for j in 0..nf {
                        gw[[c, j]] += err * x[j] / n;
                    }
                }
            }
            gw += &(&w * cfg.train_l2);
            let t = it as f64;
            let corr1 = 1.0 - beta1.powf(t);
            let corr2 = 1.0 - beta2.powf(t);
            for c in 0..classes {
                for j in 0..nf {
                    mw[[c, j]] = beta1 * mw[[c, j]] + (1.0 - beta1) * gw[[c, j]];
                    vw[[c, j]] = beta2 * vw[[c, j]] + (1.0 - beta2) * gw[[c, j]] * gw[[c, j]];
                    w[[c, j]] -= cfg.train_learning_rate * (mw[[c, j]] / corr1)
                        / ((vw[[c, j]] / corr2).sqrt() + eps);
                }
                mb[c] = beta1 * mb[c] + (1.0 - beta1) * gb[c];
                vb[c] = beta2 * vb[c] + (1.0 - beta2) * gb[c] * gb[c];
                b[c] -= cfg.train_learning_rate * (mb[c] / corr1) / ((vb[c] / corr2).sqrt() + eps);
            }
        }

        let mut correct = 0usize;
        for (x, y) in val_x.iter().zip(&val_y) {
            let logits = w.dot(x) + &b;
            let pred = crate::autodiff::argmax(logits.as_slice().unwrap());
            if pred == *y {
                correct += 1;
            }
        }
        let accuracy = correct as f64 / val_x.len() as f64;
        Ok((w, b, accuracy))
    }

    // ---- planted ground truth ---------------------------------------------

    /// Rank features per class by classification weight x mean activation
    /// over the class's probe set, then label each analytically.
    fn derive_planted_truth(&self) -> Result<Vec<Vec<(usize, PlantedLabel)>>> {
        let cfg = &self.config;
        let k = 5.min(cfg.num_features());
        let mut truth = Vec::with_capacity(cfg.num_objects);
        let mut diagnostics = Vec::new();
        for c in 0..cfg.num_objects {
            let batch = self.class_probe_images(
                c,
                cfg.probe_samples_per_class,
                mix_seed(cfg.seed, b"rank-probe", &[c as u64]),
            );
            let mut mean_act = Array1::<f64>::zeros(cfg.num_features());
            for img in &batch.images {
                mean_act += &self.probe.features(img);
            }
            mean_act.mapv_inplace(|v| v / batch.len() as f64);
            let w = self.probe.class_weights();
            let mut scored: Vec<(usize, f64)> = (0..cfg.num_features())
                .map(|j| (j, w[[c, j]] * mean_act[j]))
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let top: Vec<usize> = scored.iter().take(k).map(|(j, _)| *j).collect();

            let mut labels = Vec::with_capacity(k);
            let mut ctx_selected = Vec::new();
            for j in &top {
                match self.feature_kind(*j) {
                    FeatureKind::Object(o) if o == c => labels.push((*j, PlantedLabel::Core)),
                    FeatureKind::Context(m) if cfg.bias_table[c].contains(&m) => {
                        ctx_selected.push(m);
                        labels.push((*j, PlantedLabel::Spurious));
                    }
                    other => diagnostics.push(format!(
                        "class {c}: ranked feature {j} is {other:?}, outside the planted set"
                    )),
                }
            }
            let mut expect: Vec<usize> = cfg.bias_table[c].clone();
            expect.sort_unstable();
            ctx_selected.sort_unstable();
            if ctx_selected != expect {
                diagnostics.push(format!(
                    "class {c}: ranked contexts {ctx_selected:?} differ from planted {expect:?}"
                ));
            }
            truth.push(labels);
        }
        if !diagnostics.is_empty() {
            return Err(Error::SanityGate {
                seed: cfg.seed,
                diagnostics: diagnostics.join("; "),
            });
        }
        let spurious_counts: Vec<usize> = truth
            .iter()
            .map(|t| t.iter().filter(|(_, l)| *l == PlantedLabel::Spurious).count())
            .collect();
        if !spurious_counts.iter().any(|&n| n == 0) {
            return Err(Error::SanityGate {
                seed: cfg.seed,
                diagnostics: "no class with zero planted spurious features".into(),
            });
        }
        if !self.config.bias_table.iter().all(|b| b.is_empty())
            && !spurious_counts.iter().any(|&n| n >= 2)
        {
            return Err(Error::SanityGate {
                seed: cfg.seed,
                diagnostics: format!("no class with >= 2 spurious features: {spurious_counts:?}"),
            });
        }
        Ok(truth)
    }

    /// Combined checksum over generator and classifier weights.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.weights_checksum().as_bytes());
        h.update(self.probe.weights_checksum().as_bytes());
        hex_digest(h)
    }
}

/// What a detector feature reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Object(usize),
    Context(usize),
}

impl GeneratorBackend for ToyWorld {
    fn id(&self) -> &str {
        "toy"
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn latent_dim(&self) -> usize {
        self.num_primitives()
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        (3, self.config.image_size, self.config.image_size)
    }

    fn default_steps(&self) -> usize {
        self.config.default_steps
    }

    fn max_steps(&self) -> usize {
        self.config.max_steps
    }

    fn sample_latent(&self, seed: u64) -> LatentCode {
        let mut code = LatentCode::standard_normal(self.num_primitives(), seed);
        code.values *= self.config.noise_gain;
        code
    }

    fn generate(&self, g: &mut Graph, emb: NodeId, z: &LatentCode, steps: usize) -> Result<GeneratedImage> {
        if steps == 0 || steps > self.config.max_steps {
            return Err(Error::Contract(format!(
                "denoising steps must be in 1..={}, got {steps}",
                self.config.max_steps
            )));
        }
        if z.values.len() != self.latent_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("latent of dim {}", self.latent_dim()),
                got: format!("dim {}", z.values.len()),
            });
        }
        let emb_shape = g.value(emb).shape().to_vec();
        if emb_shape.len() != 2 || emb_shape[1] != self.config.embed_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("embedding matrix N x {}", self.config.embed_dim),
                got: format!("{emb_shape:?}"),
            });
        }

        // Text encoder: mean-pool the token rows.
        let cond = g.mean_rows(emb);

        // Per-step drive: semantic projection + bias + noise interaction.
        let semantic = g.linear(self.drive.clone(), None, cond);
        let with_bias = g.add_const(semantic, self.bias.clone());
        let inter_proj = g.linear(self.interaction.clone(), None, cond);
        let z_const = Arc::new(z.values.clone().into_dyn());
        let inter = g.mul_const(inter_proj, z_const);
        let drive = g.axpy(with_bias, inter, self.config.interaction_gain);

        // Consistency-style loop: u <- u + (drive + mix . tanh(u)) / K.
        let mut u = g.constant_vec(z.values.clone());
        for k in 0..steps {
            let t = g.tanh(u);
            let mixed = g.linear(self.mix.clone(), None, t);
            let update = g.add(drive, mixed);
            u = g.axpy(u, update, 1.0 / steps as f64);
            g.ensure_finite(u, k, "denoiser latent")?;
        }

        // Decoder: soft-clipped logits -> blend weights -> image.
        let logits = g.soft_clip(u, self.config.logit_limit);
        let weights = g.softmax(logits);
        let image = g.blend(self.templates.clone(), weights);
        g.ensure_finite(image, steps, "decoded image")?;

        let wv = g.vector_value(weights);
        let regions = self.regions_for_weights(&wv);
        Ok(GeneratedImage { image, regions })
    }

    fn weights_checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.vocab.table().iter() {
            h.update(v.to_le_bytes());
        }
        for m in [&self.drive, &self.mix, &self.interaction] {
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        for v in self.bias.iter() {
            h.update(v.to_le_bytes());
        }
        for v in self.templates.iter() {
            h.update(v.to_le_bytes());
        }
        hex_digest(h)
    }
}

// ---- construction helpers ---------------------------------------------

fn build_vocabulary(cfg: &ToyWorldConfig) -> Result<Vec<String>> {
    if cfg.num_objects > OBJECT_WORDS.len() || cfg.num_contexts > CONTEXT_WORDS.len() {
        return Err(Error::Config(format!(
            "toy world supports up to {} objects and {} contexts",
            OBJECT_WORDS.len(),
            CONTEXT_WORDS.len()
        )));
    }
    if cfg.filler_words > FILLER_WORDS.len() {
        return Err(Error::Config(format!(
            "at most {} filler words available",
            FILLER_WORDS.len()
        )));
    }
    let mut words = vec!["<sos>".to_string(), "<eos>".to_string(), "thing".to_string()];
    words.extend(OBJECT_WORDS[..cfg.num_objects].iter().map(|s| s.to_string()));
    words.extend(CONTEXT_WORDS[..cfg.num_contexts].iter().map(|s| s.to_string()));
    words.extend(FILLER_WORDS[..cfg.filler_words].iter().map(|s| s.to_string()));
    Ok(words)
}

fn attach_semantic_embeddings(
    cfg: &ToyWorldConfig,
    words: Vec<String>,
    directions: &Array2<f64>,
) -> Result<Vocabulary> {
    let v = words.len();
    let d = cfg.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, b"vocab-embeddings", &[]));
    let mut table = Array2::from_shape_fn((v, d), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * cfg.filler_scale
    });
    // Semantic words sit exactly on their primitive's direction.
    let semantic = cfg.num_objects + cfg.num_contexts;
    for i in 0..semantic {
        let word_idx = 3 + i;
        for j in 0..d {
            table[[word_idx, j]] = cfg.vocab_scale * directions[[i, j]];
        }
    }
    Ok(Vocabulary::new(words, table, 0, 1, 2))
}

/// Orthonormal rows via Gram-Schmidt over seeded gaussians.
fn orthonormal_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    assert!(n <= d);
    let mut out = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let mut v = Array1::from_shape_fn(d, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        });
        for k in 0..i {
            let row = out.row(k).to_owned();
            let proj = v.dot(&row);
            v -= &(row * proj);
        }
        let norm = v.dot(&v).sqrt();
        out.row_mut(i).assign(&(v / norm));
    }
    out
}

/// Fixed full-frame templates: background plus one per primitive, with their
/// pixel supports and concept words. Background is the final row.
fn build_templates(
    cfg: &ToyWorldConfig,
    words: &[String],
) -> (Array2<f64>, Vec<Arc<Array2<bool>>>, Vec<String>) {
    let s = cfg.image_size;
    let pixels = 3 * s * s;
    let bg_color = [0.74, 0.74, 0.78];
    let bg_flat: Vec<f64> = (0..pixels).map(|i| bg_color[i / (s * s)]).collect();

    let object_colors = [
        [0.92, 0.20, 0.20],
        [0.18, 0.85, 0.25],
        [0.22, 0.35, 0.95],
        [0.95, 0.85, 0.15],
    ];

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut supports: Vec<Arc<Array2<bool>>> = Vec::new();
    let mut concept_words = Vec::new();

    let center = s as f64 / 2.0 - 0.5;
    for k in 0..cfg.num_objects {
        let mut mask = Array2::<bool>::from_elem((s, s), false);
        for y in 0..s {
            for x in 0..s {
                let dy = y as f64 - center;
                let dx = x as f64 - center;
                let inside = match k {
                    0 => dx * dx + dy * dy <= 12.0 * 12.0,
                    1 => dx.abs() <= 11.0 && dy.abs() <= 11.0,
                    2 => dy >= -11.0 && dy <= 13.0 && dx.abs() <= (dy + 11.0) * 0.62,
                    _ => (dx.abs() <= 4.0 && dy.abs() <= 13.0) || (dy.abs() <= 4.0 && dx.abs() <= 13.0),
                };
                if inside {
                    mask[[y, x]] = true;
                }
            }
        }
        rows.push(paint(&bg_flat, &mask, s, |_, _| object_colors[k]));
        supports.push(Arc::new(mask));
        concept_words.push(words[3 + k].clone());
    }

    let ps = 16usize;
    for m in 0..cfg.num_contexts {
        let (oy, ox) = match m {
            0 => (2, 2),
            1 => (2, s - ps - 2),
            _ => (s - ps - 2, 2),
        };
        let mut mask = Array2::<bool>::from_elem((s, s), false);
        for y in oy..oy + ps {
            for x in ox..ox + ps {
                mask[[y, x]] = true;
            }
        }
        rows.push(paint(&bg_flat, &mask, s, |y, x| match m {
            0 => {
                if y % 4 < 2 {
                    [0.10, 0.10, 0.12]
                } else {
                    [0.95, 0.93, 0.90]
                }
            }
            1 => {
                if (y % 5 <= 1) && (x % 5 <= 1) {
                    [0.60, 0.15, 0.70]
                } else {
                    [0.90, 0.88, 0.95]
                }
            }
            _ => {
                if (y / 4 + x / 4) % 2 == 0 {
                    [0.95, 0.55, 0.10]
                } else {
                    [0.15, 0.30, 0.35]
                }
            }
        }));
        supports.push(Arc::new(mask));
        concept_words.push(words[3 + cfg.num_objects + m].clone());
    }

    rows.push(bg_flat.clone());

    let mut templates = Array2::<f64>::zeros((rows.len(), pixels));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            templates[[i, j]] = *v;
        }
    }
    (templates, supports, concept_words)
}

fn paint<F: Fn(usize, usize) -> [f64; 3]>(
    bg: &[f64],
    mask: &Array2<bool>,
    s: usize,
    color: F,
) -> Vec<f64> {
    let mut out = bg.to_vec();
    for y in 0..s {
        for x in 0..s {
            if mask[[y, x]] {
                let c = color(y, x);
                for ch in 0..3 {
                    out[ch * s * s + y * s + x] = c[ch];
                }
            }
        }
    }
    out
}

/// Detector bank: for each non-background primitive, the dual-basis row over
/// preprocessed template differences, so a detector responds exactly with the
/// primitive's blend weight. Object detectors are replicated over the gain
/// ladder; contexts get one detector each.
fn build_detectors(
    cfg: &ToyWorldConfig,
    templates: &Array2<f64>,
    plan: &PreprocessPlan,
    primitive_words: &[String],
) -> Result<(Array2<f64>, Array1<f64>, Vec<String>)> {
    let p = cfg.num_primitives();
    let n_word = p - 1;
    let bg_pre = Array1::from_vec(plan.apply(templates.row(p - 1).to_owned().as_slice().unwrap()));
    let diffs: Vec<Array1<f64>> = (0..n_word)
        .map(|i| {
            let pre = Array1::from_vec(plan.apply(templates.row(i).to_owned().as_slice().unwrap()));
            &pre - &bg_pre
        })
        .collect();

    // Gram matrix and dual basis: <dual_i, diff_j> = delta_ij.
    let mut gram = Array2::<f64>::zeros((n_word, n_word));
    for i in 0..n_word {
        for j in 0..n_word {
            gram[[i, j]] = diffs[i].dot(&diffs[j]);
        }
    }
    let gram_inv = invert(&gram).ok_or_else(|| Error::SanityGate {
        seed: cfg.seed,
        diagnostics: "template detector Gram matrix is singular".into(),
    })?;
    let duals: Vec<Array1<f64>> = (0..n_word)
        .map(|i| {
            let mut acc = Array1::<f64>::zeros(plan.out_len());
            for j in 0..n_word {
                acc += &(&diffs[j] * gram_inv[[i, j]]);
            }
            acc
        })
        .collect();
    for i in 0..n_word {
        for j in 0..n_word {
            let r = duals[i].dot(&diffs[j]) - if i == j { 1.0 } else { 0.0 };
            if r.abs() > 1e-8 {
                return Err(Error::SanityGate {
                    seed: cfg.seed,
                    diagnostics: format!("dual basis residual {r:.2e} at ({i},{j})"),
                });
            }
        }
    }

    let nf = cfg.num_features();
    let mut w = Array2::<f64>::zeros((nf, plan.out_len()));
    let mut b = Array1::<f64>::zeros(nf);
    let mut names = Vec::with_capacity(nf);
    let mut row = 0usize;
    for k in 0..cfg.num_objects {
        for (s, gain) in cfg.detector_gains.iter().enumerate() {
            let d = &duals[k] * *gain;
            b[row] = -d.dot(&bg_pre);
            w.row_mut(row).assign(&d);
            names.push(format!("{}-band{}", primitive_words[k], s));
            row += 1;
        }
    }
    for m in 0..cfg.num_contexts {
        let d = duals[cfg.num_objects + m].clone();
        b[row] = -d.dot(&bg_pre);
        w.row_mut(row).assign(&d);
        names.push(format!("{}-patch", primitive_words[cfg.num_objects + m]));
        row += 1;
    }
    Ok((w, b, names))
}

/// Gauss-Jordan inverse for the small Gram matrices used here.
fn invert(m: &Array2<f64>) -> Option<Array2<f64>> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[[r, col]].abs() > a[[pivot, col]].abs() {
                pivot = r;
            }
        }
        if a[[pivot, col]].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                a.swap([col, j], [pivot, j]);
                inv.swap([col, j], [pivot, j]);
            }
        }
        let diag = a[[col, col]];
        for j in 0..n {
            a[[col, j]] /= diag;
            inv[[col, j]] /= diag;
        }
        for r in 0..n {
            if r != col {
                let f = a[[r, col]];
                if f != 0.0 {
                    for j in 0..n {
                        a[[r, j]] -= f * a[[col, j]];
                        inv[[r, j]] -= f * inv[[col, j]];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Deterministic seed derivation: splitmix64 chain over a tag and parts.
pub fn mix_seed(base: u64, tag: &[u8], parts: &[u64]) -> u64 {
    fn splitmix(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    let mut h = splitmix(base);
    for byte in tag {
        h = splitmix(h ^ *byte as u64);
    }
    for part in parts {
        h = splitmix(h ^ part);
    }
    h
}

/// Deterministic RNG for a derived stream.
pub fn stream_rng(base: u64, tag: &[u8], parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(base, tag, parts))
}

/// Convenience: uniform u64 from a stream.
pub fn stream_u64(rng: &mut ChaCha8Rng) -> u64 {
    rng.random::<u64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{assemble_prompt_node, init_learnable, InitStrategy, PromptTemplate};

    fn world() -> ToyWorld {
        ToyWorld::build(ToyWorldConfig::new(0)).expect("default world must pass sanity gates")
    }

    #[test]
    fn same_seed_builds_identical_worlds() {
        let a = world();
        let b = world();
        assert_eq!(a.checksum(), b.checksum());
        let c = ToyWorld::build(ToyWorldConfig::new(1)).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn default_seed_passes_sanity_gate() {
        let w = world();
        assert!(w.validation_accuracy() >= 0.95, "accuracy {}", w.validation_accuracy());
    }

    #[test]
    fn crippled_config_rejected_with_diagnostics() {
        let mut cfg = ToyWorldConfig::new(0);
        cfg.train_samples_per_class = 1;
        cfg.train_iterations = 0;
        let err = match ToyWorld::build(cfg) {
            Ok(_) => panic!("crippled config must fail the sanity gate"),
            Err(e) => e,
        };
        match err {
            Error::SanityGate { diagnostics, .. } => {
                assert!(!diagnostics.is_empty());
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn planted_truth_matches_bias_table() {
        let w = world();
        let truth = w.planted_truth();
        assert_eq!(truth.len(), 4);
        let spurious: Vec<usize> = truth
            .iter()
            .map(|t| t.iter().filter(|(_, l)| *l == PlantedLabel::Spurious).count())
            .collect();
        assert_eq!(spurious, vec![0, 1, 2, 0]);
        for labels in truth {
            assert_eq!(labels.len(), 5);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let w = world();
        let template = PromptTemplate::from_prefix(w.vocabulary(), "", 1).unwrap();
        let learnable = init_learnable(&template, w.vocabulary(), InitStrategy::GaussianMatched, 3);
        let run = |steps: usize| {
            let mut g = Graph::new();
            let (emb, _) = assemble_prompt_node(&mut g, &template, w.vocabulary(), &learnable).unwrap();
            let z = w.sample_latent(0);
            let out = w.generate(&mut g, emb, &z, steps).unwrap();
            g.vector_value(out.image)
        };
        let a = run(4);
        let b = run(4);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn generation_shape_contract_across_step_counts() {
        let w = world();
        let template = PromptTemplate::from_prefix(w.vocabulary(), "", 1).unwrap();
        let learnable = init_learnable(&template, w.vocabulary(), InitStrategy::GaussianMatched, 3);
        for steps in [1usize, 4] {
            let mut g = Graph::new();
            let (emb, _) = assemble_prompt_node(&mut g, &template, w.vocabulary(), &learnable).unwrap();
            let z = w.sample_latent(7);
            let out = w.generate(&mut g, emb, &z, steps).unwrap();
            let img = g.vector_value(out.image);
            let (c, h, wd) = w.image_shape();
            assert_eq!(img.len(), c * h * wd);
            assert!(img.iter().all(|v| v.is_finite()));
        }
        let mut g = Graph::new();
        let (emb, _) = assemble_prompt_node(&mut g, &template, w.vocabulary(), &learnable).unwrap();
        let z = w.sample_latent(7);
        assert!(w.generate(&mut g, emb, &z, 0).is_err());
    }

    #[test]
    fn mean_pixel_gradient_matches_central_differences() {
        // central-difference oracle, h = 1e-4
        let w = world();
        let template = PromptTemplate::from_prefix(w.vocabulary(), "", 1).unwrap();
        let learnable = init_learnable(&template, w.vocabulary(), InitStrategy::GaussianMatched, 11);
        let z = w.sample_latent(5);

        let eval = |rows: &Array2<f64>| -> (f64, Array1<f64>) {
            let mut g = Graph::new();
            let (emb, leaves) = assemble_prompt_node(&mut g, &template, w.vocabulary(), rows).unwrap();
            let out = w.generate(&mut g, emb, &z, 4).unwrap();
            let m = g.mean_all(out.image);
            let grads = g.backward(m);
            (g.scalar_value(m), grads.vector(leaves[0]))
        };

        let (_, analytic) = eval(&learnable);
        let h = 1e-4;
        let mut passed = 0;
        let d = learnable.ncols();
        for j in 0..d {
            let mut plus = learnable.clone();
            plus[[0, j]] += h;
            let mut minus = learnable.clone();
            minus[[0, j]] -= h;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let rel = (analytic[j] - fd).abs() / analytic[j].abs().max(fd.abs()).max(1e-9);
            if rel < 1e-3 {
                passed += 1;
            }
        }
        assert!(passed == d, "gradient check passed only {passed}/{d} coordinates");
        assert!(analytic.iter().any(|v| v.abs() > 0.0), "gradient must be nonzero somewhere");
    }

    #[test]
    fn non_finite_latent_aborts_with_step_index() {
        let w = world();
        let template = PromptTemplate::from_prefix(w.vocabulary(), "", 1).unwrap();
        let mut learnable = init_learnable(&template, w.vocabulary(), InitStrategy::GaussianMatched, 3);
        learnable[[0, 0]] = f64::MAX;
        learnable[[0, 1]] = f64::MAX;
        let mut g = Graph::new();
        let (emb, _) = assemble_prompt_node(&mut g, &template, w.vocabulary(), &learnable).unwrap();
        let z = w.sample_latent(0);
        match w.generate(&mut g, emb, &z, 4) {
            Err(Error::NonFinite { step, .. }) => assert!(step < 4),
            other => panic!("expected non-finite abort, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn frozen_weights_unchanged_by_generation() {
        let w = world();
        let before = w.checksum();
        let template = PromptTemplate::from_prefix(w.vocabulary(), "the shape of", 1).unwrap();
        let learnable = init_learnable(&template, w.vocabulary(), InitStrategy::GaussianMatched, 3);
        for seed in 0..4 {
            let mut g = Graph::new();
            let (emb, _) = assemble_prompt_node(&mut g, &template, w.vocabulary(), &learnable).unwrap();
            let z = w.sample_latent(seed);
            let out = w.generate(&mut g, emb, &z, 4).unwrap();
            let _ = g.vector_value(out.image);
        }
        assert_eq!(before, w.checksum());
    }

    #[test]
    fn bias_table_round_trips_into_region_metadata() {
        let w = world();
        // class 2 is planted with contexts 1 and 2
        let (_, regions) = w.reference_image(2, 99);
        let strong: Vec<&str> = regions
            .iter()
            .filter(|r| r.confidence > 0.15)
            .map(|r| r.concept.as_str())
            .collect();
        assert!(strong.contains(&"triangle"), "object concept present: {strong:?}");
        assert!(strong.contains(&"dots") && strong.contains(&"checker"));
        // class 0 is unbiased
        let (_, regions0) = w.reference_image(0, 99);
        let strong0: Vec<&str> = regions0
            .iter()
            .filter(|r| r.confidence > 0.15)
            .map(|r| r.concept.as_str())
            .collect();
        assert_eq!(strong0, vec!["circle"]);
    }

    #[test]
    fn tiny_vocab_world_has_eight_words() {
        let w = ToyWorld::build(ToyWorldConfig::tiny_vocab(0)).unwrap();
        assert_eq!(w.vocabulary().size(), 8);
    }

    #[test]
    fn detector_features_equal_blend_weights() {
        let w = world();
        let (img, regions) = w.reference_image(1, 42);
        let feats = w.probe().features(&img);
        // band-0 detector of the class object reads its blend weight exactly
        let object_weight = regions
            .iter()
            .find(|r| r.concept == "square")
            .unwrap()
            .confidence;
        let per = w.config().detector_gains.len();
        assert!(
            (feats[per] - object_weight).abs() < 1e-9,
            "detector {} vs weight {}",
            feats[per],
            object_weight
        );
    }
}
