//! Automated core/spurious feature discovery.
//!
//! Per class: rank the top-k penultimate-layer features, optimize the
//! combined class+feature objective for each, sample the explanation
//! distribution, segment the samples with the class name, and compare the
//! mean object-pixel fraction against the threshold.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::optimizer::{optimize, OptimizerConfig, RunRecord};
use crate::pipeline::{ClassifierProbe, GeneratorBackend, ImageBatch};
use crate::prompt::PromptTemplate;
use crate::sampler::{sample_embedding, ScoreTarget};
use crate::segment::{SegmentationMask, Segmenter, SegmenterConfig};
use crate::toy::mix_seed;

/// Ranked features of one class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRanking {
    pub class: usize,
    /// `(feature index, importance score)`, scores non-increasing.
    pub entries: Vec<(usize, f64)>,
    /// Identifier of the scoring rule used.
    pub method: String,
}

/// Rank the top-k features of a class by classification-layer weight times
/// mean activation over the probe set; falls back to absolute weight when no
/// probe set is supplied. Ties break toward the lower feature index.
pub fn rank_features(
    probe: &ClassifierProbe,
    class: usize,
    k: usize,
    probe_images: Option<&ImageBatch>,
) -> Result<FeatureRanking> {
    if class >= probe.num_classes() {
        return Err(Error::UnknownTarget {
            target: format!("class:{class}"),
            available: format!("classes 0..{}", probe.num_classes()),
        });
    }
    let nf = probe.num_features();
    if k > nf {
        return Err(Error::Contract(format!(
            "requested top-{k} of a {nf}-feature layer"
        )));
    }
    let w = probe.class_weights();
    let (scores, method): (Vec<f64>, &str) = match probe_images {
        Some(batch) if !batch.is_empty() => {
            let mut mean = vec![0.0; nf];
            for img in &batch.images {
                let f = probe.features(img);
                for j in 0..nf {
                    mean[j] += f[j];
                }
            }
            let n = batch.len() as f64;
            (
                (0..nf).map(|j| w[[class, j]] * mean[j] / n).collect(),
                "weight-x-mean-activation",
            )
        }
        _ => ((0..nf).map(|j| w[[class, j]].abs()).collect(), "abs-weight"),
    };
    let mut entries: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
    entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    entries.truncate(k);
    Ok(FeatureRanking { class, entries, method: method.to_string() })
}

/// Fraction of segmented object pixels out of the entire image.
pub fn object_fraction(mask: &SegmentationMask) -> f64 {
    let total = mask.mask.len();
    if total == 0 {
        return 0.0;
    }
    mask.true_count() as f64 / total as f64
}

/// Core/spurious decision for one feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Core,
    Spurious,
    /// The feature's optimization failed; no decision was possible.
    Inconclusive,
}

/// Decide core vs spurious from object-fraction samples: core when the mean
/// fraction reaches the threshold (boundary inclusive), spurious otherwise.
pub fn classify_feature(r_samples: &[f64], delta: f64) -> Result<Verdict> {
    if r_samples.is_empty() {
        return Err(Error::Contract("verdict requires at least one fraction sample".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Contract(format!("delta must be in (0,1), got {delta}")));
    }
    for r in r_samples {
        if !(*r >= 0.0 && *r <= 1.0) {
            return Err(Error::Contract(format!("fraction {r} outside [0,1]")));
        }
    }
    let mean = r_samples.iter().sum::<f64>() / r_samples.len() as f64;
    Ok(if mean >= delta { Verdict::Core } else { Verdict::Spurious })
}

fn default_top_k() -> usize {
    5
}
fn default_delta() -> f64 {
    0.05
}
fn default_sample_count() -> usize {
    10
}
fn default_lambda() -> f64 {
    1.0
}

/// Discovery parameters. The optimizer settings of the per-feature runs are
/// passed separately.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryConfig {
    pub top_k: usize,
    /// Object-fraction threshold separating core from spurious.
    pub delta: f64,
    /// Explanation images sampled per feature.
    pub sample_count: usize,
    /// Feature-term weight of the combined objective.
    pub lambda: f64,
    pub segmenter: SegmenterConfig,
    /// Probe images per class for ranking (0 disables the activation term).
    pub ranking_probe_images: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            top_k: default_top_k(),
            delta: default_delta(),
            sample_count: default_sample_count(),
            lambda: default_lambda(),
            segmenter: SegmenterConfig::default(),
            ranking_probe_images: 32,
        }
    }
}

/// Optimize the combined objective for one (class, feature) pair. A zero
/// lambda degenerates to the pure class objective.
pub fn optimize_feature_for_class(
    class: usize,
    feature: usize,
    lambda: f64,
    template: &PromptTemplate,
    generator: &dyn GeneratorBackend,
    probe: &ClassifierProbe,
    cfg: &OptimizerConfig,
    master_seed: u64,
    generation_steps: usize,
) -> Result<RunRecord> {
    let objective = if lambda == 0.0 {
        Objective::ClassCe { class }
    } else {
        Objective::Combined { class, feature, lambda }
    };
    optimize(template, &objective, generator, probe, cfg, master_seed, generation_steps)
}

/// Audit record of one (class, feature) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureAudit {
    pub class: usize,
    pub class_name: String,
    pub feature: usize,
    pub rank: usize,
    pub importance: f64,
    pub r_samples: Vec<f64>,
    pub mean_r: f64,
    pub delta: f64,
    pub verdict: Verdict,
    /// Seeds of the sampled explanation images.
    pub sample_seeds: Vec<u64>,
    /// Relative artifact paths, when persisted.
    pub sample_paths: Vec<String>,
    pub mask_paths: Vec<String>,
    /// Failure description for inconclusive audits.
    pub error: Option<String>,
}

/// Full audit of one class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassAudit {
    pub class: usize,
    pub class_name: String,
    pub ranking_method: String,
    pub delta: f64,
    pub sample_count: usize,
    pub lambda: f64,
    pub features: Vec<FeatureAudit>,
}

/// Everything audit_class needs from a backend.
pub struct AuditContext<'a> {
    pub generator: &'a dyn GeneratorBackend,
    pub probe: &'a ClassifierProbe,
    pub segmenter: Arc<dyn Segmenter>,
    /// Probe images for ranking, already class-conditional.
    pub ranking_probe: Option<ImageBatch>,
}

/// Raw artifacts of one audited feature, for callers that persist them.
pub struct FeatureArtifacts {
    pub record: RunRecord,
    pub samples: crate::sampler::SampleSet,
    pub masks: Vec<SegmentationMask>,
}

/// A class audit plus the per-feature artifacts (aligned with
/// `audit.features`; `None` where the feature came out inconclusive).
pub struct ClassAuditBundle {
    pub audit: ClassAudit,
    pub artifacts: Vec<Option<FeatureArtifacts>>,
}

/// Run the discovery pipeline for one class: rank top-k features, optimize
/// the combined objective per feature, sample, segment with the class name,
/// and issue verdicts. Per-feature failures are recorded as inconclusive and
/// never abort the class audit.
pub fn audit_class(
    class: usize,
    ctx: &AuditContext<'_>,
    cfg: &DiscoveryConfig,
    optimizer_cfg: &OptimizerConfig,
    template: &PromptTemplate,
    master_seed: u64,
    generation_steps: usize,
) -> Result<ClassAuditBundle> {
    if !(cfg.delta > 0.0 && cfg.delta < 1.0) {
        return Err(Error::Config(format!("delta must be in (0,1), got {}", cfg.delta)));
    }
    if cfg.sample_count == 0 {
        return Err(Error::Config("sample_count must be positive".into()));
    }
    let class_name = ctx
        .probe
        .class_names()
        .get(class)
        .ok_or_else(|| Error::UnknownTarget {
            target: format!("class:{class}"),
            available: format!("classes 0..{}", ctx.probe.num_classes()),
        })?
        .clone();

    let ranking = rank_features(ctx.probe, class, cfg.top_k, ctx.ranking_probe.as_ref())?;
    let mut features = Vec::with_capacity(ranking.entries.len());
    let mut artifacts = Vec::with_capacity(ranking.entries.len());
    for (rank, (feature, importance)) in ranking.entries.iter().enumerate() {
        let feature_seed = mix_seed(master_seed, b"audit-feature", &[class as u64, *feature as u64]);
        match audit_feature(
            class,
            &class_name,
            *feature,
            rank,
            *importance,
            ctx,
            cfg,
            optimizer_cfg,
            template,
            feature_seed,
            generation_steps,
        ) {
            Ok((audit, arts)) => {
                features.push(audit);
                artifacts.push(Some(arts));
            }
            Err(e) => {
                features.push(FeatureAudit {
                    class,
                    class_name: class_name.clone(),
                    feature: *feature,
                    rank,
                    importance: *importance,
                    r_samples: vec![],
                    mean_r: f64::NAN,
                    delta: cfg.delta,
                    verdict: Verdict::Inconclusive,
                    sample_seeds: vec![],
                    sample_paths: vec![],
                    mask_paths: vec![],
                    error: Some(e.to_string()),
                });
                artifacts.push(None);
            }
        }
    }
    Ok(ClassAuditBundle {
        audit: ClassAudit {
            class,
            class_name,
            ranking_method: ranking.method,
            delta: cfg.delta,
            sample_count: cfg.sample_count,
            lambda: cfg.lambda,
            features,
        },
        artifacts,
    })
}

#[allow(clippy::too_many_arguments)]
fn audit_feature(
    class: usize,
    class_name: &str,
    feature: usize,
    rank: usize,
    importance: f64,
    ctx: &AuditContext<'_>,
    cfg: &DiscoveryConfig,
    optimizer_cfg: &OptimizerConfig,
    template: &PromptTemplate,
    seed: u64,
    generation_steps: usize,
) -> Result<(FeatureAudit, FeatureArtifacts)> {
    let record = optimize_feature_for_class(
        class,
        feature,
        cfg.lambda,
        template,
        ctx.generator,
        ctx.probe,
        optimizer_cfg,
        seed,
        generation_steps,
    )?;
    let sample_base = mix_seed(seed, b"audit-samples", &[]);
    let samples = sample_embedding(
        &record.embedding,
        generation_steps,
        &[ScoreTarget::ClassProb(class), ScoreTarget::Feature(feature)],
        ctx.generator,
        ctx.probe,
        cfg.sample_count,
        sample_base,
    )?;
    let mut r_samples = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for i in 0..samples.len() {
        let mask = ctx.segmenter.segment(samples.images.view(i), class_name)?;
        r_samples.push(object_fraction(&mask));
        masks.push(mask);
    }
    let verdict = classify_feature(&r_samples, cfg.delta)?;
    let mean_r = r_samples.iter().sum::<f64>() / r_samples.len() as f64;
    let audit = FeatureAudit {
        class,
        class_name: class_name.to_string(),
        feature,
        rank,
        importance,
        r_samples,
        mean_r,
        delta: cfg.delta,
        verdict,
        sample_seeds: samples.seeds.clone(),
        sample_paths: vec![],
        mask_paths: vec![],
        error: None,
    };
    Ok((audit, FeatureArtifacts { record, samples, masks }))
}

// ---- agreement ----------------------------------------------------------

/// One row of the core/spurious annotation file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct AnnotationRow {
    pub class_id: usize,
    pub class_name: String,
    pub feature_index: usize,
    /// `core` or `spurious`.
    pub label: String,
    /// `animate`, `inanimate` or `unknown`.
    pub animacy: String,
}

/// Load the annotation CSV (`class_id,class_name,feature_index,label,animacy`).
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRow>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Schema(format!("annotations {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in reader.deserialize() {
        let row: AnnotationRow =
            rec.map_err(|e| Error::Schema(format!("annotations {}: {e}", path.display())))?;
        if row.label != "core" && row.label != "spurious" {
            return Err(Error::Schema(format!(
                "annotation label must be core|spurious, got {:?}",
                row.label
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Write annotations in the same schema.
pub fn save_annotations(path: &Path, rows: &[AnnotationRow]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Schema(e.to_string()))?;
    for row in rows {
        writer.serialize(row).map_err(|e| Error::Schema(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Agreement fraction of one group.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct GroupAgreement {
    pub matched: usize,
    pub total: usize,
    pub agreement: f64,
}

impl GroupAgreement {
    fn add(&mut self, matched: bool) {
        self.total += 1;
        if matched {
            self.matched += 1;
        }
        self.agreement = self.matched as f64 / self.total as f64;
    }
}

/// Agreement report between audited verdicts and external annotations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgreementReport {
    pub overall: GroupAgreement,
    /// Grouped by annotated bias level: `unbiased` (no spurious features),
    /// `biased` (all five spurious), `medium` (anything in between).
    pub by_bias_level: std::collections::BTreeMap<String, GroupAgreement>,
    /// Grouped by the annotation's animacy tag when present.
    pub by_animacy: std::collections::BTreeMap<String, GroupAgreement>,
    /// Audited pairs with no matching annotation (excluded from fractions).
    pub unmatched: Vec<(usize, usize)>,
    /// Inconclusive audited pairs (excluded from fractions).
    pub inconclusive: Vec<(usize, usize)>,
}

/// Compare verdicts against annotations pair-by-pair on (class, feature).
pub fn agreement(audits: &[ClassAudit], annotations: &[AnnotationRow]) -> AgreementReport {
    use std::collections::BTreeMap;
    let mut ann_index: BTreeMap<(usize, usize), &AnnotationRow> = BTreeMap::new();
    let mut spurious_per_class: BTreeMap<usize, usize> = BTreeMap::new();
    let mut annotated_per_class: BTreeMap<usize, usize> = BTreeMap::new();
    for row in annotations {
        ann_index.insert((row.class_id, row.feature_index), row);
        *annotated_per_class.entry(row.class_id).or_default() += 1;
        if row.label == "spurious" {
            *spurious_per_class.entry(row.class_id).or_default() += 1;
        }
    }
    let bias_level = |class: usize| -> String {
        let spurious = spurious_per_class.get(&class).copied().unwrap_or(0);
        let total = annotated_per_class.get(&class).copied().unwrap_or(0);
        if spurious == 0 {
            "unbiased".to_string()
        } else if spurious == total {
            "biased".to_string()
        } else {
            "medium".to_string()
        }
    };

    let mut report = AgreementReport {
        overall: GroupAgreement::default(),
        by_bias_level: BTreeMap::new(),
        by_animacy: BTreeMap::new(),
        unmatched: vec![],
        inconclusive: vec![],
    };
    for audit in audits {
        for fa in &audit.features {
            let key = (fa.class, fa.feature);
            if fa.verdict == Verdict::Inconclusive {
                report.inconclusive.push(key);
                continue;
            }
            let Some(row) = ann_index.get(&key) else {
                report.unmatched.push(key);
                continue;
            };
            let ours = match fa.verdict {
                Verdict::Core => "core",
                Verdict::Spurious => "spurious",
                Verdict::Inconclusive => unreachable!(),
            };
            let matched = ours == row.label;
            report.overall.add(matched);
            report
                .by_bias_level
                .entry(bias_level(fa.class))
                .or_default()
                .add(matched);
            if row.animacy == "animate" || row.animacy == "inanimate" {
                report
                    .by_animacy
                    .entry(row.animacy.clone())
                    .or_default()
                    .add(matched);
            }
        }
    }
    report
}
