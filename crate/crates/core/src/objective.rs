//! Optimization objectives over probed generator outputs.
//!
//! Every objective is minimized: class explanation uses cross-entropy on the
//! class logits, feature maximization is encoded by negating the feature
//! response, and the combined form subtracts the weighted feature term from
//! the cross-entropy.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::pipeline::{ClassifierProbe, ImageBatch, ProbeTarget};

/// What to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Objective {
    /// Cross-entropy of the classifier's softmax against a target class.
    ClassCe { class: usize },
    /// Negated response of one hidden feature.
    FeatureMax { feature: usize },
    /// `CE(class) - lambda * feature response`.
    Combined { class: usize, feature: usize, lambda: f64 },
}

impl Objective {
    /// Reject objectives whose targets the probe does not expose, before any
    /// generation work happens.
    pub fn validate(&self, probe: &ClassifierProbe) -> Result<()> {
        match *self {
            Objective::ClassCe { class } => probe.validate_target(ProbeTarget::ClassLogit(class)),
            Objective::FeatureMax { feature } => probe.validate_target(ProbeTarget::Feature(feature)),
            Objective::Combined { class, feature, lambda } => {
                if lambda <= 0.0 {
                    return Err(Error::Contract(format!(
                        "combined objective requires lambda > 0, got {lambda}"
                    )));
                }
                probe.validate_target(ProbeTarget::ClassLogit(class))?;
                probe.validate_target(ProbeTarget::Feature(feature))
            }
        }
    }

    pub fn class(&self) -> Option<usize> {
        match *self {
            Objective::ClassCe { class } | Objective::Combined { class, .. } => Some(class),
            Objective::FeatureMax { .. } => None,
        }
    }

    pub fn feature(&self) -> Option<usize> {
        match *self {
            Objective::FeatureMax { feature } | Objective::Combined { feature, .. } => Some(feature),
            Objective::ClassCe { .. } => None,
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            Objective::ClassCe { class } => format!("class-ce({class})"),
            Objective::FeatureMax { feature } => format!("feature-max({feature})"),
            Objective::Combined { class, feature, lambda } => {
                format!("combined(class {class}, feature {feature}, lambda {lambda})")
            }
        }
    }

    /// Per-sample loss node for one generated image.
    pub fn sample_loss_node(
        &self,
        g: &mut Graph,
        probe: &ClassifierProbe,
        image: NodeId,
    ) -> Result<NodeId> {
        match *self {
            Objective::ClassCe { class } => {
                probe.validate_target(ProbeTarget::ClassLogit(class))?;
                let logits = probe.logits_node(g, image);
                let ls = g.log_softmax(logits);
                let picked = g.pick(ls, class);
                Ok(g.scale(picked, -1.0))
            }
            Objective::FeatureMax { feature } => {
                let resp = probe.probe_node(g, image, ProbeTarget::Feature(feature))?;
                Ok(g.scale(resp, -1.0))
            }
            Objective::Combined { class, feature, lambda } => {
                let ce = Objective::ClassCe { class }.sample_loss_node(g, probe, image)?;
                let resp = probe.probe_node(g, image, ProbeTarget::Feature(feature))?;
                Ok(g.axpy(ce, resp, -lambda))
            }
        }
    }

    /// Batch loss node: mean of per-sample losses.
    pub fn batch_loss_node(
        &self,
        g: &mut Graph,
        probe: &ClassifierProbe,
        images: &[NodeId],
    ) -> Result<NodeId> {
        if images.is_empty() {
            return Err(Error::Contract("batch loss needs at least one image".into()));
        }
        let parts: Result<Vec<NodeId>> = images
            .iter()
            .map(|img| self.sample_loss_node(g, probe, *img))
            .collect();
        Ok(g.average_scalars(&parts?))
    }
}

/// Mean objective value over a concrete image batch.
pub fn loss(objective: &Objective, images: &ImageBatch, probe: &ClassifierProbe) -> Result<f64> {
    objective.validate(probe)?;
    if images.is_empty() {
        return Err(Error::Contract("loss over an empty image batch".into()));
    }
    let mut acc = 0.0;
    for img in &images.images {
        let mut g = Graph::new();
        let flat = crate::pipeline::flat_image_node(&mut g, img);
        let node = objective.sample_loss_node(&mut g, probe, flat)?;
        let v = g.scalar_value(node);
        if !v.is_finite() {
            return Err(Error::NonFinite { step: 0, context: "objective loss".into() });
        }
        acc += v;
    }
    Ok(acc / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::PreprocessPlan;
    use ndarray::{Array1, Array2, Array3};

    /// Probe whose logits equal the four input pixels and whose features are
    /// scaled copies of them.
    fn passthrough_probe() -> ClassifierProbe {
        let plan = PreprocessPlan::bilinear((1, 2, 2), (2, 2), vec![0.0], vec![1.0]);
        let eye = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
        ClassifierProbe::new(
            "passthrough",
            plan,
            eye.clone(),
            Array1::zeros(4),
            eye,
            Array1::zeros(4),
            (0..4).map(|c| format!("c{c}")).collect(),
        )
    }

    fn batch_of(pixel_sets: &[[f64; 4]]) -> ImageBatch {
        let mut batch = ImageBatch { value_range: (0.0, 1.0), ..Default::default() };
        for px in pixel_sets {
            let img = Array3::from_shape_vec((1, 2, 2), px.to_vec()).unwrap();
            batch.push(img, vec![]);
        }
        batch
    }

    #[test]
    fn uniform_logits_give_ln_num_classes() {
        let probe = passthrough_probe();
        let batch = batch_of(&[[0.3, 0.3, 0.3, 0.3]]);
        let ce = loss(&Objective::ClassCe { class: 2 }, &batch, &probe).unwrap();
        assert!((ce - 4.0f64.ln()).abs() < 1e-12, "uniform CE {ce} vs ln4");
    }

    #[test]
    fn combined_with_zero_feature_equals_class_ce() {
        let probe = passthrough_probe();
        // feature 1 (pixel 1) is zero on every image
        let batch = batch_of(&[[0.9, 0.0, 0.2, 0.1], [0.4, 0.0, 0.0, 0.3]]);
        let ce = loss(&Objective::ClassCe { class: 0 }, &batch, &probe).unwrap();
        let combined = loss(
            &Objective::Combined { class: 0, feature: 1, lambda: 1.0 },
            &batch,
            &probe,
        )
        .unwrap();
        assert!((ce - combined).abs() < 1e-12);
    }

    #[test]
    fn combined_matches_standalone_recomputation() {
        // oracle: CE and mean feature response recomputed with plain floats
        let probe = passthrough_probe();
        let sets = [[0.9, 0.4, 0.2, 0.1], [0.1, 0.8, 0.3, 0.6], [0.5, 0.2, 0.7, 0.05]];
        let batch = batch_of(&sets);
        let lambda = 0.7;
        let class = 1;
        let feature = 3;

        let mut ce_oracle = 0.0;
        let mut feat_oracle = 0.0;
        for px in &sets {
            let max = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = px.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            ce_oracle += -(exps[class] / sum).ln();
            feat_oracle += px[feature].max(0.0);
        }
        ce_oracle /= sets.len() as f64;
        feat_oracle /= sets.len() as f64;
        let expect = ce_oracle - lambda * feat_oracle;

        let got = loss(
            &Objective::Combined { class, feature, lambda },
            &batch,
            &probe,
        )
        .unwrap();
        let rel = (got - expect).abs() / expect.abs().max(1e-12);
        assert!(rel < 1e-6, "combined {got} vs oracle {expect}");
    }

    #[test]
    fn feature_max_is_negated_mean_response() {
        let probe = passthrough_probe();
        let batch = batch_of(&[[0.2, 0.5, 0.0, 0.0], [0.4, 0.1, 0.0, 0.0]]);
        let got = loss(&Objective::FeatureMax { feature: 0 }, &batch, &probe).unwrap();
        assert!((got + 0.3).abs() < 1e-12);
    }

    #[test]
    fn invalid_targets_rejected_before_compute() {
        let probe = passthrough_probe();
        assert!(Objective::ClassCe { class: 9 }.validate(&probe).is_err());
        assert!(Objective::FeatureMax { feature: 9 }.validate(&probe).is_err());
        assert!(Objective::Combined { class: 0, feature: 0, lambda: 0.0 }
            .validate(&probe)
            .is_err());
        assert!(Objective::Combined { class: 0, feature: 0, lambda: 1.0 }
            .validate(&probe)
            .is_ok());
    }
}
