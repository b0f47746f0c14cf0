//! Stochastic gradient descent over learnable prompt embedding rows.
//!
//! Each step draws a fresh batch of latent codes, generates images, scores
//! the objective and updates only the learnable rows (Adam, global-norm
//! clipping). Several independent restarts run from different
//! initializations; the restart with the best held-out objective wins.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::pipeline::{ClassifierProbe, GeneratorBackend};
use crate::prompt::{
    assemble_prompt_node, encode_prompt, init_learnable, EmbeddingSequence, InitStrategy,
    PromptTemplate,
};
use crate::toy::mix_seed;

/// How latent seeds evolve across steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedPolicy {
    /// New latent codes every step (the default).
    Fresh,
    /// The first step's latent codes reused for the whole run. Exists to
    /// demonstrate prompt overfitting to a fixed noise draw.
    Fixed,
}

fn default_lr() -> f64 {
    0.05
}
fn default_steps() -> usize {
    200
}
fn default_batch() -> usize {
    2
}
fn default_restarts() -> usize {
    3
}
fn default_clip() -> f64 {
    1.0
}
fn default_divergence() -> f64 {
    10.0
}
fn default_heldout() -> usize {
    32
}
fn default_train_eval() -> usize {
    64
}
fn default_policy() -> SeedPolicy {
    SeedPolicy::Fresh
}
fn default_init() -> InitStrategy {
    InitStrategy::GaussianMatched
}

/// Hyperparameters of one optimization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Latent codes drawn per step (B).
    pub batch_size: usize,
    /// Independent restarts (R).
    pub restarts: usize,
    pub seed_policy: SeedPolicy,
    pub grad_clip_norm: f64,
    /// A restart is abandoned once its loss exceeds this multiple of the
    /// initial loss (or goes non-finite).
    pub divergence_factor: f64,
    /// Held-out latent seeds used for restart selection.
    pub heldout_seeds: usize,
    /// Training seeds (from the tail of the run) re-evaluated to report the
    /// final training loss.
    pub train_eval_seeds: usize,
    pub init: InitStrategy,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: default_lr(),
            steps: default_steps(),
            batch_size: default_batch(),
            restarts: default_restarts(),
            seed_policy: default_policy(),
            grad_clip_norm: default_clip(),
            divergence_factor: default_divergence(),
            heldout_seeds: default_heldout(),
            train_eval_seeds: default_train_eval(),
            init: default_init(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("grad_clip_norm", self.grad_clip_norm),
            ("divergence_factor", self.divergence_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.steps == 0 || self.batch_size == 0 || self.heldout_seeds == 0 {
            return Err(Error::Config("steps, batch_size and heldout_seeds must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restart count must be at least 1".into()));
        }
        Ok(())
    }

    /// Quick preset for tests: fewer steps, one restart.
    pub fn quick(steps: usize) -> Self {
        OptimizerConfig { steps, restarts: 1, ..Default::default() }
    }
}

/// One optimization step in the trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// Base seed of the step's latent batch.
    pub base_seed: u64,
    /// Mean loss over the batch.
    pub loss: f64,
    /// Per-sample `(seed, loss)` pairs.
    pub samples: Vec<(u64, f64)>,
}

/// Outcome of one restart.
#[derive(Debug, Clone)]
pub struct RestartOutcome {
    pub restart: usize,
    pub init_seed: u64,
    pub trace: Vec<StepTrace>,
    /// Mean objective of the final embedding over recent training seeds.
    pub final_train_loss: f64,
    /// Mean objective of the final embedding over held-out seeds.
    pub heldout_loss: f64,
    pub diverged: Option<String>,
    pub learnable: Array2<f64>,
}

/// Persisted artifact of one optimization run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub backend_id: String,
    pub objective: Objective,
    pub template: PromptTemplate,
    pub config: OptimizerConfig,
    pub master_seed: u64,
    /// Number of denoising steps used for every generation.
    pub generation_steps: usize,
    pub restarts: Vec<RestartOutcome>,
    /// Index of the selected restart (argmin held-out loss).
    pub selected: usize,
    /// Final embedding sequence of the selected restart.
    pub embedding: EmbeddingSequence,
    pub heldout_seed_list: Vec<u64>,
    /// Hard-prompt runs: the decoded text and its recorded final loss.
    pub decoded_prompt: Option<String>,
    pub final_hard_loss: Option<f64>,
}

impl RunRecord {
    pub fn selected_outcome(&self) -> &RestartOutcome {
        &self.restarts[self.selected]
    }

    /// Re-derive the selected restart from the stored per-restart held-out
    /// losses (argmin over non-diverged restarts).
    pub fn reselect(&self) -> Option<usize> {
        self.restarts
            .iter()
            .filter(|r| r.diverged.is_none() && r.heldout_loss.is_finite())
            .min_by(|a, b| a.heldout_loss.partial_cmp(&b.heldout_loss).unwrap())
            .map(|r| r.restart)
    }
}

/// Seed of sample `b` of step `step` in restart `restart`.
pub fn train_sample_seed(
    master: u64,
    policy: SeedPolicy,
    restart: usize,
    step: usize,
    b: usize,
) -> u64 {
    let effective_step = match policy {
        SeedPolicy::Fresh => step,
        SeedPolicy::Fixed => 0,
    };
    mix_seed(master, b"train-z", &[restart as u64, effective_step as u64, b as u64])
}

/// Held-out seeds, domain-separated from every training seed.
pub fn heldout_seeds(master: u64, count: usize) -> Vec<u64> {
    (0..count)
        .map(|i| mix_seed(master, b"heldout-z", &[i as u64]))
        .collect()
}

struct Adam {
    m: Vec<Array1<f64>>,
    v: Vec<Array1<f64>>,
    t: usize,
}

impl Adam {
    fn new(rows: usize, dim: usize) -> Self {
        Adam {
            m: vec![Array1::zeros(dim); rows],
            v: vec![Array1::zeros(dim); rows],
            t: 0,
        }
    }

    fn update(&mut self, params: &mut Array2<f64>, grads: &[Array1<f64>], lr: f64) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (k, grad) in grads.iter().enumerate() {
            for j in 0..grad.len() {
                let g = grad[j];
                self.m[k][j] = BETA1 * self.m[k][j] + (1.0 - BETA1) * g;
                self.v[k][j] = BETA2 * self.v[k][j] + (1.0 - BETA2) * g * g;
                let mhat = self.m[k][j] / c1;
                let vhat = self.v[k][j] / c2;
                params[[k, j]] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}

/// Clip a set of row gradients to a global L2 norm.
fn clip_global_norm(grads: &mut [Array1<f64>], max_norm: f64) {
    let total: f64 = grads.iter().map(|g| g.dot(g)).sum::<f64>().sqrt();
    if total > max_norm && total > 0.0 {
        let scale = max_norm / total;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
}

/// Mean objective of a fixed embedding over the given latent seeds.
pub fn evaluate_embedding(
    embedding: &EmbeddingSequence,
    generator: &dyn GeneratorBackend,
    probe: &ClassifierProbe,
    objective: &Objective,
    seeds: &[u64],
    generation_steps: usize,
) -> Result<f64> {
    if seeds.is_empty() {
        return Err(Error::Contract("evaluation needs at least one seed".into()));
    }
    let mut acc = 0.0;
    for seed in seeds {
        let mut g = Graph::new();
        let emb = g.constant_matrix(embedding.rows().clone());
        let z = generator.sample_latent(*seed);
        let out = generator.generate(&mut g, emb, &z, generation_steps)?;
        let loss = objective.sample_loss_node(&mut g, probe, out.image)?;
        acc += g.scalar_value(loss);
    }
    Ok(acc / seeds.len() as f64)
}

/// Mean objective of a finished run's embedding over held-out seeds.
pub fn evaluate_generalization(
    record: &RunRecord,
    generator: &dyn GeneratorBackend,
    probe: &ClassifierProbe,
    objective: &Objective,
    seeds: &[u64],
) -> Result<f64> {
    evaluate_embedding(
        &record.embedding,
        generator,
        probe,
        objective,
        seeds,
        record.generation_steps,
    )
}

/// Run the full soft-prompt optimization: R restarts of `steps` Adam steps
/// with `batch_size` fresh latents each, selecting the restart with the best
/// held-out objective.
pub fn optimize(
    template: &PromptTemplate,
    objective: &Objective,
    generator: &dyn GeneratorBackend,
    probe: &ClassifierProbe,
    cfg: &OptimizerConfig,
    master_seed: u64,
    generation_steps: usize,
) -> Result<RunRecord> {
    cfg.validate()?;
    objective.validate(probe)?;
    if template.learnable_count() == 0 {
        return Err(Error::Contract(
            "optimization requires a template with at least one learnable slot".into(),
        ));
    }
    let vocab = generator.vocabulary();
    let heldout = heldout_seeds(master_seed, cfg.heldout_seeds);

    let mut outcomes = Vec::with_capacity(cfg.restarts);
    for restart in 0..cfg.restarts {
        let outcome = run_restart(
            template,
            objective,
            generator,
            probe,
            cfg,
            master_seed,
            generation_steps,
            restart,
            &heldout,
        )?;
        outcomes.push(outcome);
    }

    let selected = outcomes
        .iter()
        .filter(|r| r.diverged.is_none() && r.heldout_loss.is_finite())
        .min_by(|a, b| a.heldout_loss.partial_cmp(&b.heldout_loss).unwrap())
        .map(|r| r.restart);
    let selected = match selected {
        Some(s) => s,
        None => {
            return Err(Error::AllRestartsDiverged {
                seeds: outcomes.iter().map(|r| r.init_seed).collect(),
            })
        }
    };

    let embedding = encode_prompt(template, vocab, &outcomes[selected].learnable)?;
    Ok(RunRecord {
        backend_id: generator.id().to_string(),
        objective: *objective,
        template: template.clone(),
        config: cfg.clone(),
        master_seed,
        generation_steps,
        restarts: outcomes,
        selected,
        embedding,
        heldout_seed_list: heldout,
        decoded_prompt: None,
        final_hard_loss: None,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_restart(
    template: &PromptTemplate,
    objective: &Objective,
    generator: &dyn GeneratorBackend,
    probe: &ClassifierProbe,
    cfg: &OptimizerConfig,
    master_seed: u64,
    generation_steps: usize,
    restart: usize,
    heldout: &[u64],
) -> Result<RestartOutcome> {
    let vocab = generator.vocabulary();
    let init_seed = mix_seed(master_seed, b"init", &[restart as u64]);
    let mut learnable = init_learnable(template, vocab, cfg.init, init_seed);
    let n_rows = learnable.nrows();
    let mut adam = Adam::new(n_rows, vocab.dim());
    let mut trace: Vec<StepTrace> = Vec::with_capacity(cfg.steps);
    let mut initial_loss: Option<f64> = None;
    let mut diverged: Option<String> = None;

    for step in 0..cfg.steps {
        let base_seed = train_sample_seed(master_seed, cfg.seed_policy, restart, step, 0);
        let mut g = Graph::new();
        let (emb, leaves) = assemble_prompt_node(&mut g, template, vocab, &learnable)?;
        let mut sample_losses = Vec::with_capacity(cfg.batch_size);
        let mut loss_nodes = Vec::with_capacity(cfg.batch_size);
        let mut gen_failed: Option<String> = None;
        for b in 0..cfg.batch_size {
            let seed = train_sample_seed(master_seed, cfg.seed_policy, restart, step, b);
            let z = generator.sample_latent(seed);
            match generator.generate(&mut g, emb, &z, generation_steps) {
                Ok(out) => {
                    let node = objective.sample_loss_node(&mut g, probe, out.image)?;
                    sample_losses.push((seed, g.scalar_value(node)));
                    loss_nodes.push(node);
                }
                Err(e) => {
                    gen_failed = Some(e.to_string());
                    break;
                }
            }
        }
        if let Some(reason) = gen_failed {
            diverged = Some(format!("step {step}: {reason}"));
            break;
        }
        let batch_loss = g.average_scalars(&loss_nodes);
        let loss_value = g.scalar_value(batch_loss);
        trace.push(StepTrace {
            step,
            base_seed,
            loss: loss_value,
            samples: sample_losses,
        });
        if !loss_value.is_finite() {
            diverged = Some(format!("step {step}: non-finite loss"));
            break;
        }
        let init = *initial_loss.get_or_insert(loss_value);
        if loss_value.abs() > cfg.divergence_factor * init.abs().max(1.0) {
            diverged = Some(format!(
                "step {step}: loss {loss_value:.4} exceeded {}x initial {init:.4}",
                cfg.divergence_factor
            ));
            break;
        }

        let grads_out = g.backward(batch_loss);
        let mut grads: Vec<Array1<f64>> = leaves.iter().map(|l| grads_out.vector(*l)).collect();
        if grads.iter().any(|gr| gr.iter().any(|v| !v.is_finite())) {
            diverged = Some(format!("step {step}: non-finite gradient"));
            break;
        }
        clip_global_norm(&mut grads, cfg.grad_clip_norm);
        adam.update(&mut learnable, &grads, cfg.learning_rate);
    }

    let embedding = encode_prompt(template, vocab, &learnable)?;
    let (final_train_loss, heldout_loss) = if diverged.is_none() {
        // Final training loss: the final embedding re-evaluated on the most
        // recent training seeds (data the optimizer actually saw).
        let mut train_seeds: Vec<u64> = trace
            .iter()
            .rev()
            .flat_map(|t| t.samples.iter().map(|(s, _)| *s))
            .collect();
        train_seeds.dedup();
        train_seeds.truncate(cfg.train_eval_seeds.max(1));
        let ft = evaluate_embedding(&embedding, generator, probe, objective, &train_seeds, generation_steps)?;
        let hl = evaluate_embedding(&embedding, generator, probe, objective, heldout, generation_steps)?;
        (ft, hl)
    } else {
        (f64::INFINITY, f64::INFINITY)
    };

    Ok(RestartOutcome {
        restart,
        init_seed,
        trace,
        final_train_loss,
        heldout_loss,
        diverged,
        learnable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::Provenance;
    use crate::toy::{ToyWorld, ToyWorldConfig};

    fn world() -> ToyWorld {
        ToyWorld::build(ToyWorldConfig::new(0)).unwrap()
    }

    fn quick_cfg() -> OptimizerConfig {
        OptimizerConfig {
            steps: 60,
            batch_size: 2,
            restarts: 2,
            heldout_seeds: 16,
            ..Default::default()
        }
    }

    #[test]
    fn class_ce_loss_decreases_per_restart() {
        let w = world();
        let probe = w.probe();
        let template = PromptTemplate::from_prefix(w.vocabulary(), "", 1).unwrap();
        let record = optimize(
            &template,
            &Objective::ClassCe { class: 0 },
            &w,
            &probe,
            &quick_cfg(),
            7,
            4,
        )
        .unwrap();
        for outcome in &record.restarts {
            assert!(outcome.diverged.is_none());
            let first = outcome.trace.first().unwrap().loss;
            let last = outcome.trace.last().unwrap().loss;
            assert!(last < first, "restart {}: {first} -> {last}", outcome.restart);
        }
        let sel = record.selected_outcome();
        assert!(
            sel.final_train_loss < 0.5 * sel.trace.first().unwrap().loss,
            "selected restart must at least halve its training loss"
        );
    }

    #[test]
    fn feature_activation_improves_over_init_baseline() {
        let w = world();
        let probe = w.probe();
        let vocab = w.vocabulary();
        let template = PromptTemplate::from_prefix(vocab, "", 1).unwrap();
        let objective = Objective::FeatureMax { feature: 0 };
        let cfg = quick_cfg();
        let record = optimize(&template, &objective, &w, &probe, &cfg, 13, 4).unwrap();

        let eval_seeds: Vec<u64> = (0..32).map(|i| mix_seed(999, b"cmp", &[i])).collect();
        let init_rows = init_learnable(
            &template,
            vocab,
            cfg.init,
            mix_seed(13, b"init", &[record.selected as u64]),
        );
        let init_emb = encode_prompt(&template, vocab, &init_rows).unwrap();
        let init_loss =
            evaluate_embedding(&init_emb, &w, &probe, &objective, &eval_seeds, 4).unwrap();
        let final_loss =
            evaluate_embedding(&record.embedding, &w, &probe, &objective, &eval_seeds, 4).unwrap();
        // losses are negated activations: lower loss = higher activation
        assert!(
            final_loss < init_loss,
            "mean activation must rise: init {init_loss} vs final {final_loss}"
        );
    }

    #[test]
    fn frozen_rows_bit_identical_after_optimization() {
        let w = world();
        let probe = w.probe();
        let vocab = w.vocabulary();
        let template = PromptTemplate::from_prefix(vocab, "the shape of", 1).unwrap();
        let frozen_before = template.frozen_rows(vocab);
        let record = optimize(
            &template,
            &Objective::ClassCe { class: 1 },
            &w,
            &probe,
            &OptimizerConfig::quick(20),
            3,
            4,
        )
        .unwrap();
        for (p, prov) in record.embedding.provenance().iter().enumerate() {
            if *prov == Provenance::Frozen {
                let got = record.embedding.rows().row(p);
                let want = frozen_before.row(p);
                assert!(
                    got.iter().zip(want.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
                    "frozen row {p} changed"
                );
            }
        }
    }

    #[test]
    fn restart_selection_is_argmin_of_heldout() {
        let w = world();
        let probe = w.probe();
        let template = PromptTemplate::from_prefix(w.vocabulary(), "", 1).unwrap();
        let record = optimize(
            &template,
            &Objective::ClassCe { class: 2 },
            &w,
            &probe,
            &quick_cfg(),
            21,
            4,
        )
        .unwrap();
        assert_eq!(record.reselect(), Some(record.selected));
        let best = record.selected_outcome().heldout_loss;
        for r in &record.restarts {
            if r.diverged.is_none() {
                assert!(best <= r.heldout_loss);
            }
        }
    }

    #[test]
    fn all_diverged_reports_init_seeds() {
        let w = world();
        let probe = w.probe();
        let template = PromptTemplate::from_prefix(w.vocabulary(), "", 1).unwrap();
        // Saturating logits keep every finite prompt finite, so force the
        // non-finite path with an unbounded step size.
        let cfg = OptimizerConfig {
            learning_rate: f64::INFINITY,
            steps: 30,
            restarts: 2,
            divergence_factor: 2.0,
            ..Default::default()
        };
        let err = optimize(
            &template,
            &Objective::ClassCe { class: 0 },
            &w,
            &probe,
            &cfg,
            5,
            4,
        )
        .unwrap_err();
        match err {
            Error::AllRestartsDiverged { seeds } => assert_eq!(seeds.len(), 2),
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn missing_target_rejected_before_any_compute() {
        let w = world();
        let probe = w.probe();
        let template = PromptTemplate::from_prefix(w.vocabulary(), "", 1).unwrap();
        let err = optimize(
            &template,
            &Objective::ClassCe { class: 99 },
            &w,
            &probe,
            &OptimizerConfig::quick(10),
            5,
            4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnknownTarget { .. }));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let w = world();
        let probe = w.probe();
        let template = PromptTemplate::from_prefix(w.vocabulary(), "", 1).unwrap();
        let record = optimize(
            &template,
            &Objective::ClassCe { class: 0 },
            &w,
            &probe,
            &OptimizerConfig::quick(15),
            11,
            4,
        )
        .unwrap();
        let seeds: Vec<u64> = (0..8).map(|i| mix_seed(50, b"eval", &[i])).collect();
        let a = evaluate_generalization(&record, &w, &probe, &record.objective, &seeds).unwrap();
        let b = evaluate_generalization(&record, &w, &probe, &record.objective, &seeds).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn single_seed_evaluation_matches_recorded_trace_loss() {
        // With batch size 1 the recorded per-step loss is a per-seed loss;
        // evaluating the final embedding on the last step's seed must match
        // it, because the last update happens after the loss is recorded...
        // so instead check the *recorded* loss of the final step against a
        // re-evaluation using the embedding as it was at that step: freeze
        // the run at zero further updates by evaluating the recorded sample.
        let w = world();
        let probe = w.probe();
        let template = PromptTemplate::from_prefix(w.vocabulary(), "", 1).unwrap();
        let cfg = OptimizerConfig {
            steps: 1,
            batch_size: 1,
            restarts: 1,
            ..Default::default()
        };
        // One step: the recorded loss is the loss of the *initial* embedding
        // on that seed, and no later update exists to interfere when the
        // learnable rows are re-derived from the same init.
        let record = optimize(
            &template,
            &Objective::ClassCe { class: 0 },
            &w,
            &probe,
            &cfg,
            31,
            4,
        )
        .unwrap();
        let outcome = record.selected_outcome();
        let (seed, recorded) = outcome.trace[0].samples[0];
        let init_rows = init_learnable(
            &template,
            w.vocabulary(),
            cfg.init,
            mix_seed(31, b"init", &[0]),
        );
        let init_emb = encode_prompt(&template, w.vocabulary(), &init_rows).unwrap();
        let re = evaluate_embedding(&init_emb, &w, &probe, &record.objective, &[seed], 4).unwrap();
        let rel = (re - recorded).abs() / recorded.abs().max(1e-12);
        assert!(rel < 1e-5, "recorded {recorded} vs re-evaluated {re}");
    }
}
