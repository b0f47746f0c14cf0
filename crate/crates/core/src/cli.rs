//! Command-line frontend. Exit codes and error output are documented in
//! `docs/cli.md`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::backend::{build_backend, Backend};
use crate::config::RunConfig;
use crate::discovery::{
    agreement, audit_class, load_annotations, AuditContext, ClassAuditBundle,
};
use crate::error::{Error, Result};
use crate::hard::optimize_hard;
use crate::objective::Objective;
use crate::optimizer::{optimize, RunRecord};
use crate::prompt::PromptTemplate;
use crate::runs::{
    attach_samples_to_report, read_embeddings, save_mask_png, validate_report, write_run_dir,
    write_samples, IndexEntry, Report, REPORT_SCHEMA_VERSION,
};
use crate::sampler::{sample_embedding, ScoreTarget};
use crate::segment::build_segmenter;
use crate::toy::mix_seed;

/// Prompt-space explanations for image classifiers: optimize prompts through
/// a frozen generator, sample explanation images, and audit features as core
/// or spurious.
#[derive(Debug, Parser)]
#[command(name = "promptlens", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by the optimization-style subcommands.
#[derive(Debug, Clone, Args)]
pub struct CommonOpts {
    /// Generator backend id (overrides the config file).
    #[arg(long)]
    pub backend: Option<String>,
    /// Run config file (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; drawn from entropy and recorded when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed prompt prefix, e.g. "the shape of".
    #[arg(long)]
    pub prefix: Option<String>,
    /// Output directory; `runs/run-<seed>` when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optimizer step count override.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Restart count override.
    #[arg(long)]
    pub restarts: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize a soft prompt to explain a class output.
    OptimizeClass {
        /// Target class index.
        #[arg(long)]
        class: usize,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Optimize a soft prompt to maximize a hidden feature; add --class and
    /// --lambda for the combined objective.
    OptimizeFeature {
        /// Target feature index in the penultimate layer.
        #[arg(long)]
        feature: usize,
        /// Class constraint for the combined objective.
        #[arg(long)]
        class: Option<usize>,
        /// Weight of the feature term in the combined objective.
        #[arg(long)]
        lambda: Option<f64>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Optimize a hard prompt (actual vocabulary tokens) and decode it.
    OptimizeHard {
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        feature: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Sample the explanation distribution of a finished run.
    Sample {
        /// Run directory produced by an optimize subcommand.
        #[arg(long)]
        run: PathBuf,
        /// Number of images.
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// First seed; samples use seed_base..seed_base+n.
        #[arg(long, default_value_t = 1000)]
        seed_base: u64,
    },
    /// Audit classes for core/spurious features.
    Discover {
        /// `all` or a comma-separated class list, e.g. `0,2`.
        #[arg(long, default_value = "all")]
        classes: String,
        /// Object-fraction threshold override.
        #[arg(long)]
        delta: Option<f64>,
        /// Combined-objective weight override.
        #[arg(long)]
        lambda: Option<f64>,
        /// Maximum concurrent class audits.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Compare audited verdicts against an annotation file.
    Agreement {
        /// Discovery output directory (or a single class report.json).
        #[arg(long)]
        verdicts: PathBuf,
        /// Annotation CSV: class_id,class_name,feature_index,label,animacy.
        #[arg(long)]
        annotations: PathBuf,
        /// Write the agreement report here as JSON (stdout otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a static HTML gallery from a run or discovery report.
    Report {
        /// Directory containing report.json (or the file itself).
        #[arg(long)]
        run: PathBuf,
        /// Output HTML path; `<run>/gallery.html` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &CommonOpts) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(backend) = &common.backend {
        cfg.backend.id = backend.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    if let Some(prefix) = &common.prefix {
        cfg.template.prefix = prefix.clone();
    }
    if let Some(steps) = common.steps {
        cfg.optimizer.steps = steps;
    }
    if let Some(restarts) = common.restarts {
        cfg.optimizer.restarts = restarts;
    }
    Ok(cfg)
}

fn out_dir(common: &CommonOpts, seed: u64) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/run-{seed}")))
}

fn run_soft(mut cfg: RunConfig, objective: Objective, common: &CommonOpts) -> Result<PathBuf> {
    let seed = cfg.resolve_seed();
    let backend = build_backend(&cfg.backend)?;
    let template = cfg.template.build(backend.generator.vocabulary())?;
    let record = optimize(
        &template,
        &objective,
        backend.generator.as_ref(),
        &backend.probe,
        &cfg.optimizer,
        seed,
        backend.generation_steps,
    )?;
    let dir = out_dir(common, seed);
    write_run_dir(&dir, &record, &cfg)?;
    log::info!(
        "optimized {} -> {} (held-out loss {:.6})",
        objective.describe(),
        dir.display(),
        record.selected_outcome().heldout_loss
    );
    Ok(dir)
}

fn resolve_objective(
    class: Option<usize>,
    feature: Option<usize>,
    lambda: Option<f64>,
    cfg: &RunConfig,
) -> Result<Objective> {
    let mut oc = cfg.objective.clone();
    if class.is_some() {
        oc.class = class;
        // CLI flags define the objective; drop any stale kind from the file
        // unless it still matches.
        oc.kind = None;
    }
    if feature.is_some() {
        oc.feature = feature;
        oc.kind = None;
    }
    if lambda.is_some() {
        oc.lambda = lambda;
    }
    oc.resolve()
}

/// Execute a parsed command. Returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::OptimizeClass { class, common } => {
            let cfg = load_config(&common)?;
            let objective = Objective::ClassCe { class };
            run_soft(cfg, objective, &common)?;
            Ok(0)
        }
        Command::OptimizeFeature { feature, class, lambda, common } => {
            let cfg = load_config(&common)?;
            let objective = resolve_objective(class, Some(feature), lambda, &cfg)?;
            run_soft(cfg, objective, &common)?;
            Ok(0)
        }
        Command::OptimizeHard { class, feature, lambda, common } => {
            let mut cfg = load_config(&common)?;
            let objective = resolve_objective(class, feature, lambda, &cfg)?;
            let seed = cfg.resolve_seed();
            let backend = build_backend(&cfg.backend)?;
            let template = cfg.template.build(backend.generator.vocabulary())?;
            let (record, text) = optimize_hard(
                &template,
                &objective,
                backend.generator.as_ref(),
                &backend.probe,
                &cfg.optimizer,
                &cfg.gumbel,
                seed,
                backend.generation_steps,
            )?;
            let dir = out_dir(&common, seed);
            write_run_dir(&dir, &record, &cfg)?;
            // the decoded prompt is the primary output
            println!("{text}");
            Ok(0)
        }
        Command::Sample { run, n, seed_base } => {
            cmd_sample(&run, n, seed_base)?;
            Ok(0)
        }
        Command::Discover { classes, delta, lambda, jobs, common } => {
            cmd_discover(&classes, delta, lambda, jobs, &common)?;
            Ok(0)
        }
        Command::Agreement { verdicts, annotations, out } => {
            cmd_agreement(&verdicts, &annotations, out.as_deref())?;
            Ok(0)
        }
        Command::Report { run, out } => {
            let report_path = if run.is_dir() { run.join("report.json") } else { run.clone() };
            let out_path = out.unwrap_or_else(|| {
                report_path
                    .parent()
                    .unwrap_or_else(|| Path::new("."))
                    .join("gallery.html")
            });
            crate::report::render_gallery(&report_path, &out_path)?;
            log::info!("gallery -> {}", out_path.display());
            Ok(0)
        }
    }
}

fn cmd_sample(run: &Path, n: usize, seed_base: u64) -> Result<()> {
    let report = validate_report(&run.join("report.json"))?;
    let run_summary = report
        .run
        .as_ref()
        .ok_or_else(|| Error::Schema("sample needs an optimization run report".into()))?;
    let cfg = RunConfig::load(&run.join("config.toml"))?;
    let backend = build_backend(&cfg.backend)?;
    let rows = read_embeddings(&run.join("embeddings.bin"))?;
    let template = cfg.template.build(backend.generator.vocabulary())?;
    if rows.nrows() != template.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} embedding rows for the configured template", template.len()),
            got: format!("{}", rows.nrows()),
        });
    }
    let provenance = template
        .slots()
        .iter()
        .map(|s| match s {
            crate::prompt::Slot::Fixed(_) => crate::prompt::Provenance::Frozen,
            crate::prompt::Slot::Learnable(k) => crate::prompt::Provenance::Learnable(*k),
        })
        .collect();
    let embedding = crate::prompt::EmbeddingSequence::from_rows(rows, provenance);

    let mut targets: Vec<ScoreTarget> = Vec::new();
    let objective_desc = &run_summary.objective;
    // targets from the persisted config's objective block
    if let Ok(objective) = cfg.objective.resolve() {
        if let Some(c) = objective.class() {
            targets.push(ScoreTarget::ClassLogit(c));
            targets.push(ScoreTarget::ClassProb(c));
        }
        if let Some(j) = objective.feature() {
            targets.push(ScoreTarget::Feature(j));
        }
    }
    let samples = sample_embedding(
        &embedding,
        run_summary.generation_steps,
        &targets,
        backend.generator.as_ref(),
        &backend.probe,
        n,
        seed_base,
    )?;
    let entries = write_samples(run, &samples)?;
    attach_samples_to_report(run, entries)?;
    log::info!("sampled {n} images for {objective_desc} -> {}", run.display());
    Ok(())
}

fn parse_classes(spec: &str, num_classes: usize) -> Result<Vec<usize>> {
    if spec.trim() == "all" {
        return Ok((0..num_classes).collect());
    }
    let mut out = Vec::new();
    for part in spec.split(',') {
        let class: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad class list entry {part:?}")))?;
        if class >= num_classes {
            return Err(Error::UnknownTarget {
                target: format!("class:{class}"),
                available: format!("classes 0..{num_classes}"),
            });
        }
        out.push(class);
    }
    if out.is_empty() {
        return Err(Error::Config("empty class list".into()));
    }
    Ok(out)
}

fn cmd_discover(
    classes: &str,
    delta: Option<f64>,
    lambda: Option<f64>,
    jobs: usize,
    common: &CommonOpts,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(d) = delta {
        cfg.discovery.delta = d;
    }
    if let Some(l) = lambda {
        cfg.discovery.lambda = l;
    }
    let seed = cfg.resolve_seed();
    let backend = build_backend(&cfg.backend)?;
    let class_list = parse_classes(classes, backend.probe.num_classes())?;
    let out = out_dir(common, seed);
    std::fs::create_dir_all(&out)?;

    let jobs = jobs.max(1);
    let mut results: Vec<Option<(usize, ClassAuditBundle)>> = Vec::new();
    for chunk in class_list.chunks(jobs) {
        let mut chunk_results: Vec<Option<(usize, ClassAuditBundle)>> =
            (0..chunk.len()).map(|_| None).collect();
        std::thread::scope(|scope| -> Result<()> {
            let mut handles = Vec::new();
            for (slot, class) in chunk.iter().enumerate() {
                let backend_ref = &backend;
                let cfg_ref = &cfg;
                let class = *class;
                handles.push((
                    slot,
                    scope.spawn(move || audit_one_class(class, backend_ref, cfg_ref, seed)),
                ));
            }
            for (slot, handle) in handles {
                let bundle = handle
                    .join()
                    .map_err(|_| Error::Other("audit thread panicked".into()))??;
                chunk_results[slot] = Some(bundle);
            }
            Ok(())
        })?;
        results.extend(chunk_results);
    }

    let mut index = Vec::new();
    for item in results.into_iter().flatten() {
        let (class, bundle) = item;
        let entry = persist_class_audit(&out, class, bundle, &cfg)?;
        index.push(entry);
    }
    index.sort_by_key(|e| e.class);
    let artifacts: Vec<String> = index.iter().map(|e| e.report.clone()).collect();
    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: "discovery-index".into(),
        backend_id: cfg.backend.id.clone(),
        master_seed: seed,
        run: None,
        samples: None,
        audit: None,
        index: Some(index),
        artifacts,
    };
    report.save(&out.join("report.json"))?;
    log::info!("discovery -> {}", out.display());
    Ok(())
}

fn audit_one_class(
    class: usize,
    backend: &Backend,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(usize, ClassAuditBundle)> {
    let segmenter = build_segmenter(&cfg.discovery.segmenter)?;
    let ranking_probe = backend.world.as_ref().and_then(|w| {
        if cfg.discovery.ranking_probe_images == 0 {
            None
        } else {
            Some(w.class_probe_images(
                class,
                cfg.discovery.ranking_probe_images,
                mix_seed(seed, b"rank-probe", &[class as u64]),
            ))
        }
    });
    let ctx = AuditContext {
        generator: backend.generator.as_ref(),
        probe: &backend.probe,
        segmenter: Arc::clone(&segmenter),
        ranking_probe,
    };
    let template = cfg.template.build(backend.generator.vocabulary())?;
    let bundle = audit_class(
        class,
        &ctx,
        &cfg.discovery,
        &cfg.optimizer,
        &template,
        mix_seed(seed, b"audit-class", &[class as u64]),
        backend.generation_steps,
    )?;
    Ok((class, bundle))
}

fn persist_class_audit(
    out: &Path,
    class: usize,
    mut bundle: ClassAuditBundle,
    cfg: &RunConfig,
) -> Result<IndexEntry> {
    let class_dir_name = format!("class_{class}");
    let class_dir = out.join(&class_dir_name);
    std::fs::create_dir_all(&class_dir)?;
    let mut artifacts: Vec<String> = Vec::new();

    for (i, artifact) in bundle.artifacts.iter().enumerate() {
        let Some(arts) = artifact else { continue };
        let feature = bundle.audit.features[i].feature;
        let fdir_name = format!("feature_{feature}");
        let fdir = class_dir.join(&fdir_name);

        // per-feature run directory with its resolved config snapshot
        let mut feature_cfg = cfg.clone();
        feature_cfg.seed = Some(arts.record.master_seed);
        feature_cfg.objective.kind = None;
        feature_cfg.objective.class = arts.record.objective.class();
        feature_cfg.objective.feature = arts.record.objective.feature();
        write_run_dir(&fdir, &arts.record, &feature_cfg)?;
        let entries = write_samples(&fdir, &arts.samples)?;
        attach_samples_to_report(&fdir, entries)?;

        let mdir = fdir.join("masks");
        std::fs::create_dir_all(&mdir)?;
        let mut sample_paths = Vec::new();
        let mut mask_paths = Vec::new();
        for (k, seed) in arts.samples.seeds.iter().enumerate() {
            let mask_file = format!("{fdir_name}/masks/m{seed}.png");
            save_mask_png(&class_dir.join(&mask_file), &arts.masks[k])?;
            sample_paths.push(format!("{fdir_name}/samples/s{seed}.png"));
            mask_paths.push(mask_file);
        }
        artifacts.extend(sample_paths.iter().cloned());
        artifacts.extend(mask_paths.iter().cloned());
        artifacts.push(format!("{fdir_name}/report.json"));
        bundle.audit.features[i].sample_paths = sample_paths;
        bundle.audit.features[i].mask_paths = mask_paths;
    }

    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: "class-audit".into(),
        backend_id: cfg.backend.id.clone(),
        master_seed: cfg.seed.unwrap_or_default(),
        run: None,
        samples: None,
        audit: Some(bundle.audit),
        index: None,
        artifacts,
    };
    report.save(&class_dir.join("report.json"))?;
    Ok(IndexEntry {
        class,
        class_name: report.audit.as_ref().unwrap().class_name.clone(),
        report: format!("{class_dir_name}/report.json"),
    })
}

fn cmd_agreement(verdicts: &Path, annotations: &Path, out: Option<&Path>) -> Result<()> {
    let audits = load_audits(verdicts)?;
    let rows = load_annotations(annotations)?;
    let report = agreement(&audits, &rows);
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Schema(format!("serialize agreement: {e}")))?;
    match out {
        Some(path) => std::fs::write(path, &text)?,
        None => println!("{text}"),
    }
    Ok(())
}

/// Load class audits from a discovery index directory, a class report, or a
/// single class-audit report.json path.
pub fn load_audits(path: &Path) -> Result<Vec<crate::discovery::ClassAudit>> {
    let report_path = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    let report = Report::load(&report_path)?;
    let dir = report_path.parent().unwrap_or_else(|| Path::new("."));
    match report.kind.as_str() {
        "class-audit" => Ok(vec![report
            .audit
            .ok_or_else(|| Error::Schema("class-audit report missing audit payload".into()))?]),
        "discovery-index" => {
            let mut out = Vec::new();
            for entry in report.index.unwrap_or_default() {
                let sub = Report::load(&dir.join(&entry.report))?;
                out.push(sub.audit.ok_or_else(|| {
                    Error::Schema(format!("class report {} missing audit", entry.report))
                })?);
            }
            Ok(out)
        }
        other => Err(Error::Schema(format!(
            "expected a class-audit or discovery-index report, found {other:?}"
        ))),
    }
}

/// Serialize an error for stderr: machine-readable, one line.
pub fn error_json(err: &Error) -> String {
    serde_json::json!({
        "error": {
            "kind": err.kind(),
            "exit_code": err.exit_code(),
            "message": err.to_string(),
        }
    })
    .to_string()
}
