//! Run-directory persistence and the versioned report schema.
//!
//! Layout of an optimization run directory:
//!
//! ```text
//! run/
//!   config.toml      resolved config snapshot (seed included)
//!   trace.csv        step,loss,seed of the selected restart
//!   heldout.csv      restart,init_seed,final_train_loss,heldout_loss,diverged,selected
//!   embeddings.bin   u32 N, u32 d, then N*d little-endian f32, row-major
//!   prompt.txt       decoded text (hard runs only)
//!   report.json      versioned run report
//!   samples/         PNG samples + samples.csv manifest (after sampling)
//! ```
//!
//! Discovery output directories hold one `class_<c>/` subdirectory per
//! audited class (each with per-feature run directories, samples and masks)
//! plus an index `report.json`.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::discovery::ClassAudit;
use crate::error::{Error, Result};
use crate::optimizer::RunRecord;
use crate::sampler::SampleSet;
use crate::segment::SegmentationMask;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Restart summary in the run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartSummary {
    pub restart: usize,
    pub init_seed: u64,
    pub final_train_loss: f64,
    pub heldout_loss: f64,
    pub diverged: Option<String>,
}

/// Optimization summary in the run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub objective: String,
    pub template: String,
    pub steps: usize,
    pub generation_steps: usize,
    pub selected_restart: usize,
    pub final_train_loss: f64,
    pub heldout_loss: f64,
    pub restarts: Vec<RestartSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoded_prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_hard_loss: Option<f64>,
}

/// Sample manifest entry mirrored into the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub seed: u64,
    pub file: String,
    pub scores: std::collections::BTreeMap<String, f64>,
}

/// Discovery index entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexEntry {
    pub class: usize,
    pub class_name: String,
    pub report: String,
}

/// The versioned report envelope written as `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    /// `optimize`, `optimize-hard`, `class-audit` or `discovery-index`.
    pub kind: String,
    pub backend_id: String,
    pub master_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<SampleEntry>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audit: Option<ClassAudit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<Vec<IndexEntry>>,
    /// Relative artifact paths; every one must exist next to the report.
    pub artifacts: Vec<String>,
}

impl Report {
    pub fn of_run(record: &RunRecord, artifacts: Vec<String>) -> Report {
        let kind = if record.decoded_prompt.is_some() { "optimize-hard" } else { "optimize" };
        let sel = record.selected_outcome();
        Report {
            schema_version: REPORT_SCHEMA_VERSION,
            kind: kind.into(),
            backend_id: record.backend_id.clone(),
            master_seed: record.master_seed,
            run: Some(RunSummary {
                objective: record.objective.describe(),
                template: format!("{:?}", record.template.slots()),
                steps: record.config.steps,
                generation_steps: record.generation_steps,
                selected_restart: record.selected,
                final_train_loss: sel.final_train_loss,
                heldout_loss: sel.heldout_loss,
                restarts: record
                    .restarts
                    .iter()
                    .map(|r| RestartSummary {
                        restart: r.restart,
                        init_seed: r.init_seed,
                        final_train_loss: r.final_train_loss,
                        heldout_loss: r.heldout_loss,
                        diverged: r.diverged.clone(),
                    })
                    .collect(),
                decoded_prompt: record.decoded_prompt.clone(),
                final_hard_loss: record.final_hard_loss,
            }),
            samples: None,
            audit: None,
            index: None,
            artifacts,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Schema(format!("serialize report: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Report> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Schema(format!("read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("parse {}: {e}", path.display())))
    }
}

/// Validate a report file against the schema: version, kind-specific payload
/// presence, and existence of every listed artifact.
pub fn validate_report(path: &Path) -> Result<Report> {
    let report = Report::load(path)?;
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "unsupported report schema version {}",
            report.schema_version
        )));
    }
    let payload_ok = match report.kind.as_str() {
        "optimize" | "optimize-hard" => report.run.is_some(),
        "class-audit" => report.audit.is_some(),
        "discovery-index" => report.index.is_some(),
        other => return Err(Error::Schema(format!("unknown report kind {other:?}"))),
    };
    if !payload_ok {
        return Err(Error::Schema(format!(
            "report kind {:?} is missing its payload",
            report.kind
        )));
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    for artifact in &report.artifacts {
        let p = dir.join(artifact);
        if !p.exists() {
            return Err(Error::Schema(format!(
                "report lists missing artifact {}",
                p.display()
            )));
        }
    }
    Ok(report)
}

// ---- embeddings.bin -------------------------------------------------------

/// Write the embedding matrix: `u32 N, u32 d`, then row-major f32.
pub fn write_embeddings(path: &Path, rows: &Array2<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + rows.len() * 4);
    buf.extend_from_slice(&(rows.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(rows.ncols() as u32).to_le_bytes());
    for v in rows.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Read an embedding matrix written by [`write_embeddings`].
pub fn read_embeddings(path: &Path) -> Result<Array2<f64>> {
    let buf = std::fs::read(path)?;
    if buf.len() < 8 {
        return Err(Error::Schema("embeddings.bin truncated header".into()));
    }
    let n = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let expect = 8 + n * d * 4;
    if buf.len() != expect {
        return Err(Error::Schema(format!(
            "embeddings.bin: expected {expect} bytes for {n}x{d}, found {}",
            buf.len()
        )));
    }
    let mut out = Array2::<f64>::zeros((n, d));
    for i in 0..n * d {
        let off = 8 + i * 4;
        let v = f32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
        out[[i / d, i % d]] = v as f64;
    }
    Ok(out)
}

// ---- CSV artifacts --------------------------------------------------------

fn write_trace_csv(path: &Path, record: &RunRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Schema(e.to_string()))?;
    w.write_record(["step", "loss", "seed"]).map_err(|e| Error::Schema(e.to_string()))?;
    for t in &record.selected_outcome().trace {
        w.write_record([t.step.to_string(), format!("{:?}", t.loss), t.base_seed.to_string()])
            .map_err(|e| Error::Schema(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_heldout_csv(path: &Path, record: &RunRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Schema(e.to_string()))?;
    w.write_record([
        "restart",
        "init_seed",
        "final_train_loss",
        "heldout_loss",
        "diverged",
        "selected",
    ])
    .map_err(|e| Error::Schema(e.to_string()))?;
    for r in &record.restarts {
        w.write_record([
            r.restart.to_string(),
            r.init_seed.to_string(),
            format!("{:?}", r.final_train_loss),
            format!("{:?}", r.heldout_loss),
            r.diverged.clone().unwrap_or_default(),
            (r.restart == record.selected).to_string(),
        ])
        .map_err(|e| Error::Schema(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

// ---- images ---------------------------------------------------------------

/// Save an image as a lossless 8-bit PNG.
pub fn save_image_png(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| -> u8 {
                let v = if ch < c { image[[ch, y, x]] } else { 0.0 };
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save(path).map_err(|e| Error::Schema(format!("save {}: {e}", path.display())))?;
    Ok(())
}

/// Save a binary mask as a black/white PNG.
pub fn save_mask_png(path: &Path, mask: &SegmentationMask) -> Result<()> {
    let (h, w) = mask.mask.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if mask.mask[[y, x]] { 255u8 } else { 0u8 };
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path).map_err(|e| Error::Schema(format!("save {}: {e}", path.display())))?;
    Ok(())
}

// ---- directory writers ------------------------------------------------------

/// Persist an optimization run. Returns the report path.
pub fn write_run_dir(dir: &Path, record: &RunRecord, config: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    config.save(&dir.join("config.toml"))?;
    write_trace_csv(&dir.join("trace.csv"), record)?;
    write_heldout_csv(&dir.join("heldout.csv"), record)?;
    write_embeddings(&dir.join("embeddings.bin"), record.embedding.rows())?;
    let mut artifacts = vec![
        "config.toml".to_string(),
        "trace.csv".to_string(),
        "heldout.csv".to_string(),
        "embeddings.bin".to_string(),
    ];
    if let Some(text) = &record.decoded_prompt {
        let mut f = std::fs::File::create(dir.join("prompt.txt"))?;
        writeln!(f, "{text}")?;
        artifacts.push("prompt.txt".to_string());
    }
    let report = Report::of_run(record, artifacts);
    let path = dir.join("report.json");
    report.save(&path)?;
    Ok(path)
}

/// Persist a sample set under `dir/samples/`: PNG per seed plus a manifest.
/// Returns the manifest entries.
pub fn write_samples(dir: &Path, samples: &SampleSet) -> Result<Vec<SampleEntry>> {
    let sdir = dir.join("samples");
    std::fs::create_dir_all(&sdir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, seed) in samples.seeds.iter().enumerate() {
        let file = format!("samples/s{seed}.png");
        save_image_png(&dir.join(&file), &samples.images.images[i])?;
        let scores = samples
            .responses
            .iter()
            .map(|(k, v)| (k.clone(), v[i]))
            .collect();
        entries.push(SampleEntry { seed: *seed, file, scores });
    }
    let mut w = csv::Writer::from_path(sdir.join("samples.csv"))
        .map_err(|e| Error::Schema(e.to_string()))?;
    let mut header = vec!["seed".to_string(), "file".to_string()];
    let score_keys: Vec<String> = samples.responses.keys().cloned().collect();
    header.extend(score_keys.iter().cloned());
    w.write_record(&header).map_err(|e| Error::Schema(e.to_string()))?;
    for e in &entries {
        let mut row = vec![e.seed.to_string(), e.file.clone()];
        for k in &score_keys {
            row.push(format!("{:?}", e.scores[k]));
        }
        w.write_record(&row).map_err(|e2| Error::Schema(e2.to_string()))?;
    }
    w.flush()?;
    Ok(entries)
}

/// Update (or create) a run report with sample entries.
pub fn attach_samples_to_report(dir: &Path, entries: Vec<SampleEntry>) -> Result<()> {
    let path = dir.join("report.json");
    let mut report = Report::load(&path)?;
    let mut artifacts = report.artifacts.clone();
    artifacts.push("samples/samples.csv".to_string());
    for e in &entries {
        artifacts.push(e.file.clone());
    }
    artifacts.sort();
    artifacts.dedup();
    report.artifacts = artifacts;
    report.samples = Some(entries);
    report.save(&path)
}
