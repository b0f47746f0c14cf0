//! Static gallery rendering: one self-contained HTML page per report, with
//! thumbnails embedded as base64 PNG data URIs.

use std::fmt::Write as _;
use std::path::Path;

use base64::Engine;

use crate::discovery::Verdict;
use crate::error::{Error, Result};
use crate::runs::{validate_report, Report};

fn embed_png(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:image/png;base64,{b64}"))
}

fn esc(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render a report directory into a single HTML gallery page.
pub fn render_gallery(report_path: &Path, out: &Path) -> Result<()> {
    let report = validate_report(report_path)?;
    let dir = report_path.parent().unwrap_or_else(|| Path::new("."));
    let mut html = String::new();
    html.push_str(
        "<!doctype html><html><head><meta charset=\"utf-8\"><title>run gallery</title><style>\
         body{font-family:sans-serif;margin:2em;background:#fafafa}\
         h1,h2{color:#333} table{border-collapse:collapse;margin:1em 0}\
         td,th{border:1px solid #ccc;padding:4px 10px;text-align:left}\
         .verdict-core{color:#0a7f2e;font-weight:bold}\
         .verdict-spurious{color:#b00020;font-weight:bold}\
         .verdict-inconclusive{color:#886a00;font-weight:bold}\
         .thumbs img{width:96px;height:96px;image-rendering:pixelated;margin:2px;border:1px solid #bbb}\
         </style></head><body>",
    );
    let _ = write!(
        html,
        "<h1>{} report</h1><p>backend <code>{}</code>, master seed <code>{}</code></p>",
        esc(&report.kind),
        esc(&report.backend_id),
        report.master_seed
    );
    render_body(&mut html, &report, dir)?;
    html.push_str("</body></html>");
    std::fs::write(out, html)?;
    Ok(())
}

fn render_body(html: &mut String, report: &Report, dir: &Path) -> Result<()> {
    if let Some(run) = &report.run {
        let _ = write!(
            html,
            "<h2>optimization</h2><table>\
             <tr><th>objective</th><td>{}</td></tr>\
             <tr><th>steps</th><td>{}</td></tr>\
             <tr><th>selected restart</th><td>{}</td></tr>\
             <tr><th>final train loss</th><td>{:.6}</td></tr>\
             <tr><th>held-out loss</th><td>{:.6}</td></tr></table>",
            esc(&run.objective),
            run.steps,
            run.selected_restart,
            run.final_train_loss,
            run.heldout_loss
        );
        if let Some(prompt) = &run.decoded_prompt {
            let _ = write!(html, "<p>decoded prompt: <code>{}</code></p>", esc(prompt));
        }
        html.push_str("<h2>restarts</h2><table><tr><th>restart</th><th>held-out</th><th>status</th></tr>");
        for r in &run.restarts {
            let _ = write!(
                html,
                "<tr><td>{}</td><td>{:.6}</td><td>{}</td></tr>",
                r.restart,
                r.heldout_loss,
                esc(r.diverged.as_deref().unwrap_or("ok"))
            );
        }
        html.push_str("</table>");
    }
    if let Some(samples) = &report.samples {
        html.push_str("<h2>samples</h2><div class=\"thumbs\">");
        for s in samples {
            let uri = embed_png(&dir.join(&s.file))?;
            let scores: Vec<String> =
                s.scores.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            let _ = write!(
                html,
                "<img src=\"{uri}\" title=\"seed {} | {}\">",
                s.seed,
                esc(&scores.join(", "))
            );
        }
        html.push_str("</div>");
    }
    if let Some(audit) = &report.audit {
        let _ = write!(
            html,
            "<h2>class {} ({}) audit</h2><p>delta {}, {} samples per feature, lambda {}, ranking {}</p>",
            audit.class,
            esc(&audit.class_name),
            audit.delta,
            audit.sample_count,
            audit.lambda,
            esc(&audit.ranking_method)
        );
        html.push_str(
            "<table><tr><th>rank</th><th>feature</th><th>importance</th>\
             <th>mean r</th><th>verdict</th><th>samples</th></tr>",
        );
        for f in &audit.features {
            let class = match f.verdict {
                Verdict::Core => "verdict-core",
                Verdict::Spurious => "verdict-spurious",
                Verdict::Inconclusive => "verdict-inconclusive",
            };
            let mut thumbs = String::new();
            for p in f.sample_paths.iter().take(5) {
                let uri = embed_png(&dir.join(p))?;
                let _ = write!(thumbs, "<img src=\"{uri}\">");
            }
            let _ = write!(
                html,
                "<tr><td>{}</td><td>{}</td><td>{:.4}</td><td>{}</td>\
                 <td class=\"{}\">{:?}</td><td class=\"thumbs\">{}</td></tr>",
                f.rank,
                f.feature,
                f.importance,
                if f.mean_r.is_nan() { "-".to_string() } else { format!("{:.4}", f.mean_r) },
                class,
                f.verdict,
                thumbs
            );
        }
        html.push_str("</table>");
    }
    if let Some(index) = &report.index {
        html.push_str("<h2>audited classes</h2><ul>");
        for e in index {
            let _ = write!(
                html,
                "<li>class {} ({}): <code>{}</code></li>",
                e.class,
                esc(&e.class_name),
                esc(&e.report)
            );
        }
        html.push_str("</ul>");
        // inline each class audit
        for e in index {
            let sub_path = dir.join(&e.report);
            let sub = Report::load(&sub_path)?;
            let sub_dir = sub_path.parent().unwrap_or(dir);
            render_body(html, &sub, sub_dir)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::objective::Objective;
    use crate::optimizer::{optimize, OptimizerConfig};
    use crate::prompt::PromptTemplate;
    use crate::runs::{attach_samples_to_report, write_run_dir, write_samples};
    use crate::toy::{ToyWorld, ToyWorldConfig};

    #[test]
    fn gallery_embeds_sample_thumbnails() {
        let w = ToyWorld::build(ToyWorldConfig::new(0)).unwrap();
        let template = PromptTemplate::from_prefix(w.vocabulary(), "", 1).unwrap();
        let record = optimize(
            &template,
            &Objective::ClassCe { class: 0 },
            &w,
            &w.probe(),
            &OptimizerConfig { steps: 5, restarts: 1, heldout_seeds: 4, ..Default::default() },
            3,
            2,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run_dir(dir.path(), &record, &RunConfig::default()).unwrap();
        let samples = crate::sampler::sample(&record, &w, &w.probe(), 2, 10).unwrap();
        let entries = write_samples(dir.path(), &samples).unwrap();
        attach_samples_to_report(dir.path(), entries).unwrap();

        let out = dir.path().join("gallery.html");
        render_gallery(&dir.path().join("report.json"), &out).unwrap();
        let html = std::fs::read_to_string(&out).unwrap();
        assert!(html.contains("data:image/png;base64,"));
        assert!(html.contains("optimization"));
        assert_eq!(html.matches("<img").count(), 2);
    }
}
