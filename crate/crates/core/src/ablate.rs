//! The four-row task ablation: one shared pretrained checkpoint, then
//! und-only, +pixel, +depth and +seg fine-tuning runs, each evaluated on the
//! held-out split.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::dataset::Dataset;
use crate::error::Result;
use crate::eval::{evaluate, line_plot, EvalReport};
use crate::io::{create_dir, write_json};
use crate::trainer::{run, HeldoutRecord, RunOutput};

/// (name, [pixel, depth, seg, und]) in table order.
pub const ROWS: [(&str, [f64; 4]); 4] = [
    ("und-only", [0.0, 0.0, 0.0, 1.0]),
    ("+pixel", [1.0, 0.0, 0.0, 1.0]),
    ("+depth", [1.0, 1.0, 0.0, 1.0]),
    ("+seg", [1.0, 1.0, 1.0, 1.0]),
];

/// Weights of the shared pretraining run.
pub const PRETRAIN_WEIGHTS: [f64; 4] = [1.0, 0.0, 0.0, 1.0];

pub const TABLE_COLUMNS: [&str; 7] =
    ["vqa_spatial", "vqa_presence", "vqa_attribute", "depth_sim", "seg_sim", "recon_mse", "comp_score"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub weights: [f64; 4],
    /// Values of [`TABLE_COLUMNS`], rounded to 4 decimals; `None` when a
    /// category had no questions.
    pub values: Vec<Option<f64>>,
    pub heldout_start: HeldoutRecord,
    pub heldout_end: HeldoutRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

pub struct AblationOutput {
    pub table: AblationTable,
    pub reports: Vec<EvalReport>,
    pub runs: Vec<RunOutput>,
    pub pretrain: RunOutput,
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn row_values(r: &EvalReport) -> Vec<Option<f64>> {
    [r.vqa_spatial_acc, r.vqa_presence_acc, r.vqa_attribute_acc, Some(r.depth_sim), Some(r.seg_sim), Some(r.recon_mse), Some(r.comp_score)]
        .into_iter()
        .map(|v| v.map(round4))
        .collect()
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<10}", "row");
        for c in &self.columns {
            let _ = write!(s, " {c:>13}");
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "{:<10}", row.name);
            for v in &row.values {
                match v {
                    Some(v) => {
                        let _ = write!(s, " {v:>13.4}");
                    }
                    None => {
                        let _ = write!(s, " {:>13}", "n/a");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

pub fn pretrain_config(base: &TrainConfig) -> TrainConfig {
    let mut c = base.clone();
    c.set_weights(PRETRAIN_WEIGHTS);
    c.steps = base.pretrain_steps;
    c.post_phase_pixel_steps = 0;
    c.init_from = None;
    c.resume = None;
    c
}

/// Fine-tuning config for one row; text components stay frozen.
pub fn row_config(base: &TrainConfig, weights: [f64; 4], init: &Path) -> TrainConfig {
    let mut c = base.clone();
    c.set_weights(weights);
    c.steps = base.row_steps;
    c.text_warmup_steps = 0;
    c.post_phase_pixel_steps = 0;
    c.init_from = Some(init.display().to_string());
    c.resume = None;
    c
}

/// Runs the ablation under `out`: `pretrain/`, `rows/<i>_<name>/`, then
/// `ablation.json`, `ablation.txt` and `ablation_loss.png`.
pub fn ablate(base: &TrainConfig, data: &Dataset, out: &Path) -> Result<AblationOutput> {
    base.validate()?;
    create_dir(out)?;
    write_json(&out.join("resolved_config.json"), base)?;
    let pre_dir = out.join("pretrain");
    let pretrain = run(&pretrain_config(base), data, &pre_dir)?;
    let init = pre_dir.join("checkpoint");

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut runs = Vec::new();
    for (i, (name, weights)) in ROWS.iter().enumerate() {
        let dir: PathBuf = out.join("rows").join(format!("{i}_{}", name.trim_start_matches('+')));
        let cfg = row_config(base, *weights, &init);
        let result = run(&cfg, data, &dir)?;
        let (_, model, _) = checkpoint::load(&dir.join("checkpoint"))?;
        let ev = evaluate(&model, &data.vocab, &data.prompts, &data.eval, &data.manifest.spec.depth_layers, base.n_eval_gen, base.seed)?;
        write_json(&dir.join("eval_report.json"), &ev.report)?;
        let first = result.heldout.first().cloned();
        let last = result.heldout.last().cloned();
        rows.push(TableRow {
            name: name.to_string(),
            weights: *weights,
            values: row_values(&ev.report),
            heldout_start: first.unwrap_or_else(|| nan_record(0)),
            heldout_end: last.unwrap_or_else(|| nan_record(cfg.steps)),
        });
        reports.push(ev.report);
        runs.push(result);
    }
    let table = AblationTable { columns: TABLE_COLUMNS.iter().map(|s| s.to_string()).collect(), rows };
    write_json(&out.join("ablation.json"), &table)?;
    let text = table.to_text();
    std::fs::write(out.join("ablation.txt"), &text).map_err(|e| crate::Error::io(out.join("ablation.txt"), e))?;
    let series: Vec<Vec<(f64, f64)>> =
        runs.iter().map(|r| r.heldout.iter().map(|h| (h.step as f64, h.pixel)).collect()).collect();
    line_plot(&series, 320, 200).save_png(&out.join("ablation_loss.png"))?;
    Ok(AblationOutput { table, reports, runs, pretrain })
}

fn nan_record(step: usize) -> HeldoutRecord {
    HeldoutRecord { step, pixel: f64::NAN, depth: f64::NAN, seg: f64::NAN }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_table_round_trips_json_numbers() {
        let h = nan_record(0);
        let table = AblationTable {
            columns: TABLE_COLUMNS.iter().map(|s| s.to_string()).collect(),
            rows: vec![TableRow {
                name: "+pixel".into(),
                weights: [1.0, 0.0, 0.0, 1.0],
                values: vec![Some(round4(0.123456)), None, Some(1.0), Some(0.5), Some(0.25), Some(round4(0.0012345)), Some(0.0)],
                heldout_start: h.clone(),
                heldout_end: h,
            }],
        };
        let text = table.to_text();
        let line = text.lines().nth(1).unwrap();
        let parsed: Vec<Option<f64>> = line.split_whitespace().skip(1).map(|t| t.parse().ok()).collect();
        assert_eq!(parsed, table.rows[0].values);
    }

    #[test]
    fn row_configs_freeze_text_and_chain_from_pretrain() {
        let base = TrainConfig::default();
        let p = pretrain_config(&base);
        assert_eq!(p.steps, base.pretrain_steps);
        assert_eq!([p.lambda_pixel, p.lambda_depth, p.lambda_seg, p.lambda_und], PRETRAIN_WEIGHTS);
        let r = row_config(&base, ROWS[0].1, Path::new("x"));
        assert_eq!(r.text_warmup_steps, 0);
        assert_eq!(r.init_from.as_deref(), Some("x"));
        assert_eq!(ROWS.map(|r| r.0), ["und-only", "+pixel", "+depth", "+seg"]);
    }
}
