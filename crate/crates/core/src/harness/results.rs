use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::projection::Projection;
use super::runner::{ExperimentOutput, MetricsRecord};
use crate::error::{Error, Result};

pub const RESULTS_JSON: &str = "results.json";
pub const RESULTS_CSV: &str = "results.csv";

const COLUMNS: [&str; 23] = [
    "mode",
    "target_domain",
    "eval_domain",
    "split",
    "seed",
    "variant",
    "task_kind",
    "external_layers",
    "lambda_bp",
    "lambda_h",
    "alpha_outer",
    "lambda_d",
    "alpha_h",
    "n",
    "mae",
    "mse",
    "accuracy",
    "auc",
    "auc_undefined",
    "dataset_hash",
    "split_hash",
    "batch_order_hash",
    "wall_clock_s",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_row(r: &MetricsRecord) -> Vec<String> {
    let layers: Vec<String> = r.external_layers.iter().map(usize::to_string).collect();
    let w = r.loss_weights;
    vec![
        r.mode.clone(),
        opt(r.target_domain),
        r.eval_domain.to_string(),
        r.split.clone(),
        r.seed.to_string(),
        r.variant.clone(),
        format!("{:?}", r.task_kind).to_lowercase(),
        layers.join(";"),
        w.lambda_bp.to_string(),
        w.lambda_h.to_string(),
        w.alpha_outer.to_string(),
        w.lambda_d.to_string(),
        w.alpha_h.to_string(),
        r.n.to_string(),
        opt(r.mae),
        opt(r.mse),
        opt(r.accuracy),
        opt(r.auc),
        r.auc_undefined.to_string(),
        r.dataset_hash.clone(),
        r.split_hash.clone(),
        r.batch_order_hash.clone(),
        r.wall_clock_s.to_string(),
    ]
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Writes `results.json` (config echo, audits, geometry, records) and
/// `results.csv` (one record per row) into `dir`. Returns both paths.
pub fn write_results(out: &ExperimentOutput, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join(RESULTS_JSON);
    let json = serde_json::to_string_pretty(out).expect("results serialise");
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    let csv_path = dir.join(RESULTS_CSV);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
    w.write_record(COLUMNS).map_err(|e| csv_err(&csv_path, e))?;
    for r in &out.records {
        w.write_record(csv_row(r)).map_err(|e| csv_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok((json_path, csv_path))
}

pub fn read_results(dir: &Path) -> Result<ExperimentOutput> {
    let path = if dir.is_dir() { dir.join(RESULTS_JSON) } else { dir.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Writes projection coordinates as CSV with columns `x, y, domain_id, split`.
pub fn write_projection_csv(p: &Projection, splits: &[String], path: &Path) -> Result<()> {
    if splits.len() != p.coords.len() {
        return Err(Error::dim("write_projection_csv", format!("{} splits for {} rows", splits.len(), p.coords.len())));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["x", "y", "domain_id", "split"]).map_err(|e| csv_err(path, e))?;
    for ((c, label), split) in p.coords.iter().zip(&p.labels).zip(splits) {
        w.write_record([c[0].to_string(), c[1].to_string(), label.to_string(), split.clone()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean and sample standard deviation of one metric for one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: String,
    pub variant: String,
    pub target_domain: Option<usize>,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Groups records by (mode, variant, target) in first-seen order and
/// summarises `metric` over seeds and evaluation domains. Groups without
/// the metric are left out.
pub fn summarize(records: &[MetricsRecord], metric: &str) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String, Option<usize>)> = Vec::new();
    for r in records {
        let k = (r.mode.clone(), r.variant.clone(), r.target_domain);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .filter_map(|(mode, variant, target)| {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| r.mode == mode && r.variant == variant && r.target_domain == target)
                .filter_map(|r| r.metric(metric))
                .collect();
            if values.is_empty() {
                return None;
            }
            let (mean, std) = mean_std(&values);
            Some(SummaryRow { mode, variant, target_domain: target, metric: metric.into(), mean, std, n: values.len() })
        })
        .collect()
}

/// Plain-text table of summaries, `mean (std)` per row.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut s = format!("{:<16} {:<20} {:>6} {:>8} {:>22}\n", "mode", "variant", "target", "metric", "mean (std)");
    for r in rows {
        let target = r.target_domain.map(|t| t.to_string()).unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "{:<16} {:<20} {:>6} {:>8} {:>22}\n",
            r.mode,
            r.variant,
            target,
            r.metric,
            format!("{:.4} ({:.4})", r.mean, r.std)
        ));
    }
    s
}
