use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use hyda::data::{make_benchmark, split_supervised};
use hyda::harness::{
    load_or_generate, project_embeddings, read_results, render_summary, run_layer_ablation, run_leave_one_out,
    run_loss_ablation, run_variants_with, summarize, write_projection_csv, write_results, ExperimentConfig,
    ExperimentOutput, Mode, Variant,
};
use hyda::hyda::{load_model, save_model};
use hyda::Error;

#[derive(Parser)]
#[command(name = "hyda", version, about = "Hypernetwork domain adaptation experiments on a synthetic benchmark")]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for results, checkpoints and projections.
    #[arg(long, global = true, default_value = "results")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark to the config's dataset directory.
    Generate,
    /// Train on every domain, report per-domain validation metrics and save
    /// the first seed's model under `<out-dir>/model`.
    Train,
    /// Leave-one-domain-out runs of the baseline and the full model.
    Loo,
    /// Loss-term ablation on the held-out targets.
    AblateLoss,
    /// External-layer mask ablation on the held-out targets.
    AblateLayers,
    /// Project domain embeddings of the dataset with a saved model.
    Project {
        /// Model checkpoint directory; defaults to `<out-dir>/model`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Summarise a results file as mean (std) per variant and target.
    Report {
        /// Results directory or JSON file; defaults to `<out-dir>`.
        #[arg(long)]
        results: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn finish(out: &ExperimentOutput, dir: &Path, command: &str) -> Result<Value, Error> {
    let (json_path, csv_path) = write_results(out, dir)?;
    let failed_audits = out.audits.iter().filter(|a| !a.passed).count();
    Ok(json!({
        "status": "ok",
        "command": command,
        "records": out.records.len(),
        "failed_audits": failed_audits,
        "results_json": json_path,
        "results_csv": csv_path,
    }))
}

fn run(cli: &Cli) -> Result<Value, Error> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Generate => {
            let ds = make_benchmark(&cfg.dataset, &cfg.benchmark)?;
            Ok(json!({
                "status": "ok",
                "command": "generate",
                "dataset": cfg.dataset,
                "domains": ds.manifest.domains.len(),
                "samples_per_domain": ds.manifest.samples_per_domain,
                "fingerprint": ds.fingerprint(),
            }))
        }
        Command::Train => {
            cfg.mode = Mode::Supervised;
            let ds = load_or_generate(&cfg)?;
            let model_dir = cli.out_dir.join("model");
            let first_seed = cfg.seeds.first().copied();
            let mut saved = false;
            let out = run_variants_with(
                &cfg,
                &ds,
                Mode::Supervised,
                &[Variant::Baseline, Variant::Hyda],
                &[],
                &mut |key, run| {
                    if key.variant == Variant::Hyda && Some(key.seed) == first_seed && !saved {
                        save_model(&model_dir, &run.model)?;
                        saved = true;
                    }
                    Ok(())
                },
            )?;
            let mut v = finish(&out, &cli.out_dir, "train")?;
            v["model"] = json!(model_dir);
            Ok(v)
        }
        Command::Loo => {
            let ds = load_or_generate(&cfg)?;
            finish(&run_leave_one_out(&cfg, &ds)?, &cli.out_dir, "loo")
        }
        Command::AblateLoss => {
            let ds = load_or_generate(&cfg)?;
            finish(&run_loss_ablation(&cfg, &ds)?, &cli.out_dir, "ablate-loss")
        }
        Command::AblateLayers => {
            let ds = load_or_generate(&cfg)?;
            finish(&run_layer_ablation(&cfg, &ds)?, &cli.out_dir, "ablate-layers")
        }
        Command::Project { model } => {
            let ds = load_or_generate(&cfg)?;
            let model_dir = model.clone().unwrap_or_else(|| cli.out_dir.join("model"));
            let model = load_model(&model_dir)?;
            let val: HashSet<(usize, usize)> = split_supervised(&ds).val.iter().map(|r| (r.domain, r.row)).collect();
            let mut labels = Vec::new();
            let mut splits = Vec::new();
            let mut rows = Vec::new();
            for (di, dom) in ds.domains.iter().enumerate() {
                let emb = model.extract_domain_embeddings(&dom.x)?;
                let f = emb.shape()[1];
                rows.extend(emb.data().chunks(f).map(<[f64]>::to_vec));
                for row in 0..dom.len() {
                    labels.push(dom.spec.domain_id);
                    let in_val = val.contains(&(di, row));
                    let known = model.domain_class(dom.spec.domain_id).is_some();
                    splits.push(
                        match (known, in_val) {
                            (false, _) => "held_out",
                            (true, true) => "val",
                            (true, false) => "train",
                        }
                        .to_string(),
                    );
                }
            }
            let emb = hyda::autodiff::Tensor::from_rows(&rows);
            let p = project_embeddings(&emb, &labels)?;
            let csv_path = cli.out_dir.join("projection.csv");
            write_projection_csv(&p, &splits, &csv_path)?;
            Ok(json!({
                "status": "ok",
                "command": "project",
                "projection_csv": csv_path,
                "explained_variance_ratio": p.explained_variance_ratio,
            }))
        }
        Command::Report { results } => {
            let path = results.clone().unwrap_or_else(|| cli.out_dir.clone());
            let out = read_results(&path)?;
            let mut table = String::new();
            for metric in ["mae", "mse", "accuracy", "auc"] {
                let rows = summarize(&out.records, metric);
                if !rows.is_empty() {
                    table.push_str(&render_summary(&rows));
                }
            }
            print!("{table}");
            let failed: Vec<&str> = out.audits.iter().filter(|a| !a.passed).map(|a| a.variant.as_str()).collect();
            Ok(json!({ "status": "ok", "command": "report", "records": out.records.len(), "failed_audits": failed }))
        }
    }
}

fn error_json(e: &Error) -> Value {
    let fields = match e {
        Error::Config { fields } => json!(fields),
        _ => Value::Null,
    };
    json!({ "status": "error", "error": { "kind": e.kind(), "message": e.to_string(), "fields": fields } })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
