use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Mode};
use super::metrics::compute_metrics;
use crate::data::{load_dataset, make_benchmark, split_leave_one_out, split_supervised, Dataset, Split, MANIFEST_FILE};
use crate::error::Result;
use crate::hyda::{pretrain_domain, train_joint, HydaModel, ModelConfig, TrainConfig, TrainingLog};
use crate::losses::{LossWeights, TaskKind};

/// A model configuration compared within an experiment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No external layers, zero domain-specific coefficients, no domain
    /// classifier training: a plain MLP.
    Baseline,
    /// The configured model as is.
    Hyda,
    /// Domain cross-entropy only.
    LossCe,
    /// Domain cross-entropy plus multi-similarity on embeddings.
    LossCeMsimD,
    /// Both multi-similarity terms.
    LossFull,
    /// The configured model with the given 1-based external head layers. An
    /// empty mask is the baseline.
    Mask(Vec<usize>),
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Baseline => "baseline".into(),
            Variant::Hyda => "hyda".into(),
            Variant::LossCe => "ce".into(),
            Variant::LossCeMsimD => "ce+msim_d".into(),
            Variant::LossFull => "ce+msim_d+msim_h".into(),
            Variant::Mask(m) => {
                let ids: Vec<String> = m.iter().map(usize::to_string).collect();
                format!("mask[{}]", ids.join(","))
            }
        }
    }

    /// Model config for this variant and whether the domain classifier is
    /// trained.
    pub fn configure(&self, base: &ModelConfig) -> (ModelConfig, bool) {
        let mut cfg = base.clone();
        let plain = |cfg: &mut ModelConfig| {
            cfg.external_layers.clear();
            cfg.loss_weights = LossWeights::zero();
        };
        match self {
            Variant::Baseline => plain(&mut cfg),
            Variant::Mask(m) if m.is_empty() => plain(&mut cfg),
            Variant::Mask(m) => cfg.external_layers = m.clone(),
            Variant::Hyda | Variant::LossFull => {}
            Variant::LossCe => {
                cfg.loss_weights.alpha_outer = 0.0;
                cfg.loss_weights.alpha_h = 0.0;
            }
            Variant::LossCeMsimD => cfg.loss_weights.alpha_h = 0.0,
        }
        let trains_domain = !matches!(self, Variant::Baseline) && !matches!(self, Variant::Mask(m) if m.is_empty());
        (cfg, trains_domain)
    }

    /// The eight subsets of head layers {1, 2, 3}, by size then order.
    pub fn all_masks() -> Vec<Variant> {
        [vec![], vec![1], vec![2], vec![3], vec![1, 2], vec![1, 3], vec![2, 3], vec![1, 2, 3]]
            .into_iter()
            .map(Variant::Mask)
            .collect()
    }
}

/// One evaluation of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub mode: String,
    /// Held-out domain id, absent in supervised runs.
    pub target_domain: Option<usize>,
    /// Domain id the metrics were computed on.
    pub eval_domain: usize,
    /// `test` or `val`.
    pub split: String,
    pub seed: u64,
    pub variant: String,
    pub task_kind: TaskKind,
    pub external_layers: Vec<usize>,
    pub loss_weights: LossWeights,
    pub n: usize,
    pub mae: Option<f64>,
    pub mse: Option<f64>,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub auc_undefined: bool,
    pub dataset_hash: String,
    pub split_hash: String,
    pub batch_order_hash: String,
    pub wall_clock_s: f64,
}

impl MetricsRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &MetricsRecord) -> bool {
        MetricsRecord { wall_clock_s: 0.0, ..self.clone() } == MetricsRecord { wall_clock_s: 0.0, ..other.clone() }
    }

    /// Value of a metric by name.
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "mae" => self.mae,
            "mse" => self.mse,
            "accuracy" => self.accuracy,
            "auc" => self.auc,
            _ => None,
        }
    }
}

/// Training-stream audit of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAudit {
    pub target_domain: Option<usize>,
    pub seed: u64,
    pub variant: String,
    pub samples_trained: usize,
    /// Trained sample ids belonging to the test stream.
    pub test_leaks: usize,
    /// Trained sample ids belonging to the validation stream.
    pub val_leaks: usize,
    /// Trained sample ids outside the training stream altogether.
    pub foreign: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSimilarity {
    pub domain_id: usize,
    /// Cosine similarity between this domain's embedding centroid and the
    /// held-out domain's.
    pub cosine: f64,
    /// Neighbour of the held-out domain on the manifold.
    pub adjacent: bool,
}

/// Embedding-centroid geometry of a held-out domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryRecord {
    pub target_domain: usize,
    pub seed: u64,
    pub variant: String,
    pub similarities: Vec<DomainSimilarity>,
    /// Every adjacent domain is strictly more similar than every
    /// non-adjacent one.
    pub adjacent_closest: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub dataset_hash: String,
    pub records: Vec<MetricsRecord>,
    pub audits: Vec<SplitAudit>,
    pub geometry: Vec<GeometryRecord>,
}

impl ExperimentOutput {
    fn new(config: &ExperimentConfig, ds: &Dataset) -> Self {
        ExperimentOutput {
            config: config.clone(),
            dataset_hash: ds.fingerprint(),
            records: Vec::new(),
            audits: Vec::new(),
            geometry: Vec::new(),
        }
    }

    pub fn records_for(&self, variant: &str) -> impl Iterator<Item = &MetricsRecord> {
        let variant = variant.to_string();
        self.records.iter().filter(move |r| r.variant == variant)
    }
}

/// A trained model with its logs.
pub struct TrainedRun {
    pub model: HydaModel,
    pub pretrain_log: Option<TrainingLog>,
    pub joint_log: TrainingLog,
}

impl TrainedRun {
    /// Sorted ids of every sample used in any training batch.
    pub fn samples_trained(&self) -> Vec<u64> {
        let mut ids = self.joint_log.samples_seen.clone();
        if let Some(p) = &self.pretrain_log {
            ids.extend(&p.samples_seen);
        }
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

pub fn split_hash(split: &Split) -> String {
    let mut h = Sha256::new();
    for (tag, refs) in [(b'T', &split.train), (b'V', &split.val), (b'E', &split.test)] {
        h.update([tag]);
        for r in refs {
            h.update(r.id().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Loads the dataset named by the config, generating it first when the
/// directory has no manifest.
pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    if cfg.dataset.join(MANIFEST_FILE).exists() {
        load_dataset(&cfg.dataset)
    } else {
        make_benchmark(&cfg.dataset, &cfg.benchmark)
    }
}

/// Trains one variant on the training stream of `split`.
pub fn train_variant(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    split: &Split,
    seed: u64,
    variant: &Variant,
) -> Result<TrainedRun> {
    let (mut model_cfg, trains_domain) = variant.configure(&cfg.model);
    let train = ds.batch(&split.train, model_cfg.task_kind);
    model_cfg.source_domains = train.domains();
    let mut model = HydaModel::new(model_cfg, seed)?;
    let tcfg = TrainConfig { seed, update_domain: trains_domain, ..cfg.train.clone() };
    let pretrain_log = if trains_domain && cfg.pretrain_epochs > 0 {
        let pcfg = TrainConfig { epochs: cfg.pretrain_epochs, ..tcfg.clone() };
        Some(pretrain_domain(&mut model, &train, &pcfg)?)
    } else {
        None
    };
    let joint_log = train_joint(&mut model, &train, &tcfg)?;
    Ok(TrainedRun { model, pretrain_log, joint_log })
}

pub fn audit_split(split: &Split, run: &TrainedRun) -> (usize, usize, usize, usize) {
    let ids = |refs: &[crate::data::SampleRef]| refs.iter().map(|r| r.id()).collect::<HashSet<u64>>();
    let (train, val, test) = (ids(&split.train), ids(&split.val), ids(&split.test));
    let seen = run.samples_trained();
    let test_leaks = seen.iter().filter(|i| test.contains(i)).count();
    let val_leaks = seen.iter().filter(|i| val.contains(i)).count();
    let foreign = seen.iter().filter(|i| !train.contains(i)).count();
    (seen.len(), test_leaks, val_leaks, foreign)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Manifest indices of the held-out domain's neighbours by manifold angle.
fn manifold_neighbours(ds: &Dataset, target: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ds.domains.len()).collect();
    order.sort_by(|&a, &b| ds.manifest.domains[a].theta.total_cmp(&ds.manifest.domains[b].theta));
    let pos = order.iter().position(|&i| i == target).expect("target in manifest");
    let mut out = Vec::new();
    if pos > 0 {
        out.push(order[pos - 1]);
    }
    if pos + 1 < order.len() {
        out.push(order[pos + 1]);
    }
    out
}

/// Centroid of each domain's embeddings.
pub fn embedding_centroids(model: &HydaModel, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    ds.domains
        .iter()
        .map(|dom| {
            let emb = model.extract_domain_embeddings(&dom.x)?;
            let f = emb.shape()[1];
            let mut c = vec![0.0; f];
            for row in emb.data().chunks(f) {
                c.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            c.iter_mut().for_each(|a| *a /= dom.len() as f64);
            Ok(c)
        })
        .collect()
}

pub fn centroid_geometry(
    model: &HydaModel,
    ds: &Dataset,
    target_domain: usize,
    seed: u64,
    variant: &str,
) -> Result<GeometryRecord> {
    let target = ds.manifest.domain_index(target_domain).expect("validated target");
    let centroids = embedding_centroids(model, ds)?;
    let neighbours = manifold_neighbours(ds, target);
    let similarities: Vec<DomainSimilarity> = (0..ds.domains.len())
        .filter(|&i| i != target)
        .map(|i| DomainSimilarity {
            domain_id: ds.manifest.domains[i].domain_id,
            cosine: cosine(&centroids[target], &centroids[i]),
            adjacent: neighbours.contains(&i),
        })
        .collect();
    let worst_adjacent = similarities.iter().filter(|s| s.adjacent).map(|s| s.cosine).fold(f64::INFINITY, f64::min);
    let best_other = similarities.iter().filter(|s| !s.adjacent).map(|s| s.cosine).fold(f64::NEG_INFINITY, f64::max);
    Ok(GeometryRecord {
        target_domain,
        seed,
        variant: variant.to_string(),
        similarities,
        adjacent_closest: worst_adjacent > best_other,
    })
}

struct RunContext<'a> {
    cfg: &'a ExperimentConfig,
    ds: &'a Dataset,
    mode: Mode,
    dataset_hash: String,
}

impl RunContext<'_> {
    fn record(
        &self,
        run: &TrainedRun,
        split: &Split,
        target: Option<usize>,
        seed: u64,
        variant: &Variant,
        started: Instant,
    ) -> Result<Vec<MetricsRecord>> {
        let kind = run.model.config.task_kind;
        let (eval_split, refs_by_domain): (&str, Vec<(usize, Vec<_>)>) = match target {
            Some(t) => ("test", vec![(t, split.test.clone())]),
            None => (
                "val",
                self.ds
                    .manifest
                    .domains
                    .iter()
                    .enumerate()
                    .map(|(i, d)| (d.domain_id, split.val.iter().filter(|r| r.domain == i).copied().collect()))
                    .collect(),
            ),
        };
        let mut out = Vec::new();
        let sh = split_hash(split);
        for (domain_id, refs) in refs_by_domain {
            let batch = self.ds.batch(&refs, kind);
            let preds = run.model.predict(&batch.x)?;
            let m = compute_metrics(kind, &preds, &batch.y_task)?;
            out.push(MetricsRecord {
                mode: self.mode.as_str().into(),
                target_domain: target,
                eval_domain: domain_id,
                split: eval_split.into(),
                seed,
                variant: variant.name(),
                task_kind: kind,
                external_layers: run.model.config.external_layers.clone(),
                loss_weights: run.model.config.loss_weights,
                n: batch.len(),
                mae: m.mae,
                mse: m.mse,
                accuracy: m.accuracy,
                auc: m.auc,
                auc_undefined: m.auc_undefined,
                dataset_hash: self.dataset_hash.clone(),
                split_hash: sh.clone(),
                batch_order_hash: run.joint_log.batch_order_hash.clone(),
                wall_clock_s: 0.0,
            });
        }
        let secs = started.elapsed().as_secs_f64();
        out.iter_mut().for_each(|r| r.wall_clock_s = secs);
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_one(
        &self,
        out: &mut ExperimentOutput,
        split: &Split,
        target: Option<usize>,
        seed: u64,
        variant: &Variant,
        geometry: bool,
        on_run: &mut OnRun<'_>,
    ) -> Result<()> {
        let started = Instant::now();
        let run = train_variant(self.cfg, self.ds, split, seed, variant)?;
        on_run(&RunKey { target_domain: target, seed, variant: variant.clone() }, &run)?;
        let (trained, test_leaks, val_leaks, foreign) = audit_split(split, &run);
        out.audits.push(SplitAudit {
            target_domain: target,
            seed,
            variant: variant.name(),
            samples_trained: trained,
            test_leaks,
            val_leaks,
            foreign,
            passed: test_leaks == 0 && val_leaks == 0 && foreign == 0,
        });
        out.records.extend(self.record(&run, split, target, seed, variant, started)?);
        if let (true, Some(t)) = (geometry, target) {
            out.geometry.push(centroid_geometry(&run.model, self.ds, t, seed, &variant.name())?);
        }
        Ok(())
    }
}

/// Identifies one trained model within an experiment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunKey {
    pub target_domain: Option<usize>,
    pub seed: u64,
    pub variant: Variant,
}

/// Callback invoked with every trained model before it is evaluated.
pub type OnRun<'a> = dyn FnMut(&RunKey, &TrainedRun) -> Result<()> + 'a;

/// Trains every variant for every held-out target and seed and evaluates on
/// the held-out domain. Geometry is recorded for variants listed in
/// `geometry_for`.
pub fn run_variants(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    mode: Mode,
    variants: &[Variant],
    geometry_for: &[Variant],
) -> Result<ExperimentOutput> {
    run_variants_with(cfg, ds, mode, variants, geometry_for, &mut |_, _| Ok(()))
}

/// [`run_variants`] with a hook that sees each trained model.
pub fn run_variants_with(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    mode: Mode,
    variants: &[Variant],
    geometry_for: &[Variant],
    on_run: &mut OnRun<'_>,
) -> Result<ExperimentOutput> {
    cfg.validate(ds)?;
    let ctx = RunContext { cfg, ds, mode, dataset_hash: ds.fingerprint() };
    let mut out = ExperimentOutput::new(cfg, ds);
    out.config.mode = mode;
    if mode == Mode::Supervised {
        let split = split_supervised(ds);
        for &seed in &cfg.seeds {
            for v in variants {
                ctx.run_one(&mut out, &split, None, seed, v, false, on_run)?;
            }
        }
        return Ok(out);
    }
    for &target in &cfg.targets {
        let split = split_leave_one_out(ds, target)?;
        for &seed in &cfg.seeds {
            for v in variants {
                ctx.run_one(&mut out, &split, Some(target), seed, v, geometry_for.contains(v), on_run)?;
            }
        }
    }
    Ok(out)
}

/// Trains on every domain and reports per-domain validation metrics for
/// the baseline and the configured model.
pub fn run_supervised(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ExperimentOutput> {
    run_variants(cfg, ds, Mode::Supervised, &[Variant::Baseline, Variant::Hyda], &[])
}

/// Baseline and configured model on each held-out target.
pub fn run_leave_one_out(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ExperimentOutput> {
    run_variants(cfg, ds, Mode::LeaveOneOut, &[Variant::Baseline, Variant::Hyda], &[Variant::Hyda])
}

/// The three loss-term variants on each held-out target.
pub fn run_loss_ablation(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ExperimentOutput> {
    run_variants(cfg, ds, Mode::LossAblation, &[Variant::LossCe, Variant::LossCeMsimD, Variant::LossFull], &[])
}

/// All eight external-layer masks on each held-out target.
pub fn run_layer_ablation(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ExperimentOutput> {
    run_variants(cfg, ds, Mode::LayerAblation, &Variant::all_masks(), &[])
}

/// Runs the experiment the config's mode names.
pub fn run_experiment(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ExperimentOutput> {
    match cfg.mode {
        Mode::Supervised => run_supervised(cfg, ds),
        Mode::LeaveOneOut => run_leave_one_out(cfg, ds),
        Mode::LossAblation => run_loss_ablation(cfg, ds),
        Mode::LayerAblation => run_layer_ablation(cfg, ds),
    }
}

/// Loads the config's dataset, generating it if needed, and runs it.
pub fn run_from_config(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let ds = load_or_generate(cfg)?;
    run_experiment(cfg, &ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_benchmark, BenchmarkSpec};

    fn tiny() -> (ExperimentConfig, Dataset) {
        let ds = generate_benchmark(&BenchmarkSpec { samples_per_domain: 40, ..BenchmarkSpec::default() }).unwrap();
        let mut cfg = ExperimentConfig { seeds: vec![3], targets: vec![2], pretrain_epochs: 1, ..Default::default() };
        cfg.train.epochs = 2;
        cfg.train.batch_size = 32;
        (cfg, ds)
    }

    #[test]
    fn variant_configuration() {
        let base = ModelConfig::default();
        let (b, trains) = Variant::Baseline.configure(&base);
        assert!(b.external_layers.is_empty() && b.loss_weights == LossWeights::zero() && !trains);
        assert_eq!(Variant::Mask(vec![]).configure(&base), (b, false));
        let (ce, _) = Variant::LossCe.configure(&base);
        assert_eq!((ce.loss_weights.alpha_outer, ce.loss_weights.alpha_h), (0.0, 0.0));
        assert_eq!(ce.loss_weights.lambda_bp, base.loss_weights.lambda_bp);
        let (msd, _) = Variant::LossCeMsimD.configure(&base);
        assert_eq!((msd.loss_weights.alpha_outer, msd.loss_weights.alpha_h), (1.0, 0.0));
        assert_eq!(Variant::Mask(vec![1, 2]).configure(&base).0.external_layers, vec![1, 2]);
        assert_eq!(Variant::all_masks().len(), 8);
        assert_eq!(Variant::Mask(vec![1, 3]).name(), "mask[1,3]");
    }

    #[test]
    fn leave_one_out_cardinality_and_hygiene() {
        let (cfg, ds) = tiny();
        let out = run_leave_one_out(&cfg, &ds).unwrap();
        assert_eq!(out.records.len(), 2);
        assert!(out.audits.iter().all(|a| a.passed));
        assert_eq!(out.geometry.len(), 1);
        let r = &out.records[0];
        assert_eq!((r.target_domain, r.eval_domain, r.n), (Some(2), 2, 40));
        assert_eq!(out.records[0].batch_order_hash, out.records[1].batch_order_hash);
        assert_eq!(out.records[0].split_hash, out.records[1].split_hash);
    }

    #[test]
    fn supervised_reports_each_domain() {
        let (mut cfg, ds) = tiny();
        cfg.mode = Mode::Supervised;
        let out = run_supervised(&cfg, &ds).unwrap();
        assert_eq!(out.records.len(), 2 * 5);
        assert!(out.records.iter().all(|r| r.split == "val" && r.n == 4));
        assert!(out.audits.iter().all(|a| a.passed));
    }

    #[test]
    fn invalid_config_is_rejected_before_training() {
        let (mut cfg, ds) = tiny();
        cfg.targets = vec![7];
        assert!(matches!(run_leave_one_out(&cfg, &ds), Err(crate::Error::Config { .. })));
    }
}
