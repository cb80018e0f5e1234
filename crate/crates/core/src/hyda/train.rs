use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{BoundDomain, BoundHyda, DomainClassifier, HydaModel, Hypernetwork, PrimaryNetwork};
use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::data::{domain_balanced_batches, DomainBatch};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, l2_penalty, multi_similarity_loss, task_loss, TaskKind, TaskTarget};
use crate::nn::{cosine_lr, AdamW, AdamWConfig, Mlp, Module};
use crate::rng::{self, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Run the domain step before every task step.
    pub update_domain: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 60, batch_size: 128, optimizer: AdamWConfig::default(), seed: 0, update_domain: true }
    }
}

/// Per-epoch means over batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub task_loss: Option<f64>,
    pub domain_loss: Option<f64>,
    /// Fraction of training samples whose domain was predicted correctly,
    /// measured before each batch's update.
    pub domain_accuracy: Option<f64>,
    /// Multi-similarity loss on generated parameters.
    pub msim_h: Option<f64>,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// SHA-256 over the sequence of batch index lists.
    pub batch_order_hash: String,
    /// Sorted ids of every sample that appeared in a batch.
    pub samples_seen: Vec<u64>,
}

impl TrainingLog {
    pub fn task_losses(&self) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.task_loss).collect()
    }

    pub fn domain_losses(&self) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.domain_loss).collect()
    }
}

fn check_finite(value: f64, term: &str, epoch: usize, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            location: format!("epoch {epoch}, batch {batch}, term {term}"),
            detail: format!("loss value {value}"),
        })
    }
}

fn collect_grads(grads: &mut Gradients, vars: &[Var], params: &[(String, &Tensor)]) -> Vec<Tensor> {
    vars.iter().zip(params).map(|(&v, (_, t))| grads.take_or_zeros(v, t.shape())).collect()
}

fn domain_classes(model: &HydaModel, data: &DomainBatch) -> Result<Vec<usize>> {
    data.y_domain
        .iter()
        .map(|&d| {
            model
                .domain_class(d)
                .ok_or_else(|| Error::Contract(format!("domain {d} is not a source domain of the model")))
        })
        .collect()
}

/// Batch schedule shared by every trainer: a fresh domain-balanced shuffle
/// per epoch from the given stream of the run seed.
struct Schedule {
    rng: rng::StreamRng,
    hasher: Sha256,
    seen: Vec<u64>,
}

impl Schedule {
    fn new(seed: u64, stream: u64) -> Self {
        Schedule { rng: rng::stream(seed, stream), hasher: Sha256::new(), seen: Vec::new() }
    }

    fn epoch(&mut self, data: &DomainBatch, batch_size: usize) -> Vec<Vec<usize>> {
        let batches = domain_balanced_batches(&data.y_domain, batch_size, &mut self.rng);
        for b in &batches {
            for &i in b {
                self.hasher.update((i as u64).to_le_bytes());
                self.seen.push(data.ids[i]);
            }
            self.hasher.update(u64::MAX.to_le_bytes());
        }
        batches
    }

    fn finish(mut self, epochs: Vec<EpochLog>) -> TrainingLog {
        self.seen.sort_unstable();
        self.seen.dedup();
        TrainingLog { epochs, batch_order_hash: hex::encode(self.hasher.finalize()), samples_seen: self.seen }
    }
}

fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    let bs = batch_size.max(2);
    let full = n.div_ceil(bs);
    if full > 1 && n % bs == 1 {
        full - 1
    } else {
        full
    }
}

struct DomainStepOut {
    loss: f64,
    correct: usize,
}

/// A scalar objective with its named terms, each already scaled by its
/// coefficient.
pub struct Objective {
    pub total: Var,
    pub terms: Vec<(&'static str, Var)>,
}

impl Objective {
    fn check(&self, tape: &Tape, at: (usize, usize)) -> Result<f64> {
        for (name, v) in &self.terms {
            check_finite(tape.value(*v).data()[0], name, at.0, at.1)?;
        }
        let total = tape.value(self.total).data()[0];
        check_finite(total, "total", at.0, at.1)?;
        Ok(total)
    }

    fn term(&self, tape: &Tape, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|(_, v)| tape.value(*v).data()[0])
    }
}

fn sum_terms(tape: &mut Tape, terms: &[(&'static str, Var)]) -> Result<Var> {
    let mut total = terms[0].1;
    for (_, v) in &terms[1..] {
        total = tape.add(total, *v)?;
    }
    Ok(total)
}

/// Domain loss `CE + α_outer·MSim(emb) + λ_D·‖w_D‖²` on one batch. Terms
/// with a zero coefficient are left out. Also returns the logits.
pub fn domain_objective(
    model: &HydaModel,
    tape: &mut Tape,
    bound: &BoundDomain,
    x: Var,
    classes: &[usize],
) -> Result<(Objective, Var)> {
    let w = model.config.loss_weights;
    let (logits, emb) = model.domain.forward(tape, bound, x)?;
    let mut terms = vec![("domain cross-entropy", cross_entropy(tape, logits, classes)?)];
    if w.alpha_outer > 0.0 {
        let ms = multi_similarity_loss(tape, emb, classes, &model.config.msim)?;
        terms.push(("domain multi-similarity", tape.scale(ms, w.alpha_outer)));
    }
    if w.lambda_d > 0.0 {
        let pen = l2_penalty(tape, &DomainClassifier::bound_weights(bound))?;
        terms.push(("lambda_d penalty", tape.scale(pen, w.lambda_d)));
    }
    Ok((Objective { total: sum_terms(tape, &terms)?, terms }, logits))
}

pub const MSIM_H_TERM: &str = "generated-parameter multi-similarity";

/// Regularised task loss on one batch:
/// `L_task + λ_BP·‖w_BP‖² + λ_h·mean_b ‖w_h‖² + α_h·MSim([w_h, b_h])`,
/// where `w_BP` are the weight matrices of the primary internals and the
/// hypernetwork. Terms with a zero coefficient are left out, and the
/// multi-similarity term is skipped when a generated vector is all zero.
pub fn task_objective(
    model: &HydaModel,
    tape: &mut Tape,
    bound: &BoundHyda,
    x: Var,
    target: &TaskTarget,
    classes: &[usize],
) -> Result<Objective> {
    let w = model.config.loss_weights;
    let batch = classes.len();
    let generated = if model.has_external_layers() {
        let emb = model.domain.embed(tape, &bound.domain, x)?;
        let emb = if model.config.detach_domain_features { tape.detach(emb) } else { emb };
        model.hyper.generate(tape, &bound.hyper, emb)?
    } else {
        Vec::new()
    };
    let pred = model.primary.forward(tape, &bound.primary, x, &generated)?;
    let mut terms = vec![("task", task_loss(tape, model.config.task_kind, pred, target)?)];

    if w.lambda_bp > 0.0 {
        let mut weights = PrimaryNetwork::bound_weights(&bound.primary);
        weights.extend(Hypernetwork::bound_weights(&bound.hyper));
        let pen = l2_penalty(tape, &weights)?;
        terms.push(("lambda_bp penalty", tape.scale(pen, w.lambda_bp)));
    }
    if w.lambda_h > 0.0 && !generated.is_empty() {
        let gw: Vec<Var> = generated.iter().map(|g| g.weights).collect();
        let pen = l2_penalty(tape, &gw)?;
        terms.push(("lambda_h penalty", tape.scale(pen, w.lambda_h / batch as f64)));
    }
    if w.alpha_h > 0.0 && !generated.is_empty() {
        let parts: Vec<Var> = generated.iter().flat_map(|g| [g.weights_flat, g.biases]).collect();
        let flat = tape.concat_cols(&parts)?;
        // Cosine similarity is undefined for an all-zero vector, which a
        // sample with no active trunk unit produces.
        let has_zero_row = (0..batch).any(|r| tape.value(flat).row(r).iter().all(|&v| v == 0.0));
        if !has_zero_row {
            let ms = multi_similarity_loss(tape, flat, classes, &model.config.msim)?;
            terms.push((MSIM_H_TERM, tape.scale(ms, w.alpha_h)));
        }
    }
    Ok(Objective { total: sum_terms(tape, &terms)?, terms })
}

/// One update of the domain classifier on the domain loss.
fn domain_step(
    model: &mut HydaModel,
    opt: &mut AdamW,
    batch: &DomainBatch,
    classes: &[usize],
    lr: f64,
    at: (usize, usize),
) -> Result<DomainStepOut> {
    let mut tape = Tape::new();
    let bound = model.domain.bind(&mut tape);
    let x = tape.constant(batch.x.clone());
    let (obj, logits) = domain_objective(model, &mut tape, &bound, x, classes)?;
    let correct = argmax_rows(tape.value(logits)).iter().zip(classes).filter(|(p, c)| p == c).count();
    let loss = obj.check(&tape, at)?;
    let mut grads = tape.backward(obj.total)?;
    let vars = HydaModel::domain_vars_of(&bound);
    let g = collect_grads(&mut grads, &vars, &model.domain.named_params());
    opt.step(&mut model.domain.params_mut(), &g, lr)?;
    Ok(DomainStepOut { loss, correct })
}

pub(crate) fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = t.shape()[1];
    t.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn require_two_domains(classes: &[usize]) -> Result<()> {
    if classes.iter().all(|&c| c == classes[0]) {
        return Err(Error::Contract("domain training needs samples from at least two domains".into()));
    }
    Ok(())
}

/// Trains the domain classifier alone on the domain loss.
pub fn pretrain_domain(model: &mut HydaModel, data: &DomainBatch, cfg: &TrainConfig) -> Result<TrainingLog> {
    if data.is_empty() {
        return Err(Error::Contract("pretrain_domain on an empty dataset".into()));
    }
    let classes = domain_classes(model, data)?;
    require_two_domains(&classes)?;
    let total = (cfg.epochs * batches_per_epoch(data.len(), cfg.batch_size)) as u64;
    let mut opt = AdamW::new(cfg.optimizer, &model.domain.named_params());
    let mut sched = Schedule::new(cfg.seed, streams::DOMAIN_BATCH_ORDER);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let first_lr = cosine_lr(step, total, cfg.optimizer.lr, cfg.optimizer.min_lr);
        let (mut loss_sum, mut correct, mut n_batches) = (0.0, 0usize, 0usize);
        for (bi, rows) in sched.epoch(data, cfg.batch_size).into_iter().enumerate() {
            let batch = data.select(&rows);
            let bc: Vec<usize> = rows.iter().map(|&r| classes[r]).collect();
            let lr = cosine_lr(step, total, cfg.optimizer.lr, cfg.optimizer.min_lr);
            let out = domain_step(model, &mut opt, &batch, &bc, lr, (epoch, bi))?;
            loss_sum += out.loss;
            correct += out.correct;
            n_batches += 1;
            step += 1;
        }
        logs.push(EpochLog {
            epoch,
            task_loss: None,
            domain_loss: Some(loss_sum / n_batches as f64),
            domain_accuracy: Some(correct as f64 / data.len() as f64),
            msim_h: None,
            lr: first_lr,
        });
    }
    Ok(sched.finish(logs))
}

struct TaskStepOut {
    task: f64,
    msim_h: Option<f64>,
}

/// One update of the primary internals and the hypernetwork on the
/// regularised task loss. Without detachment the domain classifier also
/// takes the task gradient through `domain_opt`.
fn task_step(
    model: &mut HydaModel,
    task_opt: &mut AdamW,
    domain_opt: Option<&mut AdamW>,
    batch: &DomainBatch,
    classes: &[usize],
    lr: f64,
    at: (usize, usize),
) -> Result<TaskStepOut> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(batch.x.clone());
    let obj = task_objective(model, &mut tape, &bound, x, &batch.y_task, classes)?;
    obj.check(&tape, at)?;
    let task = obj.term(&tape, "task").expect("task term always present");
    let msim_h = obj.term(&tape, MSIM_H_TERM).map(|v| v / model.config.loss_weights.alpha_h);

    let mut grads = tape.backward(obj.total)?;
    let task_vars = HydaModel::task_vars(&bound);
    let g = collect_grads(&mut grads, &task_vars, &model.task_named_params());
    if !model.config.detach_domain_features {
        if let Some(dopt) = domain_opt {
            let dvars = HydaModel::domain_vars(&bound);
            let dg = collect_grads(&mut grads, &dvars, &model.domain.named_params());
            dopt.step(&mut model.domain.params_mut(), &dg, lr)?;
        }
    }
    task_opt.step(&mut model.task_params_mut(), &g, lr)?;
    Ok(TaskStepOut { task, msim_h })
}

/// Joint training. Each batch first updates the domain classifier on the
/// domain loss (when `cfg.update_domain`), then the primary network and
/// hypernetwork on the regularised task loss.
pub fn train_joint(model: &mut HydaModel, data: &DomainBatch, cfg: &TrainConfig) -> Result<TrainingLog> {
    if data.is_empty() {
        return Err(Error::Contract("train_joint on an empty dataset".into()));
    }
    let classes = domain_classes(model, data)?;
    let needs_domains = cfg.update_domain || (model.config.loss_weights.alpha_h > 0.0 && model.has_external_layers());
    if needs_domains {
        require_two_domains(&classes)?;
    }
    let total = (cfg.epochs * batches_per_epoch(data.len(), cfg.batch_size)) as u64;
    let mut task_opt = AdamW::new(cfg.optimizer, &model.task_named_params());
    let mut domain_opt = AdamW::new(cfg.optimizer, &model.domain.named_params());
    let mut sched = Schedule::new(cfg.seed, streams::BATCH_ORDER);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let first_lr = cosine_lr(step, total, cfg.optimizer.lr, cfg.optimizer.min_lr);
        let (mut task_sum, mut dom_sum, mut correct, mut n_batches) = (0.0, 0.0, 0usize, 0usize);
        let (mut ms_sum, mut ms_n) = (0.0, 0usize);
        for (bi, rows) in sched.epoch(data, cfg.batch_size).into_iter().enumerate() {
            let batch = data.select(&rows);
            let bc: Vec<usize> = rows.iter().map(|&r| classes[r]).collect();
            let lr = cosine_lr(step, total, cfg.optimizer.lr, cfg.optimizer.min_lr);
            if cfg.update_domain {
                let out = domain_step(model, &mut domain_opt, &batch, &bc, lr, (epoch, bi))?;
                dom_sum += out.loss;
                correct += out.correct;
            }
            let dopt = cfg.update_domain.then_some(&mut domain_opt);
            let out = task_step(model, &mut task_opt, dopt, &batch, &bc, lr, (epoch, bi))?;
            task_sum += out.task;
            if let Some(v) = out.msim_h {
                ms_sum += v;
                ms_n += 1;
            }
            n_batches += 1;
            step += 1;
        }
        let nb = n_batches as f64;
        logs.push(EpochLog {
            epoch,
            task_loss: Some(task_sum / nb),
            domain_loss: cfg.update_domain.then(|| dom_sum / nb),
            domain_accuracy: cfg.update_domain.then(|| correct as f64 / data.len() as f64),
            msim_h: (ms_n > 0).then(|| ms_sum / ms_n as f64),
            lr: first_lr,
        });
    }
    Ok(sched.finish(logs))
}

/// Plain MLP with the primary network's layer sizes and initialisation.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineMlp {
    pub task_kind: TaskKind,
    pub mlp: Mlp,
}

impl BaselineMlp {
    pub fn new(config: &super::ModelConfig, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, streams::PRIMARY_INIT);
        Ok(BaselineMlp { task_kind: config.task_kind, mlp: Mlp::internal(&config.baseline_sizes(), &mut r)? })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.mlp.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.mlp.forward(&mut tape, &bound, xv, &[])?;
        Ok(tape.value(y).clone())
    }
}

/// Trains a [`BaselineMlp`] on the task loss alone, using the same batch
/// schedule and optimizer settings as [`train_joint`].
pub fn train_baseline(model: &mut BaselineMlp, data: &DomainBatch, cfg: &TrainConfig) -> Result<TrainingLog> {
    if data.is_empty() {
        return Err(Error::Contract("train_baseline on an empty dataset".into()));
    }
    let total = (cfg.epochs * batches_per_epoch(data.len(), cfg.batch_size)) as u64;
    let mut opt = AdamW::new(cfg.optimizer, &model.mlp.named_params());
    let mut sched = Schedule::new(cfg.seed, streams::BATCH_ORDER);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let first_lr = cosine_lr(step, total, cfg.optimizer.lr, cfg.optimizer.min_lr);
        let (mut sum, mut n_batches) = (0.0, 0usize);
        for (bi, rows) in sched.epoch(data, cfg.batch_size).into_iter().enumerate() {
            let batch = data.select(&rows);
            let lr = cosine_lr(step, total, cfg.optimizer.lr, cfg.optimizer.min_lr);
            let mut tape = Tape::new();
            let bound = model.mlp.bind(&mut tape);
            let x = tape.constant(batch.x.clone());
            let pred = model.mlp.forward(&mut tape, &bound, x, &[])?;
            let loss = task_loss(&mut tape, model.task_kind, pred, &batch.y_task)?;
            let v = tape.value(loss).data()[0];
            check_finite(v, "task", epoch, bi)?;
            let mut grads = tape.backward(loss)?;
            let vars: Vec<Var> = bound.linear_handles().iter().flat_map(|b| [b.weight, b.bias]).collect();
            let g = collect_grads(&mut grads, &vars, &model.mlp.named_params());
            opt.step(&mut model.mlp.params_mut(), &g, lr)?;
            sum += v;
            n_batches += 1;
            step += 1;
        }
        logs.push(EpochLog {
            epoch,
            task_loss: Some(sum / n_batches as f64),
            domain_loss: None,
            domain_accuracy: None,
            msim_h: None,
            lr: first_lr,
        });
    }
    Ok(sched.finish(logs))
}

/// Fraction of rows whose predicted domain class matches the true one.
pub fn domain_accuracy(model: &HydaModel, data: &DomainBatch) -> Result<f64> {
    let classes = domain_classes(model, data)?;
    let (logits, _) = model.domain_forward(&data.x)?;
    let hits = argmax_rows(&logits).iter().zip(&classes).filter(|(p, c)| p == c).count();
    Ok(hits as f64 / data.len().max(1) as f64)
}
