//! Task losses, cross-entropy, multi-similarity metric loss and L2 penalties.

use serde::{Deserialize, Serialize};

use crate::autodiff::matmul_kernel;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Hyperparameters of the multi-similarity loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsimParams {
    /// Scale applied to positive pairs.
    pub alpha_s: f64,
    /// Scale applied to negative pairs.
    pub beta_s: f64,
    /// Similarity threshold.
    pub lambda_s: f64,
    /// Mining margin.
    pub epsilon: f64,
}

impl Default for MsimParams {
    fn default() -> Self {
        MsimParams { alpha_s: 2.0, beta_s: 50.0, lambda_s: 0.5, epsilon: 0.1 }
    }
}

impl MsimParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha_s > 0.0
            && self.beta_s > 0.0
            && self.epsilon >= 0.0
            && self.lambda_s > -1.0
            && self.lambda_s < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::domain("msim_params", format!("{self:?}")))
        }
    }
}

/// Coefficients of the regularised task loss and the domain loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Squared-L2 penalty on hypernetwork and internal primary weights.
    pub lambda_bp: f64,
    /// Squared-L2 penalty on generated weights (batch mean).
    pub lambda_h: f64,
    /// Multi-similarity weight in the domain loss.
    pub alpha_outer: f64,
    /// Squared-L2 penalty on domain-classifier weights.
    pub lambda_d: f64,
    /// Multi-similarity weight on generated parameters.
    pub alpha_h: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_bp: 1e-4, lambda_h: 1e-4, alpha_outer: 1.0, lambda_d: 1e-4, alpha_h: 1.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights { lambda_bp: 0.0, lambda_h: 0.0, alpha_outer: 0.0, lambda_d: 0.0, alpha_h: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_bp, self.lambda_h, self.alpha_outer, self.lambda_d, self.alpha_h];
        if all.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::domain("loss_weights", format!("coefficients must be >= 0: {self:?}")))
        }
    }
}

pub fn mse(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::dim("mse", format!("{:?} vs {:?}", tape.shape(pred), tape.shape(target))));
    }
    if tape.value(pred).numel() == 0 {
        return Err(Error::domain("mse", "empty batch"));
    }
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dim("cross_entropy", format!("logits {s:?} with {} labels", labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::domain("cross_entropy", "empty batch"));
    }
    let classes = s[1];
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::domain("cross_entropy", format!("label {bad} outside 0..{classes}")));
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick(logp, labels)?;
    let mean = tape.mean(picked)?;
    Ok(tape.scale(mean, -1.0))
}

/// Pairwise cosine similarities of the rows of `emb[B, F]`; the diagonal is
/// exactly one.
pub fn cosine_similarity_matrix(tape: &mut Tape, emb: Var) -> Result<Var> {
    let unit = tape.normalize_rows(emb)?;
    let u = tape.value(unit).clone();
    let (b, f) = (u.shape()[0], u.shape()[1]);
    let mut ut = vec![0.0; f * b];
    for i in 0..b {
        for (j, &v) in u.row(i).iter().enumerate() {
            ut[j * b + i] = v;
        }
    }
    let mut sim = vec![0.0; b * b];
    matmul_kernel(u.data(), &ut, b, f, b, &mut sim);
    for i in 0..b {
        sim[i * b + i] = 1.0;
    }
    let value = Tensor::new(vec![b, b], sim)?;
    Ok(tape.custom(
        &[unit],
        value,
        Box::new(move |g, inputs| {
            // dU = (G + Gᵀ) U with the constant diagonal excluded.
            let u = inputs[0];
            let gd = g.data();
            let mut w = vec![0.0; b * b];
            for i in 0..b {
                for k in 0..b {
                    if i != k {
                        w[i * b + k] = gd[i * b + k] + gd[k * b + i];
                    }
                }
            }
            let mut du = vec![0.0; b * f];
            matmul_kernel(&w, u.data(), b, b, f, &mut du);
            vec![Tensor::new(vec![b, f], du).expect("shape of input")]
        }),
    ))
}

/// Positive and negative pairs selected for one anchor.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MinedPairs {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Hardness mining on a similarity matrix.
///
/// A negative `k` of anchor `i` is kept when `S[i,k] > min_pos - ε` and a
/// positive when `S[i,k] < max_neg + ε`, both strict. An anchor without
/// positives has `min_pos = +∞` and one without negatives has
/// `max_neg = -∞`, so nothing is mined for it.
pub fn mine_pairs(sim: &Tensor, labels: &[usize], epsilon: f64) -> Vec<MinedPairs> {
    let b = labels.len();
    let s = |i: usize, k: usize| sim.data()[i * b + k];
    (0..b)
        .map(|i| {
            let pos: Vec<usize> = (0..b).filter(|&k| k != i && labels[k] == labels[i]).collect();
            let neg: Vec<usize> = (0..b).filter(|&k| labels[k] != labels[i]).collect();
            let min_pos = pos.iter().map(|&k| s(i, k)).fold(f64::INFINITY, f64::min);
            let max_neg = neg.iter().map(|&k| s(i, k)).fold(f64::NEG_INFINITY, f64::max);
            MinedPairs {
                positives: pos.into_iter().filter(|&k| s(i, k) < max_neg + epsilon).collect(),
                negatives: neg.into_iter().filter(|&k| s(i, k) > min_pos - epsilon).collect(),
            }
        })
        .collect()
}

/// Multi-similarity loss over the rows of `emb`, grouped by `labels`.
///
/// Rows are L2-normalised internally. The loss is averaged over anchors
/// that have at least one mined pair and is zero when none do.
pub fn multi_similarity_loss(tape: &mut Tape, emb: Var, labels: &[usize], p: &MsimParams) -> Result<Var> {
    p.validate()?;
    let s = tape.shape(emb);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dim("multi_similarity_loss", format!("{s:?} with {} labels", labels.len())));
    }
    if labels.len() < 2 {
        return Err(Error::Contract("multi_similarity_loss needs a batch of at least 2".into()));
    }
    let sim = cosine_similarity_matrix(tape, emb)?;
    let sv = tape.value(sim).clone();
    let b = labels.len();
    let mined = mine_pairs(&sv, labels, p.epsilon);
    let at = |i: usize, k: usize| sv.data()[i * b + k];

    let mut total = 0.0;
    let mut dsim = vec![0.0; b * b];
    let mut active = 0usize;
    for (i, m) in mined.iter().enumerate() {
        if m.positives.is_empty() && m.negatives.is_empty() {
            continue;
        }
        active += 1;
        if !m.positives.is_empty() {
            let terms: Vec<f64> = m.positives.iter().map(|&k| (-p.alpha_s * (at(i, k) - p.lambda_s)).exp()).collect();
            let denom = 1.0 + terms.iter().sum::<f64>();
            total += denom.ln() / p.alpha_s;
            for (&k, t) in m.positives.iter().zip(&terms) {
                dsim[i * b + k] -= t / denom;
            }
        }
        if !m.negatives.is_empty() {
            let terms: Vec<f64> = m.negatives.iter().map(|&k| (p.beta_s * (at(i, k) - p.lambda_s)).exp()).collect();
            let denom = 1.0 + terms.iter().sum::<f64>();
            total += denom.ln() / p.beta_s;
            for (&k, t) in m.negatives.iter().zip(&terms) {
                dsim[i * b + k] += t / denom;
            }
        }
    }
    let scale = if active == 0 { 0.0 } else { 1.0 / active as f64 };
    let loss = Tensor::scalar(total * scale);
    for d in &mut dsim {
        *d *= scale;
    }
    let dsim = Tensor::new(vec![b, b], dsim)?;
    Ok(tape.custom(
        &[sim],
        loss,
        Box::new(move |g, _| {
            let gv = g.data()[0];
            vec![dsim.map(|d| d * gv)]
        }),
    ))
}

/// Sum of squared entries over all listed tensors.
pub fn l2_penalty(tape: &mut Tape, params: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &p in params {
        let sq = tape.square(p)?;
        let s = tape.sum(sq)?;
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

/// Supervision for the task head.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskTarget {
    /// `[B, 1]` regression targets.
    Regression(Tensor),
    Classification(Vec<usize>),
}

impl TaskTarget {
    pub fn len(&self) -> usize {
        match self {
            TaskTarget::Regression(t) => t.shape().first().copied().unwrap_or(0),
            TaskTarget::Classification(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// MSE for regression, cross-entropy for classification.
pub fn task_loss(tape: &mut Tape, kind: TaskKind, pred: Var, target: &TaskTarget) -> Result<Var> {
    match (kind, target) {
        (TaskKind::Regression, TaskTarget::Regression(t)) => {
            let tv = tape.constant(t.clone());
            mse(tape, pred, tv)
        }
        (TaskKind::Classification, TaskTarget::Classification(labels)) => cross_entropy(tape, pred, labels),
        _ => Err(Error::Contract(format!("{kind:?} task given mismatched targets"))),
    }
}
