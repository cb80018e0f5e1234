use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::losses::{TaskKind, TaskTarget};

/// Metric values for one evaluation. Regression fills `mae` and `mse`;
/// classification fills `accuracy` and, when both classes occur, `auc`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: Option<f64>,
    pub mse: Option<f64>,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    /// Set when AUC is undefined because the targets hold a single class.
    pub auc_undefined: bool,
}

/// Area under the ROC curve as the Mann–Whitney statistic with ties counted
/// half. `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[usize]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, so tied groups get integer mid-ranks.
    let mut rank2_pos = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        rank2_pos += mid2 * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        i = j + 1;
    }
    let n_pos = n_pos as u64;
    let u2 = rank2_pos - n_pos * (n_pos + 1);
    Some(u2 as f64 / (2 * n_pos * n_neg as u64) as f64)
}

/// Regression: MAE and MSE of `preds` `[B, 1]`. Classification: accuracy of
/// the row argmax of logits `[B, 2]` and AUC of the logit margin.
pub fn compute_metrics(kind: TaskKind, preds: &Tensor, targets: &TaskTarget) -> Result<Metrics> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::domain("compute_metrics", "no samples"));
    }
    if preds.rank() != 2 || preds.shape()[0] != n {
        return Err(Error::dim("compute_metrics", format!("preds {:?} for {n} targets", preds.shape())));
    }
    match (kind, targets) {
        (TaskKind::Regression, TaskTarget::Regression(t)) => {
            if preds.shape()[1] != 1 {
                return Err(Error::dim("compute_metrics", format!("regression preds {:?}", preds.shape())));
            }
            let (mut abs, mut sq) = (0.0, 0.0);
            for (p, y) in preds.data().iter().zip(t.data()) {
                abs += (p - y).abs();
                sq += (p - y) * (p - y);
            }
            Ok(Metrics { mae: Some(abs / n as f64), mse: Some(sq / n as f64), ..Metrics::default() })
        }
        (TaskKind::Classification, TaskTarget::Classification(labels)) => {
            if preds.shape()[1] != 2 {
                return Err(Error::dim("compute_metrics", format!("binary logits {:?}", preds.shape())));
            }
            let rows: Vec<&[f64]> = preds.data().chunks(2).collect();
            let hits = rows.iter().zip(labels).filter(|(r, &l)| usize::from(r[1] > r[0]) == l).count();
            let margins: Vec<f64> = rows.iter().map(|r| r[1] - r[0]).collect();
            let auc = auc(&margins, labels);
            Ok(Metrics {
                accuracy: Some(hits as f64 / n as f64),
                auc,
                auc_undefined: auc.is_none(),
                ..Metrics::default()
            })
        }
        _ => Err(Error::Contract(format!("{kind:?} metrics given mismatched targets"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_edge_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]), Some(1.0));
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]), Some(0.0));
        assert_eq!(auc(&[0.5; 4], &[0, 1, 0, 1]), Some(0.5));
        assert_eq!(auc(&[0.1, 0.2], &[1, 1]), None);
    }

    #[test]
    fn single_class_auc_is_flagged() {
        let preds = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let m = compute_metrics(TaskKind::Classification, &preds, &TaskTarget::Classification(vec![1, 1])).unwrap();
        assert_eq!(m.auc, None);
        assert!(m.auc_undefined);
        assert_eq!(m.accuracy, Some(0.5));
    }

    #[test]
    fn regression_metrics() {
        let preds = Tensor::new(vec![3, 1], vec![1.0, 2.0, 4.0]).unwrap();
        let t = TaskTarget::Regression(Tensor::new(vec![3, 1], vec![1.0, 3.0, 2.0]).unwrap());
        let m = compute_metrics(TaskKind::Regression, &preds, &t).unwrap();
        assert_eq!(m.mae, Some(1.0));
        assert_eq!(m.mse, Some(5.0 / 3.0));
        assert_eq!(m.auc, None);
    }

    #[test]
    fn rejects_mismatch() {
        let preds = Tensor::zeros(&[2, 1]);
        assert!(compute_metrics(TaskKind::Classification, &preds, &TaskTarget::Classification(vec![0, 1])).is_err());
        assert!(compute_metrics(TaskKind::Regression, &preds, &TaskTarget::Classification(vec![0, 1])).is_err());
    }
}
