use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Two-component PCA of a set of embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// Coordinates of each row on the two leading components.
    pub coords: Vec<[f64; 2]>,
    /// Unit component vectors, leading first.
    pub components: [Vec<f64>; 2],
    /// Fraction of total variance on each component.
    pub explained_variance_ratio: [f64; 2],
    pub labels: Vec<usize>,
}

/// Mean-centred PCA by exact eigendecomposition of the covariance matrix.
/// Each component is signed so that its largest-magnitude loading is
/// positive.
pub fn project_embeddings(emb: &Tensor, labels: &[usize]) -> Result<Projection> {
    if emb.rank() != 2 {
        return Err(Error::dim("project_embeddings", format!("expected [M, F], got {:?}", emb.shape())));
    }
    let (m, f) = (emb.shape()[0], emb.shape()[1]);
    if m < 3 || f < 2 {
        return Err(Error::domain("project_embeddings", format!("need M >= 3 and F >= 2, got [{m}, {f}]")));
    }
    if labels.len() != m {
        return Err(Error::dim("project_embeddings", format!("{} labels for {m} rows", labels.len())));
    }
    let x = DMatrix::from_row_slice(m, f, emb.data());
    let mean = x.row_mean();
    let mut centred = x.clone();
    for mut row in centred.row_iter_mut() {
        row -= &mean;
    }
    let cov = centred.transpose() * &centred / (m as f64 - 1.0);
    let total = cov.trace();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::domain("project_embeddings", "zero-variance input"));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut ratios = [0.0; 2];
    for (k, &idx) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components[k] = v;
        ratios[k] = eig.eigenvalues[idx].max(0.0) / total;
    }
    let project = |row: &[f64], c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
    let coords = centred
        .row_iter()
        .map(|row| {
            let row: Vec<f64> = row.iter().copied().collect();
            [project(&row, &components[0]), project(&row, &components[1])]
        })
        .collect();
    Ok(Projection { coords, components, explained_variance_ratio: ratios, labels: labels.to_vec() })
}
