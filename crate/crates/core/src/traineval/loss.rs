//! Identity classification plus batch-hard triplet loss under cosine distance.

use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::tensor::{Array, Tensor};

pub const DEFAULT_MARGIN: f64 = 0.3;

/// Offset that pushes masked-out pairs below every cosine distance in `[0, 2]`.
const MASK_OFFSET: f64 = 4.0;

/// Mean cross-entropy of `(N, K)` logits against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::shape(format!("logits {s:?} do not match {} labels", labels.len())));
    }
    let mut onehot = Array::zeros(IxDyn(&s));
    for (i, &y) in labels.iter().enumerate() {
        if y >= s[1] {
            return Err(Error::invalid(format!("label {y} outside {} classes", s[1])));
        }
        onehot[[i, y]] = 1.0;
    }
    Ok(logits.log_softmax(1)?.mul(&Tensor::new(onehot))?.sum().scale(-1.0 / s[0] as f64))
}

/// Pairwise cosine distances `1 − cos(f_i, f_j)` of `(N, D)` features.
pub fn cosine_distances(features: &Tensor) -> Result<Tensor> {
    let f = features.l2_normalize(1, 1e-12)?;
    Ok(f.matmul(&f.transpose(0, 1)?)?.neg().add_scalar(1.0))
}

/// Mean over anchors of `max(0, d(a, hardest positive) − d(a, hardest negative) + margin)`.
pub fn batch_hard_triplet(features: &Tensor, labels: &[usize], margin: f64) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(format!("features {s:?} do not match {} labels", labels.len())));
    }
    let n = labels.len();
    let mut ids = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::invalid("batch-hard triplet loss needs at least two identities"));
    }
    if let Some(id) = ids.iter().find(|&&id| labels.iter().filter(|&&l| l == id).count() < 2) {
        return Err(Error::invalid(format!("identity {id} has a single sample in the batch")));
    }
    let d = cosine_distances(features)?;
    let (mut not_pos, mut not_neg) = (Array::zeros(IxDyn(&[n, n])), Array::zeros(IxDyn(&[n, n])));
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                not_neg[[i, j]] = -MASK_OFFSET;
            } else {
                not_pos[[i, j]] = -MASK_OFFSET;
            }
        }
    }
    let hardest_pos = d.add(&Tensor::new(not_pos))?.max_axis(1, false)?;
    let hardest_neg = d.neg().add(&Tensor::new(not_neg))?.max_axis(1, false)?.neg();
    Ok(hardest_pos.sub(&hardest_neg)?.add_scalar(margin).relu().mean())
}

/// Loss value with its two terms for logging.
#[derive(Debug)]
pub struct LossParts {
    pub total: Tensor,
    pub cross_entropy: f64,
    pub triplet: f64,
}

/// Equally weighted sum of cross-entropy and batch-hard triplet loss.
pub fn loss(logits: &Tensor, features: &Tensor, labels: &[usize], margin: f64) -> Result<LossParts> {
    let ce = cross_entropy(logits, labels)?;
    let tri = batch_hard_triplet(features, labels, margin)?;
    let (cross_entropy, triplet) = (ce.item(), tri.item());
    Ok(LossParts { total: ce.add(&tri)?, cross_entropy, triplet })
}
