//! CMC and mean average precision for ranked retrieval.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// `cmc[k]` is the fraction of queries with a true match within the top `k + 1`.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Queries with at least one admissible true match.
    pub valid_queries: usize,
}

impl RetrievalResult {
    /// Rank-`k` match rate (1-based); ranks beyond the gallery saturate.
    pub fn rank(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            len => self.cmc[k.clamp(1, len) - 1],
        }
    }
}

/// Identity and camera of one query or gallery entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Label {
    pub person_id: usize,
    pub camera_id: usize,
}

/// Ranks every gallery entry by ascending distance (ties keep gallery
/// order). With `exclude_same_camera`, gallery entries sharing both identity
/// and camera with the query are dropped. Queries without any admissible
/// true match are skipped.
pub fn evaluate_distances(
    dist: ArrayView2<f64>,
    queries: &[Label],
    gallery: &[Label],
    exclude_same_camera: bool,
) -> Result<RetrievalResult> {
    let (nq, ng) = dist.dim();
    if nq != queries.len() || ng != gallery.len() {
        return Err(Error::shape(format!(
            "distance matrix {:?} does not match {} queries and {} gallery entries",
            dist.dim(),
            queries.len(),
            gallery.len()
        )));
    }
    if ng == 0 {
        return Err(Error::invalid("gallery is empty"));
    }
    if dist.iter().any(|d| d.is_nan()) {
        return Err(Error::invalid("distance matrix contains NaN"));
    }
    let mut cmc = vec![0.0; ng];
    let (mut ap_sum, mut valid) = (0.0, 0);
    for (qi, q) in queries.iter().enumerate() {
        let row = dist.row(qi);
        let mut order: Vec<usize> = (0..ng).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        let matches: Vec<bool> = order
            .into_iter()
            .filter(|&g| !(exclude_same_camera && gallery[g].person_id == q.person_id && gallery[g].camera_id == q.camera_id))
            .map(|g| gallery[g].person_id == q.person_id)
            .collect();
        let Some(first) = matches.iter().position(|&m| m) else { continue };
        valid += 1;
        for c in &mut cmc[first..] {
            *c += 1.0;
        }
        let (mut hits, mut precision_sum) = (0usize, 0.0);
        for (rank, _) in matches.iter().enumerate().filter(|(_, &m)| m) {
            hits += 1;
            precision_sum += hits as f64 / (rank + 1) as f64;
        }
        ap_sum += precision_sum / hits as f64;
    }
    if valid == 0 {
        return Err(Error::invalid("no query has an admissible true match in the gallery"));
    }
    cmc.iter_mut().for_each(|c| *c /= valid as f64);
    Ok(RetrievalResult { cmc, map: ap_sum / valid as f64, valid_queries: valid })
}

/// Cosine distances between rows of `(Q, D)` and `(G, D)` feature matrices.
pub fn cosine_distance_matrix(query: ArrayView2<f64>, gallery: ArrayView2<f64>) -> Result<Array2<f64>> {
    if query.ncols() != gallery.ncols() {
        return Err(Error::shape(format!(
            "query features have dimension {}, gallery features {}",
            query.ncols(),
            gallery.ncols()
        )));
    }
    let normalise = |m: ArrayView2<f64>| {
        let mut m = m.to_owned();
        for mut row in m.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row /= n;
        }
        m
    };
    let (q, g) = (normalise(query), normalise(gallery));
    Ok(q.dot(&g.t()).mapv(|c| 1.0 - c))
}
