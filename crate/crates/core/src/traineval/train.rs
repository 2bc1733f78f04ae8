//! PK-sampled training and tracklet-level retrieval evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{batch, sample_clip, Dataset, TrackletSample};
use super::loss::{loss, DEFAULT_MARGIN};
use super::metrics::{cosine_distance_matrix, evaluate_distances, Label, RetrievalResult};
use super::optim::{Adam, StepSchedule};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub clip_len: usize,
    pub frame_stride: usize,
    pub persons_per_batch: usize,
    pub clips_per_person: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub margin: f64,
    /// Batches per epoch; `None` means one pass over the identities.
    pub batches_per_epoch: Option<usize>,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig::full()
    }
}

impl TrainConfig {
    /// 240 epochs, learning rate 3e-4 decayed tenfold every 60 epochs.
    pub fn full() -> TrainConfig {
        TrainConfig {
            clip_len: 4,
            frame_stride: 8,
            persons_per_batch: 8,
            clips_per_person: 4,
            lr: 3e-4,
            lr_decay: 0.1,
            decay_every: 60,
            epochs: 240,
            weight_decay: 5e-4,
            margin: DEFAULT_MARGIN,
            batches_per_epoch: None,
            flip_prob: 0.5,
            seed: 0,
        }
    }

    /// 30 epochs decayed every 10, sized for tiny models on CPU.
    pub fn desk() -> TrainConfig {
        TrainConfig { epochs: 30, decay_every: 10, lr: 1e-3, batches_per_epoch: Some(6), ..TrainConfig::full() }
    }

    pub fn batch_size(&self) -> usize {
        self.persons_per_batch * self.clips_per_person
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule { base_lr: self.lr, gamma: self.lr_decay, step_size: self.decay_every }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 || self.frame_stride == 0 || self.decay_every == 0 {
            return Err(Error::config("clip_len, frame_stride and decay_every must be positive"));
        }
        if self.persons_per_batch < 2 || self.clips_per_person < 2 {
            return Err(Error::config("batches need at least two persons with two clips each"));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::config("batches_per_epoch must be positive"));
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0 && self.weight_decay >= 0.0 && self.margin >= 0.0) {
            return Err(Error::config("learning rate, decay, weight decay and margin must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cross_entropy: f64,
    pub triplet: f64,
    /// Training-batch classification accuracy.
    pub accuracy: f64,
    pub rank1: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Parameters whose gradient was never nonzero during training.
    pub frozen: Vec<String>,
    pub steps: u64,
}

/// Optional per-epoch validation on a held-out set.
pub struct Validation<'a> {
    pub query: &'a Dataset,
    pub gallery: &'a Dataset,
    pub clip_len: usize,
    pub every: usize,
}

/// Trains `model` in place with PK batches, horizontal flips and a step
/// schedule. Each epoch is written as one JSON line to `log` when given.
pub fn train(
    model: &Model,
    data: &Dataset,
    cfg: &TrainConfig,
    validation: Option<&Validation>,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut by_id: BTreeMap<usize, Vec<&TrackletSample>> = BTreeMap::new();
    for t in &data.tracklets {
        t.validate()?;
        by_id.entry(t.person_id).or_default().push(t);
    }
    let ids: Vec<usize> = by_id.keys().copied().collect();
    if ids.len() != model.spec.num_classes {
        return Err(Error::config(format!(
            "model has {} classes but the training set has {} identities",
            model.spec.num_classes,
            ids.len()
        )));
    }
    if ids.len() < cfg.persons_per_batch {
        return Err(Error::config(format!(
            "{} persons per batch requested but only {} identities available",
            cfg.persons_per_batch,
            ids.len()
        )));
    }
    let class_of: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(c, &id)| (id, c)).collect();
    let batches = cfg.batches_per_epoch.unwrap_or(ids.len() / cfg.persons_per_batch);
    let params = model.parameters();
    let mut touched = vec![false; params.len()];
    let mut optimizer = Adam::new(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = ids.clone();
    let mut cursor = order.len();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.schedule().lr_at(epoch);
        let (mut sum_loss, mut sum_ce, mut sum_tri, mut correct, mut seen) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for _ in 0..batches {
            let mut clips = Vec::with_capacity(cfg.batch_size());
            let mut labels = Vec::with_capacity(cfg.batch_size());
            for _ in 0..cfg.persons_per_batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let id = order[cursor];
                cursor += 1;
                let own = &by_id[&id];
                let mut picks: Vec<usize> = (0..own.len()).collect();
                picks.shuffle(&mut rng);
                for k in 0..cfg.clips_per_person {
                    let t = if k < picks.len() { own[picks[k]] } else { own[rng.random_range(0..own.len())] };
                    let idx = sample_clip(t.len(), cfg.clip_len, cfg.frame_stride, &mut rng)?;
                    clips.push(t.clip(&idx, rng.random_bool(cfg.flip_prob))?);
                    labels.push(class_of[&id]);
                }
            }
            let x = batch(&clips)?;
            model.zero_grad();
            let out = model.forward(&x, true)?;
            let logits = out.logits.as_ref().ok_or_else(|| Error::config("training needs a classifier"))?;
            let parts = loss(logits, &out.feature, &labels, cfg.margin)?;
            parts.total.backward()?;
            for ((_, p), flag) in params.iter().zip(&mut touched) {
                if !*flag {
                    *flag = p.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0));
                }
            }
            optimizer.step(&params, lr)?;
            let total = parts.total.item();
            if !total.is_finite() {
                return Err(Error::invalid(format!("loss diverged at epoch {epoch}")));
            }
            sum_loss += total;
            sum_ce += parts.cross_entropy;
            sum_tri += parts.triplet;
            let l = logits.value();
            for (i, &y) in labels.iter().enumerate() {
                let row = l.index_axis(ndarray::Axis(0), i);
                let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
                correct += usize::from(best == y);
            }
            seen += labels.len();
        }
        let rank1 = match validation {
            Some(v) if v.every > 0 && ((epoch + 1) % v.every == 0 || epoch + 1 == cfg.epochs) => {
                Some(evaluate(model, v.query, v.gallery, v.clip_len, true)?.rank(1))
            }
            _ => None,
        };
        let n = batches.max(1) as f64;
        let entry = EpochLog {
            epoch,
            lr,
            loss: sum_loss / n,
            cross_entropy: sum_ce / n,
            triplet: sum_tri / n,
            accuracy: correct as f64 / seen.max(1) as f64,
            rank1,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&entry)?)?;
        }
        epochs.push(entry);
    }
    model.zero_grad();
    let frozen = params.iter().zip(&touched).filter(|(_, &t)| !t).map(|((n, _), _)| n.clone()).collect();
    Ok(TrainReport { epochs, frozen, steps: optimizer.steps() })
}

/// Consecutive chunks of at most `clip_len` frames covering the tracklet.
pub fn test_chunks(len: usize, clip_len: usize) -> Vec<Vec<usize>> {
    (0..len).step_by(clip_len.max(1)).map(|s| (s..(s + clip_len).min(len)).collect()).collect()
}

/// Largest number of clips extracted in one forward pass.
const EVAL_BATCH: usize = 8;

/// Tracklet features: the mean of eval-mode features over all test chunks.
pub fn tracklet_features(model: &Model, data: &Dataset, clip_len: usize) -> Result<Array2<f64>> {
    if clip_len == 0 {
        return Err(Error::invalid("test clip length must be positive"));
    }
    let dim = model.spec.feature_dim;
    let mut out = Array2::zeros((data.tracklets.len(), dim));
    // Chunks grouped by length so each forward pass sees equally long clips.
    let mut groups: BTreeMap<usize, Vec<(usize, Array)>> = BTreeMap::new();
    for (i, t) in data.tracklets.iter().enumerate() {
        for chunk in test_chunks(t.len(), clip_len) {
            groups.entry(chunk.len()).or_default().push((i, t.clip(&chunk, false)?));
        }
    }
    let mut counts = vec![0usize; data.tracklets.len()];
    for items in groups.values() {
        for part in items.chunks(EVAL_BATCH) {
            let clips: Vec<Array> = part.iter().map(|(_, c)| c.clone()).collect();
            let feats = model.extract_features(&batch(&clips)?)?;
            if feats.shape() != [part.len(), dim] {
                return Err(Error::shape(format!("feature batch {:?} does not have dimension {dim}", feats.shape())));
            }
            for (row, (i, _)) in part.iter().enumerate() {
                for d in 0..dim {
                    out[[*i, d]] += feats[[row, d]];
                }
                counts[*i] += 1;
            }
        }
    }
    for (mut row, &c) in out.rows_mut().into_iter().zip(&counts) {
        row /= c.max(1) as f64;
    }
    Ok(out)
}

pub fn labels(data: &Dataset) -> Vec<Label> {
    data.tracklets.iter().map(|t| Label { person_id: t.person_id, camera_id: t.camera_id }).collect()
}

/// Ranks `gallery` tracklets for every `query` tracklet by cosine distance of
/// averaged clip features.
pub fn evaluate(
    model: &Model,
    query: &Dataset,
    gallery: &Dataset,
    clip_len: usize,
    exclude_same_camera: bool,
) -> Result<RetrievalResult> {
    if gallery.tracklets.is_empty() {
        return Err(Error::invalid("gallery is empty"));
    }
    let qf = tracklet_features(model, query, clip_len)?;
    let gf = tracklet_features(model, gallery, clip_len)?;
    let dist = cosine_distance_matrix(qf.view(), gf.view())?;
    evaluate_distances(dist.view(), &labels(query), &labels(gallery), exclude_same_camera)
}
