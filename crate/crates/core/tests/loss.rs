use ap3d::tensor::gradcheck::{check, random_array};
use ap3d::traineval::loss::*;
use ap3d::traineval::optim::{Adam, StepSchedule};
use ap3d::traineval::TrainConfig;
use ap3d::{Array, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, data).unwrap()
}

/// Plain-loop batch-hard triplet loss under cosine distance.
fn triplet_oracle(f: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let n = f.len();
    let mut total = 0.0;
    for i in 0..n {
        let (mut pos, mut neg) = (f64::NEG_INFINITY, f64::INFINITY);
        for j in 0..n {
            let d = 1.0 - cos(&f[i], &f[j]);
            if labels[j] == labels[i] {
                pos = pos.max(d);
            } else {
                neg = neg.min(d);
            }
        }
        total += (pos - neg + margin).max(0.0);
    }
    total / n as f64
}

fn ce_oracle(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum::<f64>()
        / labels.len() as f64
}

fn rows(a: &Array) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.iter().copied().collect()).collect()
}

#[test]
fn identical_features_cost_the_margin() {
    let f = tensor(&[4, 3], [1.0, 2.0, 3.0].repeat(4));
    let v = batch_hard_triplet(&f, &[0, 0, 1, 1], 0.3).unwrap().item();
    assert!((v - 0.3).abs() < 1e-12, "{v}");
}

#[test]
fn orthogonal_clusters_cost_nothing() {
    let f = tensor(&[4, 2], vec![1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 3.0]);
    let v = batch_hard_triplet(&f, &[0, 0, 1, 1], 0.3).unwrap().item();
    assert!(v.abs() < 1e-12, "{v}");
}

#[test]
fn uniform_logits_give_log_k() {
    for k in [2usize, 5, 16] {
        let logits = tensor(&[3, k], vec![0.7; 3 * k]);
        let v = cross_entropy(&logits, &[0, 1, k - 1]).unwrap().item();
        assert!((v - (k as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn terms_match_plain_loop_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let labels = [0, 0, 1, 1, 2, 2, 2, 1];
    for _ in 0..10 {
        let f = random_array(&[8, 5], &mut rng);
        let l = random_array(&[8, 3], &mut rng);
        let parts = loss(&Tensor::new(l.clone()), &Tensor::new(f.clone()), &labels, 0.3).unwrap();
        let (ce, tri) = (ce_oracle(&rows(&l), &labels), triplet_oracle(&rows(&f), &labels, 0.3));
        assert!((parts.cross_entropy - ce).abs() < 1e-12);
        assert!((parts.triplet - tri).abs() < 1e-12);
        assert!((parts.total.item() - ce - tri).abs() < 1e-12);
    }
}

#[test]
fn degenerate_batches_are_rejected() {
    let f = tensor(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    assert!(batch_hard_triplet(&f, &[4, 4, 4], 0.3).is_err());
    assert!(batch_hard_triplet(&f, &[0, 0, 1], 0.3).is_err());
    assert!(batch_hard_triplet(&f, &[0, 0], 0.3).is_err());
    assert!(cross_entropy(&f, &[0, 1, 2]).is_err());
}

#[test]
fn loss_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = Tensor::param(random_array(&[6, 4], &mut rng));
    let l = Tensor::param(random_array(&[6, 3], &mut rng));
    let labels = [0, 1, 2, 0, 1, 2];
    let r = check("loss", &[f.clone(), l.clone()], || Ok(loss(&l, &f, &labels, 0.3)?.total), 4, 24).unwrap();
    assert!(r.pass, "{r:?}");
}

proptest! {
    #[test]
    fn triplet_ignores_positive_rescaling(seed in 0u64..500, scales in prop::collection::vec(0.01f64..100.0, 6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_array(&[6, 4], &mut rng);
        let labels = [0, 0, 1, 1, 2, 2];
        let base = batch_hard_triplet(&Tensor::new(f.clone()), &labels, 0.3).unwrap().item();
        let mut g = f.clone();
        for (mut row, s) in g.outer_iter_mut().zip(&scales) {
            row *= *s;
        }
        let scaled = batch_hard_triplet(&Tensor::new(g), &labels, 0.3).unwrap().item();
        prop_assert!((base - scaled).abs() < 1e-9, "{} vs {}", base, scaled);
    }
}

#[test]
fn first_adam_step_moves_by_the_learning_rate() {
    // With zero moments the bias-corrected first update is g / (|g| + eps).
    let p = Tensor::param(Array::from_shape_vec(ndarray::IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap());
    p.mul(&tensor(&[3], vec![2.0, -0.5, 0.0])).unwrap().sum().backward().unwrap();
    let mut adam = Adam::new(0.0);
    adam.step(&[("p".into(), p.clone())], 0.1).unwrap();
    let v = p.to_vec();
    let expected = [1.0 - 0.1 * 2.0 / (2.0 + 1e-8), -2.0 + 0.1 * 0.5 / (0.5 + 1e-8), 0.5];
    for (a, b) in v.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn weight_decay_is_added_to_the_gradient() {
    let p = Tensor::param(Array::from_elem(ndarray::IxDyn(&[2]), 4.0));
    let mut adam = Adam::new(5e-4);
    adam.step(&[("p".into(), p.clone())], 0.01).unwrap();
    let g = 5e-4 * 4.0;
    let expected = 4.0 - 0.01 * g / (g + 1e-8);
    assert!(p.to_vec().iter().all(|v| (v - expected).abs() < 1e-15));
}

#[test]
fn adam_matches_recurrence_over_several_steps() {
    let p = Tensor::param(Array::from_elem(ndarray::IxDyn(&[1]), 0.3));
    let mut adam = Adam::new(0.01);
    let (mut w, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
    for t in 1..=5 {
        p.zero_grad();
        p.mul(&p).unwrap().sum().backward().unwrap();
        adam.step(&[("p".into(), p.clone())], 0.05).unwrap();
        let g = 2.0 * w + 0.01 * w;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        w -= 0.05 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        assert!((p.item() - w).abs() < 1e-14, "step {t}");
    }
}

#[test]
fn full_schedule_steps_every_sixty_epochs() {
    let s = TrainConfig::full().schedule();
    for e in 0..60 {
        assert_eq!(s.lr_at(e), 3e-4);
    }
    for e in 60..120 {
        assert!((s.lr_at(e) - 3e-5).abs() < 1e-18);
    }
    assert!((s.lr_at(239) - 3e-7).abs() < 1e-20);
    let desk = StepSchedule { base_lr: 1.0, gamma: 0.1, step_size: 10 };
    assert_eq!(desk.lr_at(9), 1.0);
    assert!((desk.lr_at(10) - 0.1).abs() < 1e-15);
}
