use ap3d::apm::{Apm, ApmConfig};
use ap3d::layers::Named;
use ap3d::tensor::gradcheck::{check, random_array};
use ap3d::tensor::MacTally;
use ap3d::{Array, Tensor};
use ndarray::IxDyn;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain-loop evaluation of registration and gating for one `(C, H, W)` pair.
struct Naive {
    c: usize,
    p: usize,
    g: Vec<f64>,
    theta: Vec<f64>,
    phi: Vec<f64>,
    w: Vec<f64>,
    e: usize,
    s: f64,
    gate: bool,
}

impl Naive {
    fn from(apm: &Apm, p: usize) -> Naive {
        Naive {
            c: apm.channels(),
            e: apm.embed_channels(),
            p,
            g: apm.g.weight.to_vec(),
            theta: apm.theta.weight.to_vec(),
            phi: apm.phi.weight.to_vec(),
            w: apm.w.weight.to_vec(),
            s: apm.config.scale_s,
            gate: apm.config.use_contrastive_attention,
        }
    }

    fn at(map: &[f64], p: usize, ch: usize, i: usize) -> f64 {
        map[ch * p + i]
    }

    fn embed(&self, m: &[f64], map: &[f64], i: usize) -> Vec<f64> {
        (0..self.e).map(|o| (0..self.c).map(|ch| m[o * self.c + ch] * Self::at(map, self.p, ch, i)).sum()).collect()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        dot / (na * nb)
    }

    fn weights(&self, central: &[f64], adjacent: &[f64]) -> Vec<Vec<f64>> {
        (0..self.p)
            .map(|i| {
                let gi = self.embed(&self.g, central, i);
                let f: Vec<f64> =
                    (0..self.p).map(|j| self.s * Self::cosine(&gi, &self.embed(&self.g, adjacent, j))).collect();
                let denom: f64 = f.iter().map(|v| v.exp()).sum();
                f.iter().map(|v| v.exp() / denom).collect()
            })
            .collect()
    }

    fn forward(&self, central: &[f64], adjacent: &[f64]) -> Vec<f64> {
        let wts = self.weights(central, adjacent);
        let mut y = vec![0.0; self.c * self.p];
        for i in 0..self.p {
            for j in 0..self.p {
                for ch in 0..self.c {
                    y[ch * self.p + i] += wts[i][j] * Self::at(adjacent, self.p, ch, j);
                }
            }
        }
        if !self.gate {
            return y;
        }
        let mut z = y.clone();
        for i in 0..self.p {
            let tc = self.embed(&self.theta, central, i);
            let py = self.embed(&self.phi, &y, i);
            let logit: f64 = (0..self.e).map(|k| self.w[k] * tc[k] * py[k]).sum();
            let mask = 1.0 / (1.0 + (-logit).exp());
            for ch in 0..self.c {
                z[ch * self.p + i] *= mask;
            }
        }
        z
    }
}

fn randomize_w(apm: &Apm, rng: &mut ChaCha8Rng) {
    let shape = apm.w.weight.shape();
    *apm.w.weight.value_mut() = Array::from_shape_simple_fn(IxDyn(&shape), || rng.random_range(-2.0..2.0));
}

#[test]
fn forward_matches_naive_loops_on_twenty_fixtures() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gate = seed % 4 != 3;
        let cfg = ApmConfig { embed_divisor: 2, use_contrastive_attention: gate, ..ApmConfig::default() };
        let apm = Apm::new(4, cfg, &mut rng).unwrap();
        randomize_w(&apm, &mut rng);
        let central = Tensor::uniform(&[4, 6, 8], -1.0, 1.0, &mut rng);
        let adjacent = Tensor::uniform(&[4, 6, 8], -1.0, 1.0, &mut rng);
        let z = apm.forward_map(&central, &adjacent).unwrap().to_vec();
        let oracle = Naive::from(&apm, 48).forward(&central.to_vec(), &adjacent.to_vec());
        let diff = z.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "seed {seed}: max diff {diff}");
    }
}

#[test]
fn affinity_matches_scalar_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let apm = Apm::new(5, ApmConfig { embed_divisor: 2, ..ApmConfig::default() }, &mut rng).unwrap();
        let c = Tensor::uniform(&[5, 1, 1], -1.0, 1.0, &mut rng);
        let x = Tensor::uniform(&[5, 1, 1], -1.0, 1.0, &mut rng);
        let naive = Naive::from(&apm, 1);
        let expected = 4.0 * Naive::cosine(&naive.embed(&naive.g, &c.to_vec(), 0), &naive.embed(&naive.g, &x.to_vec(), 0));
        assert!((apm.affinity(&c, &x).unwrap().item() - expected).abs() < 1e-7);
    }
}

#[test]
fn gate_matches_per_pixel_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let apm = Apm::new(8, ApmConfig { embed_divisor: 4, ..ApmConfig::default() }, &mut rng).unwrap();
    randomize_w(&apm, &mut rng);
    let c = Tensor::uniform(&[8, 3, 5], -1.0, 1.0, &mut rng);
    let y = Tensor::uniform(&[8, 3, 5], -1.0, 1.0, &mut rng);
    let mask = apm.contrastive_attention(&c, &y).unwrap().to_vec();
    let naive = Naive::from(&apm, 15);
    for (i, m) in mask.iter().enumerate() {
        let tc = naive.embed(&naive.theta, &c.to_vec(), i);
        let py = naive.embed(&naive.phi, &y.to_vec(), i);
        let logit: f64 = (0..naive.e).map(|k| naive.w[k] * tc[k] * py[k]).sum();
        assert!((m - 1.0 / (1.0 + (-logit).exp())).abs() < 1e-7);
        assert!(*m > 0.0 && *m < 1.0);
    }
}

#[test]
fn gate_saturates_for_large_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let apm = Apm::new(4, ApmConfig { embed_divisor: 4, ..ApmConfig::default() }, &mut rng).unwrap();
    // θ = φ = identity on channel 0, so θ(c) ⊙ φ(y) = c₀·y₀ > 0 here
    let mut sel = Array::zeros(IxDyn(&[1, 4, 1, 1, 1]));
    sel[[0, 0, 0, 0, 0]] = 1.0;
    *apm.theta.weight.value_mut() = sel.clone();
    *apm.phi.weight.value_mut() = sel;
    apm.w.weight.value_mut().fill(1e4);
    let c = Tensor::ones(&[4, 2, 2]);
    let mask = apm.contrastive_attention(&c, &c).unwrap();
    assert!(mask.to_vec().iter().all(|&m| m > 1.0 - 1e-12));
}

/// `(C, H·W)` features whose pairwise cosines are all below `max_cos`.
fn distinct_features(c: usize, p: usize, max_cos: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut feats: Vec<Vec<f64>> = Vec::new();
    while feats.len() < p {
        let v: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        if feats.iter().all(|f| Naive::cosine(f, &v) < max_cos) {
            feats.push(v);
        }
    }
    feats
}

fn to_map(feats: &[Vec<f64>], c: usize, h: usize, w: usize) -> Tensor {
    let p = h * w;
    let mut data = vec![0.0; c * p];
    for (i, f) in feats.iter().enumerate() {
        for ch in 0..c {
            data[ch * p + i] = f[ch];
        }
    }
    Tensor::from_vec(&[c, h, w], data).unwrap()
}

fn identity_apm(c: usize, s: f64, gate: bool) -> Apm {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = ApmConfig { scale_s: s, embed_divisor: 1, use_contrastive_attention: gate, ..ApmConfig::default() };
    let apm = Apm::new(c, cfg, &mut rng).unwrap();
    let mut eye = Array::zeros(IxDyn(&[c, c, 1, 1, 1]));
    for i in 0..c {
        eye[[i, i, 0, 0, 0]] = 1.0;
    }
    *apm.g.weight.value_mut() = eye;
    apm
}

#[test]
fn registration_undoes_spatial_permutation() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (c, h, w) = (8, 3, 4);
        let feats = distinct_features(c, h * w, 0.7, &mut rng);
        let mut perm: Vec<usize> = (0..h * w).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&k| feats[k].clone()).collect();
        let central = to_map(&feats, c, h, w);
        let adjacent = to_map(&permuted, c, h, w);
        let apm = identity_apm(c, 50.0, false);
        let y = apm.reconstruct(&central, &adjacent).unwrap();
        let err = y.to_vec().iter().zip(central.to_vec()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn identical_maps_reconstruct_themselves_at_large_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let feats = distinct_features(6, 12, 0.7, &mut rng);
    let m = to_map(&feats, 6, 3, 4);
    let apm = identity_apm(6, 50.0, false);
    let y = apm.reconstruct(&m, &m).unwrap();
    let err = y.to_vec().iter().zip(m.to_vec()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-3);
    let heat = apm.similarity_heatmap(&m, &m, (1, 2)).unwrap().to_vec();
    assert!(heat[6] > 1.0 - 1e-3);
}

#[test]
fn tiny_scale_gives_uniform_heatmap() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let apm = Apm::new(4, ApmConfig { scale_s: 1e-9, embed_divisor: 2, ..ApmConfig::default() }, &mut rng).unwrap();
    let c = Tensor::uniform(&[4, 3, 5], -1.0, 1.0, &mut rng);
    let x = Tensor::uniform(&[4, 3, 5], -1.0, 1.0, &mut rng);
    let heat = apm.similarity_heatmap(&c, &x, (2, 4)).unwrap();
    assert!(heat.to_vec().iter().all(|v| (v - 1.0 / 15.0).abs() < 1e-8));
}

fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

#[test]
fn row_entropy_non_increasing_in_scale() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut apm = Apm::new(8, ApmConfig { embed_divisor: 2, ..ApmConfig::default() }, &mut rng).unwrap();
        let c = Tensor::uniform(&[8, 3, 3], -1.0, 1.0, &mut rng);
        let x = Tensor::uniform(&[8, 3, 3], -1.0, 1.0, &mut rng);
        let mut previous: Option<Vec<f64>> = None;
        for s in [1.0, 2.0, 4.0, 8.0] {
            apm.config.scale_s = s;
            let ent: Vec<f64> = (0..9)
                .map(|q| entropy(&apm.similarity_heatmap(&c, &x, (q / 3, q % 3)).unwrap().to_vec()))
                .collect();
            if let Some(prev) = &previous {
                for (a, b) in ent.iter().zip(prev) {
                    assert!(*a <= b + 1e-12, "seed {seed}, s {s}: entropy rose from {b} to {a}");
                }
            }
            previous = Some(ent);
        }
    }
}

#[test]
fn affinity_bounded_and_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let apm = Apm::new(6, ApmConfig { scale_s: 3.0, embed_divisor: 2, ..ApmConfig::default() }, &mut rng).unwrap();
    let c = Tensor::uniform(&[6, 2, 3], -1.0, 1.0, &mut rng);
    let x = Tensor::uniform(&[6, 2, 3], -1.0, 1.0, &mut rng);
    let a = apm.affinity(&c, &x).unwrap().to_vec();
    assert!(a.iter().all(|v| v.abs() <= 3.0 + 1e-12));
    let b = apm.affinity(&c.scale(7.5), &x.scale(0.02)).unwrap().to_vec();
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn registration_rows_sum_to_one(seed in any::<u64>(), s in 0.1f64..60.0, h in 1usize..4, w in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let apm = Apm::new(4, ApmConfig { scale_s: s, embed_divisor: 2, ..ApmConfig::default() }, &mut rng).unwrap();
        let c = Tensor::uniform(&[4, h, w], -1.0, 1.0, &mut rng);
        let x = Tensor::uniform(&[4, h, w], -1.0, 1.0, &mut rng);
        for q in 0..h * w {
            let row = apm.similarity_heatmap(&c, &x, (q / w, q % w)).unwrap().to_vec();
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

fn apm_leaves(apm: &Apm) -> Vec<Named> {
    let mut v = Vec::new();
    apm.collect("apm", &mut v);
    v
}

#[test]
fn parameter_names_and_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let apm = Apm::new(64, ApmConfig::default(), &mut rng).unwrap();
    let names: Vec<String> = apm_leaves(&apm).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["apm.g.weight", "apm.theta.weight", "apm.phi.weight", "apm.w.weight"]);
    let total: usize = apm_leaves(&apm).iter().map(|(_, t)| t.len()).sum();
    assert_eq!(total, 3 * 64 * 4 + 4);
    assert_eq!(apm.num_params(), total);
}

#[test]
fn gradients_match_finite_differences() {
    for gate in [true, false] {
        for seed in 0..2u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = ApmConfig { embed_divisor: 2, use_contrastive_attention: gate, ..ApmConfig::default() };
            let apm = Apm::new(4, cfg, &mut rng).unwrap();
            randomize_w(&apm, &mut rng);
            let x = Tensor::param(random_array(&[1, 4, 3, 3, 2], &mut rng));
            let mut leaves: Vec<Tensor> = apm_leaves(&apm).into_iter().map(|(_, t)| t).collect();
            if !gate {
                leaves.truncate(1);
            }
            leaves.push(x.clone());
            let report = check(
                "apm",
                &leaves,
                || Tensor::concat(&apm.align_neighbors(&x, &[-1, 1])?, 1),
                seed,
                usize::MAX,
            )
            .unwrap();
            assert!(report.pass, "gate {gate} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn neighbor_alignment_equals_explicit_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let apm = Apm::new(4, ApmConfig { embed_divisor: 2, ..ApmConfig::default() }, &mut rng).unwrap();
    randomize_w(&apm, &mut rng);
    let x = Tensor::uniform(&[2, 4, 3, 2, 3], -1.0, 1.0, &mut rng);
    let aligned = apm.align_neighbors(&x, &[-1, 1]).unwrap();
    for (k, off) in [-1isize, 1].into_iter().enumerate() {
        let explicit = apm.forward_pair(&x, &x.shift_zeros(2, off).unwrap()).unwrap().output;
        assert_eq!(aligned[k].to_vec(), explicit.to_vec());
    }
    // first frame has no left neighbour, last frame no right neighbour
    let left = aligned[0].slice(2, 0, 1).unwrap();
    let right = aligned[1].slice(2, 2, 3).unwrap();
    assert!(left.to_vec().iter().chain(right.to_vec().iter()).all(|&v| v == 0.0));
}

#[test]
fn analytic_macs_match_instrumented_kernels() {
    for gate in [true, false] {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cfg = ApmConfig { use_contrastive_attention: gate, embed_divisor: 4, ..ApmConfig::default() };
        let apm = Apm::new(8, cfg, &mut rng).unwrap();
        let x = Tensor::uniform(&[2, 8, 3, 4, 5], -1.0, 1.0, &mut rng);
        MacTally::reset();
        apm.align_neighbors(&x, &[-1, 1]).unwrap();
        let tally = MacTally::read();
        let analytic = apm.macs(&x.shape(), 2).unwrap();
        assert_eq!((tally.layer, tally.attention), (analytic.layer, analytic.attention));
    }
}

#[test]
fn cost_is_linear_in_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let apm = Apm::new(256, ApmConfig::default(), &mut rng).unwrap();
    let per_frame: Vec<f64> = [2usize, 4, 8, 16]
        .iter()
        .map(|&t| apm.macs(&[1, 256, t, 16, 8], 2).unwrap().total() as f64 / t as f64)
        .collect();
    for v in &per_frame {
        assert!((v / per_frame[0] - 1.0).abs() < 0.01);
    }
}

#[test]
fn recording_captures_the_aligned_clip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let apm = Apm::new(4, ApmConfig { embed_divisor: 2, ..ApmConfig::default() }, &mut rng).unwrap();
    let x = Tensor::uniform(&[1, 4, 3, 2, 2], -1.0, 1.0, &mut rng);
    apm.align_neighbors(&x, &[-1, 1]).unwrap();
    assert!(apm.recorded_input().is_none());
    apm.set_recording(true);
    apm.align_neighbors(&x, &[-1, 1]).unwrap();
    assert_eq!(apm.recorded_input().unwrap(), x.to_array());
    apm.set_recording(false);
    assert!(apm.recorded_input().is_none());
}

#[test]
fn rescaled_copy_changes_only_the_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let apm = Apm::new(4, ApmConfig { embed_divisor: 2, ..ApmConfig::default() }, &mut rng).unwrap();
    randomize_w(&apm, &mut rng);
    let c = Tensor::uniform(&[4, 3, 2], -1.0, 1.0, &mut rng);
    let a = Tensor::uniform(&[4, 3, 2], -1.0, 1.0, &mut rng);
    let same = apm.with_scale(apm.config.scale_s).unwrap();
    assert_eq!(same.forward_map(&c, &a).unwrap().to_vec(), apm.forward_map(&c, &a).unwrap().to_vec());
    let sharp = apm.with_scale(8.0).unwrap();
    assert_eq!(sharp.config.scale_s, 8.0);
    let doubled = apm.affinity(&c, &a).unwrap().scale(2.0).to_vec();
    for (x, y) in sharp.affinity(&c, &a).unwrap().to_vec().iter().zip(doubled) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(apm.with_scale(0.0).is_err());
}
