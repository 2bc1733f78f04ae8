use ap3d::blocks::BlockKind;
use ap3d::checkpoint;
use ap3d::network::{Depth, Model, NetworkSpec, Replacement, ReplacementPolicy};
use ap3d::tensor::gradcheck::{check, random_array};
use ap3d::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Closed-form parameter count of a depth-50 backbone (no neck, no classifier)
/// where the blocks listed in `replaced` (stage, block) use `kind`.
fn resnet50_params(kind: BlockKind, replaced: &[(usize, usize)]) -> usize {
    let bn = |c: usize| 2 * c;
    let mut total = 3 * 64 * 49 + bn(64);
    let mut in_c = 64;
    for (s, &n) in [3usize, 4, 6, 3].iter().enumerate() {
        let mid = 64 << s;
        let out = 4 * mid;
        for b in 0..n {
            let k = if replaced.contains(&(s + 1, b)) { kind } else { BlockKind::C2d };
            let e = (mid / 16).max(1);
            let apm = 3 * mid * e + e;
            let core = match k {
                BlockKind::C2d | BlockKind::Nl2d => 9 * mid * mid,
                BlockKind::I3d => 27 * mid * mid,
                BlockKind::ApI3d => 27 * mid * mid + apm,
                BlockKind::P3dA | BlockKind::P3dB | BlockKind::P3dC => 9 * mid * mid + bn(mid) + 3 * mid * mid,
                BlockKind::ApP3dA | BlockKind::ApP3dB | BlockKind::ApP3dC => {
                    9 * mid * mid + bn(mid) + 3 * mid * mid + apm
                }
            };
            total += in_c * mid + bn(mid) + core + bn(mid) + mid * out + bn(out);
            if b == 0 {
                total += in_c * out + bn(out);
            }
            if k == BlockKind::Nl2d {
                let h = out / 2;
                total += 3 * (out * h + h) + (h * out + out) + bn(out);
            }
            in_c = out;
        }
    }
    total
}

const PER2: [(usize, usize); 5] = [(2, 0), (2, 2), (3, 0), (3, 2), (3, 4)];

fn millions(n: usize) -> String {
    format!("{:.2}", n as f64 / 1e6)
}

fn r50(kind: BlockKind) -> Model {
    let spec = NetworkSpec::from_arch(&format!("resnet50-{}", kind.name()), ReplacementPolicy::Per2Stage23, 0);
    let spec = if kind == BlockKind::Nl2d {
        NetworkSpec::from_arch("resnet50-nl", ReplacementPolicy::Per2Stage23, 0)
    } else {
        spec
    };
    Model::new(spec.unwrap(), 0).unwrap()
}

#[test]
fn depth50_parameter_counts_match_closed_form_and_table() {
    let cases = [
        (BlockKind::C2d, "23.51"),
        (BlockKind::I3d, "27.64"),
        (BlockKind::ApI3d, "27.68"),
        (BlockKind::P3dA, "24.20"),
        (BlockKind::P3dB, "24.20"),
        (BlockKind::P3dC, "24.20"),
        (BlockKind::ApP3dA, "24.24"),
        (BlockKind::ApP3dB, "24.24"),
        (BlockKind::ApP3dC, "24.24"),
    ];
    for (kind, table) in cases {
        let model = r50(kind);
        let replaced: &[(usize, usize)] = if kind == BlockKind::C2d { &[] } else { &PER2 };
        assert_eq!(model.num_params(), resnet50_params(kind, replaced), "{kind}");
        assert_eq!(millions(model.num_params()), table, "{kind}");
    }
    assert_eq!(r50(BlockKind::C2d).num_params(), 23_508_032);
    assert_eq!(r50(BlockKind::Nl2d).num_params(), resnet50_params(BlockKind::Nl2d, &PER2));
}

#[test]
fn policies_replace_the_documented_blocks() {
    let blocks = [3, 4, 6, 3];
    let count = |p: ReplacementPolicy| -> usize {
        p.replacements(&blocks, BlockKind::ApP3dC).unwrap().iter().map(|r| r.blocks.len()).sum()
    };
    assert_eq!(count(ReplacementPolicy::None), 0);
    assert_eq!(count(ReplacementPolicy::OneBlock { stage: 3 }), 1);
    assert_eq!(count(ReplacementPolicy::TwoBlocksStage23), 2);
    assert_eq!(count(ReplacementPolicy::Per2Stage23), 5);
    assert_eq!(count(ReplacementPolicy::AllStage23), 10);
    let one = ReplacementPolicy::OneBlock { stage: 3 }.replacements(&blocks, BlockKind::ApI3d).unwrap();
    assert_eq!(one, vec![Replacement { stage: 3, blocks: vec![4], kind: BlockKind::ApI3d }]);
    assert!(ReplacementPolicy::OneBlock { stage: 5 }.replacements(&blocks, BlockKind::ApI3d).is_err());
    for p in ["none", "one-block:2", "per2-stage23", "two_blocks_stage23", "all-stage23"] {
        let parsed: ReplacementPolicy = p.parse().unwrap();
        assert_eq!(parsed.to_string().parse::<ReplacementPolicy>().unwrap(), parsed);
    }
    assert!("half".parse::<ReplacementPolicy>().is_err());
}

#[test]
fn invalid_replacements_are_rejected() {
    let mut spec = NetworkSpec::preset(Depth::R50, 0);
    spec.replacement = vec![Replacement { stage: 2, blocks: vec![4], kind: BlockKind::ApI3d }];
    assert!(Model::new(spec.clone(), 0).is_err());
    spec.replacement = vec![Replacement { stage: 0, blocks: vec![0], kind: BlockKind::ApI3d }];
    assert!(Model::new(spec.clone(), 0).is_err());
    spec.replacement = vec![
        Replacement { stage: 2, blocks: vec![1], kind: BlockKind::ApI3d },
        Replacement { stage: 2, blocks: vec![1], kind: BlockKind::I3d },
    ];
    assert!(Model::new(spec.clone(), 0).is_err());
    spec.replacement.clear();
    spec.feature_dim = 512;
    assert!(Model::new(spec, 0).is_err());
    assert!(NetworkSpec::from_arch("resnet99-c2d", ReplacementPolicy::None, 0).is_err());
    assert!(NetworkSpec::from_arch("resnet50-x3d", ReplacementPolicy::None, 0).is_err());
}

#[test]
fn spec_json_round_trip() {
    let spec = NetworkSpec::from_arch("tiny-ap-p3d-c", ReplacementPolicy::Per2Stage23, 16).unwrap();
    let json = serde_json::to_string_pretty(&spec).unwrap();
    assert!(json.contains("\"depth\": \"tiny\""));
    assert!(json.contains("\"AP_P3D_C\""));
    let back: NetworkSpec = serde_json::from_str(&json).unwrap();
    assert_eq!(back, spec);
    let bad = json.replacen("\"depth\"", "\"bogus\": 1, \"depth\"", 1);
    assert!(serde_json::from_str::<NetworkSpec>(&bad).is_err());
}

fn tiny(arch: &str, classes: usize, seed: u64) -> Model {
    Model::new(NetworkSpec::from_arch(arch, ReplacementPolicy::Per2Stage23, classes).unwrap(), seed).unwrap()
}

#[test]
fn tiny_forward_shapes() {
    let model = tiny("tiny-ap-p3d-c", 10, 0);
    assert_eq!(model.spec.feature_dim, 128);
    let x = Tensor::uniform(&[2, 4, 3, 64, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let out = model.forward(&x, true).unwrap();
    assert_eq!(out.feature.shape(), vec![2, 128]);
    assert_eq!(out.logits.unwrap().shape(), vec![2, 10]);
    assert!(model.forward(&Tensor::zeros(&[2, 4, 1, 64, 32]), false).is_err());
}

#[test]
fn keeping_last_stage_stride_one_doubles_its_resolution() {
    let x = Tensor::zeros(&[1, 2, 3, 64, 32]);
    let kept = tiny("tiny-c2d", 0, 0);
    let mut spec = kept.spec.clone();
    spec.remove_stage5_downsample = false;
    let standard = Model::new(spec, 0).unwrap();
    let a = kept.backbone(&x, false).unwrap().shape();
    let b = standard.backbone(&x, false).unwrap().shape();
    assert_eq!((a[3], a[4]), (2 * b[3], 2 * b[4]));
    assert_eq!((a[3], a[4]), (4, 2));
}

#[test]
fn analytic_macs_match_instrumented_forward() {
    for arch in ["tiny-c2d", "tiny-ap-i3d", "tiny-p3d-b", "tiny-ap-p3d-c", "tiny-nl"] {
        for classes in [0, 5] {
            let model = tiny(arch, classes, 1);
            let shape = [2, 3, 3, 32, 16];
            assert_eq!(model.macs(&shape).unwrap(), model.measured_macs(&shape).unwrap(), "{arch}");
        }
    }
}

fn frames(x: &Tensor, order: &[usize]) -> Tensor {
    let parts: Vec<Tensor> = order.iter().map(|&i| x.slice(1, i, i + 1).unwrap()).collect();
    Tensor::concat(&parts, 1).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn feature_extraction_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c2d = tiny("tiny-c2d", 0, 2);
    let clip = Tensor::uniform(&[1, 4, 3, 32, 16], 0.0, 1.0, &mut rng);
    let one = clip.slice(1, 0, 1).unwrap();

    let f = c2d.extract_features(&clip).unwrap();
    assert_eq!(f, c2d.extract_features(&clip).unwrap());

    let single = c2d.extract_features(&one).unwrap();
    let doubled = c2d.extract_features(&frames(&clip, &[0, 0])).unwrap();
    assert!(max_diff(single.as_slice().unwrap(), doubled.as_slice().unwrap()) < 1e-6);

    let shuffled = c2d.extract_features(&frames(&clip, &[3, 1, 0, 2])).unwrap();
    assert!(max_diff(f.as_slice().unwrap(), shuffled.as_slice().unwrap()) < 1e-9);

    let ap = tiny("tiny-ap-p3d-c", 0, 2);
    for apm in ap.apms() {
        apm.w.weight.value_mut().fill(0.5);
    }
    let a = ap.extract_features(&clip).unwrap();
    let b = ap.extract_features(&frames(&clip, &[3, 1, 0, 2])).unwrap();
    assert!(max_diff(a.as_slice().unwrap(), b.as_slice().unwrap()) > 1e-3);
}

#[test]
fn parameter_names_are_unique_and_scoped() {
    let model = tiny("tiny-ap-p3d-c", 4, 0);
    let names: Vec<String> = model.state().into_iter().map(|(n, _)| n).collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    assert!(names.iter().any(|n| n == "stage2.block0.conv1_t.apm.theta.weight"));
    assert!(names.iter().any(|n| n == "neck.running_var"));
    assert!(names.iter().any(|n| n == "classifier.weight"));
    assert_eq!(model.apms().len(), 2);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = tiny("tiny-ap-i3d", 6, 4);
    let x = Tensor::uniform(&[4, 2, 3, 32, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    model.forward(&x, true).unwrap();
    let bytes = checkpoint::encode(&checkpoint::snapshot(&model.state()));
    let other = tiny("tiny-ap-i3d", 6, 99);
    other.load_state(&checkpoint::decode(&bytes).unwrap()).unwrap();
    let again = checkpoint::encode(&checkpoint::snapshot(&other.state()));
    assert_eq!(bytes, again);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &other.state()).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);

    let mismatched = tiny("tiny-c2d", 6, 0);
    assert!(mismatched.load_state(&checkpoint::load(&path).unwrap()).is_err());
}

#[test]
fn tiny_network_passes_gradient_check() {
    let mut spec = NetworkSpec::from_arch("tiny-ap-p3d-c", ReplacementPolicy::Per2Stage23, 3).unwrap();
    spec.base_width = 4;
    spec.feature_dim = 32;
    let model = Model::new(spec, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for apm in model.apms() {
        let fresh = random_array(&apm.w.weight.shape(), &mut rng);
        *apm.w.weight.value_mut() = fresh;
    }
    let x = Tensor::param(random_array(&[2, 3, 3, 32, 16], &mut rng));
    let mut leaves: Vec<Tensor> = model.parameters().into_iter().map(|(_, t)| t).collect();
    leaves.push(x.clone());
    let report = check(
        "tiny",
        &leaves,
        || {
            let out = model.forward(&x, true)?;
            Tensor::concat(&[out.feature, out.logits.unwrap()], 1)
        },
        7,
        3,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}
