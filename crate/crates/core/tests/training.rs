use ap3d::network::{Model, NetworkSpec, ReplacementPolicy};
use ap3d::traineval::data::{batch, generate_synthetic, Jitter, SynthConfig};
use ap3d::traineval::sweep::*;
use ap3d::traineval::train::*;

fn tiny_data(ids: usize, jitter: Jitter) -> SynthConfig {
    SynthConfig { num_identities: ids, tracklets_per_id: 2, frames_per_tracklet: 8, jitter, seed: 1, ..SynthConfig::default() }
}

fn quick_config() -> TrainConfig {
    TrainConfig { persons_per_batch: 4, clips_per_person: 2, epochs: 1, batches_per_epoch: Some(3), ..TrainConfig::desk() }
}

fn model(arch: &str, classes: usize) -> Model {
    Model::new(NetworkSpec::from_arch(arch, ReplacementPolicy::Per2Stage23, classes).unwrap(), 2).unwrap()
}

#[test]
fn one_epoch_reaches_every_parameter() {
    let data = generate_synthetic(&tiny_data(4, Jitter::default())).unwrap();
    for arch in ["tiny-ap-p3d-c", "tiny-ap-i3d", "tiny-nl"] {
        let m = model(arch, 4);
        let mut log = Vec::new();
        let report = train(&m, &data, &quick_config(), None, Some(&mut log)).unwrap();
        assert_eq!(report.steps, 3);
        assert!(report.epochs[0].loss.is_finite());
        assert!(report.frozen.is_empty(), "{arch}: never updated {:?}", report.frozen);
        let names: Vec<String> = m.parameters().into_iter().map(|(n, _)| n).collect();
        if arch.contains("ap") {
            for part in ["apm.g.weight", "apm.theta.weight", "apm.phi.weight", "apm.w.weight"] {
                assert!(names.iter().any(|n| n.ends_with(part)), "{arch} lacks {part}");
            }
        }
        let line: EpochLog = serde_json::from_slice(log.strip_suffix(b"\n").unwrap()).unwrap();
        assert_eq!(line.epoch, 0);
        assert_eq!(line.lr, quick_config().lr);
    }
}

#[test]
fn training_is_seeded() {
    let data = generate_synthetic(&tiny_data(4, Jitter::default())).unwrap();
    let run = || {
        let m = model("tiny-ap-p3d-c", 4);
        train(&m, &data, &quick_config(), None, None).unwrap().epochs[0].clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.loss, b.loss);
    assert_eq!(a.cross_entropy, b.cross_entropy);
}

#[test]
fn inconsistent_configs_are_rejected() {
    let data = generate_synthetic(&tiny_data(4, Jitter::default())).unwrap();
    assert!(train(&model("tiny-c2d", 5), &data, &quick_config(), None, None).is_err());
    let too_many = TrainConfig { persons_per_batch: 5, ..quick_config() };
    assert!(train(&model("tiny-c2d", 4), &data, &too_many, None, None).is_err());
    let single = TrainConfig { clips_per_person: 1, ..quick_config() };
    assert!(train(&model("tiny-c2d", 4), &data, &single, None, None).is_err());
}

#[test]
fn test_chunks_cover_the_tracklet() {
    assert_eq!(test_chunks(70, 32), vec![(0..32).collect::<Vec<_>>(), (32..64).collect(), (64..70).collect()]);
    assert_eq!(test_chunks(5, 32), vec![(0..5).collect::<Vec<_>>()]);
}

#[test]
fn tracklet_features_average_chunk_features() {
    let mut cfg = tiny_data(2, Jitter::default());
    cfg.frames_per_tracklet = 5;
    let data = generate_synthetic(&cfg).unwrap();
    let m = model("tiny-ap-p3d-c", 0);
    let feats = tracklet_features(&m, &data, 2).unwrap();
    for (i, t) in data.tracklets.iter().enumerate() {
        let parts: Vec<_> = [vec![0, 1], vec![2, 3], vec![4]]
            .iter()
            .map(|idx| m.extract_features(&batch(&[t.clip(idx, false).unwrap()]).unwrap()).unwrap())
            .collect();
        for d in 0..m.spec.feature_dim {
            let mean = parts.iter().map(|p| p[[0, d]]).sum::<f64>() / 3.0;
            assert!((feats[[i, d]] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn static_identities_are_retrieved_perfectly() {
    let cfg = SynthConfig { jitter: Jitter::none(), ..SynthConfig::default() };
    let data = generate_synthetic(&cfg).unwrap();
    let (train_set, test_set) = data.split(2).unwrap();
    let m = model("tiny-c2d", 16);
    let report = train(&m, &train_set, &TrainConfig::desk(), None, None).unwrap();
    assert!(report.epochs.last().unwrap().loss < report.epochs[0].loss);
    let r = evaluate(&m, &test_set, &test_set, 32, true).unwrap();
    assert_eq!(r.valid_queries, 32);
    assert_eq!(r.rank(1), 1.0, "{r:?}");
}

#[test]
fn sweep_axes_enumerate_their_settings() {
    let base = SweepBase::default();
    let names = |axis, values: Option<&[f64]>| -> Vec<String> {
        sweep_points(axis, &base, values, 4).unwrap().into_iter().map(|p| p.setting).collect()
    };
    assert_eq!(names(SweepAxis::ScaleS, None), ["s=1", "s=2", "s=3", "s=4", "s=5", "s=6"]);
    assert_eq!(names(SweepAxis::ScaleS, Some(&[0.5, 8.0])), ["s=0.5", "s=8"]);
    let ca = names(SweepAxis::CaSwitch, None);
    assert_eq!(ca.len(), 8);
    for family in ["ap-i3d", "ap-p3d-a", "ap-p3d-b", "ap-p3d-c"] {
        assert!(ca.contains(&format!("{family}-with-ca")) && ca.contains(&format!("{family}-without-ca")));
    }
    assert_eq!(names(SweepAxis::StagePlacement, None), ["stage1", "stage2", "stage3", "stage4"]);
    assert_eq!(names(SweepAxis::BlockCount, None).len(), 5);
    assert_eq!(names(SweepAxis::Backbone, None).len(), 6);
    let points = sweep_points(SweepAxis::CaSwitch, &base, None, 4).unwrap();
    assert!(points.iter().all(|p| p.spec.replaced_blocks() > 0));
    assert_eq!(points.iter().filter(|p| p.spec.apm.use_contrastive_attention).count(), 4);
    assert!(sweep_points(SweepAxis::ScaleS, &base, Some(&[0.0]), 4).is_err());
    assert_eq!("scale_s".parse::<SweepAxis>().unwrap(), SweepAxis::ScaleS);
    assert!("depth".parse::<SweepAxis>().is_err());
}

#[test]
fn sweep_csv_is_reproducible() {
    let data = generate_synthetic(&SynthConfig { tracklets_per_id: 4, ..tiny_data(4, Jitter::default()) }).unwrap();
    let (train_set, test_set) = data.split(2).unwrap();
    let points = sweep_points(SweepAxis::ScaleS, &SweepBase::default(), Some(&[1.0, 4.0]), 4).unwrap();
    let cfg = TrainConfig { batches_per_epoch: Some(1), ..quick_config() };
    let a = to_csv(&run_sweep(&points, &train_set, &test_set, &cfg, 8).unwrap());
    let b = to_csv(&run_sweep(&points, &train_set, &test_set, &cfg, 8).unwrap());
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("s=1,") && lines[2].starts_with("s=4,"));
    assert_eq!(lines[1].split(',').count(), 7);
}
