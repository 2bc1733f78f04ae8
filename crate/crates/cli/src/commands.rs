//! Subcommands. Each resolves its configuration (defaults, `--config` file,
//! flags), echoes it to `<out>/config.resolved.json` and runs.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ap3d::checkpoint;
use ap3d::network::{Model, NetworkSpec, ReplacementPolicy};
use ap3d::tensor::gradcheck::GradcheckReport;
use ap3d::traineval::analysis::{count_flops, count_params};
use ap3d::traineval::data::{batch, encode_pgm, export, SynthConfig};
use ap3d::traineval::sweep::{run_sweep, sweep_points, to_csv, SweepAxis, SweepBase};
use ap3d::traineval::train::{evaluate, train, TrainConfig, Validation};
use ap3d::traineval::RetrievalResult;
use ap3d::verify::{suite, Scope};
use ap3d::{apm, no_grad, Tensor};
use clap::{Args, ValueEnum};
use ndarray::Axis;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{parse_dims, parse_floats, read_file, resolve, usage, write_json, write_resolved, CliError, CliResult};
use crate::data::{self, apply_synth, DataArgs};

/// Flags every command accepts.
#[derive(Args, Debug, Default)]
pub struct Common {
    /// JSON file with any subset of the command's configuration keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    fn file(&self) -> CliResult<Value> {
        read_file(self.config.as_deref())
    }
}

fn policy(s: &str) -> CliResult<ReplacementPolicy> {
    Ok(s.parse::<ReplacementPolicy>()?)
}

fn build_spec(arch: &str, policy_name: &str, classes: usize) -> CliResult<NetworkSpec> {
    Ok(NetworkSpec::from_arch(arch, policy(policy_name)?, classes)?)
}

fn metrics_json(r: &RetrievalResult) -> Value {
    json!({
        "rank1": r.rank(1),
        "rank5": r.rank(5),
        "rank10": r.rank(10),
        "mAP": r.map,
        "valid_queries": r.valid_queries,
    })
}

fn print_metrics(r: &RetrievalResult) {
    println!(
        "rank1={:.4} rank5={:.4} rank10={:.4} mAP={:.4} queries={}",
        r.rank(1),
        r.rank(5),
        r.rank(10),
        r.map,
        r.valid_queries
    );
}

// ---------------------------------------------------------------- count

#[derive(Args, Debug)]
pub struct CountArgs {
    /// Architecture such as `resnet50-c2d`, `resnet50-ap-p3d-c`, `resnet50-nl`, `tiny-ap-i3d`.
    #[arg(long)]
    pub arch: Option<String>,
    /// Replacement policy for non-2D blocks.
    #[arg(long)]
    pub policy: Option<String>,
    /// Clip shape `TxCxHxW` (batch 1) or `NxTxCxHxW`.
    #[arg(long)]
    pub input_shape: Option<String>,
    /// Classifier width; 0 counts the backbone only.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountConfig {
    pub arch: String,
    pub policy: String,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct CountReport {
    pub arch: String,
    pub params: usize,
    pub layer_macs: u64,
    pub attention_macs: u64,
    pub input: Vec<usize>,
}

pub fn count(args: CountArgs) -> CliResult<()> {
    let defaults = CountConfig {
        arch: "resnet50-c2d".into(),
        policy: ReplacementPolicy::Per2Stage23.to_string(),
        input_shape: vec![4, 3, 256, 128],
        num_classes: 0,
        seed: 0,
        out: "runs/count".into(),
    };
    let mut cfg = resolve(&defaults, &args.common.file()?)?;
    if let Some(v) = args.arch {
        cfg.arch = v;
    }
    if let Some(v) = args.policy {
        cfg.policy = v;
    }
    if let Some(v) = args.input_shape {
        cfg.input_shape = parse_dims(&v)?;
    }
    if let Some(v) = args.classes {
        cfg.num_classes = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.common.out {
        cfg.out = v;
    }
    let input = match cfg.input_shape.len() {
        4 => [&[1][..], &cfg.input_shape].concat(),
        5 => cfg.input_shape.clone(),
        _ => return Err(usage(format!("input shape must have 4 or 5 dimensions, got {:?}", cfg.input_shape))),
    };
    let model = Model::new(build_spec(&cfg.arch, &cfg.policy, cfg.num_classes)?, cfg.seed)?;
    let params = count_params(&model);
    let macs = count_flops(&model, &input)?;
    write_resolved(&cfg.out, &cfg)?;
    let report = CountReport {
        arch: cfg.arch.clone(),
        params,
        layer_macs: macs.layer,
        attention_macs: macs.attention,
        input: input.clone(),
    };
    write_json(&cfg.out.join("count.json"), &report)?;
    println!("params={:.2}M gmacs={:.2}", params as f64 / 1e6, macs.layer as f64 / 1e9);
    println!("params_exact={params} layer_macs={} attention_macs={}", macs.layer, macs.attention);
    Ok(())
}

// ---------------------------------------------------------------- gradcheck

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Scope to check; repeat for several. All scopes when omitted.
    #[arg(long)]
    pub scope: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Test hook: scale every analytic gradient by 1.01.
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub scopes: Vec<Scope>,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct ScopedReport<'a> {
    scope: Scope,
    #[serde(flatten)]
    report: &'a GradcheckReport,
}

pub fn gradcheck(args: GradcheckArgs) -> CliResult<()> {
    let defaults = GradcheckConfig { scopes: Scope::ALL.to_vec(), seed: 0, out: "runs/gradcheck".into() };
    let mut cfg = resolve(&defaults, &args.common.file()?)?;
    if !args.scope.is_empty() {
        cfg.scopes = args.scope.iter().map(|s| s.parse::<Scope>()).collect::<Result<_, _>>()?;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.common.out {
        cfg.out = v;
    }
    write_resolved(&cfg.out, &cfg)?;
    ap3d::tensor::set_corrupt_backward(args.corrupt_backward);
    let mut rows = Vec::new();
    for &scope in &cfg.scopes {
        for report in suite(scope, cfg.seed)? {
            rows.push((scope, report));
        }
    }
    ap3d::tensor::set_corrupt_backward(false);

    println!("{:<11} {:<26} {:>7} {:>8} {:>12}  result", "scope", "check", "probes", "refined", "max_rel_err");
    for (scope, r) in &rows {
        let verdict = if r.pass { "pass" } else { "FAIL" };
        println!(
            "{:<11} {:<26} {:>7} {:>8} {:>12.3e}  {verdict}",
            scope.to_string(),
            r.name,
            r.checked,
            r.refined,
            r.max_rel_err
        );
    }
    let failed = rows.iter().filter(|(_, r)| !r.pass).count();
    println!("{} checks, {} failed", rows.len(), failed);
    let json: Vec<ScopedReport> = rows.iter().map(|(scope, report)| ScopedReport { scope: *scope, report }).collect();
    write_json(&cfg.out.join("gradcheck.json"), &json)?;
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} gradient checks above tolerance")));
    }
    Ok(())
}

// ---------------------------------------------------------------- synth

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub ids: Option<usize>,
    #[arg(long)]
    pub tracklets_per_id: Option<usize>,
    /// Frames per tracklet.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Render static tracklets.
    #[arg(long)]
    pub no_jitter: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRun {
    pub synth: SynthConfig,
    pub out: PathBuf,
}

pub fn synth(args: SynthArgs) -> CliResult<()> {
    let defaults = SynthRun { synth: SynthConfig::default(), out: "runs/synth".into() };
    let mut cfg = resolve(&defaults, &args.common.file()?)?;
    apply_synth(&mut cfg.synth, args.ids, args.tracklets_per_id, args.frames, args.seed, args.no_jitter);
    if let Some(v) = args.common.out {
        cfg.out = v;
    }
    let dataset = ap3d::traineval::generate_synthetic(&cfg.synth)?;
    export(&dataset, Some(&cfg.synth), &cfg.out)?;
    write_resolved(&cfg.out, &cfg)?;
    println!(
        "wrote {} tracklets ({} frames) to {}",
        dataset.tracklets.len(),
        dataset.num_frames(),
        cfg.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 30 epochs sized for tiny models on CPU.
    Desk,
    /// 240 epochs with the standard schedule.
    Full,
}

impl Preset {
    fn config(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::Full => TrainConfig::full(),
        }
    }
}

/// Flags mirroring [`TrainConfig`].
#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    #[arg(long)]
    pub clip_len: Option<usize>,
    #[arg(long)]
    pub frame_stride: Option<usize>,
    #[arg(long)]
    pub persons_per_batch: Option<usize>,
    #[arg(long)]
    pub clips_per_person: Option<usize>,
    /// Seed of model initialisation and batch sampling.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainFlags {
    fn apply(&self, t: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.batches_per_epoch {
            t.batches_per_epoch = Some(v);
        }
        if let Some(v) = self.clip_len {
            t.clip_len = v;
        }
        if let Some(v) = self.frame_stride {
            t.frame_stride = v;
        }
        if let Some(v) = self.persons_per_batch {
            t.persons_per_batch = v;
        }
        if let Some(v) = self.clips_per_person {
            t.clips_per_person = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
    }
}

/// Picks the preset from the flag, then the file, then `desk`.
fn preset_of(flag: Option<Preset>, file: &Value) -> CliResult<Preset> {
    match (flag, file.get("preset")) {
        (Some(p), _) => Ok(p),
        (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| usage(format!("config preset: {e}"))),
        (None, None) => Ok(Preset::Desk),
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub data: DataArgs,
    /// Tracklets per identity held out for testing.
    #[arg(long)]
    pub held_out: Option<usize>,
    /// Frames per test-time chunk.
    #[arg(long)]
    pub test_clip_len: Option<usize>,
    /// Evaluate on the held-out set every this many epochs.
    #[arg(long)]
    pub validate_every: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub arch: String,
    pub policy: String,
    pub preset: Preset,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub synth: SynthConfig,
    pub held_out: usize,
    pub test_clip_len: usize,
    pub validate_every: Option<usize>,
    pub out: PathBuf,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SPEC_FILE: &str = "spec.json";

/// Writes each log line to both sinks.
struct Tee<A, B>(A, B);

impl<A: Write, B: Write> Write for Tee<A, B> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write_all(buf)?;
        self.1.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()?;
        self.1.flush()
    }
}

pub fn train_cmd(args: TrainArgs) -> CliResult<()> {
    let file = args.common.file()?;
    let preset = preset_of(args.preset, &file)?;
    let defaults = TrainRun {
        arch: "tiny-ap-p3d-c".into(),
        policy: ReplacementPolicy::Per2Stage23.to_string(),
        preset,
        train: preset.config(),
        data: None,
        synth: SynthConfig::default(),
        held_out: 2,
        test_clip_len: 32,
        validate_every: None,
        out: "runs/train".into(),
    };
    let mut cfg = resolve(&defaults, &file)?;
    cfg.preset = preset;
    if let Some(v) = args.arch {
        cfg.arch = v;
    }
    if let Some(v) = args.policy {
        cfg.policy = v;
    }
    args.train.apply(&mut cfg.train);
    args.data.apply(&mut cfg.data, &mut cfg.synth);
    if let Some(v) = args.held_out {
        cfg.held_out = v;
    }
    if let Some(v) = args.test_clip_len {
        cfg.test_clip_len = v;
    }
    if let Some(v) = args.validate_every {
        cfg.validate_every = Some(v);
    }
    if let Some(v) = args.common.out {
        cfg.out = v;
    }
    cfg.train.validate()?;

    let (train_set, test_set) = data::load_split(cfg.data.as_ref(), &cfg.synth, cfg.held_out)?;
    let spec = build_spec(&cfg.arch, &cfg.policy, data::num_classes(&train_set))?;
    let model = Model::new(spec, cfg.train.seed)?;
    write_resolved(&cfg.out, &cfg)?;
    write_json(&cfg.out.join(SPEC_FILE), &model.spec)?;

    let started = Instant::now();
    let validation = cfg.validate_every.map(|every| Validation {
        query: &test_set,
        gallery: &test_set,
        clip_len: cfg.test_clip_len,
        every,
    });
    let log_file = BufWriter::new(File::create(cfg.out.join("log.jsonl"))?);
    let mut log = Tee(log_file, io::stderr());
    let report = train(&model, &train_set, &cfg.train, validation.as_ref(), Some(&mut log))?;
    log.flush()?;
    checkpoint::save(&cfg.out.join(CHECKPOINT_FILE), &model.state())?;
    let result = evaluate(&model, &test_set, &test_set, cfg.test_clip_len, true)?;
    let seconds = started.elapsed().as_secs_f64();

    let mut metrics = metrics_json(&result);
    metrics["steps"] = json!(report.steps);
    metrics["seconds"] = json!(seconds);
    metrics["first_loss"] = json!(report.epochs.first().map(|e| e.loss));
    metrics["last_loss"] = json!(report.epochs.last().map(|e| e.loss));
    metrics["never_updated"] = json!(report.frozen);
    write_json(&cfg.out.join("metrics.json"), &metrics)?;
    print_metrics(&result);
    println!("trained {} steps in {seconds:.1}s; outputs in {}", report.steps, cfg.out.display());
    if !report.frozen.is_empty() {
        eprintln!("warning: parameters never updated: {}", report.frozen.join(", "));
    }
    Ok(())
}

// ---------------------------------------------------------------- eval

/// Rebuilds a model from `<spec>` and loads the checkpoint into it.
fn load_model(checkpoint_path: &Path, spec_path: Option<&Path>) -> CliResult<Model> {
    let spec_path = spec_path.map(Path::to_path_buf).unwrap_or_else(|| checkpoint_path.with_file_name(SPEC_FILE));
    let text = fs::read_to_string(&spec_path).map_err(|e| usage(format!("cannot read {}: {e}", spec_path.display())))?;
    let spec: NetworkSpec =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", spec_path.display())))?;
    let model = Model::new(spec, 0)?;
    model.load_state(&checkpoint::load(checkpoint_path)?)?;
    Ok(model)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Network description; defaults to `spec.json` beside the checkpoint.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub held_out: Option<usize>,
    #[arg(long)]
    pub test_clip_len: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    pub checkpoint: Option<PathBuf>,
    pub spec: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub synth: SynthConfig,
    pub held_out: usize,
    pub test_clip_len: usize,
    pub out: PathBuf,
}

pub fn eval(args: EvalArgs) -> CliResult<()> {
    let defaults = EvalRun {
        checkpoint: None,
        spec: None,
        data: None,
        synth: SynthConfig::default(),
        held_out: 2,
        test_clip_len: 32,
        out: "runs/eval".into(),
    };
    let mut cfg = resolve(&defaults, &args.common.file()?)?;
    if let Some(v) = args.checkpoint {
        cfg.checkpoint = Some(v);
    }
    if let Some(v) = args.spec {
        cfg.spec = Some(v);
    }
    args.data.apply(&mut cfg.data, &mut cfg.synth);
    if let Some(v) = args.held_out {
        cfg.held_out = v;
    }
    if let Some(v) = args.test_clip_len {
        cfg.test_clip_len = v;
    }
    if let Some(v) = args.common.out {
        cfg.out = v;
    }
    let ckpt = cfg.checkpoint.clone().ok_or_else(|| usage("eval needs --checkpoint"))?;
    let model = load_model(&ckpt, cfg.spec.as_deref())?;
    let (_, test_set) = data::load_split(cfg.data.as_ref(), &cfg.synth, cfg.held_out)?;
    write_resolved(&cfg.out, &cfg)?;
    let result = evaluate(&model, &test_set, &test_set, cfg.test_clip_len, true)?;
    write_json(&cfg.out.join("metrics.json"), &metrics_json(&result))?;
    print_metrics(&result);
    Ok(())
}

// ---------------------------------------------------------------- sweep

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// `stage-placement`, `block-count`, `backbone`, `ca-switch` or `scale-s`.
    #[arg(long)]
    pub axis: Option<String>,
    /// Comma-separated scale factors for the `scale-s` axis.
    #[arg(long)]
    pub values: Option<String>,
    /// Block family being ablated, e.g. `ap-p3d-c`.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub held_out: Option<usize>,
    #[arg(long)]
    pub test_clip_len: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRun {
    pub axis: SweepAxis,
    pub values: Option<Vec<f64>>,
    pub base: SweepBase,
    pub preset: Preset,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub synth: SynthConfig,
    pub held_out: usize,
    pub out: PathBuf,
}

pub fn sweep(args: SweepArgs) -> CliResult<()> {
    let file = args.common.file()?;
    let preset = preset_of(args.preset, &file)?;
    let defaults = SweepRun {
        axis: SweepAxis::ScaleS,
        values: None,
        base: SweepBase::default(),
        preset,
        train: preset.config(),
        data: None,
        synth: SynthConfig::default(),
        held_out: 2,
        out: "runs/sweep".into(),
    };
    let mut cfg = resolve(&defaults, &file)?;
    cfg.preset = preset;
    if let Some(v) = args.axis {
        cfg.axis = v.parse()?;
    }
    if let Some(v) = args.values {
        cfg.values = Some(parse_floats(&v)?);
    }
    if let Some(v) = args.kind {
        cfg.base.kind = v.parse()?;
    }
    if let Some(v) = args.policy {
        cfg.base.policy = policy(&v)?;
    }
    args.train.apply(&mut cfg.train);
    args.data.apply(&mut cfg.data, &mut cfg.synth);
    if let Some(v) = args.held_out {
        cfg.held_out = v;
    }
    if let Some(v) = args.test_clip_len {
        cfg.base.test_clip_len = v;
    }
    if let Some(v) = args.common.out {
        cfg.out = v;
    }
    cfg.train.validate()?;

    let (train_set, test_set) = data::load_split(cfg.data.as_ref(), &cfg.synth, cfg.held_out)?;
    let points = sweep_points(cfg.axis, &cfg.base, cfg.values.as_deref(), data::num_classes(&train_set))?;
    write_resolved(&cfg.out, &cfg)?;
    eprintln!("sweeping {} over {} settings", cfg.axis, points.len());
    let rows = run_sweep(&points, &train_set, &test_set, &cfg.train, cfg.base.test_clip_len)?;
    let csv = to_csv(&rows);
    fs::write(cfg.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

// ---------------------------------------------------------------- heatmap

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    /// Checkpoint written by `train`; a freshly initialised `--arch` otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub policy: Option<String>,
    /// Initialisation seed when no checkpoint is given.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scale factor; repeat for several maps.
    #[arg(long = "s")]
    pub scales: Vec<f64>,
    /// Tracklet index in the dataset.
    #[arg(long)]
    pub tracklet: Option<usize>,
    /// Central and adjacent frame, `a,b`.
    #[arg(long)]
    pub pair: Option<String>,
    /// Query position `row,col` on the APM feature map; its centre by default.
    #[arg(long)]
    pub query: Option<String>,
    /// Which APM of the network, in forward order.
    #[arg(long)]
    pub apm: Option<usize>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapRun {
    pub checkpoint: Option<PathBuf>,
    pub spec: Option<PathBuf>,
    pub arch: String,
    pub policy: String,
    pub seed: u64,
    pub scales: Vec<f64>,
    pub tracklet: usize,
    pub pair: [usize; 2],
    pub query: Option<[usize; 2]>,
    pub apm: usize,
    pub data: Option<PathBuf>,
    pub synth: SynthConfig,
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct HeatmapSummary {
    s: f64,
    stem: String,
    sum: f64,
    peak: f64,
    peak_at: [usize; 2],
    entropy: f64,
}

fn pair_of(s: &str, what: &str) -> CliResult<[usize; 2]> {
    let v = parse_dims(s)?;
    <[usize; 2]>::try_from(v).map_err(|_| usage(format!("{what} must be two numbers, got '{s}'")))
}

pub fn heatmap(args: HeatmapArgs) -> CliResult<()> {
    let defaults = HeatmapRun {
        checkpoint: None,
        spec: None,
        arch: "tiny-ap-p3d-c".into(),
        policy: ReplacementPolicy::Per2Stage23.to_string(),
        seed: 0,
        scales: vec![1.0, 2.0, 4.0, 8.0],
        tracklet: 0,
        pair: [0, 1],
        query: None,
        apm: 0,
        data: None,
        synth: SynthConfig::default(),
        out: "runs/heatmap".into(),
    };
    let mut cfg = resolve(&defaults, &args.common.file()?)?;
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = args.$field { cfg.$field = v; } )* };
    }
    set!(arch, policy, seed, tracklet, apm);
    if let Some(v) = args.checkpoint {
        cfg.checkpoint = Some(v);
    }
    if let Some(v) = args.spec {
        cfg.spec = Some(v);
    }
    if !args.scales.is_empty() {
        cfg.scales = args.scales;
    }
    if let Some(v) = args.pair {
        cfg.pair = pair_of(&v, "--pair")?;
    }
    if let Some(v) = args.query {
        cfg.query = Some(pair_of(&v, "--query")?);
    }
    args.data.apply(&mut cfg.data, &mut cfg.synth);
    if let Some(v) = args.common.out {
        cfg.out = v;
    }
    if cfg.scales.is_empty() {
        return Err(usage("at least one --s is required"));
    }

    let model = match &cfg.checkpoint {
        Some(path) => load_model(path, cfg.spec.as_deref())?,
        None => Model::new(build_spec(&cfg.arch, &cfg.policy, 0)?, cfg.seed)?,
    };
    let apms = model.apms();
    let apm = *apms
        .get(cfg.apm)
        .ok_or_else(|| usage(format!("APM {} requested but the network has {}", cfg.apm, apms.len())))?;
    let dataset = data::load(cfg.data.as_ref(), &cfg.synth)?;
    let tracklet = dataset
        .tracklets
        .get(cfg.tracklet)
        .ok_or_else(|| usage(format!("tracklet {} outside 0..{}", cfg.tracklet, dataset.tracklets.len())))?;
    let clip = batch(&[tracklet.clip(&cfg.pair, false)?])?;

    apm.set_recording(true);
    let forward = {
        let _guard = no_grad();
        model.forward(&clip, false).map(|_| ())
    };
    let recorded = apm.recorded_input();
    apm.set_recording(false);
    forward?;
    let recorded = recorded.ok_or_else(|| CliError::Runtime("the selected APM was not reached".into()))?;
    // (1, C, 2, H, W) → central and adjacent (C, H, W) maps.
    let frame = |t: usize| Tensor::new(recorded.index_axis(Axis(0), 0).index_axis(Axis(1), t).to_owned());
    let (central, adjacent) = (frame(0), frame(1));
    let (h, w) = (recorded.shape()[3], recorded.shape()[4]);
    let query = cfg.query.unwrap_or([h / 2, w / 2]);
    let query = (query[0], query[1]);

    write_resolved(&cfg.out, &cfg)?;
    for (name, idx) in [("frame_central", cfg.pair[0]), ("frame_adjacent", cfg.pair[1])] {
        let img = tracklet.frames[idx].index_axis(Axis(0), 0).to_owned();
        fs::write(cfg.out.join(format!("{name}.pgm")), encode_pgm(&img))?;
    }
    let mut summary = Vec::with_capacity(cfg.scales.len());
    for &s in &cfg.scales {
        let map = apm.with_scale(s)?.similarity_heatmap(&central, &adjacent, query)?.to_array();
        let stem = format!("heatmap_s{s}");
        apm::write_heatmap(&map, &cfg.out, &stem)?;
        let (best, peak) =
            map.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let entropy = -map.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        let row = HeatmapSummary { s, stem, sum: map.sum(), peak, peak_at: [best / w, best % w], entropy };
        println!(
            "s={s}: sum={:.9} peak={:.4} at ({},{}) entropy={:.4} -> {}.csv/.pgm",
            row.sum, row.peak, row.peak_at[0], row.peak_at[1], row.entropy, row.stem
        );
        summary.push(row);
    }
    write_json(&cfg.out.join("heatmaps.json"), &json!({ "query": [query.0, query.1], "map_shape": [h, w], "maps": summary }))?;
    Ok(())
}
