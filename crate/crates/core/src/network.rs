//! ResNet-style video backbones with per-block replacement and a
//! pooling / batch-norm neck / classifier head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apm::{Apm, ApmConfig};
use crate::blocks::{Block, BlockKind, Layout};
use crate::error::{Error, Result};
use crate::layers::{join, BatchNorm, Conv, Linear, Macs, Named};
use crate::tensor::{Array, Conv3dSpec, MacTally, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Depth {
    #[serde(rename = "18")]
    R18,
    #[serde(rename = "34")]
    R34,
    #[serde(rename = "50")]
    R50,
    #[serde(rename = "tiny")]
    Tiny,
}

impl Depth {
    pub fn layout(self) -> Layout {
        match self {
            Depth::R50 => Layout::Bottleneck,
            _ => Layout::Basic,
        }
    }

    pub fn stage_blocks(self) -> [usize; 4] {
        match self {
            Depth::R18 => [2, 2, 2, 2],
            Depth::R34 | Depth::R50 => [3, 4, 6, 3],
            Depth::Tiny => [1, 1, 1, 1],
        }
    }

    pub fn base_width(self) -> usize {
        match self {
            Depth::Tiny => 16,
            _ => 64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Depth::R18 => "resnet18",
            Depth::R34 => "resnet34",
            Depth::R50 => "resnet50",
            Depth::Tiny => "tiny",
        }
    }
}

/// Replace `blocks` of residual stage `stage` (1-based) with `kind`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Replacement {
    pub stage: usize,
    pub blocks: Vec<usize>,
    pub kind: BlockKind,
}

/// Named replacement presets over the four residual stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementPolicy {
    None,
    /// The second-last block of one stage.
    OneBlock { stage: usize },
    /// Every other block (starting with the first) of stages 2 and 3.
    Per2Stage23,
    /// The second-last block of stages 2 and 3.
    TwoBlocksStage23,
    /// All blocks of stages 2 and 3.
    AllStage23,
}

impl ReplacementPolicy {
    pub fn replacements(self, stage_blocks: &[usize], kind: BlockKind) -> Result<Vec<Replacement>> {
        let count = |stage: usize| -> Result<usize> {
            stage_blocks
                .get(stage.wrapping_sub(1))
                .copied()
                .ok_or_else(|| Error::config(format!("stage {stage} outside 1..={}", stage_blocks.len())))
        };
        let second_last = |stage: usize| -> Result<Replacement> {
            let n = count(stage)?;
            Ok(Replacement { stage, blocks: vec![n.saturating_sub(2)], kind })
        };
        Ok(match self {
            ReplacementPolicy::None => Vec::new(),
            ReplacementPolicy::OneBlock { stage } => vec![second_last(stage)?],
            ReplacementPolicy::TwoBlocksStage23 => vec![second_last(2)?, second_last(3)?],
            ReplacementPolicy::Per2Stage23 => [2, 3]
                .into_iter()
                .map(|s| Ok(Replacement { stage: s, blocks: (0..count(s)?).step_by(2).collect(), kind }))
                .collect::<Result<_>>()?,
            ReplacementPolicy::AllStage23 => [2, 3]
                .into_iter()
                .map(|s| Ok(Replacement { stage: s, blocks: (0..count(s)?).collect(), kind }))
                .collect::<Result<_>>()?,
        })
    }
}

impl fmt::Display for ReplacementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplacementPolicy::None => f.write_str("none"),
            ReplacementPolicy::OneBlock { stage } => write!(f, "one-block:{stage}"),
            ReplacementPolicy::Per2Stage23 => f.write_str("per2-stage23"),
            ReplacementPolicy::TwoBlocksStage23 => f.write_str("two-blocks-stage23"),
            ReplacementPolicy::AllStage23 => f.write_str("all-stage23"),
        }
    }
}

impl FromStr for ReplacementPolicy {
    type Err = Error;

    /// `none`, `one-block:<stage>`, `per2-stage23`, `two-blocks-stage23`,
    /// `all-stage23`; underscores are accepted in place of dashes.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let policy = match norm.as_str() {
            "none" => ReplacementPolicy::None,
            "per2-stage23" => ReplacementPolicy::Per2Stage23,
            "two-blocks-stage23" => ReplacementPolicy::TwoBlocksStage23,
            "all-stage23" => ReplacementPolicy::AllStage23,
            other => {
                let stage = other
                    .strip_prefix("one-block:")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::invalid(format!("unknown replacement policy '{s}'")))?;
                ReplacementPolicy::OneBlock { stage }
            }
        };
        Ok(policy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub depth: Depth,
    pub stage_blocks: Vec<usize>,
    /// Stem output width; residual stage `i` has core width `base_width · 2^(i-1)`.
    pub base_width: usize,
    pub replacement: Vec<Replacement>,
    pub remove_stage5_downsample: bool,
    /// Zero omits the neck and the classifier.
    pub num_classes: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub apm: ApmConfig,
}

impl NetworkSpec {
    /// Standard configuration for `depth` without replacements. Tiny
    /// backbones keep at least four APM embedding channels, since a cosine
    /// between one-dimensional embeddings is a constant sign.
    pub fn preset(depth: Depth, num_classes: usize) -> NetworkSpec {
        let base_width = depth.base_width();
        let apm = match depth {
            Depth::Tiny => ApmConfig { min_embed_channels: 4, ..ApmConfig::default() },
            _ => ApmConfig::default(),
        };
        NetworkSpec {
            depth,
            stage_blocks: depth.stage_blocks().to_vec(),
            base_width,
            replacement: Vec::new(),
            remove_stage5_downsample: true,
            num_classes,
            feature_dim: base_width * 8 * depth.layout().expansion(),
            apm,
        }
    }

    pub fn with_policy(mut self, kind: BlockKind, policy: ReplacementPolicy) -> Result<NetworkSpec> {
        self.replacement = policy.replacements(&self.stage_blocks, kind)?;
        Ok(self)
    }

    /// Parses architecture names such as `resnet50-c2d`, `resnet50-ap-p3d-c`,
    /// `resnet50-nl` or `tiny-ap-i3d`. Non-2D kinds are placed by `policy`.
    pub fn from_arch(arch: &str, policy: ReplacementPolicy, num_classes: usize) -> Result<NetworkSpec> {
        let arch = arch.trim().to_ascii_lowercase();
        let (depth, rest) = arch
            .split_once('-')
            .ok_or_else(|| Error::invalid(format!("architecture '{arch}' must look like <depth>-<block>")))?;
        let depth = match depth {
            "resnet18" | "r18" => Depth::R18,
            "resnet34" | "r34" => Depth::R34,
            "resnet50" | "r50" => Depth::R50,
            "tiny" => Depth::Tiny,
            d => return Err(Error::invalid(format!("unknown depth '{d}'"))),
        };
        let kind = match rest {
            "nl" => BlockKind::Nl2d,
            r => r.parse()?,
        };
        let spec = NetworkSpec::preset(depth, num_classes);
        if kind == BlockKind::C2d {
            return Ok(spec);
        }
        spec.with_policy(kind, policy)
    }

    pub fn layout(&self) -> Layout {
        self.depth.layout()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_blocks.len() != 4 || self.stage_blocks.contains(&0) {
            return Err(Error::config(format!("need four non-empty stages, got {:?}", self.stage_blocks)));
        }
        if self.base_width == 0 {
            return Err(Error::config("base_width must be positive"));
        }
        if self.depth == Depth::R50 && (self.stage_blocks != [3, 4, 6, 3] || self.feature_dim != 2048) {
            return Err(Error::config("depth 50 requires stage blocks (3, 4, 6, 3) and feature_dim 2048"));
        }
        let expected = self.base_width * 8 * self.layout().expansion();
        if self.feature_dim != expected {
            return Err(Error::config(format!("feature_dim {} does not match backbone width {expected}", self.feature_dim)));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.replacement {
            let n = *self
                .stage_blocks
                .get(r.stage.wrapping_sub(1))
                .ok_or_else(|| Error::config(format!("replacement stage {} outside 1..=4", r.stage)))?;
            for &b in &r.blocks {
                if b >= n {
                    return Err(Error::config(format!("stage {} has {n} blocks, cannot replace block {b}", r.stage)));
                }
                if !seen.insert((r.stage, b)) {
                    return Err(Error::config(format!("block {b} of stage {} replaced twice", r.stage)));
                }
            }
        }
        self.apm.validate()
    }

    /// Block kind at a position after applying the replacements.
    pub fn kind_at(&self, stage: usize, block: usize) -> BlockKind {
        self.replacement
            .iter()
            .find(|r| r.stage == stage && r.blocks.contains(&block))
            .map_or(BlockKind::C2d, |r| r.kind)
    }

    pub fn replaced_blocks(&self) -> usize {
        self.replacement.iter().map(|r| r.blocks.len()).sum()
    }
}

/// Forward results for a batch of clips.
#[derive(Debug)]
pub struct ModelOutput {
    /// Pooled feature before the neck, `(N, D)`.
    pub pooled: Tensor,
    /// Retrieval feature, after the neck when present, `(N, D)`.
    pub feature: Tensor,
    /// `(N, num_classes)` when a classifier is present.
    pub logits: Option<Tensor>,
}

#[derive(Debug)]
pub struct Model {
    pub spec: NetworkSpec,
    stem: Conv,
    stem_bn: BatchNorm,
    pub stages: Vec<Vec<Block>>,
    neck: Option<BatchNorm>,
    classifier: Option<Linear>,
}

impl Model {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = spec.layout();
        let stem = Conv::new(3, spec.base_width, [1, 7, 7], Conv3dSpec::new([1, 2, 2], [0, 3, 3]), false, &mut rng);
        let stem_bn = BatchNorm::new(spec.base_width);
        let mut in_c = spec.base_width;
        let mut stages = Vec::with_capacity(4);
        for (i, &n) in spec.stage_blocks.iter().enumerate() {
            let mid = spec.base_width << i;
            let first_stride = match i {
                0 => 1,
                3 if spec.remove_stage5_downsample => 1,
                _ => 2,
            };
            let mut blocks = Vec::with_capacity(n);
            for b in 0..n {
                let stride = if b == 0 { first_stride } else { 1 };
                let kind = spec.kind_at(i + 1, b);
                blocks.push(Block::new(kind, layout, in_c, mid, stride, &spec.apm, &mut rng)?);
                in_c = mid * layout.expansion();
            }
            stages.push(blocks);
        }
        let (neck, classifier) = if spec.num_classes > 0 {
            (Some(BatchNorm::new(in_c)), Some(Linear::new(in_c, spec.num_classes, false, &mut rng)))
        } else {
            (None, None)
        };
        Ok(Model { spec, stem, stem_bn, stages, neck, classifier })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[2] != 3 || shape[1] == 0 {
            return Err(Error::shape(format!("model expects clips (N, T, 3, H, W), got {shape:?}")));
        }
        Ok(())
    }

    /// Backbone feature map `(N, C, T, H', W')` for clips `(N, T, 3, H, W)`.
    pub fn backbone(&self, clips: &Tensor, train: bool) -> Result<Tensor> {
        self.check_input(&clips.shape())?;
        let x = clips.permute(&[0, 2, 1, 3, 4])?;
        let mut x = self.stem_bn.forward(&self.stem.forward(&x)?, train)?.relu().max_pool2d(3, 2, 1)?;
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x, train)?;
            }
        }
        Ok(x)
    }

    pub fn forward(&self, clips: &Tensor, train: bool) -> Result<ModelOutput> {
        let map = self.backbone(clips, train)?;
        let pooled = map.spatial_max_pool()?.temporal_avg_pool(2)?;
        let feature = match &self.neck {
            Some(bn) => bn.forward(&pooled, train)?,
            None => pooled.clone(),
        };
        let logits = match &self.classifier {
            Some(fc) => Some(fc.forward(&feature)?),
            None => None,
        };
        Ok(ModelOutput { pooled, feature, logits })
    }

    /// Eval-mode retrieval features `(N, D)` without recording a graph.
    pub fn extract_features(&self, clips: &Tensor) -> Result<Array> {
        let _guard = crate::tensor::no_grad();
        Ok(self.forward(clips, false)?.feature.to_array())
    }

    /// Multiply-accumulates for clips of shape `(N, T, 3, H, W)`.
    pub fn macs(&self, input: &[usize]) -> Result<Macs> {
        self.check_input(input)?;
        let x = [input[0], input[2], input[1], input[3], input[4]];
        let (mut total, s) = self.stem.macs(&x)?;
        let pool = |e: usize| (e + 2 - 3) / 2 + 1;
        let mut shape = vec![s[0], s[1], s[2], pool(s[3]), pool(s[4])];
        for stage in &self.stages {
            for block in stage {
                let (m, out) = block.macs(&shape)?;
                total += m;
                shape = out;
            }
        }
        if self.classifier.is_some() {
            total.layer += (input[0] * self.spec.feature_dim * self.spec.num_classes) as u64;
        }
        Ok(total)
    }

    /// Runs one forward pass on zeros and reports the kernels' own tally.
    pub fn measured_macs(&self, input: &[usize]) -> Result<Macs> {
        let _guard = crate::tensor::no_grad();
        MacTally::reset();
        self.forward(&Tensor::zeros(input), false)?;
        let t = MacTally::read();
        Ok(Macs { layer: t.layer, attention: t.attention })
    }

    /// Trainable parameters with dotted names.
    pub fn parameters(&self) -> Vec<Named> {
        let mut out = Vec::new();
        self.stem.collect("stem.conv", &mut out);
        self.stem_bn.collect("stem.bn", &mut out);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                block.collect(&format!("stage{}.block{}", i + 1, j), &mut out);
            }
        }
        if let Some(bn) = &self.neck {
            bn.collect("neck", &mut out);
        }
        if let Some(fc) = &self.classifier {
            fc.collect("classifier", &mut out);
        }
        out
    }

    /// Batch-norm running statistics.
    pub fn buffers(&self) -> Vec<Named> {
        let mut out = Vec::new();
        self.stem_bn.collect_buffers("stem.bn", &mut out);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                block.collect_buffers(&format!("stage{}.block{}", i + 1, j), &mut out);
            }
        }
        if let Some(bn) = &self.neck {
            bn.collect_buffers("neck", &mut out);
        }
        out
    }

    /// Parameters followed by buffers; the checkpoint content.
    pub fn state(&self) -> Vec<Named> {
        let mut s = self.parameters();
        s.extend(self.buffers());
        s
    }

    pub fn num_params(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn apms(&self) -> Vec<&Apm> {
        self.stages.iter().flatten().flat_map(Block::apms).collect()
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }

    /// Overwrites the state from `(name, values)` pairs; every state entry
    /// must be present with a matching shape.
    pub fn load_state(&self, entries: &[(String, Array)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Array> =
            entries.iter().map(|(n, a)| (n.as_str(), a)).collect();
        let state = self.state();
        for (name, t) in &state {
            let a = lookup.get(name.as_str()).ok_or_else(|| Error::Format(format!("checkpoint lacks '{name}'")))?;
            if a.shape() != t.shape().as_slice() {
                return Err(Error::Format(format!(
                    "'{name}' has shape {:?} in checkpoint, model expects {:?}",
                    a.shape(),
                    t.shape()
                )));
            }
        }
        if entries.len() != state.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} entries, model state has {}",
                entries.len(),
                state.len()
            )));
        }
        for (name, t) in &state {
            *t.value_mut() = lookup[name.as_str()].clone();
        }
        Ok(())
    }

    /// Name prefix of residual block `block` in stage `stage`.
    pub fn stage_prefix(stage: usize, block: usize) -> String {
        join(&format!("stage{stage}"), &format!("block{block}"))
    }
}
