//! Ablation sweeps over block placement, block count, backbone depth, the
//! attention gate and the similarity scale.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::train::{evaluate, train, TrainConfig};
use crate::blocks::BlockKind;
use crate::error::{Error, Result};
use crate::network::{Depth, Model, NetworkSpec, ReplacementPolicy};

pub const CSV_HEADER: &str = "setting,rank1,rank5,rank10,mAP,params,gmacs";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    StagePlacement,
    BlockCount,
    Backbone,
    CaSwitch,
    ScaleS,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::StagePlacement => "stage-placement",
            SweepAxis::BlockCount => "block-count",
            SweepAxis::Backbone => "backbone",
            SweepAxis::CaSwitch => "ca-switch",
            SweepAxis::ScaleS => "scale-s",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<SweepAxis> {
        Ok(match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "stage-placement" => SweepAxis::StagePlacement,
            "block-count" => SweepAxis::BlockCount,
            "backbone" => SweepAxis::Backbone,
            "ca-switch" => SweepAxis::CaSwitch,
            "scale-s" => SweepAxis::ScaleS,
            other => return Err(Error::invalid(format!("unknown sweep axis '{other}'"))),
        })
    }
}

/// Fixed parts of every sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepBase {
    pub depth: Depth,
    /// Overrides the depth's stem width.
    pub base_width: Option<usize>,
    pub kind: BlockKind,
    pub policy: ReplacementPolicy,
    pub scale_s: f64,
    pub test_clip_len: usize,
}

impl Default for SweepBase {
    fn default() -> SweepBase {
        SweepBase {
            depth: Depth::Tiny,
            base_width: None,
            kind: BlockKind::ApP3dC,
            policy: ReplacementPolicy::Per2Stage23,
            scale_s: 4.0,
            test_clip_len: 32,
        }
    }
}

/// `AP_P3D_C` → `ap-p3d-c`.
fn slug(kind: BlockKind) -> String {
    kind.name().to_ascii_lowercase().replace('_', "-")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub setting: String,
    pub spec: NetworkSpec,
}

impl SweepBase {
    fn spec(&self, depth: Depth, kind: BlockKind, policy: ReplacementPolicy, classes: usize) -> Result<NetworkSpec> {
        let mut spec = NetworkSpec::preset(depth, classes);
        if let Some(w) = self.base_width {
            spec.base_width = w;
            spec.feature_dim = w * 8 * depth.layout().expansion();
        }
        spec.apm.scale_s = self.scale_s;
        if kind != BlockKind::C2d {
            spec = spec.with_policy(kind, policy)?;
        }
        Ok(spec)
    }
}

/// Sweep points of `axis`. `values` selects the scale factors of the
/// `scale_s` axis and defaults to 1 through 6; other axes ignore it.
pub fn sweep_points(axis: SweepAxis, base: &SweepBase, values: Option<&[f64]>, classes: usize) -> Result<Vec<SweepPoint>> {
    let point = |setting: String, spec: NetworkSpec| SweepPoint { setting, spec };
    let mut points = Vec::new();
    match axis {
        SweepAxis::StagePlacement => {
            for stage in 1..=4 {
                let policy = ReplacementPolicy::OneBlock { stage };
                points.push(point(format!("stage{stage}"), base.spec(base.depth, base.kind, policy, classes)?));
            }
        }
        SweepAxis::BlockCount => {
            points.push(point("c2d".into(), base.spec(base.depth, BlockKind::C2d, ReplacementPolicy::None, classes)?));
            for policy in [
                ReplacementPolicy::OneBlock { stage: 2 },
                ReplacementPolicy::TwoBlocksStage23,
                ReplacementPolicy::Per2Stage23,
                ReplacementPolicy::AllStage23,
            ] {
                points.push(point(policy.to_string(), base.spec(base.depth, base.kind, policy, classes)?));
            }
        }
        SweepAxis::Backbone => {
            for depth in [Depth::R18, Depth::R34, Depth::R50] {
                for kind in [BlockKind::C2d, base.kind] {
                    let setting = format!("resnet{}-{}", depth.name(), slug(kind));
                    points.push(point(setting, base.spec(depth, kind, base.policy, classes)?));
                }
            }
        }
        SweepAxis::CaSwitch => {
            for kind in [BlockKind::ApI3d, BlockKind::ApP3dA, BlockKind::ApP3dB, BlockKind::ApP3dC] {
                for ca in [true, false] {
                    let mut spec = base.spec(base.depth, kind, base.policy, classes)?;
                    spec.apm.use_contrastive_attention = ca;
                    let setting = format!("{}-{}", slug(kind), if ca { "with-ca" } else { "without-ca" });
                    points.push(point(setting, spec));
                }
            }
        }
        SweepAxis::ScaleS => {
            let default = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
            for &s in values.unwrap_or(&default) {
                let mut spec = base.spec(base.depth, base.kind, base.policy, classes)?;
                spec.apm.scale_s = s;
                spec.apm.validate()?;
                points.push(point(format!("s={s}"), spec));
            }
        }
    }
    Ok(points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub params: usize,
    /// Multiply-accumulates of one training clip, in units of 10^9.
    pub gmacs: f64,
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{:.6}",
            self.setting, self.rank1, self.rank5, self.rank10, self.map, self.params, self.gmacs
        )
    }
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Trains and evaluates every point with the same seed. The test set is
/// ranked against itself with same-identity same-camera entries excluded.
pub fn run_sweep(
    points: &[SweepPoint],
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    test_clip_len: usize,
) -> Result<Vec<SweepRow>> {
    let frame = train_set
        .tracklets
        .first()
        .and_then(|t| t.frames.first())
        .ok_or_else(|| Error::invalid("training set is empty"))?
        .dim();
    points
        .iter()
        .map(|p| {
            let model = Model::new(p.spec.clone(), cfg.seed)?;
            train(&model, train_set, cfg, None, None)?;
            let r = evaluate(&model, test_set, test_set, test_clip_len, true)?;
            let macs = model.macs(&[1, cfg.clip_len, 3, frame.1, frame.2])?;
            Ok(SweepRow {
                setting: p.setting.clone(),
                rank1: r.rank(1),
                rank5: r.rank(5),
                rank10: r.rank(10),
                map: r.map,
                params: model.num_params(),
                gmacs: macs.total() as f64 / 1e9,
            })
        })
        .collect()
}
