//! Residual blocks: the 2-D baseline, inflated and pseudo-3D temporal
//! variants, their AP3D counterparts, and a non-local block.

mod ap3d;
mod nonlocal;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::apm::{Apm, ApmConfig};
use crate::error::{Error, Result};
use crate::layers::{join, BatchNorm, Conv, Macs, Named};
use crate::tensor::{Conv3dSpec, Tensor};

pub use ap3d::{Ap3d, Temporal};
pub use nonlocal::NonLocal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    #[serde(rename = "C2D")]
    C2d,
    #[serde(rename = "I3D")]
    I3d,
    #[serde(rename = "AP_I3D")]
    ApI3d,
    #[serde(rename = "P3D_A")]
    P3dA,
    #[serde(rename = "P3D_B")]
    P3dB,
    #[serde(rename = "P3D_C")]
    P3dC,
    #[serde(rename = "AP_P3D_A")]
    ApP3dA,
    #[serde(rename = "AP_P3D_B")]
    ApP3dB,
    #[serde(rename = "AP_P3D_C")]
    ApP3dC,
    #[serde(rename = "NL2D")]
    Nl2d,
}

impl BlockKind {
    pub const ALL: [BlockKind; 10] = [
        BlockKind::C2d,
        BlockKind::I3d,
        BlockKind::ApI3d,
        BlockKind::P3dA,
        BlockKind::P3dB,
        BlockKind::P3dC,
        BlockKind::ApP3dA,
        BlockKind::ApP3dB,
        BlockKind::ApP3dC,
        BlockKind::Nl2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::C2d => "C2D",
            BlockKind::I3d => "I3D",
            BlockKind::ApI3d => "AP_I3D",
            BlockKind::P3dA => "P3D_A",
            BlockKind::P3dB => "P3D_B",
            BlockKind::P3dC => "P3D_C",
            BlockKind::ApP3dA => "AP_P3D_A",
            BlockKind::ApP3dB => "AP_P3D_B",
            BlockKind::ApP3dC => "AP_P3D_C",
            BlockKind::Nl2d => "NL2D",
        }
    }

    pub fn is_ap(self) -> bool {
        matches!(self, BlockKind::ApI3d | BlockKind::ApP3dA | BlockKind::ApP3dB | BlockKind::ApP3dC)
    }

    /// The same block without AP3D wrapping.
    pub fn without_ap(self) -> BlockKind {
        match self {
            BlockKind::ApI3d => BlockKind::I3d,
            BlockKind::ApP3dA => BlockKind::P3dA,
            BlockKind::ApP3dB => BlockKind::P3dB,
            BlockKind::ApP3dC => BlockKind::P3dC,
            k => k,
        }
    }

    /// Whether the block mixes information across frames.
    pub fn is_temporal(self) -> bool {
        !matches!(self, BlockKind::C2d)
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    /// Case-insensitive; `-` and `_` are interchangeable (`ap-p3d-c`).
    fn from_str(s: &str) -> Result<BlockKind> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        BlockKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown block kind '{s}'")))
    }
}

/// Where the temporal kernels sit relative to the spatial one.
#[derive(Debug)]
pub enum Core {
    /// `1×3×3` spatial convolution.
    Spatial(Conv),
    /// `3×3×3` convolution.
    Full(Temporal),
    /// Spatial then temporal, batch norm and ReLU in between.
    Serial { spatial: Conv, bn: BatchNorm, temporal: Temporal },
    /// `ReLU(BN(S(x))) + T(x)`; `T` carries the spatial stride.
    Parallel { spatial: Conv, bn: BatchNorm, temporal: Temporal },
    /// `s + T(s)` with `s = ReLU(BN(S(x)))`.
    SerialSkip { spatial: Conv, bn: BatchNorm, temporal: Temporal },
}

fn spatial_conv<R: Rng + ?Sized>(in_c: usize, out_c: usize, stride: usize, rng: &mut R) -> Conv {
    Conv::new(in_c, out_c, [1, 3, 3], Conv3dSpec::new([1, stride, stride], [0, 1, 1]), false, rng)
}

impl Core {
    pub fn new<R: Rng + ?Sized>(
        kind: BlockKind,
        in_c: usize,
        out_c: usize,
        stride: usize,
        apm: &ApmConfig,
        rng: &mut R,
    ) -> Result<Core> {
        let ap = kind.is_ap().then_some(apm);
        let core = match kind {
            BlockKind::C2d | BlockKind::Nl2d => Core::Spatial(spatial_conv(in_c, out_c, stride, rng)),
            BlockKind::I3d | BlockKind::ApI3d => {
                Core::Full(Temporal::new(in_c, out_c, [3, 3, 3], stride, ap, rng)?)
            }
            BlockKind::P3dA | BlockKind::ApP3dA => Core::Serial {
                spatial: spatial_conv(in_c, out_c, stride, rng),
                bn: BatchNorm::new(out_c),
                temporal: Temporal::new(out_c, out_c, [3, 1, 1], 1, ap, rng)?,
            },
            BlockKind::P3dB | BlockKind::ApP3dB => Core::Parallel {
                spatial: spatial_conv(in_c, out_c, stride, rng),
                bn: BatchNorm::new(out_c),
                temporal: Temporal::new(in_c, out_c, [3, 1, 1], stride, ap, rng)?,
            },
            BlockKind::P3dC | BlockKind::ApP3dC => Core::SerialSkip {
                spatial: spatial_conv(in_c, out_c, stride, rng),
                bn: BatchNorm::new(out_c),
                temporal: Temporal::new(out_c, out_c, [3, 1, 1], 1, ap, rng)?,
            },
        };
        Ok(core)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Core::Spatial(conv) => conv.forward(x),
            Core::Full(t) => t.forward(x),
            Core::Serial { spatial, bn, temporal } => temporal.forward(&bn.forward(&spatial.forward(x)?, train)?.relu()),
            Core::Parallel { spatial, bn, temporal } => {
                bn.forward(&spatial.forward(x)?, train)?.relu().add(&temporal.forward(x)?)
            }
            Core::SerialSkip { spatial, bn, temporal } => {
                let s = bn.forward(&spatial.forward(x)?, train)?.relu();
                s.add(&temporal.forward(&s)?)
            }
        }
    }

    pub fn macs(&self, input: &[usize]) -> Result<(Macs, Vec<usize>)> {
        match self {
            Core::Spatial(conv) => conv.macs(input),
            Core::Full(t) => t.macs(input),
            Core::Serial { spatial, temporal, .. } | Core::SerialSkip { spatial, temporal, .. } => {
                let (a, mid) = spatial.macs(input)?;
                let (b, out) = temporal.macs(&mid)?;
                Ok((a + b, out))
            }
            Core::Parallel { spatial, temporal, .. } => {
                let (a, out) = spatial.macs(input)?;
                let (b, _) = temporal.macs(input)?;
                Ok((a + b, out))
            }
        }
    }

    pub fn temporal(&self) -> Option<&Temporal> {
        match self {
            Core::Spatial(_) => None,
            Core::Full(t) => Some(t),
            Core::Serial { temporal, .. } | Core::Parallel { temporal, .. } | Core::SerialSkip { temporal, .. } => {
                Some(temporal)
            }
        }
    }

    pub fn temporal_mut(&mut self) -> Option<&mut Temporal> {
        match self {
            Core::Spatial(_) => None,
            Core::Full(t) => Some(t),
            Core::Serial { temporal, .. } | Core::Parallel { temporal, .. } | Core::SerialSkip { temporal, .. } => {
                Some(temporal)
            }
        }
    }

    pub fn spatial(&self) -> Option<&Conv> {
        match self {
            Core::Spatial(c) => Some(c),
            Core::Full(_) => None,
            Core::Serial { spatial, .. } | Core::Parallel { spatial, .. } | Core::SerialSkip { spatial, .. } => {
                Some(spatial)
            }
        }
    }

    /// Parameters under `prefix`; the spatial part is `prefix` itself for
    /// 2-D and inflated cores, otherwise `prefix_s` / `prefix_t`.
    pub fn collect(&self, prefix: &str, out: &mut Vec<Named>) {
        match self {
            Core::Spatial(conv) => conv.collect(prefix, out),
            Core::Full(t) => t.collect(prefix, out),
            Core::Serial { spatial, bn, temporal }
            | Core::Parallel { spatial, bn, temporal }
            | Core::SerialSkip { spatial, bn, temporal } => {
                spatial.collect(&format!("{prefix}_s"), out);
                bn.collect(&format!("{prefix}_s_bn"), out);
                temporal.collect(&format!("{prefix}_t"), out);
            }
        }
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<Named>) {
        if let Core::Serial { bn, .. } | Core::Parallel { bn, .. } | Core::SerialSkip { bn, .. } = self {
            bn.collect_buffers(&format!("{prefix}_s_bn"), out);
        }
    }
}

/// Residual layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `1×1` reduce, core, `1×1` expand (×4).
    Bottleneck,
    /// Core followed by a second `1×3×3` convolution.
    Basic,
}

impl Layout {
    pub fn expansion(self) -> usize {
        match self {
            Layout::Bottleneck => 4,
            Layout::Basic => 1,
        }
    }
}

#[derive(Debug)]
enum Body {
    Bottleneck { conv1: Conv, bn1: BatchNorm, core: Core, bn2: BatchNorm, conv3: Conv, bn3: BatchNorm },
    Basic { core: Core, bn1: BatchNorm, conv2: Conv, bn2: BatchNorm },
}

/// One residual block of any [`BlockKind`].
#[derive(Debug)]
pub struct Block {
    pub kind: BlockKind,
    body: Body,
    pub downsample: Option<(Conv, BatchNorm)>,
    pub nonlocal: Option<NonLocal>,
}

impl Block {
    /// `mid_c` is the core width; the output has `mid_c · expansion` channels.
    pub fn new<R: Rng + ?Sized>(
        kind: BlockKind,
        layout: Layout,
        in_c: usize,
        mid_c: usize,
        stride: usize,
        apm: &ApmConfig,
        rng: &mut R,
    ) -> Result<Block> {
        if in_c == 0 || mid_c == 0 || stride == 0 {
            return Err(Error::config(format!("block needs positive sizes, got in {in_c}, mid {mid_c}, stride {stride}")));
        }
        let out_c = mid_c * layout.expansion();
        let body = match layout {
            Layout::Bottleneck => Body::Bottleneck {
                conv1: Conv::pointwise(in_c, mid_c, false, rng),
                bn1: BatchNorm::new(mid_c),
                core: Core::new(kind, mid_c, mid_c, stride, apm, rng)?,
                bn2: BatchNorm::new(mid_c),
                conv3: Conv::pointwise(mid_c, out_c, false, rng),
                bn3: BatchNorm::new(out_c),
            },
            Layout::Basic => Body::Basic {
                core: Core::new(kind, in_c, out_c, stride, apm, rng)?,
                bn1: BatchNorm::new(out_c),
                conv2: spatial_conv(out_c, out_c, 1, rng),
                bn2: BatchNorm::new(out_c),
            },
        };
        let downsample = (stride != 1 || in_c != out_c).then(|| {
            let spec = Conv3dSpec::new([1, stride, stride], [0, 0, 0]);
            (Conv::new(in_c, out_c, [1, 1, 1], spec, false, rng), BatchNorm::new(out_c))
        });
        let nonlocal = (kind == BlockKind::Nl2d).then(|| NonLocal::new(out_c, rng));
        Ok(Block { kind, body, downsample, nonlocal })
    }

    pub fn layout(&self) -> Layout {
        match self.body {
            Body::Bottleneck { .. } => Layout::Bottleneck,
            Body::Basic { .. } => Layout::Basic,
        }
    }

    pub fn core(&self) -> &Core {
        match &self.body {
            Body::Bottleneck { core, .. } | Body::Basic { core, .. } => core,
        }
    }

    pub fn core_mut(&mut self) -> &mut Core {
        match &mut self.body {
            Body::Bottleneck { core, .. } | Body::Basic { core, .. } => core,
        }
    }

    /// APM modules owned by this block.
    pub fn apms(&self) -> Vec<&Apm> {
        self.core().temporal().and_then(Temporal::apm).into_iter().collect()
    }

    /// Test hook: replace every APM output by its raw neighbour.
    pub fn set_bypass_apm(&mut self, on: bool) {
        if let Some(t) = self.core_mut().temporal_mut() {
            t.set_bypass_apm(on);
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let residual = match &self.body {
            Body::Bottleneck { conv1, bn1, core, bn2, conv3, bn3 } => {
                let h = bn1.forward(&conv1.forward(x)?, train)?.relu();
                let h = bn2.forward(&core.forward(&h, train)?, train)?.relu();
                bn3.forward(&conv3.forward(&h)?, train)?
            }
            Body::Basic { core, bn1, conv2, bn2 } => {
                let h = bn1.forward(&core.forward(x, train)?, train)?.relu();
                bn2.forward(&conv2.forward(&h)?, train)?
            }
        };
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        let out = residual.add(&shortcut)?.relu();
        match &self.nonlocal {
            Some(nl) => nl.forward(&out, train),
            None => Ok(out),
        }
    }

    pub fn macs(&self, input: &[usize]) -> Result<(Macs, Vec<usize>)> {
        let (mut total, out) = match &self.body {
            Body::Bottleneck { conv1, core, conv3, .. } => {
                let (a, s1) = conv1.macs(input)?;
                let (b, s2) = core.macs(&s1)?;
                let (c, s3) = conv3.macs(&s2)?;
                (a + b + c, s3)
            }
            Body::Basic { core, conv2, .. } => {
                let (a, s1) = core.macs(input)?;
                let (b, s2) = conv2.macs(&s1)?;
                (a + b, s2)
            }
        };
        if let Some((conv, _)) = &self.downsample {
            total += conv.macs(input)?.0;
        }
        if let Some(nl) = &self.nonlocal {
            total += nl.macs(&out)?;
        }
        Ok((total, out))
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Named>) {
        match &self.body {
            Body::Bottleneck { conv1, bn1, core, bn2, conv3, bn3 } => {
                conv1.collect(&join(prefix, "conv1"), out);
                bn1.collect(&join(prefix, "bn1"), out);
                core.collect(&join(prefix, "conv2"), out);
                bn2.collect(&join(prefix, "bn2"), out);
                conv3.collect(&join(prefix, "conv3"), out);
                bn3.collect(&join(prefix, "bn3"), out);
            }
            Body::Basic { core, bn1, conv2, bn2 } => {
                core.collect(&join(prefix, "conv1"), out);
                bn1.collect(&join(prefix, "bn1"), out);
                conv2.collect(&join(prefix, "conv2"), out);
                bn2.collect(&join(prefix, "bn2"), out);
            }
        }
        if let Some((conv, bn)) = &self.downsample {
            conv.collect(&join(prefix, "downsample.0"), out);
            bn.collect(&join(prefix, "downsample.1"), out);
        }
        if let Some(nl) = &self.nonlocal {
            nl.collect(&join(prefix, "nonlocal"), out);
        }
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<Named>) {
        match &self.body {
            Body::Bottleneck { bn1, core, bn2, bn3, .. } => {
                bn1.collect_buffers(&join(prefix, "bn1"), out);
                core.collect_buffers(&join(prefix, "conv2"), out);
                bn2.collect_buffers(&join(prefix, "bn2"), out);
                bn3.collect_buffers(&join(prefix, "bn3"), out);
            }
            Body::Basic { core, bn1, bn2, .. } => {
                core.collect_buffers(&join(prefix, "conv1"), out);
                bn1.collect_buffers(&join(prefix, "bn1"), out);
                bn2.collect_buffers(&join(prefix, "bn2"), out);
            }
        }
        if let Some((_, bn)) = &self.downsample {
            bn.collect_buffers(&join(prefix, "downsample.1"), out);
        }
        if let Some(nl) = &self.nonlocal {
            nl.collect_buffers(&join(prefix, "nonlocal"), out);
        }
    }

    /// Convolutions of the residual branch, in order (test helper for weight
    /// surgery such as zeroing the branch or sharing weights across blocks).
    pub fn branch_convs(&self) -> Vec<&Conv> {
        let mut v = Vec::new();
        match &self.body {
            Body::Bottleneck { conv1, core, conv3, .. } => {
                v.push(conv1);
                v.extend(core.spatial());
                v.extend(core.temporal().map(Temporal::conv));
                v.push(conv3);
            }
            Body::Basic { core, conv2, .. } => {
                v.extend(core.spatial());
                v.extend(core.temporal().map(Temporal::conv));
                v.push(conv2);
            }
        }
        v
    }
}
