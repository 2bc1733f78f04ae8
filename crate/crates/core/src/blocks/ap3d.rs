use rand::Rng;

use crate::apm::{Apm, ApmConfig};
use crate::error::{Error, Result};
use crate::layers::{join, Conv, Macs, Named};
use crate::tensor::{Conv3dSpec, Tensor};

/// APM followed by a temporal convolution whose temporal stride equals its
/// temporal kernel size.
///
/// Every frame `t` contributes `k` consecutive slices to an interleaved
/// stack: the aligned neighbours in offset order with the original frame in
/// the position of offset 0. With the default offsets `[-1, 1]` the slices
/// are `(z(t-1), x(t), z(t+1))`, so a stride-`k` convolution without temporal
/// padding maps `T` frames back to `T` frames.
#[derive(Debug)]
pub struct Ap3d {
    pub apm: Apm,
    pub conv: Conv,
    pub offsets: Vec<isize>,
    /// Test hook: feed the raw, zero-padded neighbours instead of APM outputs.
    pub bypass_apm: bool,
}

impl Ap3d {
    /// `kernel` is `(k, kh, kw)`; spatial padding keeps `kh × kw` "same".
    pub fn new<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        kernel: [usize; 3],
        spatial_stride: usize,
        apm: ApmConfig,
        rng: &mut R,
    ) -> Result<Ap3d> {
        let k = kernel[0];
        if k == 0 || k % 2 == 0 {
            return Err(Error::config(format!("AP3D temporal kernel must be odd, got {k}")));
        }
        let half = (k / 2) as isize;
        let offsets: Vec<isize> = (-half..=half).filter(|&o| o != 0).collect();
        Ap3d::with_offsets(in_c, out_c, kernel, spatial_stride, offsets, apm, rng)
    }

    pub fn with_offsets<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        kernel: [usize; 3],
        spatial_stride: usize,
        mut offsets: Vec<isize>,
        apm: ApmConfig,
        rng: &mut R,
    ) -> Result<Ap3d> {
        offsets.sort_unstable();
        offsets.dedup();
        if offsets.len() + 1 != kernel[0] || offsets.contains(&0) {
            return Err(Error::config(format!(
                "AP3D with temporal kernel {} needs {} distinct non-zero offsets, got {offsets:?}",
                kernel[0],
                kernel[0].saturating_sub(1)
            )));
        }
        let spec = Conv3dSpec::new([kernel[0], spatial_stride, spatial_stride], [0, kernel[1] / 2, kernel[2] / 2]);
        Ok(Ap3d {
            apm: Apm::new(in_c, apm, rng)?,
            conv: Conv::new(in_c, out_c, kernel, spec, false, rng),
            offsets,
            bypass_apm: false,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.offsets.len() + 1
    }

    /// The interleaved `(N, C, k·T, H, W)` stack fed to the convolution.
    pub fn stack(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 5 {
            return Err(Error::shape(format!("AP3D expects (N, C, T, H, W), got {s:?}")));
        }
        if s[1] != self.conv.in_channels() {
            return Err(Error::shape(format!(
                "AP3D conv expects {} channels, got {}",
                self.conv.in_channels(),
                s[1]
            )));
        }
        let neighbours = if self.bypass_apm {
            self.offsets.iter().map(|&o| x.shift_zeros(2, o)).collect::<Result<Vec<_>>>()?
        } else {
            self.apm.align_neighbors(x, &self.offsets)?
        };
        let split = self.offsets.partition_point(|&o| o < 0);
        let mut parts = Vec::with_capacity(self.kernel_size());
        let mut expanded = s.clone();
        expanded.insert(3, 1);
        for (i, n) in neighbours.iter().enumerate() {
            if i == split {
                parts.push(x.reshape(&expanded)?);
            }
            parts.push(n.reshape(&expanded)?);
        }
        if split == neighbours.len() {
            parts.push(x.reshape(&expanded)?);
        }
        let (n, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        Tensor::concat(&parts, 3)?.reshape(&[n, c, t * self.kernel_size(), h, w])
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(&self.stack(x)?)
    }

    pub fn macs(&self, input: &[usize]) -> Result<(Macs, Vec<usize>)> {
        let mut stacked = input.to_vec();
        if stacked.len() != 5 {
            return Err(Error::shape(format!("AP3D expects (N, C, T, H, W), got {input:?}")));
        }
        stacked[2] *= self.kernel_size();
        let (conv, out) = self.conv.macs(&stacked)?;
        let apm = if self.bypass_apm { Macs::default() } else { self.apm.macs(input, self.offsets.len())? };
        Ok((conv + apm, out))
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Named>) {
        self.conv.collect(&join(prefix, "conv"), out);
        self.apm.collect(&join(prefix, "apm"), out);
    }
}

/// A temporal kernel, optionally wrapped in AP3D.
#[derive(Debug)]
pub enum Temporal {
    /// Ordinary 3-D convolution with "same" temporal padding.
    Plain(Conv),
    Ap(Ap3d),
}

impl Temporal {
    pub fn new<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        kernel: [usize; 3],
        spatial_stride: usize,
        apm: Option<&ApmConfig>,
        rng: &mut R,
    ) -> Result<Temporal> {
        match apm {
            Some(cfg) => Ok(Temporal::Ap(Ap3d::new(in_c, out_c, kernel, spatial_stride, cfg.clone(), rng)?)),
            None => {
                let spec = Conv3dSpec::new(
                    [1, spatial_stride, spatial_stride],
                    [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
                );
                Ok(Temporal::Plain(Conv::new(in_c, out_c, kernel, spec, false, rng)))
            }
        }
    }

    pub fn conv(&self) -> &Conv {
        match self {
            Temporal::Plain(c) => c,
            Temporal::Ap(a) => &a.conv,
        }
    }

    pub fn apm(&self) -> Option<&Apm> {
        match self {
            Temporal::Plain(_) => None,
            Temporal::Ap(a) => Some(&a.apm),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Temporal::Plain(c) => c.forward(x),
            Temporal::Ap(a) => a.forward(x),
        }
    }

    pub fn macs(&self, input: &[usize]) -> Result<(Macs, Vec<usize>)> {
        match self {
            Temporal::Plain(c) => c.macs(input),
            Temporal::Ap(a) => a.macs(input),
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Named>) {
        match self {
            Temporal::Plain(c) => c.collect(prefix, out),
            Temporal::Ap(a) => a.collect(prefix, out),
        }
    }

    pub fn set_bypass_apm(&mut self, on: bool) {
        if let Temporal::Ap(a) = self {
            a.bypass_apm = on;
        }
    }
}
