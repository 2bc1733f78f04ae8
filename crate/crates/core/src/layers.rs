//! Parametric layers shared by the APM, the residual blocks and the backbone.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Array, BatchNormMode, Conv3dSpec, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// A tensor together with its dotted name path, e.g. `stage2.block0.apm.g.weight`.
pub type Named = (String, Tensor);

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Multiply-accumulate counts split by kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Macs {
    /// Convolutions and fully connected layers.
    pub layer: u64,
    /// Activation-by-activation products (affinities and weighted sums).
    pub attention: u64,
}

impl Macs {
    pub fn total(&self) -> u64 {
        self.layer + self.attention
    }
}

impl std::ops::Add for Macs {
    type Output = Macs;
    fn add(self, o: Macs) -> Macs {
        Macs { layer: self.layer + o.layer, attention: self.attention + o.attention }
    }
}

impl std::ops::AddAssign for Macs {
    fn add_assign(&mut self, o: Macs) {
        *self = *self + o;
    }
}

/// 3-D convolution with an `(O, C, kt, kh, kw)` weight. 2-D convolutions are
/// the `kt = 1` case applied to 5-D clips.
#[derive(Debug)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub spec: Conv3dSpec,
}

impl Conv {
    /// He-normal (fan-out) initialised convolution.
    pub fn new<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        kernel: [usize; 3],
        spec: Conv3dSpec,
        bias: bool,
        rng: &mut R,
    ) -> Conv {
        let fan_out = out_c * kernel.iter().product::<usize>();
        let std = (2.0 / fan_out as f64).sqrt();
        let w = Tensor::normal(&[out_c, in_c, kernel[0], kernel[1], kernel[2]], std, rng).to_array();
        Conv {
            weight: Tensor::param(w),
            bias: bias.then(|| Tensor::param(Array::zeros(ndarray::IxDyn(&[out_c])))),
            spec,
        }
    }

    /// Zero-initialised weights.
    pub fn zeros(in_c: usize, out_c: usize, kernel: [usize; 3], spec: Conv3dSpec, bias: bool) -> Conv {
        Conv {
            weight: Tensor::param(Array::zeros(ndarray::IxDyn(&[out_c, in_c, kernel[0], kernel[1], kernel[2]]))),
            bias: bias.then(|| Tensor::param(Array::zeros(ndarray::IxDyn(&[out_c])))),
            spec,
        }
    }

    /// Pointwise (1×1×1) convolution.
    pub fn pointwise<R: Rng + ?Sized>(in_c: usize, out_c: usize, bias: bool, rng: &mut R) -> Conv {
        Conv::new(in_c, out_c, [1, 1, 1], Conv3dSpec::default(), bias, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> [usize; 3] {
        let s = self.weight.shape();
        [s[2], s[3], s[4]]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv3d(&self.weight, self.bias.as_ref(), self.spec)
    }

    /// Output shape and multiply-accumulates for an `(N, C, T, H, W)` input.
    pub fn macs(&self, input: &[usize]) -> Result<(Macs, Vec<usize>)> {
        if input.len() != 5 || input[1] != self.in_channels() {
            return Err(Error::shape(format!(
                "conv expects (N, {}, T, H, W), got {input:?}",
                self.in_channels()
            )));
        }
        let out = self.spec.output_extent([input[2], input[3], input[4]], self.kernel())?;
        let k: usize = self.in_channels() * self.kernel().iter().product::<usize>();
        let p: usize = out.iter().product();
        let macs = (input[0] * self.out_channels() * k * p) as u64;
        Ok((Macs { layer: macs, attention: 0 }, vec![input[0], self.out_channels(), out[0], out[1], out[2]]))
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Named>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

/// Batch normalisation over axis 1 with running statistics.
#[derive(Debug)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    pub fn new(channels: usize) -> BatchNorm {
        BatchNorm::with_gamma(channels, 1.0)
    }

    pub fn with_gamma(channels: usize, gamma: f64) -> BatchNorm {
        let shape = ndarray::IxDyn(&[channels]);
        BatchNorm {
            gamma: Tensor::param(Array::from_elem(shape.clone(), gamma)),
            beta: Tensor::param(Array::zeros(shape.clone())),
            running_mean: Tensor::new(Array::zeros(shape.clone())),
            running_var: Tensor::new(Array::ones(shape)),
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mode = if train { BatchNormMode::Train { momentum: BN_MOMENTUM } } else { BatchNormMode::Eval };
        x.batch_norm(&self.gamma, &self.beta, &self.running_mean, &self.running_var, mode, BN_EPS)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Named>) {
        out.push((join(prefix, "weight"), self.gamma.clone()));
        out.push((join(prefix, "bias"), self.beta.clone()));
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<Named>) {
        out.push((join(prefix, "running_mean"), self.running_mean.clone()));
        out.push((join(prefix, "running_var"), self.running_var.clone()));
    }
}

/// Fully connected layer with an `(out, in)` weight.
#[derive(Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_f: usize, out_f: usize, bias: bool, rng: &mut R) -> Linear {
        Linear {
            weight: Tensor::param(Tensor::normal(&[out_f, in_f], 0.001, rng).to_array()),
            bias: bias.then(|| Tensor::param(Array::zeros(ndarray::IxDyn(&[out_f])))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.weight, self.bias.as_ref())
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Named>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}
