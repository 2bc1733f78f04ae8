use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{join, BatchNorm, Conv, Macs, Named};
use crate::tensor::Tensor;

/// Embedded-Gaussian spacetime non-local block with a residual connection.
///
/// Pairwise weights `softmax_j(θ(x_i)·φ(x_j))` run over all `T·H·W`
/// positions. The output projection is followed by a batch norm whose scale
/// starts at zero, so a fresh block is the identity.
#[derive(Debug)]
pub struct NonLocal {
    pub theta: Conv,
    pub phi: Conv,
    pub g: Conv,
    pub w: Conv,
    pub bn: BatchNorm,
}

impl NonLocal {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> NonLocal {
        let inner = (channels / 2).max(1);
        NonLocal {
            theta: Conv::pointwise(channels, inner, true, rng),
            phi: Conv::pointwise(channels, inner, true, rng),
            g: Conv::pointwise(channels, inner, true, rng),
            w: Conv::pointwise(inner, channels, true, rng),
            bn: BatchNorm::with_gamma(channels, 0.0),
        }
    }

    pub fn inner_channels(&self) -> usize {
        self.theta.out_channels()
    }

    /// `(N, C, T, H, W)` → `(N, T·H·W, C)`.
    fn rows(x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        x.reshape(&[s[0], s[1], s[2] * s[3] * s[4]])?.transpose(1, 2)
    }

    /// Softmax-normalised pairwise weights, `(N, T·H·W, T·H·W)`.
    pub fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let theta = NonLocal::rows(&self.theta.forward(x)?)?;
        let phi = NonLocal::rows(&self.phi.forward(x)?)?.transpose(1, 2)?;
        theta.matmul(&phi)?.softmax(2)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.theta.in_channels() {
            return Err(Error::shape(format!(
                "non-local block expects (N, {}, T, H, W), got {s:?}",
                self.theta.in_channels()
            )));
        }
        let weights = self.attention(x)?;
        let y = weights.matmul(&NonLocal::rows(&self.g.forward(x)?)?)?;
        let y = y.transpose(1, 2)?.reshape(&[s[0], self.inner_channels(), s[2], s[3], s[4]])?;
        self.bn.forward(&self.w.forward(&y)?, train)?.add(x)
    }

    pub fn macs(&self, input: &[usize]) -> Result<Macs> {
        let (theta, inner) = self.theta.macs(input)?;
        let (phi, _) = self.phi.macs(input)?;
        let (g, _) = self.g.macs(input)?;
        let (w, _) = self.w.macs(&inner)?;
        let (n, e) = (input[0] as u64, self.inner_channels() as u64);
        let p: u64 = input[2..].iter().product::<usize>() as u64;
        let attention = Macs { layer: 0, attention: 2 * n * p * p * e };
        Ok(theta + phi + g + w + attention)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Named>) {
        self.theta.collect(&join(prefix, "theta"), out);
        self.phi.collect(&join(prefix, "phi"), out);
        self.g.collect(&join(prefix, "g"), out);
        self.w.collect(&join(prefix, "w"), out);
        self.bn.collect(&join(prefix, "bn"), out);
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<Named>) {
        self.bn.collect_buffers(&join(prefix, "bn"), out);
    }
}
