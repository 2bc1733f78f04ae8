//! Appearance-preserving module.
//!
//! For every position `i` of a central map, the adjacent map is reconstructed
//! as a softmax-weighted sum of its own features, weighted by the scaled
//! cosine similarity between embeddings `g(c_i)` and `g(x_j)`. An optional
//! contrastive gate `sigmoid(wᵀ(θ(c_i) ⊙ φ(y_i)))` then damps positions that
//! found no real counterpart.
//!
//! Clip-level entry points take `(N, C, T, H, W)` tensors; single-map helpers
//! take `(C, H, W)`.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv, Macs, Named};
use crate::tensor::{Array, Conv3dSpec, Tensor};

/// Norm clamp for the cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApmConfig {
    pub scale_s: f64,
    pub embed_divisor: usize,
    pub use_contrastive_attention: bool,
    pub min_embed_channels: usize,
}

impl Default for ApmConfig {
    fn default() -> Self {
        ApmConfig { scale_s: 4.0, embed_divisor: 16, use_contrastive_attention: true, min_embed_channels: 1 }
    }
}

impl ApmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_s.is_finite() && self.scale_s > 0.0) {
            return Err(Error::config(format!("scale_s must be positive, got {}", self.scale_s)));
        }
        if self.embed_divisor == 0 || self.min_embed_channels == 0 {
            return Err(Error::config("embed_divisor and min_embed_channels must be at least 1"));
        }
        Ok(())
    }

    pub fn embed_channels(&self, channels: usize) -> usize {
        (channels / self.embed_divisor).max(self.min_embed_channels)
    }
}

/// Learnable mappings of one APM. All are bias-free pointwise convolutions.
#[derive(Debug)]
pub struct Apm {
    pub config: ApmConfig,
    pub g: Conv,
    pub theta: Conv,
    pub phi: Conv,
    pub w: Conv,
    /// Last clip seen by [`Apm::align_neighbors`] while recording is on.
    probe: RefCell<Option<Option<Array>>>,
}

/// Intermediate results of one central/adjacent registration.
#[derive(Debug)]
pub struct ApmOutput {
    /// Softmax weights, `(N·T, H·W, H·W)`; row `i` belongs to central position `i`.
    pub weights: Tensor,
    /// Reconstructed adjacent map `y`, `(N, C, T, H, W)`.
    pub reconstructed: Tensor,
    /// Gate values, `(N, 1, T, H, W)`, when contrastive attention is on.
    pub mask: Option<Tensor>,
    /// Final response `z`.
    pub output: Tensor,
}

fn dims5(shape: &[usize], what: &str) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(shape)
        .map_err(|_| Error::shape(format!("{what}: expected (N, C, T, H, W), got {shape:?}")))
}

/// `(N, C, T, H, W)` → `(N·T, H·W, C)`.
fn to_rows(x: &Tensor) -> Result<Tensor> {
    let [n, c, t, h, w] = dims5(&x.shape(), "apm")?;
    x.permute(&[0, 2, 3, 4, 1])?.reshape(&[n * t, h * w, c])
}

/// Inverse of [`to_rows`].
fn from_rows(rows: &Tensor, n: usize, t: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = rows.shape()[2];
    rows.reshape(&[n, t, h, w, c])?.permute(&[0, 4, 1, 2, 3])
}

impl Apm {
    pub fn new<R: Rng + ?Sized>(channels: usize, config: ApmConfig, rng: &mut R) -> Result<Apm> {
        config.validate()?;
        if channels == 0 {
            return Err(Error::config("APM needs at least one channel"));
        }
        let e = config.embed_channels(channels);
        Ok(Apm {
            g: Conv::pointwise(channels, e, false, rng),
            theta: Conv::pointwise(channels, e, false, rng),
            phi: Conv::pointwise(channels, e, false, rng),
            w: Conv::zeros(e, 1, [1, 1, 1], Conv3dSpec::default(), false),
            config,
            probe: RefCell::new(None),
        })
    }

    pub fn channels(&self) -> usize {
        self.g.in_channels()
    }

    pub fn embed_channels(&self) -> usize {
        self.g.out_channels()
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Named>) {
        for (name, conv) in [("g", &self.g), ("theta", &self.theta), ("phi", &self.phi), ("w", &self.w)] {
            conv.collect(&crate::layers::join(prefix, name), out);
        }
    }

    /// Copy with scale factor `s` and otherwise identical weights.
    pub fn with_scale(&self, s: f64) -> Result<Apm> {
        let config = ApmConfig { scale_s: s, ..self.config.clone() };
        config.validate()?;
        let copy = |c: &Conv| {
            let out = Conv::zeros(c.in_channels(), c.out_channels(), [1, 1, 1], Conv3dSpec::default(), false);
            *out.weight.value_mut() = c.weight.to_array();
            out
        };
        Ok(Apm {
            g: copy(&self.g),
            theta: copy(&self.theta),
            phi: copy(&self.phi),
            w: copy(&self.w),
            config,
            probe: RefCell::new(None),
        })
    }

    /// Starts (or stops and clears) recording the input clip of
    /// [`Apm::align_neighbors`], for inspecting a model's feature maps.
    pub fn set_recording(&self, on: bool) {
        *self.probe.borrow_mut() = if on { Some(None) } else { None };
    }

    /// Most recent recorded `(N, C, T, H, W)` input.
    pub fn recorded_input(&self) -> Option<Array> {
        self.probe.borrow().clone().flatten()
    }

    pub fn num_params(&self) -> usize {
        let (c, e) = (self.channels(), self.embed_channels());
        3 * c * e + e
    }

    fn check_input(&self, x: &Tensor, what: &str) -> Result<[usize; 5]> {
        let d = dims5(&x.shape(), what)?;
        if d[1] != self.channels() {
            return Err(Error::shape(format!("{what}: APM built for {} channels, got {}", self.channels(), d[1])));
        }
        Ok(d)
    }

    /// L2-normalised embedding `g(x)` over the channel axis.
    fn unit_embedding(&self, x: &Tensor) -> Result<Tensor> {
        self.g.forward(x)?.l2_normalize(1, COSINE_EPS)
    }

    /// Scaled cosine affinities, `(N·T, H·W, H·W)`.
    fn logits(&self, gc: &Tensor, ga: &Tensor) -> Result<Tensor> {
        let c = to_rows(gc)?;
        let a = to_rows(ga)?.transpose(1, 2)?;
        Ok(c.matmul(&a)?.scale(self.config.scale_s))
    }

    /// Registration and gating with precomputed unit embeddings and `θ(c)`.
    fn register(&self, theta_c: Option<&Tensor>, gc: &Tensor, ga: &Tensor, adjacent: &Tensor) -> Result<ApmOutput> {
        let [n, _, t, h, w] = dims5(&adjacent.shape(), "apm")?;
        let weights = self.logits(gc, ga)?.softmax(2)?;
        let y = from_rows(&weights.matmul(&to_rows(adjacent)?)?, n, t, h, w)?;
        match theta_c.filter(|_| self.config.use_contrastive_attention) {
            Some(theta_c) => {
                let mask = self.w.forward(&theta_c.mul(&self.phi.forward(&y)?)?)?.sigmoid();
                let z = y.mul(&mask)?;
                Ok(ApmOutput { weights, reconstructed: y, mask: Some(mask), output: z })
            }
            None => Ok(ApmOutput { weights, reconstructed: y.clone(), mask: None, output: y }),
        }
    }

    /// Registers `adjacent` against `central`; both `(N, C, T, H, W)`.
    pub fn forward_pair(&self, central: &Tensor, adjacent: &Tensor) -> Result<ApmOutput> {
        let dc = self.check_input(central, "apm central")?;
        let da = self.check_input(adjacent, "apm adjacent")?;
        if dc != da {
            return Err(Error::shape(format!("apm: central {dc:?} and adjacent {da:?} differ")));
        }
        let theta_c = if self.config.use_contrastive_attention { Some(self.theta.forward(central)?) } else { None };
        let gc = self.unit_embedding(central)?;
        let ga = self.unit_embedding(adjacent)?;
        self.register(theta_c.as_ref(), &gc, &ga, adjacent)
    }

    /// Aligns the neighbours of every frame of a clip to that frame.
    ///
    /// Returns one `(N, C, T, H, W)` tensor per offset; entry `t` is the
    /// response for neighbour `t + offset`, or zeros when that frame lies
    /// outside the clip. Embeddings are computed once and shifted, which is
    /// exact because the mappings are pointwise and bias-free.
    pub fn align_neighbors(&self, x: &Tensor, offsets: &[isize]) -> Result<Vec<Tensor>> {
        self.check_input(x, "apm clip")?;
        if let Some(slot) = self.probe.borrow_mut().as_mut() {
            *slot = Some(x.to_array());
        }
        let theta_c = if self.config.use_contrastive_attention { Some(self.theta.forward(x)?) } else { None };
        let gc = self.unit_embedding(x)?;
        offsets
            .iter()
            .map(|&o| {
                let ga = gc.shift_zeros(2, o)?;
                let adjacent = x.shift_zeros(2, o)?;
                Ok(self.register(theta_c.as_ref(), &gc, &ga, &adjacent)?.output)
            })
            .collect()
    }

    /// Multiply-accumulates of [`Apm::align_neighbors`] on an `(N, C, T, H, W)` clip.
    pub fn macs(&self, input: &[usize], num_offsets: usize) -> Result<Macs> {
        let [n, c, t, h, w] = dims5(input, "apm macs")?;
        let e = self.embed_channels();
        let (frames, p) = ((n * t) as u64, (h * w) as u64);
        let (c, e, k) = (c as u64, e as u64, num_offsets as u64);
        let pointwise = |i: u64, o: u64| frames * p * i * o;
        let mut layer = pointwise(c, e);
        if self.config.use_contrastive_attention {
            layer += pointwise(c, e) + k * (pointwise(c, e) + pointwise(e, 1));
        }
        let attention = k * (frames * p * p * e + frames * p * p * c);
        Ok(Macs { layer, attention })
    }

    /// Wraps a `(C, H, W)` map as a one-frame clip.
    fn lift(map: &Tensor) -> Result<Tensor> {
        let s = map.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("expected a (C, H, W) map, got {s:?}")));
        }
        map.reshape(&[1, s[0], 1, s[1], s[2]])
    }

    fn lift_pair(&self, central: &Tensor, adjacent: &Tensor) -> Result<(Tensor, Tensor)> {
        if central.shape() != adjacent.shape() {
            return Err(Error::shape(format!(
                "central {:?} and adjacent {:?} differ",
                central.shape(),
                adjacent.shape()
            )));
        }
        Ok((Apm::lift(central)?, Apm::lift(adjacent)?))
    }

    /// `s · cos(g(c_i), g(x_j))` as an `(H·W, H·W)` matrix.
    pub fn affinity(&self, central: &Tensor, adjacent: &Tensor) -> Result<Tensor> {
        let (c, a) = self.lift_pair(central, adjacent)?;
        self.check_input(&c, "affinity")?;
        let p = central.shape()[1] * central.shape()[2];
        self.logits(&self.unit_embedding(&c)?, &self.unit_embedding(&a)?)?.reshape(&[p, p])
    }

    /// Reconstructed adjacent map `y`, `(C, H, W)`.
    pub fn reconstruct(&self, central: &Tensor, adjacent: &Tensor) -> Result<Tensor> {
        let (c, a) = self.lift_pair(central, adjacent)?;
        let out = self.forward_pair(&c, &a)?;
        out.reconstructed.reshape(&central.shape())
    }

    /// Gate `sigmoid(wᵀ(θ(c) ⊙ φ(y)))` for a central and reconstructed map, `(1, H, W)`.
    pub fn contrastive_attention(&self, central: &Tensor, reconstructed: &Tensor) -> Result<Tensor> {
        let (c, y) = self.lift_pair(central, reconstructed)?;
        self.check_input(&c, "contrastive attention")?;
        let mask = self.w.forward(&self.theta.forward(&c)?.mul(&self.phi.forward(&y)?)?)?.sigmoid();
        let s = central.shape();
        mask.reshape(&[1, s[1], s[2]])
    }

    /// Final response `z` for one `(C, H, W)` pair.
    pub fn forward_map(&self, central: &Tensor, adjacent: &Tensor) -> Result<Tensor> {
        let (c, a) = self.lift_pair(central, adjacent)?;
        self.forward_pair(&c, &a)?.output.reshape(&central.shape())
    }

    /// Softmax-normalised affinity row of the query position, `(H, W)`.
    pub fn similarity_heatmap(&self, central: &Tensor, adjacent: &Tensor, query: (usize, usize)) -> Result<Tensor> {
        let s = central.shape();
        if s.len() != 3 || query.0 >= s[1] || query.1 >= s[2] {
            return Err(Error::invalid(format!("query {query:?} outside map of shape {s:?}")));
        }
        let row = query.0 * s[2] + query.1;
        self.affinity(central, adjacent)?.slice(0, row, row + 1)?.softmax(1)?.reshape(&[s[1], s[2]])
    }
}

/// Heatmap as CSV: one line per row, comma-separated values.
pub fn heatmap_csv(map: &Array) -> Result<String> {
    let m = map
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::shape(format!("heatmap must be 2-D, got {:?}", map.shape())))?;
    let mut out = String::new();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(out, "{}", line.join(",")).unwrap();
    }
    Ok(out)
}

/// Heatmap as a binary (P5) PGM, min–max scaled to 0..=255.
pub fn heatmap_pgm(map: &Array) -> Result<Vec<u8>> {
    if map.ndim() != 2 {
        return Err(Error::shape(format!("heatmap must be 2-D, got {:?}", map.shape())));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.iter().map(|v| (((v - lo) / span) * 255.0).round() as u8));
    Ok(out)
}

/// Writes `<stem>.csv` and `<stem>.pgm` for a heatmap.
pub fn write_heatmap(map: &Array, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.csv")), heatmap_csv(map)?)?;
    std::fs::write(dir.join(format!("{stem}.pgm")), heatmap_pgm(map)?)?;
    Ok(())
}
