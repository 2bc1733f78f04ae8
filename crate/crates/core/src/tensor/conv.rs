//! Strided, zero-padded 2-D/3-D cross-correlation via im2col + GEMM, plus
//! the multiply-accumulate tally shared by every parametric kernel.

use std::cell::Cell;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, IxDyn};
use rayon::prelude::*;

use super::{Array, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static LAYER_MACS: Cell<u64> = const { Cell::new(0) };
    static ATTENTION_MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulates executed by forward kernels on this thread since the
/// last [`MacTally::reset`]. `layer` counts convolutions and fully connected
/// layers; `attention` counts activation-by-activation matrix products.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacTally {
    pub layer: u64,
    pub attention: u64,
}

impl MacTally {
    pub fn read() -> MacTally {
        MacTally {
            layer: LAYER_MACS.with(|c| c.get()),
            attention: ATTENTION_MACS.with(|c| c.get()),
        }
    }

    pub fn reset() {
        LAYER_MACS.with(|c| c.set(0));
        ATTENTION_MACS.with(|c| c.set(0));
    }

    pub(crate) fn add_layer(n: u64) {
        LAYER_MACS.with(|c| c.set(c.get() + n));
    }

    pub(crate) fn add_attention(n: u64) {
        ATTENTION_MACS.with(|c| c.set(c.get() + n));
    }
}

/// Stride and padding of a 3-D convolution, ordered (time, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Conv3dSpec { stride: [1, 1, 1], padding: [0, 0, 0] }
    }
}

impl Conv3dSpec {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Conv3dSpec { stride, padding }
    }

    /// Output extent along each of (T, H, W).
    pub fn output_extent(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            if self.stride[i] == 0 {
                return Err(Error::invalid("convolution stride must be >= 1"));
            }
            let padded = input[i] + 2 * self.padding[i];
            if padded < kernel[i] {
                return Err(Error::shape(format!(
                    "kernel extent {} exceeds padded input extent {} on axis {i}",
                    kernel[i], padded
                )));
            }
            out[i] = (padded - kernel[i]) / self.stride[i] + 1;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    input: [usize; 3],
    o: usize,
    kernel: [usize; 3],
    out: [usize; 3],
    spec: Conv3dSpec,
}

impl Geometry {
    fn k(&self) -> usize {
        self.c * self.kernel.iter().product::<usize>()
    }
    fn p(&self) -> usize {
        self.out.iter().product()
    }
    fn in_len(&self) -> usize {
        self.c * self.input.iter().product::<usize>()
    }
    /// 1×1×1 kernel, unit stride, no padding: the column matrix is the input itself.
    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.spec.stride == [1, 1, 1] && self.spec.padding == [0, 0, 0]
    }
}

fn im2col(x: &[f64], g: &Geometry, col: &mut [f64]) {
    let [t, h, w] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [to, ho, wo] = g.out;
    let [st, sh, sw] = g.spec.stride;
    let [pt, ph, pw] = g.spec.padding;
    let p = g.p();
    let mut row = 0;
    for ci in 0..g.c {
        for a in 0..kt {
            for b in 0..kh {
                for d in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for ot in 0..to {
                        let it = (ot * st + a) as isize - pt as isize;
                        for oh in 0..ho {
                            let ih = (oh * sh + b) as isize - ph as isize;
                            let row_ok = it >= 0 && (it as usize) < t && ih >= 0 && (ih as usize) < h;
                            for ow in 0..wo {
                                let iw = (ow * sw + d) as isize - pw as isize;
                                dst[idx] = if row_ok && iw >= 0 && (iw as usize) < w {
                                    x[((ci * t + it as usize) * h + ih as usize) * w + iw as usize]
                                } else {
                                    0.0
                                };
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &Geometry, dx: &mut [f64]) {
    let [t, h, w] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [to, ho, wo] = g.out;
    let [st, sh, sw] = g.spec.stride;
    let [pt, ph, pw] = g.spec.padding;
    let p = g.p();
    let mut row = 0;
    for ci in 0..g.c {
        for a in 0..kt {
            for b in 0..kh {
                for d in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for ot in 0..to {
                        let it = (ot * st + a) as isize - pt as isize;
                        for oh in 0..ho {
                            let ih = (oh * sh + b) as isize - ph as isize;
                            let row_ok = it >= 0 && (it as usize) < t && ih >= 0 && (ih as usize) < h;
                            for ow in 0..wo {
                                let iw = (ow * sw + d) as isize - pw as isize;
                                if row_ok && iw >= 0 && (iw as usize) < w {
                                    dx[((ci * t + it as usize) * h + ih as usize) * w + iw as usize] += src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn column_matrix<'a>(x: &'a [f64], g: &Geometry, scratch: &'a mut Vec<f64>) -> ArrayView2<'a, f64> {
    if g.pointwise() {
        ArrayView2::from_shape((g.c, g.p()), x).unwrap()
    } else {
        scratch.resize(g.k() * g.p(), 0.0);
        im2col(x, g, scratch);
        ArrayView2::from_shape((g.k(), g.p()), &scratch[..]).unwrap()
    }
}

/// Samples per deterministic partial sum of the weight gradient.
const WGRAD_CHUNK: usize = 4;

fn forward_kernel(x: &[f64], w: &[f64], g: &Geometry) -> Vec<f64> {
    let (k, p, o) = (g.k(), g.p(), g.o);
    let w2 = ArrayView2::from_shape((o, k), w).unwrap();
    let mut out = vec![0.0; g.n * o * p];
    out.par_chunks_mut(o * p).enumerate().for_each(|(n, dst)| {
        let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
        let mut scratch = Vec::new();
        let col = column_matrix(xn, g, &mut scratch);
        let mut y = ArrayViewMut2::from_shape((o, p), dst).unwrap();
        general_mat_mul(1.0, &w2, &col, 0.0, &mut y);
    });
    out
}

fn backward_input(gout: &[f64], w: &[f64], g: &Geometry) -> Vec<f64> {
    let (k, p, o) = (g.k(), g.p(), g.o);
    let w2t = ArrayView2::from_shape((o, k), w).unwrap().reversed_axes();
    let mut dx = vec![0.0; g.n * g.in_len()];
    dx.par_chunks_mut(g.in_len()).enumerate().for_each(|(n, dst)| {
        let gn = ArrayView2::from_shape((o, p), &gout[n * o * p..(n + 1) * o * p]).unwrap();
        if g.pointwise() {
            let mut d = ArrayViewMut2::from_shape((k, p), dst).unwrap();
            general_mat_mul(1.0, &w2t, &gn, 0.0, &mut d);
        } else {
            let mut dcol = ndarray::Array2::<f64>::zeros((k, p));
            general_mat_mul(1.0, &w2t, &gn, 0.0, &mut dcol);
            col2im(dcol.as_slice().unwrap(), g, dst);
        }
    });
    dx
}

fn backward_weight(gout: &[f64], x: &[f64], g: &Geometry) -> Vec<f64> {
    let (k, p, o) = (g.k(), g.p(), g.o);
    let chunks: Vec<(usize, usize)> = (0..g.n)
        .step_by(WGRAD_CHUNK)
        .map(|s| (s, (s + WGRAD_CHUNK).min(g.n)))
        .collect();
    let partials: Vec<ndarray::Array2<f64>> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let mut acc = ndarray::Array2::<f64>::zeros((o, k));
            let mut scratch = Vec::new();
            for n in s..e {
                let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
                let col = column_matrix(xn, g, &mut scratch);
                let gn = ArrayView2::from_shape((o, p), &gout[n * o * p..(n + 1) * o * p]).unwrap();
                general_mat_mul(1.0, &gn, &col.t(), 1.0, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = ndarray::Array2::<f64>::zeros((o, k));
    for part in &partials {
        total += part;
    }
    total.into_raw_vec_and_offset().0
}

fn check_rank(x: &Array, rank: usize, what: &str) -> Result<()> {
    if x.ndim() != rank {
        return Err(Error::shape(format!("{what} must have rank {rank}, got shape {:?}", x.shape())));
    }
    Ok(())
}

impl Tensor {
    /// 3-D cross-correlation. `self` is `(N, C, T, H, W)`, `weight` is
    /// `(O, C, kt, kh, kw)`, `bias` is `(O)`.
    pub fn conv3d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv3dSpec) -> Result<Tensor> {
        let x = self.value();
        let wv = weight.value();
        check_rank(&x, 5, "conv3d input")?;
        check_rank(&wv, 5, "conv3d weight")?;
        let (xs, ws) = (x.shape(), wv.shape());
        if xs[1] != ws[1] {
            return Err(Error::shape(format!(
                "conv3d: input has {} channels but weight expects {} (weight shape {:?})",
                xs[1], ws[1], ws
            )));
        }
        let input = [xs[2], xs[3], xs[4]];
        let kernel = [ws[2], ws[3], ws[4]];
        let out = spec.output_extent(input, kernel)?;
        let g = Geometry { n: xs[0], c: xs[1], input, o: ws[0], kernel, out, spec };
        if let Some(b) = bias {
            if b.shape() != [g.o] {
                return Err(Error::shape(format!("conv3d bias must have shape [{}], got {:?}", g.o, b.shape())));
            }
        }
        MacTally::add_layer((g.n * g.o * g.k() * g.p()) as u64);

        let mut data = forward_kernel(x.as_slice().unwrap(), wv.as_slice().unwrap(), &g);
        if let Some(b) = bias {
            let bv = b.value();
            let p = g.p();
            for (i, chunk) in data.chunks_mut(p).enumerate() {
                let bo = bv[[i % g.o]];
                chunk.iter_mut().for_each(|v| *v += bo);
            }
        }
        let shape = [g.n, g.o, out[0], out[1], out[2]];
        let value = Array::from_shape_vec(IxDyn(&shape), data).unwrap();
        drop((x, wv));

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(
            value,
            parents,
            Box::new(move |gout, parents| {
                let gs = gout.as_slice().unwrap();
                let xin = &parents[0];
                let w = &parents[1];
                let dx = xin.requires_grad().then(|| {
                    let wv = w.value();
                    let d = backward_input(gs, wv.as_slice().unwrap(), &g);
                    Array::from_shape_vec(IxDyn(&[g.n, g.c, g.input[0], g.input[1], g.input[2]]), d).unwrap()
                });
                let dw = w.requires_grad().then(|| {
                    let xv = xin.value();
                    let d = backward_weight(gs, xv.as_slice().unwrap(), &g);
                    Array::from_shape_vec(
                        IxDyn(&[g.o, g.c, g.kernel[0], g.kernel[1], g.kernel[2]]),
                        d,
                    )
                    .unwrap()
                });
                let mut grads = vec![dx, dw];
                if has_bias {
                    let p = g.p();
                    let mut db = vec![0.0; g.o];
                    for (i, chunk) in gs.chunks(p).enumerate() {
                        db[i % g.o] += chunk.iter().sum::<f64>();
                    }
                    grads.push(Some(Array::from_shape_vec(IxDyn(&[g.o]), db).unwrap()));
                }
                grads
            }),
        ))
    }

    /// 2-D cross-correlation on `(N, C, H, W)` with weight `(O, C, kh, kw)`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: [usize; 2],
        padding: [usize; 2],
    ) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects rank-4 input and weight, got {xs:?} and {ws:?}"
            )));
        }
        let x5 = self.reshape(&[xs[0], xs[1], 1, xs[2], xs[3]])?;
        let w5 = weight.reshape(&[ws[0], ws[1], 1, ws[2], ws[3]])?;
        let spec = Conv3dSpec::new([1, stride[0], stride[1]], [0, padding[0], padding[1]]);
        let y = x5.conv3d(&w5, bias, spec)?;
        let ys = y.shape();
        y.reshape(&[ys[0], ys[1], ys[3], ys[4]])
    }
}
