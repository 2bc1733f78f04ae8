use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, ArrayView2, ArrayViewMut2, Axis, IxDyn, Zip};
use rayon::prelude::*;

use super::conv::MacTally;
use super::{check_axis, Array, Tensor};
use crate::error::{Error, Result};

/// Which statistics a batch-norm call normalizes with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BatchNormMode {
    /// Batch statistics; running statistics are updated in place.
    Train { momentum: f64 },
    /// Running statistics.
    Eval,
}

/// `out[b] = a[b] · c[b]` over equal leading batch dimensions.
fn batched_product(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    out.par_chunks_mut(m * n).enumerate().for_each(|(i, dst)| {
        let (ar, ac) = if ta { (k, m) } else { (m, k) };
        let (br, bc) = if tb { (n, k) } else { (k, n) };
        let av = ArrayView2::from_shape((ar, ac), &a[i * ar * ac..(i + 1) * ar * ac]).unwrap();
        let bv = ArrayView2::from_shape((br, bc), &b[i * br * bc..(i + 1) * br * bc]).unwrap();
        let av = if ta { av.reversed_axes() } else { av };
        let bv = if tb { bv.reversed_axes() } else { bv };
        let mut y = ArrayViewMut2::from_shape((m, n), dst).unwrap();
        general_mat_mul(1.0, &av, &bv, 0.0, &mut y);
    });
    out
}

impl Tensor {
    /// Matrix product over the last two axes; leading axes must agree.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape(format!("matmul: incompatible shapes {sa:?} and {sb:?}")));
        }
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        if sb[r - 2] != k {
            return Err(Error::shape(format!("matmul: inner extents differ in {sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..r - 2].iter().product();
        MacTally::add_attention((batch * m * k * n) as u64);
        let data = {
            let (a, b) = (self.value(), other.value());
            batched_product(a.as_slice().unwrap(), b.as_slice().unwrap(), batch, m, k, n, false, false)
        };
        let mut out_shape = sa[..r - 2].to_vec();
        out_shape.extend([m, n]);
        let value = Array::from_shape_vec(IxDyn(&out_shape), data).unwrap();
        Ok(Tensor::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                let gs = g.as_slice().unwrap();
                let da = parents[0].requires_grad().then(|| {
                    let b = parents[1].value();
                    let d = batched_product(gs, b.as_slice().unwrap(), batch, m, n, k, false, true);
                    Array::from_shape_vec(IxDyn(&sa), d).unwrap()
                });
                let db = parents[1].requires_grad().then(|| {
                    let a = parents[0].value();
                    let d = batched_product(a.as_slice().unwrap(), gs, batch, k, m, n, true, false);
                    Array::from_shape_vec(IxDyn(&sb), d).unwrap()
                });
                vec![da, db]
            }),
        ))
    }

    /// Fully connected layer: `self` is `(B, in)`, `weight` is `(out, in)`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!("linear: input {xs:?} incompatible with weight {ws:?}")));
        }
        let (b, i, o) = (xs[0], xs[1], ws[0]);
        if let Some(bias) = bias {
            if bias.shape() != [o] {
                return Err(Error::shape(format!("linear bias must be [{o}], got {:?}", bias.shape())));
            }
        }
        MacTally::add_layer((b * i * o) as u64);
        let mut value = {
            let (x, w) = (self.value(), weight.value());
            let x2 = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let w2 = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            x2.dot(&w2.t()).into_dyn()
        };
        if let Some(bias) = bias {
            value += &*bias.value();
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            parents.push(bias.clone());
        }
        Ok(Tensor::from_op(
            value,
            parents,
            Box::new(move |g, parents| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let dx = parents[0].requires_grad().then(|| {
                    let w = parents[1].value();
                    g2.dot(&w.view().into_dimensionality::<ndarray::Ix2>().unwrap()).into_dyn()
                });
                let dw = parents[1].requires_grad().then(|| {
                    let x = parents[0].value();
                    g2.t().dot(&x.view().into_dimensionality::<ndarray::Ix2>().unwrap()).into_dyn()
                });
                let mut grads = vec![dx, dw];
                if parents.len() == 3 {
                    grads.push(Some(g.sum_axis(Axis(0))));
                }
                grads
            }),
        ))
    }

    /// Softmax along `axis`, stabilised by subtracting the lane maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis(axis, self.ndim(), "softmax")?;
        let mut y = self.value().clone();
        for mut lane in y.lanes_mut(Axis(axis)) {
            let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            lane.mapv_inplace(|v| (v - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|v| v / s);
        }
        let out = y.clone();
        Ok(Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut d = g * &out;
                Zip::from(d.lanes_mut(Axis(axis))).and(out.lanes(Axis(axis))).for_each(|mut d, y| {
                    let s = d.sum();
                    Zip::from(&mut d).and(&y).for_each(|d, &y| *d -= y * s);
                });
                vec![Some(d)]
            }),
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis(axis, self.ndim(), "log_softmax")?;
        let mut y = self.value().clone();
        for mut lane in y.lanes_mut(Axis(axis)) {
            let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + lane.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            lane.mapv_inplace(|v| v - lse);
        }
        let probs = y.mapv(f64::exp);
        Ok(Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut d = g.clone();
                Zip::from(d.lanes_mut(Axis(axis))).and(probs.lanes(Axis(axis))).for_each(|mut d, p| {
                    let s = d.sum();
                    Zip::from(&mut d).and(&p).for_each(|d, &p| *d -= p * s);
                });
                vec![Some(d)]
            }),
        ))
    }

    /// `x / max(||x||, eps)` along `axis`.
    pub fn l2_normalize(&self, axis: usize, eps: f64) -> Result<Tensor> {
        check_axis(axis, self.ndim(), "l2_normalize")?;
        let x = self.value().clone();
        let mut norms_shape = x.shape().to_vec();
        norms_shape[axis] = 1;
        let mut denom = Array::zeros(IxDyn(&norms_shape));
        Zip::from(denom.lanes_mut(Axis(axis))).and(x.lanes(Axis(axis))).for_each(|mut d, lane| {
            d[0] = lane.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        });
        let value = &x / &denom;
        let y = value.clone();
        Ok(Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut d = g / &denom;
                Zip::from(d.lanes_mut(Axis(axis)))
                    .and(y.lanes(Axis(axis)))
                    .and(g.lanes(Axis(axis)))
                    .and(denom.lanes(Axis(axis)))
                    .for_each(|mut d, y, g, n| {
                        // below the clamp the denominator is constant
                        if n[0] > eps {
                            let s: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
                            Zip::from(&mut d).and(&y).for_each(|d, &y| *d -= y * s / n[0]);
                        }
                    });
                vec![Some(d)]
            }),
        ))
    }

    /// Batch normalisation over axis 1 of an `(N, C, ...)` tensor.
    pub fn batch_norm(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &Tensor,
        running_var: &Tensor,
        mode: BatchNormMode,
        eps: f64,
    ) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::shape(format!("batch_norm needs rank >= 2, got {shape:?}")));
        }
        let c = shape[1];
        for (name, t) in [("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
            if t.shape() != [c] {
                return Err(Error::shape(format!("batch_norm {name} must be [{c}], got {:?}", t.shape())));
            }
        }
        let n = shape[0];
        let s: usize = shape[2..].iter().product();
        let count = n * s;
        if count == 0 {
            return Err(Error::shape("batch_norm on an empty batch"));
        }
        let x = self.value();
        let xs = x.as_slice().unwrap();
        let lane = |ch: usize| (0..n).flat_map(move |i| (i * c + ch) * s..(i * c + ch + 1) * s);

        let (mean, invstd) = match mode {
            BatchNormMode::Train { momentum } => {
                let mut mean = Array1::<f64>::zeros(c);
                let mut var = Array1::<f64>::zeros(c);
                for ch in 0..c {
                    let m = lane(ch).map(|i| xs[i]).sum::<f64>() / count as f64;
                    let v = lane(ch).map(|i| (xs[i] - m).powi(2)).sum::<f64>() / count as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                {
                    let mut rm = running_mean.value_mut();
                    let mut rv = running_var.value_mut();
                    for ch in 0..c {
                        rm[[ch]] = (1.0 - momentum) * rm[[ch]] + momentum * mean[ch];
                        rv[[ch]] = (1.0 - momentum) * rv[[ch]] + momentum * var[ch] * unbias;
                    }
                }
                (mean, var.mapv(|v| 1.0 / (v + eps).sqrt()))
            }
            BatchNormMode::Eval => {
                let rm = running_mean.value();
                let rv = running_var.value();
                (
                    Array1::from_iter(rm.iter().copied()),
                    Array1::from_iter(rv.iter().map(|&v| 1.0 / (v + eps).sqrt())),
                )
            }
        };
        let gv = gamma.value();
        let bv = beta.value();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for ch in 0..c {
            let (m, is, gm, bt) = (mean[ch], invstd[ch], gv[[ch]], bv[[ch]]);
            for i in lane(ch) {
                let h = (xs[i] - m) * is;
                xhat[i] = h;
                out[i] = gm * h + bt;
            }
        }
        drop((x, gv, bv));
        let value = Array::from_shape_vec(IxDyn(&shape), out).unwrap();
        let train = matches!(mode, BatchNormMode::Train { .. });
        Ok(Tensor::from_op(
            value,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, parents| {
                let gs = g.as_slice().unwrap();
                let gm = parents[1].value();
                let lane = |ch: usize| (0..n).flat_map(move |i| (i * c + ch) * s..(i * c + ch + 1) * s);
                let mut dx = vec![0.0; gs.len()];
                let mut dgamma = Array::zeros(IxDyn(&[c]));
                let mut dbeta = Array::zeros(IxDyn(&[c]));
                for ch in 0..c {
                    let sum_g: f64 = lane(ch).map(|i| gs[i]).sum();
                    let sum_gx: f64 = lane(ch).map(|i| gs[i] * xhat[i]).sum();
                    dgamma[[ch]] = sum_gx;
                    dbeta[[ch]] = sum_g;
                    let k = gm[[ch]] * invstd[ch];
                    if train {
                        let m = count as f64;
                        for i in lane(ch) {
                            dx[i] = k * (gs[i] - sum_g / m - xhat[i] * sum_gx / m);
                        }
                    } else {
                        for i in lane(ch) {
                            dx[i] = k * gs[i];
                        }
                    }
                }
                vec![
                    Some(Array::from_shape_vec(IxDyn(&shape), dx).unwrap()),
                    Some(dgamma),
                    Some(dbeta),
                ]
            }),
        ))
    }

    /// Max pooling over the last two axes with `-inf` padding.
    pub fn max_pool2d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
        let shape = self.shape();
        let r = shape.len();
        if r < 2 || kernel == 0 || stride == 0 {
            return Err(Error::shape(format!("max_pool2d: invalid call on shape {shape:?}")));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        if h + 2 * padding < kernel || w + 2 * padding < kernel || padding * 2 > kernel {
            return Err(Error::shape(format!("max_pool2d: kernel {kernel} too large for {h}x{w}")));
        }
        let ho = (h + 2 * padding - kernel) / stride + 1;
        let wo = (w + 2 * padding - kernel) / stride + 1;
        let planes: usize = shape[..r - 2].iter().product();
        let x = self.value();
        let xs = x.as_slice().unwrap();
        let mut out = vec![0.0; planes * ho * wo];
        let mut arg = vec![0usize; planes * ho * wo];
        for p in 0..planes {
            let base = p * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for a in 0..kernel {
                        let ih = (oh * stride + a) as isize - padding as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for b in 0..kernel {
                            let iw = (ow * stride + b) as isize - padding as isize;
                            if iw < 0 || iw as usize >= w {
                                continue;
                            }
                            let i = base + ih as usize * w + iw as usize;
                            if xs[i] > best || best_i == usize::MAX {
                                best = xs[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (p * ho + oh) * wo + ow;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
        drop(x);
        let mut out_shape = shape[..r - 2].to_vec();
        out_shape.extend([ho, wo]);
        let value = Array::from_shape_vec(IxDyn(&out_shape), out).unwrap();
        Ok(Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut d = vec![0.0; shape.iter().product()];
                for (gi, &a) in g.iter().zip(&arg) {
                    d[a] += gi;
                }
                vec![Some(Array::from_shape_vec(IxDyn(&shape), d).unwrap())]
            }),
        ))
    }

    /// Global max over the last two (spatial) axes.
    pub fn spatial_max_pool(&self) -> Result<Tensor> {
        let shape = self.shape();
        let r = shape.len();
        if r < 2 {
            return Err(Error::shape(format!("spatial_max_pool needs rank >= 2, got {shape:?}")));
        }
        let mut flat = shape[..r - 2].to_vec();
        flat.push(shape[r - 2] * shape[r - 1]);
        self.reshape(&flat)?.max_axis(r - 2, false)
    }

    /// Mean over the temporal axis.
    pub fn temporal_avg_pool(&self, axis: usize) -> Result<Tensor> {
        self.mean_axis(axis, false)
    }
}
