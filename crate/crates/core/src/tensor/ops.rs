use ndarray::{Axis, IxDyn, Slice, Zip};

use super::{check_axis, Array, Tensor};
use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

/// Sums `g` down to `shape`, undoing a broadcast.
pub(crate) fn reduce_to(g: &Array, shape: &[usize]) -> Array {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (axis, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[axis] != 1 {
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    out
}

fn broadcast_pair(a: &Array, b: &Array) -> Result<(Vec<usize>, Array, Array)> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let av = a.broadcast(IxDyn(&shape)).unwrap().to_owned();
    let bv = b.broadcast(IxDyn(&shape)).unwrap().to_owned();
    Ok((shape, av, bv))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        let value = if a.shape() == b.shape() {
            &*a + &*b
        } else {
            let (_, av, bv) = broadcast_pair(&a, &b)?;
            av + bv
        };
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        drop((a, b));
        Ok(Tensor::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| vec![Some(reduce_to(g, &sa)), Some(reduce_to(g, &sb))]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.neg())
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        let (value, av, bv) = if a.shape() == b.shape() {
            (&*a * &*b, a.clone(), b.clone())
        } else {
            let (_, av, bv) = broadcast_pair(&a, &b)?;
            (&av * &bv, av, bv)
        };
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        drop((a, b));
        Ok(Tensor::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| vec![Some(reduce_to(&(g * &bv), &sa)), Some(reduce_to(&(g * &av), &sb))]),
        ))
    }

    pub fn scale(&self, k: f64) -> Tensor {
        let value = &*self.value() * k;
        Tensor::from_op(value, vec![self.clone()], Box::new(move |g, _| vec![Some(g * k)]))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, k: f64) -> Tensor {
        let value = &*self.value() + k;
        Tensor::from_op(value, vec![self.clone()], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn exp(&self) -> Tensor {
        let value = self.value().mapv(f64::exp);
        let out = value.clone();
        Tensor::from_op(value, vec![self.clone()], Box::new(move |g, _| vec![Some(g * &out)]))
    }

    pub fn relu(&self) -> Tensor {
        let x = self.value().clone();
        let value = x.mapv(|v| v.max(0.0));
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut d = g.clone();
                Zip::from(&mut d).and(&x).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                vec![Some(d)]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let value = self.value().mapv(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        let y = value.clone();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut d = g.clone();
                Zip::from(&mut d).and(&y).for_each(|d, &y| *d *= y * (1.0 - y));
                vec![Some(d)]
            }),
        )
    }

    /// Sum of all entries as a 0-d tensor.
    pub fn sum(&self) -> Tensor {
        let shape = self.shape();
        let value = Array::from_elem(IxDyn(&[]), self.value().sum());
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gv = *g.iter().next().unwrap();
                vec![Some(Array::from_elem(IxDyn(&shape), gv))]
            }),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis(axis, self.ndim(), "sum_axis")?;
        let mut value = self.value().sum_axis(Axis(axis));
        if keepdim {
            value = value.insert_axis(Axis(axis));
        }
        let shape = self.shape();
        Ok(Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let g = if keepdim { g.clone() } else { g.clone().insert_axis(Axis(axis)) };
                vec![Some(g.broadcast(IxDyn(&shape)).unwrap().to_owned())]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis(axis, self.ndim(), "mean_axis")?;
        let n = self.shape()[axis];
        if n == 0 {
            return Err(Error::shape("mean over empty axis"));
        }
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n as f64))
    }

    /// Maximum along `axis`; the gradient flows to the first maximal entry.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis(axis, self.ndim(), "max_axis")?;
        let x = self.value();
        if x.shape()[axis] == 0 {
            return Err(Error::shape("max over empty axis"));
        }
        let mut out_shape = x.shape().to_vec();
        out_shape[axis] = 1;
        let mut value = Array::zeros(IxDyn(&out_shape));
        let mut argmax = ndarray::ArrayD::<usize>::zeros(IxDyn(&out_shape));
        Zip::from(value.lanes_mut(Axis(axis)))
            .and(argmax.lanes_mut(Axis(axis)))
            .and(x.lanes(Axis(axis)))
            .for_each(|mut v, mut a, lane| {
                let mut best = 0;
                for (i, &e) in lane.iter().enumerate() {
                    if e > lane[best] {
                        best = i;
                    }
                }
                v[0] = lane[best];
                a[0] = best;
            });
        let in_shape = x.shape().to_vec();
        drop(x);
        if !keepdim {
            value = value.remove_axis(Axis(axis));
        }
        Ok(Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let g = if keepdim { g.clone() } else { g.clone().insert_axis(Axis(axis)) };
                let mut d = Array::zeros(IxDyn(&in_shape));
                Zip::from(d.lanes_mut(Axis(axis)))
                    .and(g.lanes(Axis(axis)))
                    .and(argmax.lanes(Axis(axis)))
                    .for_each(|mut d, g, a| d[a[0]] = g[0]);
                vec![Some(d)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {:?}", self.shape(), shape)));
        }
        let old = self.shape();
        let value = self.value().clone().into_shape_with_order(IxDyn(shape)).map_err(|e| Error::shape(e.to_string()))?;
        Ok(Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.clone().into_shape_with_order(IxDyn(&old)).unwrap())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("invalid permutation {perm:?} for rank {nd}")));
        }
        let value = self.value().clone().permuted_axes(IxDyn(perm));
        let mut inverse = vec![0; nd];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.clone().permuted_axes(IxDyn(&inverse)))]),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let nd = self.ndim();
        check_axis(a.max(b), nd, "transpose")?;
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        check_axis(axis, self.ndim(), "slice")?;
        let shape = self.shape();
        if start > end || end > shape[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{end} out of range for axis {axis} of extent {}",
                shape[axis]
            )));
        }
        let value = self.value().slice_axis(Axis(axis), Slice::from(start..end)).to_owned();
        Ok(Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut d = Array::zeros(IxDyn(&shape));
                d.slice_axis_mut(Axis(axis), Slice::from(start..end)).assign(g);
                vec![Some(d)]
            }),
        ))
    }

    /// Concatenates tensors along `axis`.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        check_axis(axis, first.ndim(), "concat")?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).map_err(|e| Error::shape(format!("concat: {e}")))?;
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        drop(views);
        drop(values);
        Ok(Tensor::from_op(
            value,
            parts.to_vec(),
            Box::new(move |g, _| {
                let mut start = 0;
                extents
                    .iter()
                    .map(|&e| {
                        let part = g.slice_axis(Axis(axis), Slice::from(start..start + e)).to_owned();
                        start += e;
                        Some(part)
                    })
                    .collect()
            }),
        ))
    }

    /// Zero padding of `before`/`after` entries along `axis`.
    pub fn pad_zeros(&self, axis: usize, before: usize, after: usize) -> Result<Tensor> {
        check_axis(axis, self.ndim(), "pad_zeros")?;
        if before == 0 && after == 0 {
            return Ok(self.clone());
        }
        let mut parts = Vec::with_capacity(3);
        let mut shape = self.shape();
        if before > 0 {
            shape[axis] = before;
            parts.push(Tensor::zeros(&shape));
        }
        parts.push(self.clone());
        if after > 0 {
            shape[axis] = after;
            parts.push(Tensor::zeros(&shape));
        }
        Tensor::concat(&parts, axis)
    }

    /// Shifts along `axis` so that output index `i` holds input index
    /// `i + offset`; positions that fall outside are zero.
    pub fn shift_zeros(&self, axis: usize, offset: isize) -> Result<Tensor> {
        check_axis(axis, self.ndim(), "shift_zeros")?;
        let n = self.shape()[axis];
        let k = offset.unsigned_abs();
        if k == 0 {
            return Ok(self.clone());
        }
        if k >= n {
            let z = Tensor::zeros(&self.shape());
            // keep the graph connection so gradients are defined (all zero)
            return self.mul(&z);
        }
        if offset > 0 {
            self.slice(axis, k, n)?.pad_zeros(axis, 0, k)
        } else {
            self.slice(axis, 0, n - k)?.pad_zeros(axis, k, 0)
        }
    }
}
