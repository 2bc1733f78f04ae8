//! Central finite-difference verification of analytic gradients.
//!
//! The checked scalar is `L = Σ r ⊙ f(...)` with a fixed random projection
//! `r`, so every output entry contributes. The numeric derivative uses the
//! five-point central stencil
//! `(8(L(θ+h) − L(θ−h)) − (L(θ+2h) − L(θ−2h))) / 12h`, whose truncation error
//! is `O(h⁴)`. Each probed entry is compared as
//! `|analytic − numeric| / max(|analytic|, |numeric|, FLOOR)`.
//!
//! Networks with ReLU and max pooling are only piecewise smooth, and a probe
//! within `2h` of a kink gets a biased estimate. When the estimate at `h`
//! disagrees with the analytic value, the probe is repeated with the steps
//! in [`REFINED_STEPS`] until one agrees, and the closest estimate is kept;
//! such probes are counted in `refined`. A wrong analytic gradient disagrees
//! at every step.

use ndarray::IxDyn;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{no_grad, Array, BatchNormMode, Conv3dSpec, Tensor};
use crate::error::{Error, Result};

/// Finite-difference step.
pub const STEP: f64 = 1e-4;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const FLOOR: f64 = 1e-4;
/// Steps tried in order for probes that fail at [`STEP`].
pub const REFINED_STEPS: [f64; 2] = [STEP / 10.0, STEP / 100.0];

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Probes that needed the second, finer step.
    pub refined: usize,
    pub pass: bool,
}

/// Compares analytic and numeric gradients of `f` with respect to `leaves`.
///
/// At most `max_entries` entries per leaf are probed (chosen by `seed`).
pub fn check<F>(name: &str, leaves: &[Tensor], f: F, seed: u64, max_entries: usize) -> Result<GradcheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let out = f()?;
    let projection = Array::from_shape_simple_fn(out.value().raw_dim(), || rng.random_range(-1.0..1.0));
    let projection = Tensor::new(projection);
    for leaf in leaves {
        leaf.zero_grad();
    }
    out.mul(&projection)?.sum().backward()?;

    let objective = || -> Result<f64> {
        let _guard = no_grad();
        let y = f()?;
        let v = y.value();
        Ok(v.iter().zip(projection.value().iter()).map(|(a, b)| a * b).sum())
    };

    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut refined = 0;
    for leaf in leaves {
        let n = leaf.len();
        let analytic = leaf.grad().unwrap_or_else(|| Array::zeros(leaf.value().raw_dim()));
        let picks: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, max_entries).into_vec();
            v.sort_unstable();
            v
        };
        for i in picks {
            let original = leaf.value().as_slice().unwrap()[i];
            let estimate = |h: f64| -> Result<f64> {
                let at = |delta: f64| -> Result<f64> {
                    leaf.value_mut().as_slice_mut().unwrap()[i] = original + delta;
                    objective()
                };
                let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
                leaf.value_mut().as_slice_mut().unwrap()[i] = original;
                Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
            };
            let a = analytic.as_slice().unwrap()[i];
            let rel_to = |numeric: f64| (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            let mut rel = rel_to(estimate(STEP)?);
            if !(rel < TOLERANCE) {
                refined += 1;
                for h in REFINED_STEPS {
                    rel = rel.min(rel_to(estimate(h)?));
                    if rel < TOLERANCE {
                        break;
                    }
                }
            }
            max_rel = if rel.is_finite() { max_rel.max(rel) } else { f64::INFINITY };
            checked += 1;
        }
        leaf.zero_grad();
    }
    Ok(GradcheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        checked,
        refined,
        pass: max_rel < TOLERANCE,
    })
}

/// Random values in `±[0.05, 1]`, kept away from zero so ReLU kinks are not
/// straddled by the finite-difference step.
pub fn random_array(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    Array::from_shape_simple_fn(IxDyn(shape), || {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Primitive operations known to [`gradcheck`], with default input shapes.
pub const PRIMITIVES: &[(&str, &[&[usize]])] = &[
    ("add", &[&[3, 4], &[1, 4]]),
    ("mul", &[&[2, 3, 4], &[2, 1, 4]]),
    ("exp", &[&[6]]),
    ("relu", &[&[10]]),
    ("sigmoid", &[&[8]]),
    ("softmax:1", &[&[3, 5]]),
    ("log_softmax:1", &[&[3, 5]]),
    ("l2_normalize:1", &[&[3, 4, 2]]),
    ("matmul", &[&[2, 3, 4], &[2, 4, 5]]),
    ("linear", &[&[3, 4]]),
    ("conv2d", &[&[2, 3, 5, 4]]),
    ("conv3d", &[&[1, 2, 4, 4, 3]]),
    ("batchnorm_train", &[&[4, 3, 5]]),
    ("batchnorm_eval", &[&[4, 3, 5]]),
    ("max_pool2d", &[&[1, 2, 6, 5]]),
    ("spatial_max_pool", &[&[2, 3, 4, 3]]),
    ("temporal_avg_pool:2", &[&[2, 3, 4]]),
    ("sum_axis:1", &[&[3, 4]]),
    ("max_axis:1", &[&[3, 4]]),
    ("concat:1", &[&[2, 3], &[2, 2]]),
    ("slice:1", &[&[2, 5]]),
    ("pad_zeros:0", &[&[3, 2]]),
    ("permute", &[&[2, 3, 4]]),
    ("reshape", &[&[2, 6]]),
];

/// Finite-difference check of a named primitive.
///
/// `op` is a name from [`PRIMITIVES`], optionally suffixed with `:axis`
/// (for example `softmax:1`). `shapes[0]` is the main input; further shapes
/// are second operands where the op has one. Missing shapes fall back to the
/// defaults in [`PRIMITIVES`]; weights are derived from the input shape.
pub fn gradcheck(op: &str, shapes: &[Vec<usize>], seed: u64) -> Result<GradcheckReport> {
    let (name, axis) = match op.split_once(':') {
        Some((n, a)) => (
            n,
            Some(a.parse::<usize>().map_err(|_| Error::invalid(format!("bad axis in op '{op}'")))?),
        ),
        None => (op, None),
    };
    let defaults = PRIMITIVES
        .iter()
        .find(|(n, _)| n.split(':').next() == Some(name))
        .ok_or_else(|| Error::invalid(format!("unknown op '{name}'")))?
        .1;
    let shape_at = |i: usize| -> Vec<usize> {
        shapes.get(i).cloned().unwrap_or_else(|| defaults.get(i).map(|s| s.to_vec()).unwrap_or_default())
    };
    let axis_or = |d: usize| axis.unwrap_or(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::param(random_array(&shape_at(0), &mut rng));
    let label = op.to_string();
    let max_entries = 64;

    macro_rules! run {
        ($leaves:expr, $body:expr) => {
            check(&label, &$leaves, $body, seed, max_entries)
        };
    }

    match name {
        "add" | "mul" | "matmul" | "concat" => {
            let b = Tensor::param(random_array(&shape_at(1), &mut rng));
            let (x, y) = (a.clone(), b.clone());
            match name {
                "add" => run!([a, b], || x.add(&y)),
                "mul" => run!([a, b], || x.mul(&y)),
                "matmul" => run!([a, b], || x.matmul(&y)),
                _ => run!([a, b], || Tensor::concat(&[x.clone(), y.clone()], axis_or(0))),
            }
        }
        "exp" => run!([a.clone()], || Ok(a.exp())),
        "relu" => run!([a.clone()], || Ok(a.relu())),
        "sigmoid" => run!([a.clone()], || Ok(a.sigmoid())),
        "softmax" => run!([a.clone()], || a.softmax(axis_or(0))),
        "log_softmax" => run!([a.clone()], || a.log_softmax(axis_or(0))),
        "l2_normalize" => run!([a.clone()], || a.l2_normalize(axis_or(0), 1e-12)),
        "linear" => {
            let s = a.shape();
            let w = Tensor::param(random_array(&[5, *s.last().unwrap_or(&1)], &mut rng));
            let b = Tensor::param(random_array(&[5], &mut rng));
            let (x, wt, bt) = (a.clone(), w.clone(), b.clone());
            run!([a, w, b], || x.linear(&wt, Some(&bt)))
        }
        "conv2d" => {
            let s = a.shape();
            if s.len() != 4 {
                return Err(Error::shape("conv2d gradcheck needs a rank-4 input"));
            }
            let w = Tensor::param(random_array(&[4, s[1], 3, 3], &mut rng));
            let b = Tensor::param(random_array(&[4], &mut rng));
            let (x, wt, bt) = (a.clone(), w.clone(), b.clone());
            run!([a, w, b], || x.conv2d(&wt, Some(&bt), [2, 1], [1, 1]))
        }
        "conv3d" => {
            let s = a.shape();
            if s.len() != 5 {
                return Err(Error::shape("conv3d gradcheck needs a rank-5 input"));
            }
            let w = Tensor::param(random_array(&[3, s[1], 3, 3, 2], &mut rng));
            let b = Tensor::param(random_array(&[3], &mut rng));
            let (x, wt, bt) = (a.clone(), w.clone(), b.clone());
            run!([a, w, b], || x.conv3d(&wt, Some(&bt), Conv3dSpec::new([1, 2, 1], [1, 1, 0])))
        }
        "batchnorm_train" | "batchnorm_eval" => {
            let c = *a.shape().get(1).ok_or_else(|| Error::shape("batchnorm needs rank >= 2"))?;
            let gamma = Tensor::param(random_array(&[c], &mut rng));
            let beta = Tensor::param(random_array(&[c], &mut rng));
            let rm = Tensor::new(random_array(&[c], &mut rng));
            let rv = Tensor::new(random_array(&[c], &mut rng).mapv(|v| v.abs() + 0.5));
            let mode = if name == "batchnorm_train" {
                BatchNormMode::Train { momentum: 0.1 }
            } else {
                BatchNormMode::Eval
            };
            let (x, g, b) = (a.clone(), gamma.clone(), beta.clone());
            run!([a, gamma, beta], || x.batch_norm(&g, &b, &rm, &rv, mode, 1e-5))
        }
        "max_pool2d" => run!([a.clone()], || a.max_pool2d(3, 2, 1)),
        "spatial_max_pool" => run!([a.clone()], || a.spatial_max_pool()),
        "temporal_avg_pool" => run!([a.clone()], || a.temporal_avg_pool(axis_or(2))),
        "sum_axis" => run!([a.clone()], || a.sum_axis(axis_or(0), false)),
        "max_axis" => run!([a.clone()], || a.max_axis(axis_or(0), false)),
        "slice" => {
            let ax = axis_or(0);
            let n = *a.shape().get(ax).ok_or_else(|| Error::shape("slice axis out of range"))?;
            run!([a.clone()], || a.slice(ax, n / 3, n))
        }
        "pad_zeros" => run!([a.clone()], || a.pad_zeros(axis_or(0), 1, 2)),
        "permute" => {
            let nd = a.ndim();
            let perm: Vec<usize> = (0..nd).rev().collect();
            run!([a.clone()], || a.permute(&perm))
        }
        "reshape" => {
            let n = a.len();
            run!([a.clone()], || a.reshape(&[n]))
        }
        _ => Err(Error::invalid(format!("unknown op '{name}'"))),
    }
}
