//! Parameter and multiply-accumulate accounting, and polynomial fits of
//! cost against clip length.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::layers::Macs;
use crate::network::{Model, NetworkSpec};

/// Total number of trainable scalars.
pub fn count_params(model: &Model) -> usize {
    model.num_params()
}

/// Multiply-accumulates of one forward pass on `(N, T, 3, H, W)` clips.
/// Convolutions and linear layers are `layer`; activation products inside
/// the APM and the non-local block are `attention`. Normalisation,
/// activations and pooling are not counted.
pub fn count_flops(model: &Model, input: &[usize]) -> Result<Macs> {
    model.macs(input)
}

/// Least-squares polynomial fit `y ≈ Σ c_k x^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyFit {
    /// Coefficients from the constant term upwards.
    pub coefficients: Vec<f64>,
    /// Largest `|y − ŷ| / |y|` over the samples.
    pub max_rel_residual: f64,
}

pub fn fit_polynomial(xs: &[f64], ys: &[f64], degree: usize) -> Result<PolyFit> {
    if xs.len() != ys.len() || xs.len() <= degree {
        return Err(Error::invalid(format!("{} samples cannot determine a degree-{degree} fit", xs.len())));
    }
    // Columns are scaled to unit peak so large counts stay well conditioned.
    let col_scale: Vec<f64> = (0..=degree).map(|k| xs.iter().map(|x| x.abs().powi(k as i32)).fold(0.0, f64::max).max(1.0)).collect();
    let a = DMatrix::from_fn(xs.len(), degree + 1, |i, k| xs[i].powi(k as i32) / col_scale[k]);
    let b = DVector::from_column_slice(ys);
    let solved = a.clone().svd(true, true).solve(&b, 1e-14).map_err(|e| Error::invalid(e.to_string()))?;
    let coefficients: Vec<f64> = solved.iter().zip(&col_scale).map(|(c, s)| c / s).collect();
    let fitted = a * solved;
    let max_rel_residual = ys
        .iter()
        .zip(fitted.iter())
        .map(|(y, f)| (y - f).abs() / y.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    Ok(PolyFit { coefficients, max_rel_residual })
}

/// Cost of one model as a function of clip length.
#[derive(Clone, Debug, PartialEq)]
pub struct CostCurve {
    pub frames: Vec<usize>,
    pub macs: Vec<Macs>,
}

impl CostCurve {
    fn series(&self, pick: impl Fn(&Macs) -> u64) -> (Vec<f64>, Vec<f64>) {
        (self.frames.iter().map(|&t| t as f64).collect(), self.macs.iter().map(|m| pick(m) as f64).collect())
    }

    pub fn fit_total(&self, degree: usize) -> Result<PolyFit> {
        let (x, y) = self.series(Macs::total);
        fit_polynomial(&x, &y, degree)
    }

    pub fn fit_attention(&self, degree: usize) -> Result<PolyFit> {
        let (x, y) = self.series(|m| m.attention);
        fit_polynomial(&x, &y, degree)
    }
}

/// Analytic cost of `spec` on a single clip `(1, T, 3, H, W)` for each `T`.
pub fn cost_curve(spec: &NetworkSpec, frames: &[usize], height: usize, width: usize) -> Result<CostCurve> {
    let model = Model::new(spec.clone(), 0)?;
    let macs = frames.iter().map(|&t| model.macs(&[1, t, 3, height, width])).collect::<Result<_>>()?;
    Ok(CostCurve { frames: frames.to_vec(), macs })
}
