//! Per-pattern error metrics, the ℓ1 potential regularizer and the batched loss.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RopError};
use crate::fields::ComplexField;
use crate::forward::{ForwardModel, PotentialVolume};

/// Distance between model and measured intensities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// `Σ |I - J|`
    E1,
    /// `Σ (I - J)²`
    E2,
    /// `Σ (I - J ln I)`, the Poisson negative log-likelihood up to a constant.
    E3,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::E1 => "e1",
            Metric::E2 => "e2",
            Metric::E3 => "e3",
        })
    }
}

impl FromStr for Metric {
    type Err = RopError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "e1" => Ok(Metric::E1),
            "e2" => Ok(Metric::E2),
            "e3" => Ok(Metric::E3),
            other => Err(RopError::InvalidArgument(format!("unknown metric '{other}' (e1|e2|e3)"))),
        }
    }
}

/// Default relative floor for the logarithm of the Poisson metric.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub metric: Metric,
    /// Regularization weight.
    pub mu: f64,
    /// Floor for `ln I` in E3, relative to the mean measured count.
    /// Zero disables flooring.
    pub eps: f64,
}

impl LossConfig {
    pub fn new(metric: Metric, mu: f64) -> Self {
        LossConfig {
            metric,
            mu,
            eps: DEFAULT_LOG_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(RopError::InvalidArgument(format!("mu must be >= 0, got {}", self.mu)));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(RopError::InvalidArgument(format!("eps must be >= 0, got {}", self.eps)));
        }
        Ok(())
    }

    /// Absolute intensity floor for a batch whose mean count is `mean_count`.
    pub fn floor(&self, mean_count: f64) -> f64 {
        if self.eps == 0.0 {
            0.0
        } else {
            (self.eps * mean_count).max(f64::MIN_POSITIVE)
        }
    }
}

/// Compensated (Neumaier) summation.
pub(crate) fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn check_pair(i: &ArrayView2<'_, f64>, j: &ArrayView2<'_, f64>) -> Result<()> {
    if i.dim() != j.dim() {
        return Err(RopError::shape(format!("{:?}", j.dim()), format!("{:?}", i.dim())));
    }
    if j.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(RopError::Domain("measured counts must be finite and non-negative".into()));
    }
    if i.iter().any(|x| !x.is_finite()) {
        return Err(RopError::NonFinite("model intensity".into()));
    }
    Ok(())
}

/// Error of model intensities `i` against measurements `j`.
///
/// For E3 intensities at or below `floor` are replaced by `floor` inside
/// the logarithm. A zero floor with a zero model intensity facing a positive
/// count is a domain error.
pub fn error_floored(metric: Metric, i: ArrayView2<'_, f64>, j: ArrayView2<'_, f64>, floor: f64) -> Result<f64> {
    Ok(error_and_seed(metric, i, j, floor, false)?.0)
}

/// [`error_floored`] without a floor.
pub fn error(metric: Metric, i: ArrayView2<'_, f64>, j: ArrayView2<'_, f64>) -> Result<f64> {
    error_floored(metric, i, j, 0.0)
}

/// Error value and, if requested, its derivative with respect to each `I`.
pub(crate) fn error_and_seed(
    metric: Metric,
    i: ArrayView2<'_, f64>,
    j: ArrayView2<'_, f64>,
    floor: f64,
    want_seed: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    check_pair(&i, &j)?;
    let mut seed = want_seed.then(|| Array2::<f64>::zeros(i.dim()));
    let mut terms = Vec::with_capacity(i.len());
    for (k, (&x, &y)) in i.iter().zip(j.iter()).enumerate() {
        let (term, slope) = match metric {
            Metric::E1 => ((x - y).abs(), sign(x - y)),
            Metric::E2 => ((x - y) * (x - y), 2.0 * (x - y)),
            Metric::E3 => {
                let eff = x.max(floor);
                if y == 0.0 {
                    (x, 1.0)
                } else if eff <= 0.0 {
                    return Err(RopError::Domain(
                        "Poisson metric needs a positive model intensity where counts are positive".into(),
                    ));
                } else if x > floor {
                    (x - y * eff.ln(), 1.0 - y / x)
                } else {
                    (x - y * eff.ln(), 1.0)
                }
            }
        };
        terms.push(term);
        if let Some(s) = seed.as_mut() {
            s.as_slice_mut().expect("standard layout")[k] = slope;
        }
    }
    Ok((stable_sum(terms), seed))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum of complex moduli over every slice and pixel.
pub fn regularizer(v: &PotentialVolume) -> f64 {
    stable_sum(v.slices().iter().map(|x| x.norm()))
}

/// Smoothed subgradient of [`regularizer`], `V / sqrt(|V|² + ε²)` with
/// `ε = 1e-8 max|V|`; zero for an all-zero volume.
pub(crate) fn regularizer_gradient(v: &PotentialVolume) -> Array3<Complex64> {
    let peak = v.slices().iter().map(|x| x.norm()).fold(0.0, f64::max);
    if peak == 0.0 {
        return Array3::zeros(v.slices().dim());
    }
    let eps2 = (1e-8 * peak).powi(2);
    v.slices().mapv(|x| x / (x.norm_sqr() + eps2).sqrt())
}

fn mean_count(data: ArrayView3<'_, f64>) -> f64 {
    stable_sum(data.iter().copied()) / data.len() as f64
}

/// Loss of a single pattern: error plus `mu` times the regularizer.
pub fn loss_single(
    model: &ForwardModel,
    v: &PotentialVolume,
    probe: &ComplexField,
    position: [f64; 2],
    measured: ArrayView2<'_, f64>,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let floor = cfg.floor(stable_sum(measured.iter().copied()) / measured.len() as f64);
    let modelled = model.pattern(probe, v, position)?;
    let e = error_floored(cfg.metric, modelled.view(), measured, floor)?;
    Ok(e + cfg.mu * regularizer(v))
}

pub(crate) fn check_batch(
    model: &ForwardModel,
    positions: &[[f64; 2]],
    data: ArrayView3<'_, f64>,
) -> Result<()> {
    let (p, r, c) = data.dim();
    if p == 0 || p != positions.len() {
        return Err(RopError::shape(format!("{} patterns", positions.len()), p));
    }
    if r != model.n() || c != model.n() {
        return Err(RopError::shape(format!("{0}x{0}", model.n()), format!("{r}x{c}")));
    }
    Ok(())
}

/// Mean loss over a batch of patterns, `mean_p E_p + mu R`.
///
/// Per-pattern errors are evaluated in parallel and reduced in pattern
/// order, so the value does not depend on the thread count.
pub fn loss_batched(
    model: &ForwardModel,
    v: &PotentialVolume,
    probe: &ComplexField,
    positions: &[[f64; 2]],
    data: ArrayView3<'_, f64>,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_batch(model, positions, data)?;
    model.check(probe, v)?;
    let floor = cfg.floor(mean_count(data));
    let errors: Vec<Result<f64>> = positions
        .par_iter()
        .enumerate()
        .map(|(p, &r)| {
            let modelled = model.pattern_unchecked(probe, v, r);
            error_floored(cfg.metric, modelled.view(), data.index_axis(ndarray::Axis(0), p), floor)
        })
        .collect();
    let errors = errors.into_iter().collect::<Result<Vec<f64>>>()?;
    let mean = stable_sum(errors.iter().copied()) / positions.len() as f64;
    Ok(mean + cfg.mu * regularizer(v))
}
