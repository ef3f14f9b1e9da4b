//! Reverse-mode gradients of the loss with respect to potential, probe and
//! scan positions.
//!
//! Complex gradients follow `G = ∂ℓ/∂Re x + i ∂ℓ/∂Im x`, so a perturbation
//! `η` changes the loss by `Re Σ conj(G) η` to first order.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Result, RopError};
use crate::fields::{fft2_inplace, ifft2_inplace, shift_inplace, signed_freq, ComplexField};
use crate::forward::{crop_intensity, crop_to_fft, ForwardModel, PotentialVolume};
use crate::loss::{check_batch, error_and_seed, regularizer, regularizer_gradient, stable_sum, LossConfig, Metric};

/// Spatial derivative used for the position gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeFilter {
    /// Three-tap `[-1, 0, 1] / 2d`, applied circularly.
    CentralDifference,
    /// Exact derivative of the band-limited interpolant.
    #[default]
    Fourier,
}

/// Gradients of a loss with respect to every parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// Potential gradient, one grid per slice.
    pub dv: Array3<Complex64>,
    /// Probe gradient.
    pub dprobe: Array2<Complex64>,
    /// Position gradients `(∂/∂x, ∂/∂y)` per pattern.
    pub dr: Vec<[f64; 2]>,
}

impl GradientBundle {
    pub fn dv_re(&self) -> Array3<f64> {
        self.dv.mapv(|g| g.re)
    }

    pub fn dv_im(&self) -> Array3<f64> {
        self.dv.mapv(|g| g.im)
    }

    pub fn dprobe_re(&self) -> Array2<f64> {
        self.dprobe.mapv(|g| g.re)
    }

    pub fn dprobe_im(&self) -> Array2<f64> {
        self.dprobe.mapv(|g| g.im)
    }

    pub fn is_finite(&self) -> bool {
        self.dv.iter().all(|g| g.is_finite())
            && self.dprobe.iter().all(|g| g.is_finite())
            && self.dr.iter().flatten().all(|g| g.is_finite())
    }
}

/// One pattern's contribution before scattering into the object frame.
struct PatternGradient {
    error: f64,
    origin: (usize, usize),
    dv_window: Vec<Array2<Complex64>>,
    dprobe: Array2<Complex64>,
    dr: [f64; 2],
}

fn derivative(a: &Array2<Complex64>, axis: Axis, pitch: f64, filter: DerivativeFilter) -> Array2<Complex64> {
    let m = a.nrows();
    match filter {
        DerivativeFilter::CentralDifference => {
            let scale = 1.0 / (2.0 * pitch);
            Array2::from_shape_fn((m, m), |(i, j)| {
                let (fwd, back) = if axis == Axis(1) {
                    (a[[i, (j + 1) % m]], a[[i, (j + m - 1) % m]])
                } else {
                    (a[[(i + 1) % m, j]], a[[(i + m - 1) % m, j]])
                };
                (fwd - back) * scale
            })
        }
        DerivativeFilter::Fourier => {
            let mut spec = a.clone();
            fft2_inplace(&mut spec);
            let dk = 2.0 * PI / (m as f64 * pitch);
            for ((i, j), v) in spec.indexed_iter_mut() {
                let idx = if axis == Axis(1) { j } else { i };
                // the unpaired Nyquist bin has no odd part to differentiate
                let f = if m.is_multiple_of(2) && idx == m / 2 { 0.0 } else { signed_freq(idx, m) as f64 };
                *v *= Complex64::new(0.0, dk * f);
            }
            ifft2_inplace(&mut spec);
            spec
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn pattern_gradient(
    model: &ForwardModel,
    v: &PotentialVolume,
    probe: &ComplexField,
    position: [f64; 2],
    measured: ArrayView2<'_, f64>,
    metric: Metric,
    floor: f64,
    filter: DerivativeFilter,
) -> Result<PatternGradient> {
    let (m, n) = (model.m(), model.n());
    let trace = model.trace(probe, v, position);
    let intensity = crop_intensity(&trace.spectrum, n);
    let (error, seed) = error_and_seed(metric, intensity.view(), measured, floor, true)?;
    let seed = seed.expect("seed requested");

    // adjoint of |.|² and the crop: unobserved frequencies receive nothing
    let mut g = Array2::<Complex64>::zeros((m, m));
    for a in 0..n {
        let u = crop_to_fft(a, m, n);
        for b in 0..n {
            let w = crop_to_fft(b, m, n);
            g[[u, w]] = trace.spectrum[[u, w]] * (2.0 * seed[[a, b]]);
        }
    }
    ifft2_inplace(&mut g);

    let z_count = v.nslices();
    let mut dv_window = vec![Array2::<Complex64>::zeros((0, 0)); z_count];
    for z in (0..z_count).rev() {
        model.propagator().apply_adjoint_inplace(&mut g);
        let (input, t) = (&trace.inputs[z], &trace.trans[z]);
        let mut dv = Array2::<Complex64>::zeros((m, m));
        Zip::from(&mut dv)
            .and(&mut g)
            .and(input)
            .and(t)
            .for_each(|dv, g, &psi, &t| {
                let u = psi * t;
                *dv = -Complex64::i() * u.conj() * *g;
                *g *= t.conj();
            });
        dv_window[z] = dv;
    }

    let pitch = model.pitch_nm();
    let dx = derivative(&trace.probe, Axis(1), pitch, filter);
    let dy = derivative(&trace.probe, Axis(0), pitch, filter);
    // the probe moves with R, so ψs(r) = ψ(r - R) and ∂ψs/∂R = -∇ψs
    let dr = [
        -stable_sum(g.iter().zip(dx.iter()).map(|(a, b)| (a.conj() * b).re)),
        -stable_sum(g.iter().zip(dy.iter()).map(|(a, b)| (a.conj() * b).re)),
    ];
    let res = trace.placement.residual;
    shift_inplace(&mut g, [-res[0], -res[1]], pitch);
    Ok(PatternGradient {
        error,
        origin: trace.placement.origin,
        dv_window,
        dprobe: g,
        dr,
    })
}

fn scatter_add(dv: &mut Array3<Complex64>, window: &[Array2<Complex64>], origin: (usize, usize), scale: f64) {
    let big = dv.dim().1;
    for (z, w) in window.iter().enumerate() {
        let mut slice = dv.index_axis_mut(Axis(0), z);
        for ((i, j), &g) in w.indexed_iter() {
            slice[[(origin.0 + i) % big, (origin.1 + j) % big]] += g * scale;
        }
    }
}

/// Loss and gradients of a single pattern, including the regularizer.
pub fn backprop_pattern(
    model: &ForwardModel,
    v: &PotentialVolume,
    probe: &ComplexField,
    position: [f64; 2],
    measured: ArrayView2<'_, f64>,
    cfg: &LossConfig,
    filter: DerivativeFilter,
) -> Result<(f64, GradientBundle)> {
    let data = measured.insert_axis(Axis(0));
    batched_gradients(model, v, probe, &[position], data, cfg, filter)
}

/// Mean of the per-slice gradients, broadcast back to every slice.
pub fn shared_slice_reduce(dv: &Array3<Complex64>) -> Array3<Complex64> {
    let z = dv.dim().0;
    if z == 1 {
        return dv.clone();
    }
    let mean = dv.sum_axis(Axis(0)).mapv(|g| g / z as f64);
    let mut out = Array3::zeros(dv.dim());
    for mut s in out.outer_iter_mut() {
        s.assign(&mean);
    }
    out
}

/// Patterns handled by one work item; fixed so the reduction order does not
/// depend on the thread pool.
const CHUNK: usize = 8;

/// Batched loss `mean_p E_p + mu R` and its gradients.
///
/// `dv` and `dprobe` are means over patterns; `dr[p]` carries the same
/// `1/P` factor. Shared-slice volumes get [`shared_slice_reduce`]d potential
/// gradients.
pub fn batched_gradients(
    model: &ForwardModel,
    v: &PotentialVolume,
    probe: &ComplexField,
    positions: &[[f64; 2]],
    data: ArrayView3<'_, f64>,
    cfg: &LossConfig,
    filter: DerivativeFilter,
) -> Result<(f64, GradientBundle)> {
    cfg.validate()?;
    check_batch(model, positions, data)?;
    model.check(probe, v)?;
    let p_count = positions.len();
    let inv_p = 1.0 / p_count as f64;
    let floor = cfg.floor(stable_sum(data.iter().copied()) / data.len() as f64);
    let m = model.m();
    let dims = v.slices().dim();

    struct Partial {
        errors: Vec<f64>,
        dv: Array3<Complex64>,
        dprobe: Array2<Complex64>,
        dr: Vec<[f64; 2]>,
    }

    let partials: Vec<Result<Partial>> = positions
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut part = Partial {
                errors: Vec::with_capacity(chunk.len()),
                dv: Array3::zeros(dims),
                dprobe: Array2::zeros((m, m)),
                dr: Vec::with_capacity(chunk.len()),
            };
            for (k, &r) in chunk.iter().enumerate() {
                let p = c * CHUNK + k;
                let pg = pattern_gradient(model, v, probe, r, data.index_axis(Axis(0), p), cfg.metric, floor, filter)?;
                part.errors.push(pg.error);
                scatter_add(&mut part.dv, &pg.dv_window, pg.origin, 1.0);
                part.dprobe += &pg.dprobe;
                part.dr.push([pg.dr[0] * inv_p, pg.dr[1] * inv_p]);
            }
            Ok(part)
        })
        .collect();

    let mut errors = Vec::with_capacity(p_count);
    let mut dv = Array3::<Complex64>::zeros(dims);
    let mut dprobe = Array2::<Complex64>::zeros((m, m));
    let mut dr = Vec::with_capacity(p_count);
    for part in partials {
        let part = part?;
        errors.extend(part.errors);
        dv += &part.dv;
        dprobe += &part.dprobe;
        dr.extend(part.dr);
    }
    dv.mapv_inplace(|g| g * inv_p);
    dprobe.mapv_inplace(|g| g * inv_p);
    let mut loss = stable_sum(errors) * inv_p;
    if cfg.mu > 0.0 {
        loss += cfg.mu * regularizer(v);
        Zip::from(&mut dv)
            .and(&regularizer_gradient(v))
            .for_each(|g, &r| *g += r * cfg.mu);
    }
    if v.is_shared() {
        dv = shared_slice_reduce(&dv);
    }
    let bundle = GradientBundle { dv, dprobe, dr };
    if !loss.is_finite() || !bundle.is_finite() {
        return Err(RopError::NonFinite("loss or gradient".into()));
    }
    Ok((loss, bundle))
}

/// Central finite differences of `f` at `x`, one coordinate at a time.
pub fn finite_difference_oracle(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + h;
            let up = f(&probe);
            probe[k] = orig - h;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative ℓ2 distance `|a - b| / |b|`, or `|a|` when `b` vanishes.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

/// Interleaves complex values into `(re, im)` pairs.
pub fn complex_to_reals<'a>(values: impl IntoIterator<Item = &'a Complex64>) -> Vec<f64> {
    values.into_iter().flat_map(|c| [c.re, c.im]).collect()
}

/// Inverse of [`complex_to_reals`].
pub fn reals_to_complex(values: &[f64]) -> Vec<Complex64> {
    values.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect()
}

/// Per-block relative errors between analytic and finite-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub potential: f64,
    pub probe: f64,
    pub positions: f64,
}

/// Compares analytic gradients against central differences for every
/// parameter. Intended for small instances; cost grows with the parameter count.
pub fn check_gradients(
    model: &ForwardModel,
    v: &PotentialVolume,
    probe: &ComplexField,
    positions: &[[f64; 2]],
    data: ArrayView3<'_, f64>,
    cfg: &LossConfig,
    filter: DerivativeFilter,
) -> Result<GradientCheck> {
    let (_, g) = batched_gradients(model, v, probe, positions, data, cfg, filter)?;
    let loss = |v: &PotentialVolume, p: &ComplexField, r: &[[f64; 2]]| {
        crate::loss::loss_batched(model, v, p, r, data, cfg).unwrap_or(f64::NAN)
    };

    let v_scale = v.slices().iter().map(|x| x.norm()).fold(0.0, f64::max).max(1.0);
    let x_v = complex_to_reals(v.slices().iter());
    let fd_v = finite_difference_oracle(
        |x| {
            let vals = Array3::from_shape_vec(v.slices().dim(), reals_to_complex(x)).expect("shape");
            let vol = PotentialVolume::new(vals, v.dz_nm(), v.pitch_nm(), false).expect("finite");
            loss(&vol, probe, positions)
        },
        &x_v,
        1e-5 * v_scale,
    );
    let dv = if v.is_shared() {
        // the oracle perturbs slices independently
        crate::grad::batched_gradients(
            model,
            &PotentialVolume::new(v.slices().clone(), v.dz_nm(), v.pitch_nm(), false)?,
            probe,
            positions,
            data,
            cfg,
            filter,
        )?
        .1
        .dv
    } else {
        g.dv.clone()
    };

    let p_scale = probe.values().iter().map(|x| x.norm()).fold(0.0, f64::max);
    let x_p = complex_to_reals(probe.values().iter());
    let fd_p = finite_difference_oracle(
        |x| {
            let vals = Array2::from_shape_vec(probe.values().dim(), reals_to_complex(x)).expect("shape");
            loss(v, &ComplexField::from_parts(vals, probe.pitch()), positions)
        },
        &x_p,
        1e-5 * p_scale,
    );

    let x_r: Vec<f64> = positions.iter().flatten().copied().collect();
    let fd_r = finite_difference_oracle(
        |x| {
            let r: Vec<[f64; 2]> = x.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
            loss(v, probe, &r)
        },
        &x_r,
        1e-3 * model.pitch_nm(),
    );
    // the 1/P of the batch mean is already part of dr[p]
    let an_r: Vec<f64> = g.dr.iter().flatten().copied().collect();

    Ok(GradientCheck {
        potential: relative_error(&complex_to_reals(dv.iter()), &fd_v),
        probe: relative_error(&complex_to_reals(g.dprobe.iter()), &fd_p),
        positions: relative_error(&an_r, &fd_r),
    })
}
