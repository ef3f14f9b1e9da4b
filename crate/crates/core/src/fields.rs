//! Complex-field primitives: square grids, unitary 2-D Fourier transforms,
//! the band limit, the Fresnel propagator, sub-pixel shifts and probe
//! synthesis.
//!
//! Fields are stored in real space with natural pixel order; reciprocal-space
//! quantities use the FFT-native frequency order (zero frequency at index 0)
//! unless a function says otherwise. All boundaries are periodic.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, RopError};

/// A square grid of complex amplitudes with a physical pixel pitch (nm).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    values: Array2<Complex64>,
    pitch: f64,
}

impl ComplexField {
    pub fn new(values: Array2<Complex64>, pitch: f64) -> Result<Self> {
        let (rows, cols) = values.dim();
        if rows != cols {
            return Err(RopError::shape("square grid", format!("{rows}x{cols}")));
        }
        if rows < 2 {
            return Err(RopError::InvalidArgument(format!("grid width {rows} below 2")));
        }
        if !(pitch > 0.0 && pitch.is_finite()) {
            return Err(RopError::InvalidArgument(format!("pitch {pitch} must be positive")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RopError::NonFinite("field contains non-finite values".into()));
        }
        let values = values.as_standard_layout().into_owned();
        Ok(ComplexField { values, pitch })
    }

    pub fn zeros(m: usize, pitch: f64) -> Self {
        ComplexField {
            values: Array2::zeros((m, m)),
            pitch,
        }
    }

    /// Wraps values without validation; callers guarantee the invariants.
    pub(crate) fn from_parts(values: Array2<Complex64>, pitch: f64) -> Self {
        debug_assert_eq!(values.nrows(), values.ncols());
        ComplexField { values, pitch }
    }

    pub fn m(&self) -> usize {
        self.values.nrows()
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<Complex64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array2<Complex64> {
        self.values
    }

    pub fn intensity(&self) -> Array2<f64> {
        self.values.mapv(|v| v.norm_sqr())
    }

    pub fn total_intensity(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ComplexField::from_parts(self.values.mapv(|v| v * factor), self.pitch)
    }
}

/// Unitary 2-D FFT plan for one grid width.
pub struct Fft2 {
    m: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scratch_len: usize,
}

impl Fft2 {
    pub fn new(m: usize) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(m);
        let inverse = planner.plan_fft_inverse(m);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        Fft2 {
            m,
            forward,
            inverse,
            scratch_len,
        }
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(&*self.forward, data);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(&*self.inverse, data);
    }

    fn run(&self, fft: &dyn Fft<f64>, data: &mut [Complex64]) {
        let m = self.m;
        assert_eq!(data.len(), m * m, "buffer does not match plan size");
        let mut scratch = vec![Complex64::default(); self.scratch_len];
        fft.process_with_scratch(data, &mut scratch);
        let mut t = vec![Complex64::default(); m * m];
        transpose(data, &mut t, m);
        fft.process_with_scratch(&mut t, &mut scratch);
        let scale = 1.0 / m as f64;
        for r in 0..m {
            for c in 0..m {
                data[r * m + c] = t[c * m + r] * scale;
            }
        }
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], m: usize) {
    const BLOCK: usize = 16;
    for rb in (0..m).step_by(BLOCK) {
        for cb in (0..m).step_by(BLOCK) {
            for r in rb..(rb + BLOCK).min(m) {
                for c in cb..(cb + BLOCK).min(m) {
                    dst[c * m + r] = src[r * m + c];
                }
            }
        }
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<Fft2>>> = RefCell::new(HashMap::new());
}

fn with_plan<R>(m: usize, f: impl FnOnce(&Fft2) -> R) -> R {
    let plan = PLANS.with(|plans| {
        plans
            .borrow_mut()
            .entry(m)
            .or_insert_with(|| Rc::new(Fft2::new(m)))
            .clone()
    });
    f(&plan)
}

pub(crate) fn fft2_inplace(a: &mut Array2<Complex64>) {
    let m = a.nrows();
    let data = a.as_slice_mut().expect("field arrays use standard layout");
    with_plan(m, |p| p.forward(data));
}

pub(crate) fn ifft2_inplace(a: &mut Array2<Complex64>) {
    let m = a.nrows();
    let data = a.as_slice_mut().expect("field arrays use standard layout");
    with_plan(m, |p| p.inverse(data));
}

/// Forward unitary transform, `sum |F|^2 == sum |f|^2`.
pub fn fft2_unitary(f: &ComplexField) -> ComplexField {
    let mut v = f.values.clone();
    fft2_inplace(&mut v);
    ComplexField::from_parts(v, f.pitch)
}

/// Inverse of [`fft2_unitary`].
pub fn ifft2_unitary(f: &ComplexField) -> ComplexField {
    let mut v = f.values.clone();
    ifft2_inplace(&mut v);
    ComplexField::from_parts(v, f.pitch)
}

/// Signed frequency index of FFT bin `i` on a grid of width `m`.
#[inline]
pub fn signed_freq(i: usize, m: usize) -> i64 {
    if i <= (m - 1) / 2 {
        i as i64
    } else {
        i as i64 - m as i64
    }
}

/// Whether the bin with signed indices `(fy, fx)` lies inside the band limit,
/// i.e. within two thirds of the Nyquist frequency.
#[inline]
pub fn in_band(fy: i64, fx: i64, m: usize) -> bool {
    9 * (fy * fy + fx * fx) <= (m * m) as i64
}

/// Band-limit mask in FFT order.
pub fn band_mask(m: usize) -> Array2<bool> {
    Array2::from_shape_fn((m, m), |(i, j)| in_band(signed_freq(i, m), signed_freq(j, m), m))
}

/// Zeroes every frequency above two thirds of Nyquist.
pub fn bandwidth_limit(f: &ComplexField) -> ComplexField {
    let m = f.m();
    let mut v = f.values.clone();
    fft2_inplace(&mut v);
    for ((i, j), x) in v.indexed_iter_mut() {
        if !in_band(signed_freq(i, m), signed_freq(j, m), m) {
            *x = Complex64::default();
        }
    }
    ifft2_inplace(&mut v);
    ComplexField::from_parts(v, f.pitch)
}

/// Fraction of grid frequencies that survive the band limit.
pub fn band_fraction(m: usize) -> f64 {
    band_mask(m).iter().filter(|&&b| b).count() as f64 / (m * m) as f64
}

/// Moves the zero frequency of an FFT-ordered array to index `m/2`.
pub fn fftshift<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let m = a.nrows();
    let h = m / 2;
    Array2::from_shape_fn((m, m), |(i, j)| a[[(i + m - h) % m, (j + m - h) % m]].clone())
}

/// Inverse of [`fftshift`].
pub fn ifftshift<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let m = a.nrows();
    let h = m / 2;
    Array2::from_shape_fn((m, m), |(i, j)| a[[(i + h) % m, (j + h) % m]].clone())
}

/// Reciprocal-space Fresnel propagator with the band limit folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagator {
    kernel: Array2<Complex64>,
    dz: f64,
    lambda: f64,
}

impl Propagator {
    /// Builds `exp(-i pi lambda dz |k|^2)` on the FFT-order grid, zero outside
    /// the band limit. `lambda_nm` and `dz_nm` in nanometres.
    pub fn new(lambda_nm: f64, dz_nm: f64, m: usize, pitch: f64) -> Result<Self> {
        if !(dz_nm > 0.0) || !dz_nm.is_finite() {
            return Err(RopError::InvalidArgument(format!(
                "propagation distance must be positive, got {dz_nm}"
            )));
        }
        if !(lambda_nm > 0.0) || !(pitch > 0.0) || m < 2 {
            return Err(RopError::InvalidArgument("invalid propagator sampling".into()));
        }
        let dk = 1.0 / (m as f64 * pitch);
        let kernel = Array2::from_shape_fn((m, m), |(i, j)| {
            let (fy, fx) = (signed_freq(i, m), signed_freq(j, m));
            if in_band(fy, fx, m) {
                let k2 = ((fy * fy + fx * fx) as f64) * dk * dk;
                Complex64::from_polar(1.0, -PI * lambda_nm * dz_nm * k2)
            } else {
                Complex64::default()
            }
        });
        Ok(Propagator {
            kernel,
            dz: dz_nm,
            lambda: lambda_nm,
        })
    }

    pub fn kernel(&self) -> &Array2<Complex64> {
        &self.kernel
    }

    pub fn dz_nm(&self) -> f64 {
        self.dz
    }

    pub fn lambda_nm(&self) -> f64 {
        self.lambda
    }

    pub fn m(&self) -> usize {
        self.kernel.nrows()
    }

    /// Propagates a real-space array in place.
    pub(crate) fn apply_inplace(&self, a: &mut Array2<Complex64>) {
        fft2_inplace(a);
        ndarray::Zip::from(&mut *a)
            .and(&self.kernel)
            .for_each(|x, &k| *x *= k);
        ifft2_inplace(a);
    }

    /// Adjoint of [`Propagator::apply_inplace`].
    pub(crate) fn apply_adjoint_inplace(&self, a: &mut Array2<Complex64>) {
        fft2_inplace(a);
        ndarray::Zip::from(&mut *a)
            .and(&self.kernel)
            .for_each(|x, &k| *x *= k.conj());
        ifft2_inplace(a);
    }

    pub fn apply(&self, f: &ComplexField) -> Result<ComplexField> {
        if f.m() != self.m() {
            return Err(RopError::shape(self.m(), f.m()));
        }
        let mut v = f.values.clone();
        self.apply_inplace(&mut v);
        Ok(ComplexField::from_parts(v, f.pitch))
    }
}

/// Convenience constructor mirroring [`Propagator::new`].
pub fn make_propagator(lambda_nm: f64, dz_nm: f64, m: usize, pitch: f64) -> Result<Propagator> {
    Propagator::new(lambda_nm, dz_nm, m, pitch)
}

/// Multiplies an FFT-ordered spectrum by the linear phase ramp of a
/// translation by `shift = (x, y)` nm.
pub(crate) fn apply_shift_ramp(spec: &mut Array2<Complex64>, shift: [f64; 2], pitch: f64) {
    let m = spec.nrows();
    let (sx, sy) = (shift[0] / pitch, shift[1] / pitch);
    let row_phase: Vec<Complex64> = (0..m)
        .map(|i| Complex64::from_polar(1.0, -2.0 * PI * signed_freq(i, m) as f64 * sy / m as f64))
        .collect();
    let col_phase: Vec<Complex64> = (0..m)
        .map(|j| Complex64::from_polar(1.0, -2.0 * PI * signed_freq(j, m) as f64 * sx / m as f64))
        .collect();
    for ((i, j), v) in spec.indexed_iter_mut() {
        *v *= row_phase[i] * col_phase[j];
    }
}

pub(crate) fn shift_inplace(a: &mut Array2<Complex64>, shift: [f64; 2], pitch: f64) {
    if shift == [0.0, 0.0] {
        return;
    }
    fft2_inplace(a);
    apply_shift_ramp(a, shift, pitch);
    ifft2_inplace(a);
}

/// Circularly translates a field by `shift = (x, y)` nm through a
/// reciprocal-space phase ramp; `x` runs along columns.
pub fn subpixel_shift(f: &ComplexField, shift: [f64; 2]) -> ComplexField {
    let mut v = f.values.clone();
    shift_inplace(&mut v, shift, f.pitch);
    ComplexField::from_parts(v, f.pitch)
}

/// Parameters of a focused, possibly defocused, aberration-free probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSpec {
    pub theta_con_mrad: f64,
    /// Positive values are overfocus.
    pub defocus_nm: f64,
    pub lambda_pm: f64,
    pub m: usize,
    pub pitch_nm: f64,
}

impl ProbeSpec {
    pub fn from_geometry(g: &crate::geometry::ExperimentGeometry, defocus_nm: f64) -> Self {
        ProbeSpec {
            theta_con_mrad: g.theta_con_rad() * 1e3,
            defocus_nm,
            lambda_pm: g.lambda_nm() * 1e3,
            m: g.m(),
            pitch_nm: g.d_nm(),
        }
    }

    /// Aperture radius in reciprocal pixels.
    pub fn aperture_radius_px(&self) -> f64 {
        let lambda = self.lambda_pm * 1e-3;
        self.theta_con_mrad * 1e-3 / lambda * self.m as f64 * self.pitch_nm
    }
}

/// Synthesizes a probe with unit total intensity, centred on pixel `(m/2, m/2)`.
pub fn synthesize_probe(spec: &ProbeSpec) -> Result<ComplexField> {
    let m = spec.m;
    if m < 2 || !(spec.pitch_nm > 0.0) || !(spec.lambda_pm > 0.0) || !(spec.theta_con_mrad > 0.0)
    {
        return Err(RopError::InvalidArgument("invalid probe parameters".into()));
    }
    let radius = spec.aperture_radius_px();
    if 9.0 * radius * radius > (m * m) as f64 {
        return Err(RopError::InvalidArgument(format!(
            "aperture radius {radius:.2} px exceeds the band limit of {:.2} px",
            m as f64 / 3.0
        )));
    }
    let lambda = spec.lambda_pm * 1e-3;
    let dk = 1.0 / (m as f64 * spec.pitch_nm);
    let centre = (m / 2) as f64;
    let mut spectrum = Array2::from_shape_fn((m, m), |(i, j)| {
        let (fy, fx) = (signed_freq(i, m) as f64, signed_freq(j, m) as f64);
        let r2 = fy * fy + fx * fx;
        if r2 <= radius * radius {
            let chi = -PI * lambda * spec.defocus_nm * r2 * dk * dk;
            let shift = -2.0 * PI * (fy + fx) * centre / m as f64;
            Complex64::from_polar(1.0, chi + shift)
        } else {
            Complex64::default()
        }
    });
    ifft2_inplace(&mut spectrum);
    let total: f64 = spectrum.iter().map(|v| v.norm_sqr()).sum();
    if total <= 0.0 {
        return Err(RopError::InvalidArgument("aperture contains no frequencies".into()));
    }
    let norm = 1.0 / total.sqrt();
    spectrum.mapv_inplace(|v| v * norm);
    Ok(ComplexField::from_parts(spectrum, spec.pitch_nm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(m: usize, seed: u64) -> ComplexField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Array2::from_shape_fn((m, m), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        ComplexField::new(v, 0.01).unwrap()
    }

    fn max_diff(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    /// Direct O(m^4) unitary DFT.
    fn naive_dft(f: &Array2<Complex64>) -> Array2<Complex64> {
        let m = f.nrows();
        Array2::from_shape_fn((m, m), |(u, v)| {
            let mut acc = Complex64::default();
            for ((y, x), val) in f.indexed_iter() {
                let phase = -2.0 * PI * ((u * y + v * x) as f64) / m as f64;
                acc += val * Complex64::from_polar(1.0, phase);
            }
            acc / m as f64
        })
    }

    #[test]
    fn delta_transforms_to_constant() {
        let m = 8;
        let mut f = ComplexField::zeros(m, 1.0);
        f.values_mut()[[0, 0]] = Complex64::new(1.0, 0.0);
        let g = fft2_unitary(&f);
        for v in g.values() {
            assert!((v - Complex64::new(1.0 / m as f64, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn constant_transforms_to_delta() {
        let m = 8;
        let v = Array2::from_elem((m, m), Complex64::new(1.0, 0.0));
        let g = fft2_unitary(&ComplexField::new(v, 1.0).unwrap());
        assert!((g.values()[[0, 0]] - Complex64::new(m as f64, 0.0)).norm() < 1e-12);
        let rest: f64 = g.values().iter().skip(1).map(|v| v.norm()).sum();
        assert!(rest < 1e-12);
    }

    #[test]
    fn matches_naive_dft() {
        let f = random_field(8, 1);
        let fast = fft2_unitary(&f);
        let slow = naive_dft(f.values());
        assert!(max_diff(fast.values(), &slow) < 1e-10);
    }

    #[test]
    fn parseval_and_roundtrip() {
        for m in [6, 16, 31] {
            let f = random_field(m, m as u64);
            let g = fft2_unitary(&f);
            let rel = (g.total_intensity() - f.total_intensity()).abs() / f.total_intensity();
            assert!(rel < 1e-12);
            let back = ifft2_unitary(&g);
            assert!(max_diff(back.values(), f.values()) < 1e-12);
        }
    }

    #[test]
    fn bandwidth_limit_properties() {
        let m = 32;
        let f = random_field(m, 3);
        let once = bandwidth_limit(&f);
        let twice = bandwidth_limit(&once);
        assert!(max_diff(once.values(), twice.values()) < 1e-12);

        // pure tone at 0.9 Nyquist
        let k = (0.9 * m as f64 / 2.0).round() as usize;
        let tone = Array2::from_shape_fn((m, m), |(_, x)| {
            Complex64::from_polar(1.0, 2.0 * PI * (k * x) as f64 / m as f64)
        });
        let limited = bandwidth_limit(&ComplexField::new(tone, 1.0).unwrap());
        assert!(limited.total_intensity() < 1e-20);
    }

    #[test]
    fn white_noise_retains_band_fraction() {
        let m = 64;
        let f = random_field(m, 5);
        let g = fft2_unitary(&f);
        let mask = band_mask(m);
        // oracle: count surviving grid frequencies directly
        let surviving = (0..m)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .filter(|&(i, j)| {
                let fy = if i < m / 2 { i as f64 } else { i as f64 - m as f64 };
                let fx = if j < m / 2 { j as f64 } else { j as f64 - m as f64 };
                (fy * fy + fx * fx).sqrt() <= m as f64 / 3.0
            })
            .count();
        assert_eq!(surviving, mask.iter().filter(|&&b| b).count());
        let kept: f64 = g
            .values()
            .iter()
            .zip(mask.iter())
            .filter(|(_, &b)| b)
            .map(|(v, _)| v.norm_sqr())
            .sum();
        let area_ratio = PI * (2.0 / 3.0 * 0.5f64).powi(2);
        let fraction = kept / g.total_intensity();
        assert!((fraction - area_ratio).abs() < 0.03, "{fraction} vs {area_ratio}");
        assert!((band_fraction(m) - area_ratio).abs() < 0.01);
    }

    #[test]
    fn propagator_is_unit_modulus_in_band() {
        let p = Propagator::new(0.00335, 0.67, 32, 0.013).unwrap();
        for ((i, j), k) in p.kernel().indexed_iter() {
            let inside = in_band(signed_freq(i, 32), signed_freq(j, 32), 32);
            if inside {
                assert!((k.norm() - 1.0).abs() < 1e-14);
            } else {
                assert_eq!(k.norm(), 0.0);
            }
        }
        assert_eq!(p.kernel()[[0, 0]], Complex64::new(1.0, 0.0));
        assert!(Propagator::new(0.00335, 0.0, 32, 0.013).is_err());
        assert!(Propagator::new(0.00335, -1.0, 32, 0.013).is_err());
    }

    #[test]
    fn propagation_conserves_band_limited_intensity() {
        let f = bandwidth_limit(&random_field(32, 7));
        let p = Propagator::new(0.00335, 2.0, 32, 0.01).unwrap();
        let g = p.apply(&f).unwrap();
        let rel = (g.total_intensity() - f.total_intensity()).abs() / f.total_intensity();
        assert!(rel < 1e-12);
    }

    #[test]
    fn propagator_group_property() {
        let f = bandwidth_limit(&random_field(32, 8));
        let (lambda, pitch) = (0.00418, 0.02);
        let a = Propagator::new(lambda, 0.4, 32, pitch).unwrap();
        let b = Propagator::new(lambda, 1.1, 32, pitch).unwrap();
        let ab = Propagator::new(lambda, 1.5, 32, pitch).unwrap();
        let two = b.apply(&a.apply(&f).unwrap()).unwrap();
        let one = ab.apply(&f).unwrap();
        assert!(max_diff(two.values(), one.values()) < 1e-10);
    }

    #[test]
    fn gaussian_beam_spreads_like_fresnel() {
        let m = 256;
        let pitch = 0.01;
        let lambda = 0.00418;
        let w0 = 8.0 * pitch;
        let c = (m / 2) as f64 * pitch;
        let v = Array2::from_shape_fn((m, m), |(i, j)| {
            let (y, x) = (i as f64 * pitch - c, j as f64 * pitch - c);
            Complex64::new((-(x * x + y * y) / (w0 * w0)).exp(), 0.0)
        });
        let f = ComplexField::new(v, pitch).unwrap();
        let z_r = PI * w0 * w0 / lambda;
        let dz = 1.5 * z_r;
        let g = Propagator::new(lambda, dz, m, pitch).unwrap().apply(&f).unwrap();
        // intensity second moment <x^2> = w(z)^2 / 4
        let total = g.total_intensity();
        let mx2: f64 = g
            .values()
            .indexed_iter()
            .map(|((_, j), v)| (j as f64 * pitch - c).powi(2) * v.norm_sqr())
            .sum::<f64>()
            / total;
        let wz = w0 * (1.0 + (dz / z_r).powi(2)).sqrt();
        let measured = (4.0 * mx2).sqrt();
        assert!((measured - wz).abs() / wz < 0.01, "{measured} vs {wz}");
    }

    #[test]
    fn integer_shift_is_a_roll() {
        let f = random_field(16, 9);
        let g = subpixel_shift(&f, [f.pitch(), 0.0]);
        for ((i, j), v) in g.values().indexed_iter() {
            assert!((v - f.values()[[i, (j + 15) % 16]]).norm() < 1e-12);
        }
        let id = subpixel_shift(&f, [0.0, 0.0]);
        assert_eq!(id, f);
        let h = subpixel_shift(&f, [-2.0 * f.pitch(), 3.0 * f.pitch()]);
        for ((i, j), v) in h.values().indexed_iter() {
            assert!((v - f.values()[[(i + 13) % 16, (j + 2) % 16]]).norm() < 1e-12);
        }
    }

    #[test]
    fn fractional_shift_matches_trigonometric_interpolation() {
        let m = 12;
        let f = bandwidth_limit(&random_field(m, 10));
        let d = f.pitch();
        let (sx, sy) = (0.3, -0.7);
        let g = subpixel_shift(&f, [sx * d, sy * d]);
        // oracle: evaluate the band-limited trigonometric interpolant directly
        let spec = naive_dft(f.values());
        for i in 0..m {
            for j in 0..m {
                let (y, x) = (i as f64 - sy, j as f64 - sx);
                let mut acc = Complex64::default();
                for ((u, v), c) in spec.indexed_iter() {
                    let (fu, fv) = (signed_freq(u, m) as f64, signed_freq(v, m) as f64);
                    acc += c * Complex64::from_polar(1.0, 2.0 * PI * (fu * y + fv * x) / m as f64);
                }
                acc /= m as f64;
                assert!((acc - g.values()[[i, j]]).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn shifts_compose_and_invert() {
        let f = bandwidth_limit(&random_field(16, 11));
        let (a, b) = ([0.013, -0.004], [-0.021, 0.0077]);
        let ab = subpixel_shift(&subpixel_shift(&f, a), b);
        let direct = subpixel_shift(&f, [a[0] + b[0], a[1] + b[1]]);
        assert!(max_diff(ab.values(), direct.values()) < 1e-10);
        let back = subpixel_shift(&subpixel_shift(&f, a), [-a[0], -a[1]]);
        assert!(max_diff(back.values(), f.values()) < 1e-10);
    }

    fn radial_profile_x(f: &ComplexField) -> Vec<f64> {
        let c = f.m() / 2;
        (c..f.m()).map(|j| f.values()[[c, j]].norm()).collect()
    }

    #[test]
    fn focused_probe_first_minimum() {
        let spec = ProbeSpec {
            theta_con_mrad: 21.4,
            defocus_nm: 0.0,
            lambda_pm: 4.18,
            m: 256,
            pitch_nm: 0.0075,
        };
        let p = synthesize_probe(&spec).unwrap();
        assert!((p.total_intensity() - 1.0).abs() < 1e-12);
        let profile = radial_profile_x(&p);
        let first_min = (1..profile.len() - 1)
            .find(|&k| profile[k] <= profile[k - 1] && profile[k] <= profile[k + 1])
            .unwrap();
        let expected = 0.61 * 4.18e-3 / 21.4e-3 / spec.pitch_nm;
        assert!((first_min as f64 - expected).abs() <= 1.0, "{first_min} vs {expected}");
    }

    #[test]
    fn defocus_lowers_and_broadens_the_probe() {
        let base = ProbeSpec {
            theta_con_mrad: 21.4,
            defocus_nm: 0.0,
            lambda_pm: 4.18,
            m: 128,
            pitch_nm: 0.0217,
        };
        let focused = synthesize_probe(&base).unwrap();
        let blurred = synthesize_probe(&ProbeSpec {
            defocus_nm: 10.0,
            ..base
        })
        .unwrap();
        let c = base.m / 2;
        assert!(blurred.values()[[c, c]].norm_sqr() < focused.values()[[c, c]].norm_sqr());
        let second_moment = |f: &ComplexField| -> f64 {
            f.values()
                .indexed_iter()
                .map(|((i, j), v)| {
                    let (y, x) = (i as f64 - c as f64, j as f64 - c as f64);
                    (x * x + y * y) * v.norm_sqr()
                })
                .sum()
        };
        assert!(second_moment(&blurred) > second_moment(&focused));
        assert!((blurred.total_intensity() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aperture_beyond_band_limit_is_rejected() {
        let spec = ProbeSpec {
            theta_con_mrad: 200.0,
            defocus_nm: 0.0,
            lambda_pm: 3.35,
            m: 32,
            pitch_nm: 0.0116,
        };
        assert!(synthesize_probe(&spec).is_err());
    }

    #[test]
    fn shift_helpers_are_inverse() {
        let f = random_field(7, 12);
        assert_eq!(ifftshift(&fftshift(f.values())), *f.values());
        let g = random_field(8, 13);
        assert_eq!(ifftshift(&fftshift(g.values())), *g.values());
        let shifted = fftshift(g.values());
        assert_eq!(shifted[[4, 4]], g.values()[[0, 0]]);
    }
}
