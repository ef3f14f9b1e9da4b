//! The multislice forward model and dataset synthesis.
//!
//! A scan position `R = (x, y)` (nm, object frame) is the probe centre. The
//! object is an `M x M` periodic grid with `M >= m`; for each position an
//! `m x m` window is cut out around the nearest object pixel and the
//! sub-pixel remainder is applied to the probe as a Fourier shift.

use ndarray::{s, Array2, Array3, ArrayView2, Zip};
use num_complex::Complex64;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RopError};
use crate::fields::{fft2_inplace, shift_inplace, signed_freq, ComplexField, Propagator};
use crate::geometry::ExperimentGeometry;

/// Complex projected potential, `Z` slices of `M x M` pixels.
///
/// The real part is the (σ-scaled) projected potential, the imaginary part
/// absorption. When `shared` is set every slice holds the same values.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialVolume {
    slices: Array3<Complex64>,
    dz: f64,
    pitch: f64,
    shared: bool,
}

impl PotentialVolume {
    pub fn new(slices: Array3<Complex64>, dz_nm: f64, pitch_nm: f64, shared: bool) -> Result<Self> {
        let (z, rows, cols) = slices.dim();
        if z == 0 || rows != cols || rows < 2 {
            return Err(RopError::shape("Z >= 1 slices of square grids", format!("{z}x{rows}x{cols}")));
        }
        if !(dz_nm > 0.0 && dz_nm.is_finite()) || !(pitch_nm > 0.0 && pitch_nm.is_finite()) {
            return Err(RopError::InvalidArgument("slice thickness and pitch must be positive".into()));
        }
        if slices.iter().any(|v| !v.is_finite()) {
            return Err(RopError::NonFinite("potential contains non-finite values".into()));
        }
        if shared {
            let first = slices.index_axis(ndarray::Axis(0), 0);
            if slices.outer_iter().any(|s| s != first) {
                return Err(RopError::InvalidArgument("shared volume has differing slices".into()));
            }
        }
        Ok(PotentialVolume {
            slices: slices.as_standard_layout().into_owned(),
            dz: dz_nm,
            pitch: pitch_nm,
            shared,
        })
    }

    /// All-zero volume.
    pub fn vacuum(slices: usize, width: usize, dz_nm: f64, pitch_nm: f64, shared: bool) -> Result<Self> {
        Self::new(Array3::zeros((slices, width, width)), dz_nm, pitch_nm, shared)
    }

    /// `slices` copies of one projected-potential grid.
    pub fn repeated(slice: &Array2<Complex64>, slices: usize, dz_nm: f64, pitch_nm: f64) -> Result<Self> {
        let (r, c) = slice.dim();
        let stack = Array3::from_shape_fn((slices, r, c), |(_, i, j)| slice[[i, j]]);
        Self::new(stack, dz_nm, pitch_nm, true)
    }

    pub fn nslices(&self) -> usize {
        self.slices.dim().0
    }

    /// Object width `M` in pixels.
    pub fn width(&self) -> usize {
        self.slices.dim().1
    }

    pub fn dz_nm(&self) -> f64 {
        self.dz
    }

    pub fn pitch_nm(&self) -> f64 {
        self.pitch
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    pub fn slices(&self) -> &Array3<Complex64> {
        &self.slices
    }

    pub fn slice(&self, z: usize) -> ArrayView2<'_, Complex64> {
        self.slices.index_axis(ndarray::Axis(0), z)
    }

    pub(crate) fn slices_mut(&mut self) -> &mut Array3<Complex64> {
        &mut self.slices
    }

    pub fn into_slices(self) -> Array3<Complex64> {
        self.slices
    }

    /// Sum over slices, the projected potential seen by a single-slice model.
    pub fn projected(&self) -> Array2<Complex64> {
        self.slices.sum_axis(ndarray::Axis(0))
    }

    /// Same data with a different slice thickness.
    pub fn with_dz(mut self, dz_nm: f64) -> Result<Self> {
        if !(dz_nm > 0.0 && dz_nm.is_finite()) {
            return Err(RopError::InvalidArgument("slice thickness must be positive".into()));
        }
        self.dz = dz_nm;
        Ok(self)
    }
}

/// Elementwise `exp(iV)`.
pub fn transmission(v: ArrayView2<'_, Complex64>, pitch_nm: f64) -> Result<ComplexField> {
    let t = v.mapv(|x| (Complex64::i() * x).exp());
    ComplexField::new(t, pitch_nm)
}

/// Runs the transmit-propagate recursion for an unshifted probe through a
/// volume whose width equals the probe grid.
pub fn multislice(probe: &ComplexField, v: &PotentialVolume, prop: &Propagator) -> Result<ComplexField> {
    let m = probe.m();
    if v.width() != m || prop.m() != m {
        return Err(RopError::shape(m, format!("volume {} / propagator {}", v.width(), prop.m())));
    }
    let mut psi = probe.values().clone();
    for z in 0..v.nslices() {
        Zip::from(&mut psi)
            .and(v.slice(z))
            .for_each(|p, &x| *p *= (Complex64::i() * x).exp());
        prop.apply_inplace(&mut psi);
    }
    Ok(ComplexField::from_parts(psi, probe.pitch()))
}

/// Maps crop index `a` (zero frequency at `n/2`) to its FFT-order index.
#[inline]
pub(crate) fn crop_to_fft(a: usize, m: usize, n: usize) -> usize {
    (a + m - n / 2) % m
}

/// Far-field intensity `|F(exit)|²`, centre-cropped to `n x n` with the zero
/// frequency at index `n/2`.
pub fn diffract(exit: &ComplexField, n: usize) -> Result<Array2<f64>> {
    let m = exit.m();
    if n == 0 || n > m {
        return Err(RopError::InvalidArgument(format!("observed width {n} must lie in 1..={m}")));
    }
    let mut spec = exit.values().clone();
    fft2_inplace(&mut spec);
    Ok(crop_intensity(&spec, n))
}

pub(crate) fn crop_intensity(spec: &Array2<Complex64>, n: usize) -> Array2<f64> {
    let m = spec.nrows();
    Array2::from_shape_fn((n, n), |(a, b)| spec[[crop_to_fft(a, m, n), crop_to_fft(b, m, n)]].norm_sqr())
}

/// Where a scan position lands on the object grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    /// Top-left object pixel `(row, col)` of the window, already wrapped.
    pub origin: (usize, usize),
    /// Remaining probe shift `(x, y)` in nm.
    pub residual: [f64; 2],
}

/// Cached per-layer quantities of one forward pass.
pub(crate) struct Trace {
    pub placement: Placement,
    /// Shifted probe, `ψ⁰(r - residual)`.
    pub probe: Array2<Complex64>,
    /// Incoming wave of each slice.
    pub inputs: Vec<Array2<Complex64>>,
    /// Transmission of each slice window.
    pub trans: Vec<Array2<Complex64>>,
    /// Unitary spectrum of the exit wave (FFT order).
    pub spectrum: Array2<Complex64>,
}

/// Forward model for one grid: propagator, detector crop and placement rules.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    m: usize,
    n: usize,
    pitch: f64,
    propagator: Propagator,
}

impl ForwardModel {
    pub fn new(lambda_nm: f64, m: usize, n: usize, pitch_nm: f64, dz_nm: f64) -> Result<Self> {
        if n == 0 || n > m {
            return Err(RopError::InvalidArgument(format!("observed width {n} must lie in 1..={m}")));
        }
        Ok(ForwardModel {
            m,
            n,
            pitch: pitch_nm,
            propagator: Propagator::new(lambda_nm, dz_nm, m, pitch_nm)?,
        })
    }

    /// Model matching a geometry, propagating over the given slice thickness.
    pub fn for_geometry(g: &ExperimentGeometry, dz_nm: f64) -> Result<Self> {
        Self::new(g.lambda_nm(), g.m(), g.n(), g.d_nm(), dz_nm)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn pitch_nm(&self) -> f64 {
        self.pitch
    }

    pub fn propagator(&self) -> &Propagator {
        &self.propagator
    }

    pub fn placement(&self, position: [f64; 2], object_width: usize) -> Placement {
        let big = object_width as i64;
        let half = (self.m / 2) as i64;
        let cx = (position[0] / self.pitch).round();
        let cy = (position[1] / self.pitch).round();
        let row = (cy as i64 - half).rem_euclid(big) as usize;
        let col = (cx as i64 - half).rem_euclid(big) as usize;
        Placement {
            origin: (row, col),
            residual: [position[0] - cx * self.pitch, position[1] - cy * self.pitch],
        }
    }

    pub(crate) fn check(&self, probe: &ComplexField, v: &PotentialVolume) -> Result<()> {
        if probe.m() != self.m {
            return Err(RopError::shape(format!("probe width {}", self.m), probe.m()));
        }
        if v.width() < self.m {
            return Err(RopError::shape(format!("object width >= {}", self.m), v.width()));
        }
        if ((v.pitch_nm() - self.pitch) / self.pitch).abs() > 1e-9 {
            return Err(RopError::InvalidArgument(format!(
                "object pitch {} nm differs from model pitch {} nm",
                v.pitch_nm(),
                self.pitch
            )));
        }
        if ((v.dz_nm() - self.propagator.dz_nm()) / v.dz_nm()).abs() > 1e-12 {
            return Err(RopError::InvalidArgument(format!(
                "slice thickness {} nm differs from propagator {} nm",
                v.dz_nm(),
                self.propagator.dz_nm()
            )));
        }
        Ok(())
    }

    /// Window of slice `z` starting at `origin`, wrapped periodically.
    pub(crate) fn window(&self, v: &PotentialVolume, z: usize, origin: (usize, usize)) -> Array2<Complex64> {
        let big = v.width();
        let slice = v.slice(z);
        if origin == (0, 0) && big == self.m {
            return slice.to_owned();
        }
        Array2::from_shape_fn((self.m, self.m), |(i, j)| {
            slice[[(origin.0 + i) % big, (origin.1 + j) % big]]
        })
    }

    pub(crate) fn trace(&self, probe: &ComplexField, v: &PotentialVolume, position: [f64; 2]) -> Trace {
        let placement = self.placement(position, v.width());
        let mut psi = probe.values().clone();
        shift_inplace(&mut psi, placement.residual, self.pitch);
        let shifted = psi.clone();
        let z_count = v.nslices();
        let mut inputs = Vec::with_capacity(z_count);
        let mut trans = Vec::with_capacity(z_count);
        for z in 0..z_count {
            let t = self.window(v, z, placement.origin).mapv(|x| (Complex64::i() * x).exp());
            inputs.push(psi.clone());
            psi *= &t;
            self.propagator.apply_inplace(&mut psi);
            trans.push(t);
        }
        fft2_inplace(&mut psi);
        Trace {
            placement,
            probe: shifted,
            inputs,
            trans,
            spectrum: psi,
        }
    }

    /// Exit wave for one scan position.
    pub fn exit_wave(&self, probe: &ComplexField, v: &PotentialVolume, position: [f64; 2]) -> Result<ComplexField> {
        self.check(probe, v)?;
        let placement = self.placement(position, v.width());
        let mut psi = probe.values().clone();
        shift_inplace(&mut psi, placement.residual, self.pitch);
        for z in 0..v.nslices() {
            let w = self.window(v, z, placement.origin);
            Zip::from(&mut psi).and(&w).for_each(|p, &x| *p *= (Complex64::i() * x).exp());
            self.propagator.apply_inplace(&mut psi);
        }
        Ok(ComplexField::from_parts(psi, self.pitch))
    }

    /// Model diffraction pattern (`n x n`) for one scan position.
    pub fn pattern(&self, probe: &ComplexField, v: &PotentialVolume, position: [f64; 2]) -> Result<Array2<f64>> {
        diffract(&self.exit_wave(probe, v, position)?, self.n)
    }

    pub(crate) fn pattern_unchecked(&self, probe: &ComplexField, v: &PotentialVolume, position: [f64; 2]) -> Array2<f64> {
        let placement = self.placement(position, v.width());
        let mut psi = probe.values().clone();
        shift_inplace(&mut psi, placement.residual, self.pitch);
        for z in 0..v.nslices() {
            let w = self.window(v, z, placement.origin);
            Zip::from(&mut psi).and(&w).for_each(|p, &x| *p *= (Complex64::i() * x).exp());
            self.propagator.apply_inplace(&mut psi);
        }
        fft2_inplace(&mut psi);
        crop_intensity(&psi, self.n)
    }

    /// Pattern of the probe through vacuum (band-limited far field).
    pub fn vacuum_pattern(&self, probe: &ComplexField) -> Result<Array2<f64>> {
        if probe.m() != self.m {
            return Err(RopError::shape(self.m, probe.m()));
        }
        let mut psi = probe.values().clone();
        self.propagator.apply_inplace(&mut psi);
        fft2_inplace(&mut psi);
        Ok(crop_intensity(&psi, self.n))
    }

    /// Mask of crop pixels inside the bright-field disc `|k| <= theta_con / lambda`.
    pub fn disc_mask(&self, theta_con_rad: f64, lambda_nm: f64) -> Array2<bool> {
        let (m, n) = (self.m, self.n);
        let radius = theta_con_rad / lambda_nm * m as f64 * self.pitch;
        Array2::from_shape_fn((n, n), |(a, b)| {
            let fy = signed_freq(crop_to_fft(a, m, n), m) as f64;
            let fx = signed_freq(crop_to_fft(b, m, n), m) as f64;
            fy * fy + fx * fx <= radius * radius
        })
    }
}

/// Illumination level of a simulated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Dose {
    /// Unscaled model intensities.
    Noiseless,
    /// Scaled so the mean vacuum count per pixel in the central disc equals
    /// `electrons`; Poisson-sampled when `poisson` is set.
    Counts { electrons: f64, poisson: bool },
}

/// A ptychographic dataset: diffraction patterns, scan positions and the
/// geometry they were recorded with.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    patterns: Array3<f32>,
    positions: Vec<[f64; 2]>,
    geometry: ExperimentGeometry,
    dose: Dose,
    seed: u64,
    scale: f64,
}

impl Dataset {
    pub fn new(
        patterns: Array3<f32>,
        positions: Vec<[f64; 2]>,
        geometry: ExperimentGeometry,
        dose: Dose,
        seed: u64,
        scale: f64,
    ) -> Result<Self> {
        let (p, r, c) = patterns.dim();
        if p == 0 {
            return Err(RopError::InvalidArgument("dataset needs at least one pattern".into()));
        }
        if r != c || r != geometry.n() {
            return Err(RopError::shape(
                format!("{0}x{0} patterns", geometry.n()),
                format!("{r}x{c}"),
            ));
        }
        if positions.len() != p {
            return Err(RopError::shape(format!("{p} positions"), positions.len()));
        }
        if patterns.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(RopError::Domain("counts must be finite and non-negative".into()));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(RopError::NonFinite("scan position".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(RopError::InvalidArgument("intensity scale must be positive".into()));
        }
        Ok(Dataset {
            patterns: patterns.as_standard_layout().into_owned(),
            positions,
            geometry,
            dose,
            seed,
            scale,
        })
    }

    pub fn patterns(&self) -> &Array3<f32> {
        &self.patterns
    }

    pub fn pattern(&self, p: usize) -> ArrayView2<'_, f32> {
        self.patterns.index_axis(ndarray::Axis(0), p)
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn geometry(&self) -> &ExperimentGeometry {
        &self.geometry
    }

    pub fn dose(&self) -> Dose {
        self.dose
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Factor applied to model intensities when the data were generated.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn total_counts(&self) -> f64 {
        self.patterns.iter().map(|&v| v as f64).sum()
    }

    /// Patterns converted to double precision.
    pub fn patterns_f64(&self) -> Array3<f64> {
        self.patterns.mapv(|v| v as f64)
    }

    /// Same patterns at new scan positions.
    pub fn with_positions(&self, positions: Vec<[f64; 2]>) -> Result<Self> {
        Dataset::new(
            self.patterns.clone(),
            positions,
            self.geometry.clone(),
            self.dose,
            self.seed,
            self.scale,
        )
    }

    /// Sums counts in `b x b` blocks. The support width shrinks by `b`; the
    /// simulation grid becomes `grid` or, by default, `m / b`.
    pub fn binned(&self, b: usize, grid: Option<usize>) -> Result<Self> {
        let n = self.geometry.n();
        if b == 0 || !n.is_multiple_of(b) {
            return Err(RopError::InvalidArgument(format!(
                "bin factor {b} does not divide pattern width {n}; crop first"
            )));
        }
        if b == 1 && grid.is_none() {
            return Ok(self.clone());
        }
        let nb = n / b;
        let m_new = grid.unwrap_or(self.geometry.m() / b);
        let geometry = self
            .geometry
            .clone()
            .with_observed(nb)?
            .with_support(self.geometry.w_nm() / b as f64)?
            .with_grid(m_new)?;
        let p = self.len();
        let mut out = Array3::<f32>::zeros((p, nb, nb));
        for k in 0..p {
            let src = self.pattern(k);
            for i in 0..nb {
                for j in 0..nb {
                    // f64 accumulation keeps the block sum exact for counts
                    let block = src.slice(s![i * b..(i + 1) * b, j * b..(j + 1) * b]);
                    out[[k, i, j]] = block.iter().map(|&v| v as f64).sum::<f64>() as f32;
                }
            }
        }
        Dataset::new(out, self.positions.clone(), geometry, self.dose, self.seed, self.scale)
    }

    /// Keeps the central `width x width` pixels; the zero frequency stays at
    /// index `width / 2`.
    pub fn cropped(&self, width: usize) -> Result<Self> {
        let n = self.geometry.n();
        if width == 0 || width > n {
            return Err(RopError::InvalidArgument(format!("crop width {width} must lie in 1..={n}")));
        }
        if width == n {
            return Ok(self.clone());
        }
        let start = n / 2 - width / 2;
        let out = self
            .patterns
            .slice(s![.., start..start + width, start..start + width])
            .to_owned();
        let geometry = self.geometry.clone().with_observed(width)?;
        Dataset::new(out, self.positions.clone(), geometry, self.dose, self.seed, self.scale)
    }

    /// Replaces the simulation grid width `m`, keeping the support `w`.
    pub fn regridded(&self, m: usize) -> Result<Self> {
        let geometry = self.geometry.clone().with_grid(m)?;
        Dataset::new(self.patterns.clone(), self.positions.clone(), geometry, self.dose, self.seed, self.scale)
    }
}

/// Free-function form of [`Dataset::binned`] with the default grid.
pub fn bin_patterns(ds: &Dataset, b: usize) -> Result<Dataset> {
    ds.binned(b, None)
}

/// Free-function form of [`Dataset::cropped`].
pub fn crop_patterns(ds: &Dataset, width: usize) -> Result<Dataset> {
    ds.cropped(width)
}

/// Intensity scale that puts `electrons` mean counts per pixel into the
/// vacuum pattern's bright-field disc.
pub fn dose_scale(model: &ForwardModel, probe: &ComplexField, geometry: &ExperimentGeometry, electrons: f64) -> Result<f64> {
    let vac = model.vacuum_pattern(probe)?;
    let mask = model.disc_mask(geometry.theta_con_rad(), geometry.lambda_nm());
    let (sum, count) = vac
        .iter()
        .zip(mask.iter())
        .filter(|(_, &inside)| inside)
        .fold((0.0, 0usize), |(s, c), (&v, _)| (s + v, c + 1));
    if count == 0 || sum <= 0.0 {
        return Err(RopError::InvalidArgument("central disc holds no observed pixels".into()));
    }
    Ok(electrons / (sum / count as f64))
}

/// Seed for sub-task `stream` of a run seeded with `seed`. Streams are
/// independent, so sub-tasks never share random numbers.
pub fn split_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Simulates one diffraction pattern per scan position.
///
/// Each pattern draws its noise from its own ChaCha stream of `seed`, so the
/// result does not depend on evaluation order or thread count.
pub fn simulate_dataset(
    v: &PotentialVolume,
    probe: &ComplexField,
    positions: &[[f64; 2]],
    geometry: &ExperimentGeometry,
    dose: Dose,
    seed: u64,
) -> Result<Dataset> {
    if positions.is_empty() {
        return Err(RopError::InvalidArgument("no scan positions".into()));
    }
    let model = ForwardModel::for_geometry(geometry, v.dz_nm())?;
    model.check(probe, v)?;
    let (scale, poisson) = match dose {
        Dose::Noiseless => (1.0, false),
        Dose::Counts { electrons, poisson } => {
            if !(electrons > 0.0 && electrons.is_finite()) {
                return Err(RopError::InvalidArgument(format!("dose must be positive, got {electrons}")));
            }
            (dose_scale(&model, probe, geometry, electrons)?, poisson)
        }
    };
    let n = geometry.n();
    let patterns: Vec<Result<Array2<f32>>> = positions
        .par_iter()
        .enumerate()
        .map(|(p, &r)| {
            let intensity = model.pattern_unchecked(probe, v, r);
            if !poisson {
                return Ok(intensity.mapv(|x| (x * scale) as f32));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let mut out = Array2::<f32>::zeros((n, n));
            for (o, &x) in out.iter_mut().zip(intensity.iter()) {
                let lambda = x * scale;
                *o = if lambda > 0.0 {
                    Poisson::new(lambda)
                        .map_err(|e| RopError::Domain(format!("Poisson mean {lambda}: {e}")))?
                        .sample(&mut rng) as f32
                } else {
                    0.0
                };
            }
            Ok(out)
        })
        .collect();
    let mut stack = Array3::<f32>::zeros((positions.len(), n, n));
    for (p, pat) in patterns.into_iter().enumerate() {
        stack.index_axis_mut(ndarray::Axis(0), p).assign(&pat?);
    }
    Dataset::new(stack, positions.to_vec(), geometry.clone(), dose, seed, scale)
}

/// Scales a probe so its vacuum pattern carries the mean total count of the
/// data, the usual starting point for a reconstruction.
pub fn calibrate_probe(probe: &ComplexField, model: &ForwardModel, data: &Dataset) -> Result<ComplexField> {
    let vac: f64 = model.vacuum_pattern(probe)?.sum();
    if vac <= 0.0 {
        return Err(RopError::InvalidArgument("probe has no intensity inside the detector".into()));
    }
    let mean_counts = data.total_counts() / data.len() as f64;
    if mean_counts <= 0.0 {
        return Err(RopError::Domain("dataset holds no counts".into()));
    }
    Ok(probe.scaled((mean_counts / vac).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{band_mask, synthesize_probe, ProbeSpec};
    use rand::Rng;
    use std::f64::consts::PI;

    fn small_geometry() -> ExperimentGeometry {
        // m = 32, d = 0.0217 nm, theta_con = 21.4 mrad at 4.18 pm
        ExperimentGeometry::new(4.18, 21.4, 32, 24, 32.0 * 0.0217, 21.0, 1.0).unwrap()
    }

    fn probe_for(g: &ExperimentGeometry) -> ComplexField {
        synthesize_probe(&ProbeSpec::from_geometry(g, 0.0)).unwrap()
    }

    fn random_volume(z: usize, width: usize, scale: f64, seed: u64) -> PotentialVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((z, width, width), |_| {
            Complex64::new(scale * rng.random::<f64>(), 0.1 * scale * rng.random::<f64>())
        });
        PotentialVolume::new(data, 0.5, 0.0217, false).unwrap()
    }

    #[test]
    fn transmission_values() {
        let zero = Array2::<Complex64>::zeros((4, 4));
        let t = transmission(zero.view(), 0.1).unwrap();
        assert!(t.values().iter().all(|&v| v == Complex64::new(1.0, 0.0)));
        let absorb = Array2::from_elem((4, 4), Complex64::new(0.0, 2f64.ln()));
        let t = transmission(absorb.view(), 0.1).unwrap();
        assert!(t.values().iter().all(|v| (v.norm() - 0.5).abs() < 1e-15));
        let v = random_volume(1, 8, 1.0, 3);
        let t = transmission(v.slice(0), 0.1).unwrap();
        for (x, y) in v.slice(0).iter().zip(t.values()) {
            // exp(i(a+ib)) = exp(-b)(cos a + i sin a)
            let oracle = Complex64::new((-x.im).exp() * x.re.cos(), (-x.im).exp() * x.re.sin());
            assert!((oracle - y).norm() < 1e-14);
        }
    }

    #[test]
    fn vacuum_multislice_is_free_propagation() {
        let g = small_geometry();
        let probe = probe_for(&g);
        let v = PotentialVolume::vacuum(3, 32, 0.5, g.d_nm(), true).unwrap();
        let prop = Propagator::new(g.lambda_nm(), 0.5, 32, g.d_nm()).unwrap();
        let exit = multislice(&probe, &v, &prop).unwrap();
        let direct = Propagator::new(g.lambda_nm(), 1.5, 32, g.d_nm())
            .unwrap()
            .apply(&probe)
            .unwrap();
        let diff: f64 = exit.values().iter().zip(direct.values()).map(|(a, b)| (a - b).norm()).sum();
        assert!(diff < 1e-10);
        assert!((exit.total_intensity() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pure_phase_multislice_loses_only_band_limited_power() {
        let g = small_geometry();
        let probe = probe_for(&g);
        let mut v = random_volume(3, 32, 0.5, 4);
        v.slices_mut().mapv_inplace(|x| Complex64::new(x.re, 0.0));
        let prop = Propagator::new(g.lambda_nm(), 0.5, 32, g.d_nm()).unwrap();
        // oracle: track the power removed by the band limit at every slice
        let mask = band_mask(32);
        let mut psi = probe.values().clone();
        let mut lost = 0.0;
        for z in 0..3 {
            psi.zip_mut_with(&v.slice(z), |p, &x| *p *= (Complex64::i() * x).exp());
            let mut spec = psi.clone();
            fft2_inplace(&mut spec);
            lost += spec
                .iter()
                .zip(mask.iter())
                .filter(|(_, &b)| !b)
                .map(|(s, _)| s.norm_sqr())
                .sum::<f64>();
            prop.apply_inplace(&mut psi);
        }
        let exit = multislice(&probe, &v, &prop).unwrap();
        assert!(lost > 1e-6, "test needs a measurable band-limit loss");
        assert!((exit.total_intensity() + lost - 1.0).abs() < 1e-10);
    }

    #[test]
    fn thin_slices_match_a_single_projected_slice() {
        let g = small_geometry();
        let probe = probe_for(&g);
        // smooth, weak potential keeps every product inside the band limit
        let base = Array2::from_shape_fn((32, 32), |(i, j)| {
            let (y, x) = (2.0 * PI * i as f64 / 32.0, 2.0 * PI * j as f64 / 32.0);
            Complex64::new(0.05 * (x.cos() + (y + 0.3).sin() + (x + 2.0 * y).cos()), 0.0)
        });
        let errs: Vec<f64> = [0.02, 0.01]
            .iter()
            .map(|&dz| {
                let two = PotentialVolume::repeated(&base, 2, dz, g.d_nm()).unwrap();
                let one = PotentialVolume::repeated(&base.mapv(|x| x * 2.0), 1, 2.0 * dz, g.d_nm()).unwrap();
                let p2 = Propagator::new(g.lambda_nm(), dz, 32, g.d_nm()).unwrap();
                let p1 = Propagator::new(g.lambda_nm(), 2.0 * dz, 32, g.d_nm()).unwrap();
                let a = multislice(&probe, &two, &p2).unwrap();
                let b = multislice(&probe, &one, &p1).unwrap();
                a.values().iter().zip(b.values()).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
            })
            .collect();
        // first-order agreement: halving dz halves the discrepancy
        assert!(errs[0] < 1e-2);
        let ratio = errs[0] / errs[1];
        assert!((ratio - 2.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn vacuum_pattern_is_aperture_disc() {
        let g = small_geometry().with_observed(32).unwrap();
        let probe = probe_for(&g);
        let model = ForwardModel::for_geometry(&g, 1.0).unwrap();
        let pat = model.vacuum_pattern(&probe).unwrap();
        let disc = model.disc_mask(g.theta_con_rad(), g.lambda_nm());
        let inside: Vec<f64> = pat.iter().zip(disc.iter()).filter(|(_, &b)| b).map(|(&v, _)| v).collect();
        let outside: f64 = pat.iter().zip(disc.iter()).filter(|(_, &b)| !b).map(|(&v, _)| v).sum();
        assert!(outside < 1e-20);
        let first = inside[0];
        assert!(inside.iter().all(|&v| (v - first).abs() < 1e-12 * first.max(1.0)));
        assert!((pat.sum() - 1.0).abs() < 1e-12);
        // disc centred on pixel n/2
        assert!(pat[[16, 16]] > 0.0);
        let radius = g.disc_radius_px() * 32.0 / g.n() as f64;
        assert!((inside.len() as f64 - PI * radius * radius).abs() / inside.len() as f64 <= 0.25);
    }

    #[test]
    fn diffract_full_grid_obeys_parseval_and_scaling() {
        let g = small_geometry();
        let probe = probe_for(&g);
        let model = ForwardModel::for_geometry(&g, 0.5).unwrap();
        let v = random_volume(2, 32, 0.4, 6);
        let exit = model.exit_wave(&probe, &v, [0.11, 0.23]).unwrap();
        let full = diffract(&exit, 32).unwrap();
        assert!((full.sum() - exit.total_intensity()).abs() < 1e-12);
        let a = diffract(&exit.scaled(3.0), 20).unwrap();
        let b = diffract(&exit, 20).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - 9.0 * y).abs() < 1e-12 * x.abs().max(1.0));
        }
        assert!(diffract(&exit, 33).is_err());
    }

    #[test]
    fn weak_phase_grating_matches_first_order_theory() {
        let m = 64;
        let d = 0.02;
        let g = ExperimentGeometry::new(4.18, 21.4, m, m, m as f64 * d, 20.0, 1.0).unwrap();
        let probe = probe_for(&g);
        let model = ForwardModel::for_geometry(&g, 1.0).unwrap();
        let (eps, harmonic, phase) = (0.005, 5usize, 0.7);
        // off a symmetry point, where first-order contrast would vanish
        let grating = Array2::from_shape_fn((m, m), |(_, j)| {
            Complex64::new(eps * (2.0 * PI * (harmonic * j) as f64 / m as f64 + phase).cos(), 0.0)
        });
        let v = PotentialVolume::repeated(&grating, 1, 1.0, d).unwrap();
        let centre = [(m / 2) as f64 * d, (m / 2) as f64 * d];
        let model_diff = model.pattern(&probe, &v, centre).unwrap() - model.vacuum_pattern(&probe).unwrap();

        // first order: t = 1 + iV, spectrum A + (i eps / 2)(e^{i phase} A(k - g) + e^{-i phase} A(k + g))
        let mut a = probe.values().clone();
        fft2_inplace(&mut a);
        let k = model.propagator().kernel();
        let rot = Complex64::from_polar(1.0, phase);
        let born = Array2::from_shape_fn((m, m), |(u, w)| {
            let left = a[[u, (w + m - harmonic) % m]] * rot;
            let right = a[[u, (w + harmonic) % m]] * rot.conj();
            let scattered = Complex64::new(0.0, eps / 2.0) * (left + right) * k[[u, w]];
            let direct = a[[u, w]] * k[[u, w]];
            2.0 * (direct.conj() * scattered).re
        });
        let born_crop = Array2::from_shape_fn((m, m), |(p, q)| born[[crop_to_fft(p, m, m), crop_to_fft(q, m, m)]]);
        let err = (&model_diff - &born_crop).mapv(|x| x * x).sum().sqrt();
        let norm = born_crop.mapv(|x| x * x).sum().sqrt();
        assert!(norm > 0.0);
        assert!(err / norm < 0.02, "{}", err / norm);
    }

    #[test]
    fn placement_wraps_and_splits_residual() {
        let model = ForwardModel::new(0.004, 16, 8, 0.1, 1.0).unwrap();
        let p = model.placement([0.34, -0.26], 40);
        // nearest pixel (col 3, row -3), window starts half a grid earlier
        assert_eq!(p.origin, (29, 35));
        assert!((p.residual[0] - 0.04).abs() < 1e-12);
        assert!((p.residual[1] - 0.04).abs() < 1e-12);
    }

    #[test]
    fn patch_view_equals_probe_shift_on_periodic_object() {
        // on an m x m object, shifting the window or the probe gives the same intensities
        let g = small_geometry();
        let probe = probe_for(&g);
        let model = ForwardModel::for_geometry(&g, 0.5).unwrap();
        let v = random_volume(2, 32, 0.3, 8);
        let r = [0.137, 0.291];
        let a = model.pattern(&probe, &v, r).unwrap();
        let centre = (16.0) * g.d_nm();
        let shifted = crate::fields::subpixel_shift(&probe, [r[0] - centre, r[1] - centre]);
        let exit = multislice(&shifted, &v, model.propagator()).unwrap();
        let b = diffract(&exit, g.n()).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn simulation_is_deterministic_and_calibrated() {
        let g = small_geometry();
        let probe = probe_for(&g);
        let v = PotentialVolume::vacuum(1, 32, 0.5, g.d_nm(), true).unwrap();
        let positions: Vec<[f64; 2]> = (0..300).map(|i| [0.01 * i as f64, 0.3]).collect();
        let dose = Dose::Counts {
            electrons: 316.0,
            poisson: true,
        };
        let a = simulate_dataset(&v, &probe, &positions, &g, dose, 7).unwrap();
        let b = simulate_dataset(&v, &probe, &positions, &g, dose, 7).unwrap();
        assert_eq!(a, b);
        let c = simulate_dataset(&v, &probe, &positions, &g, dose, 8).unwrap();
        assert_ne!(a.patterns(), c.patterns());

        // Poisson: variance equals mean inside the disc
        let model = ForwardModel::for_geometry(&g, 0.5).unwrap();
        let mask = model.disc_mask(g.theta_con_rad(), g.lambda_nm());
        let mean_level = 316.0;
        let mut chi2 = 0.0;
        let mut dof = 0usize;
        for p in 0..a.len() {
            for (x, &inside) in a.pattern(p).iter().zip(mask.iter()) {
                if inside {
                    chi2 += (*x as f64 - mean_level).powi(2) / mean_level;
                    dof += 1;
                }
            }
        }
        assert!(dof > 5000);
        // chi2 / dof ~ 1 +- sqrt(2 / dof); 1 % two-sided band at ~2.6 sigma
        let z = (chi2 / dof as f64 - 1.0) / (2.0 / dof as f64).sqrt();
        assert!(z.abs() < 2.6, "z = {z}");

        let clean = simulate_dataset(&v, &probe, &positions, &g, Dose::Noiseless, 7).unwrap();
        assert_eq!(clean.scale(), 1.0);
    }

    #[test]
    fn binning_and_cropping() {
        let g = ExperimentGeometry::new(4.18, 21.4, 36, 12, 36.0 * 0.0217, 21.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pats = Array3::from_shape_fn((3, 12, 12), |_| rng.random_range(0..50) as f32);
        let ds = Dataset::new(pats, vec![[0.0; 2]; 3], g.clone(), Dose::Noiseless, 0, 1.0).unwrap();
        assert_eq!(ds.binned(1, None).unwrap(), ds);
        assert_eq!(ds.cropped(12).unwrap(), ds);
        let b = ds.binned(3, None).unwrap();
        assert_eq!(b.geometry().n(), 4);
        assert_eq!(b.geometry().m(), 12);
        assert!((b.geometry().delta_per_nm() - 3.0 * g.delta_per_nm()).abs() < 1e-12);
        assert!((b.geometry().d_nm() - g.d_nm()).abs() < 1e-12);
        assert_eq!(b.total_counts(), ds.total_counts());
        assert!(ds.binned(5, None).is_err());
        let c = ds.cropped(7).unwrap();
        assert_eq!(c.geometry().n(), 7);
        // zero frequency stays at the centre index
        assert_eq!(c.pattern(0)[[3, 3]], ds.pattern(0)[[6, 6]]);
        assert!(ds.cropped(13).is_err());
    }

    #[test]
    fn dataset_validation() {
        let g = small_geometry();
        let bad = Array3::from_elem((1, 24, 24), -1.0f32);
        assert!(Dataset::new(bad, vec![[0.0; 2]], g.clone(), Dose::Noiseless, 0, 1.0).is_err());
        let ok = Array3::from_elem((1, 24, 24), 1.0f32);
        assert!(Dataset::new(ok.clone(), vec![], g.clone(), Dose::Noiseless, 0, 1.0).is_err());
        let wrong = Array3::from_elem((1, 20, 20), 1.0f32);
        assert!(Dataset::new(wrong, vec![[0.0; 2]], g, Dose::Noiseless, 0, 1.0).is_err());
    }
}
