//! File formats: the `.ropt` dataset container, raw complex arrays with JSON
//! sidecars, PNG renderings, atom-structure CSV and history CSV.
//!
//! # Dataset layout
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 8                | magic `ROPTDS01`                          |
//! | 4                | header length `L`, u32 little-endian      |
//! | `L`              | UTF-8 JSON header ([`DatasetHeader`])     |
//! | `4 P n n`        | counts, f32 little-endian, pattern-major  |
//! | `16 P`           | positions `(x, y)` nm, f64 little-endian  |

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RopError};
use crate::fields::ComplexField;
use crate::forward::{Dataset, Dose, PotentialVolume};
use crate::geometry::{ExperimentGeometry, GeometryDoc};
use crate::optimizer::HistoryRecord;

pub const DATASET_MAGIC: &[u8; 8] = b"ROPTDS01";
const FORMAT_VERSION: u32 = 1;

/// JSON header of a `.ropt` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub geometry: GeometryDoc,
    pub patterns: usize,
    pub n: usize,
    pub dose: Dose,
    pub seed: u64,
    /// Factor applied to model intensities during simulation.
    pub scale: f64,
    pub byte_order: String,
    pub counts_dtype: String,
    pub positions_dtype: String,
}

/// Serializes a dataset into the `.ropt` layout.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        geometry: ds.geometry().to_doc(),
        patterns: ds.len(),
        n: ds.geometry().n(),
        dose: ds.dose(),
        seed: ds.seed(),
        scale: ds.scale(),
        byte_order: "little".into(),
        counts_dtype: "float32".into(),
        positions_dtype: "float64".into(),
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| RopError::Format("header too large".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * ds.patterns().len() + 16 * ds.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for &v in ds.patterns().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in ds.positions() {
        out.extend_from_slice(&p[0].to_le_bytes());
        out.extend_from_slice(&p[1].to_le_bytes());
    }
    Ok(out)
}

/// Parses the `.ropt` layout.
pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 12 || &bytes[..8] != DATASET_MAGIC {
        return Err(RopError::Format("not a dataset file (bad magic)".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(RopError::Format("truncated header".into()));
    }
    let header: DatasetHeader = serde_json::from_slice(&body[..len])?;
    if header.format_version != FORMAT_VERSION {
        return Err(RopError::Format(format!("unsupported format version {}", header.format_version)));
    }
    if header.byte_order != "little" || header.counts_dtype != "float32" || header.positions_dtype != "float64" {
        return Err(RopError::Format("unsupported byte order or dtype".into()));
    }
    let geometry = ExperimentGeometry::try_from(header.geometry)?;
    if geometry.n() != header.n {
        return Err(RopError::Format("header n disagrees with geometry".into()));
    }
    let (p, n) = (header.patterns, header.n);
    let counts_len = p
        .checked_mul(n * n)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| RopError::Format("pattern count overflows".into()))?;
    let data = &body[len..];
    if data.len() != counts_len + 16 * p {
        return Err(RopError::Format(format!(
            "payload holds {} bytes, expected {}",
            data.len(),
            counts_len + 16 * p
        )));
    }
    let counts: Vec<f32> = data[..counts_len]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let positions: Vec<[f64; 2]> = data[counts_len..]
        .chunks_exact(16)
        .map(|c| {
            [
                f64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                f64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
            ]
        })
        .collect();
    let patterns = Array3::from_shape_vec((p, n, n), counts).map_err(|e| RopError::Format(e.to_string()))?;
    Dataset::new(patterns, positions, geometry, header.dose, header.seed, header.scale)
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| RopError::InvalidArgument(format!("no file name in {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    atomic_write(path, &encode_dataset(ds)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// Sidecar describing a raw complex array file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSidecar {
    /// Array shape, slowest axis first.
    pub shape: Vec<usize>,
    pub pitch_nm: f64,
    /// Slice thickness for volumes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dz_nm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared: Option<bool>,
    /// Always `complex-float32-le`: interleaved `(re, im)` pairs.
    pub dtype: String,
}

const RAW_DTYPE: &str = "complex-float32-le";

/// Path of the JSON sidecar belonging to a raw file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn encode_complex<'a>(values: impl Iterator<Item = &'a Complex64>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&(v.re as f32).to_le_bytes());
        out.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    out
}

fn decode_complex(bytes: &[u8], expected: usize) -> Result<Vec<Complex64>> {
    if bytes.len() != 8 * expected {
        return Err(RopError::Format(format!("raw file holds {} bytes, expected {}", bytes.len(), 8 * expected)));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| {
            Complex64::new(
                f32::from_le_bytes(c[..4].try_into().expect("4 bytes")) as f64,
                f32::from_le_bytes(c[4..].try_into().expect("4 bytes")) as f64,
            )
        })
        .collect())
}

fn read_sidecar(path: &Path) -> Result<RawSidecar> {
    let side: RawSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if side.dtype != RAW_DTYPE {
        return Err(RopError::Format(format!("unsupported dtype {}", side.dtype)));
    }
    Ok(side)
}

/// Writes a field as float32 `(re, im)` pairs plus a sidecar.
pub fn write_field(path: &Path, field: &ComplexField) -> Result<()> {
    let m = field.m();
    let side = RawSidecar {
        shape: vec![m, m],
        pitch_nm: field.pitch(),
        dz_nm: None,
        shared: None,
        dtype: RAW_DTYPE.into(),
    };
    atomic_write(path, &encode_complex(field.values().iter()))?;
    atomic_write(&sidecar_path(path), &serde_json::to_vec_pretty(&side)?)
}

pub fn read_field(path: &Path) -> Result<ComplexField> {
    let side = read_sidecar(path)?;
    let [rows, cols] = side.shape[..] else {
        return Err(RopError::Format("field sidecar needs a 2-D shape".into()));
    };
    let values = decode_complex(&fs::read(path)?, rows * cols)?;
    let arr = Array2::from_shape_vec((rows, cols), values).map_err(|e| RopError::Format(e.to_string()))?;
    ComplexField::new(arr, side.pitch_nm)
}

/// Writes a potential volume as float32 `(re, im)` pairs plus a sidecar.
pub fn write_volume(path: &Path, v: &PotentialVolume) -> Result<()> {
    let (z, r, c) = v.slices().dim();
    let side = RawSidecar {
        shape: vec![z, r, c],
        pitch_nm: v.pitch_nm(),
        dz_nm: Some(v.dz_nm()),
        shared: Some(v.is_shared()),
        dtype: RAW_DTYPE.into(),
    };
    atomic_write(path, &encode_complex(v.slices().iter()))?;
    atomic_write(&sidecar_path(path), &serde_json::to_vec_pretty(&side)?)
}

pub fn read_volume(path: &Path) -> Result<PotentialVolume> {
    let side = read_sidecar(path)?;
    let [z, r, c] = side.shape[..] else {
        return Err(RopError::Format("volume sidecar needs a 3-D shape".into()));
    };
    let values = decode_complex(&fs::read(path)?, z * r * c)?;
    let arr = Array3::from_shape_vec((z, r, c), values).map_err(|e| RopError::Format(e.to_string()))?;
    let dz = side.dz_nm.ok_or_else(|| RopError::Format("volume sidecar lacks dz_nm".into()))?;
    PotentialVolume::new(arr, dz, side.pitch_nm, side.shared.unwrap_or(false))
}

/// Sidecar of a grayscale rendering: the values mapped to 0 and 65535.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageRange {
    pub min: f64,
    pub max: f64,
}

/// 16-bit grayscale PNG bytes, linearly mapping `[min, max]` to `[0, 65535]`.
pub fn encode_gray16(values: &Array2<f64>) -> Result<(Vec<u8>, ImageRange)> {
    let (h, w) = values.dim();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(RopError::NonFinite("image values".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };
    let pixels: Vec<u16> = values.iter().map(|&v| (((v - min) / span) * 65535.0).round() as u16).collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| RopError::Image("buffer size mismatch".into()))?;
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| RopError::Image(e.to_string()))?;
    Ok((bytes, ImageRange { min, max }))
}

/// Writes a grayscale PNG and its range sidecar.
pub fn write_gray16(path: &Path, values: &Array2<f64>) -> Result<ImageRange> {
    let (bytes, range) = encode_gray16(values)?;
    atomic_write(path, &bytes)?;
    atomic_write(&sidecar_path(path), &serde_json::to_vec_pretty(&range)?)?;
    Ok(range)
}

/// Decodes a grayscale PNG back into values using its range.
pub fn decode_gray16(bytes: &[u8], range: ImageRange) -> Result<Array2<f64>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| RopError::Image(e.to_string()))?
        .into_luma16();
    let (w, h) = img.dimensions();
    let span = if range.max > range.min { range.max - range.min } else { 1.0 };
    let values: Vec<f64> = img.into_raw().into_iter().map(|p| range.min + span * p as f64 / 65535.0).collect();
    Array2::from_shape_vec((h as usize, w as usize), values).map_err(|e| RopError::Image(e.to_string()))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Colour rendering of a complex field: brightness `|ψ|^gamma` (normalized),
/// hue the phase.
pub fn encode_complex_hsv(field: &Array2<Complex64>, gamma: f64) -> Result<Vec<u8>> {
    let (h, w) = field.dim();
    let amp = field.mapv(|c| c.norm().powf(gamma));
    let peak = amp.iter().copied().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let mut rgb = Vec::with_capacity(3 * h * w);
    for (c, a) in field.iter().zip(amp.iter()) {
        let hue = (c.arg() + PI) / (2.0 * PI);
        rgb.extend_from_slice(&hsv_to_rgb(hue, 1.0, a * scale));
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, rgb).ok_or_else(|| RopError::Image("buffer size mismatch".into()))?;
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| RopError::Image(e.to_string()))?;
    Ok(bytes)
}

/// Centred Fourier magnitude weighted by `r^power` (radius in pixels),
/// which lifts weak high-frequency reflections.
pub fn weighted_fft_magnitude(values: &Array2<f64>, power: f64) -> Array2<f64> {
    let m = values.nrows();
    let mut spec = values.mapv(|v| Complex64::new(v, 0.0));
    let (rows, cols) = spec.dim();
    if rows != cols {
        // only square grids are produced by this toolkit
        return Array2::zeros((rows, cols));
    }
    crate::fields::fft2_inplace(&mut spec);
    let shifted = crate::fields::fftshift(&spec);
    let c = (m / 2) as f64;
    Array2::from_shape_fn((m, m), |(i, j)| {
        let r = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt();
        shifted[[i, j]].norm() * r.powf(power)
    })
}

/// One atom of a structure file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub x_nm: f64,
    pub y_nm: f64,
    pub z_nm: f64,
    /// Peak of the projected potential (phase shift, rad).
    pub peak_potential: f64,
    /// Gaussian standard deviation.
    pub width_nm: f64,
}

const STRUCTURE_HEADER: &str = "x_nm,y_nm,z_nm,peak_potential,width_nm";

pub fn parse_structure(text: &str) -> Result<Vec<Atom>> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some(h) if h.replace(' ', "") == STRUCTURE_HEADER => {}
        Some(h) => return Err(RopError::Format(format!("expected header '{STRUCTURE_HEADER}', found '{h}'"))),
        None => return Ok(Vec::new()),
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| RopError::Format(format!("structure line {}: {e}", k + 1)))?;
            let [x_nm, y_nm, z_nm, peak_potential, width_nm] = vals[..] else {
                return Err(RopError::Format(format!("structure line {} needs five values", k + 1)));
            };
            if !(width_nm > 0.0) || vals.iter().any(|v| !v.is_finite()) {
                return Err(RopError::Format(format!("structure line {}: invalid values", k + 1)));
            }
            Ok(Atom {
                x_nm,
                y_nm,
                z_nm,
                peak_potential,
                width_nm,
            })
        })
        .collect()
}

pub fn structure_to_csv(atoms: &[Atom]) -> String {
    let mut out = format!("{STRUCTURE_HEADER}\n");
    for a in atoms {
        out.push_str(&format!("{},{},{},{},{}\n", a.x_nm, a.y_nm, a.z_nm, a.peak_potential, a.width_nm));
    }
    out
}

/// Renders atoms as periodic Gaussians on a `width x width` grid, one slice
/// per `dz_nm` of depth (atoms below the last slice land in it).
pub fn render_structure(atoms: &[Atom], width: usize, pitch_nm: f64, slices: usize, dz_nm: f64) -> Result<PotentialVolume> {
    if slices == 0 || width < 2 {
        return Err(RopError::InvalidArgument("need at least one slice and a 2-pixel grid".into()));
    }
    let mut vol = Array3::<Complex64>::zeros((slices, width, width));
    let period = width as f64 * pitch_nm;
    for a in atoms {
        let z = ((a.z_nm / dz_nm).floor().max(0.0) as usize).min(slices - 1);
        let mut slice = vol.index_axis_mut(ndarray::Axis(0), z);
        let two_s2 = 2.0 * a.width_nm * a.width_nm;
        for ((i, j), v) in slice.indexed_iter_mut() {
            let wrap = |d: f64| d - period * (d / period).round();
            let dx = wrap(j as f64 * pitch_nm - a.x_nm);
            let dy = wrap(i as f64 * pitch_nm - a.y_nm);
            *v += Complex64::new(a.peak_potential * (-(dx * dx + dy * dy) / two_s2).exp(), 0.0);
        }
    }
    PotentialVolume::new(vol, dz_nm, pitch_nm, false)
}

/// History as CSV: `epoch,block,iteration,loss,step,grad_norm`.
pub fn history_csv(records: &[HistoryRecord]) -> String {
    let mut out = String::from("epoch,block,iteration,loss,step,grad_norm\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{:.17e},{:.17e},{:.17e}\n",
            r.epoch, r.block, r.iteration, r.loss, r.step, r.grad_norm
        ));
    }
    out
}
