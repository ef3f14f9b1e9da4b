use std::fs;
use std::path::{Path, PathBuf};

use rop::forward::Dose;
use rop::geometry::GeometryDoc;
use rop::grad::DerivativeFilter;
use rop::loss::Metric;
use rop::optimizer::OptimizerConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Reads a JSON config and resolves its relative paths against the file's directory.
pub fn load<T: DeserializeOwned + ResolvePaths>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cfg: T = serde_json::from_str(&text).map_err(|source| CliError::Config {
        path: path.to_path_buf(),
        source,
    })?;
    cfg.resolve(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

pub trait ResolvePaths {
    fn resolve(&mut self, _base: &Path) {}
}

fn rebase(p: &mut Option<PathBuf>, base: &Path) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

/// Scan used by `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScanConfig {
    /// Row-major grid starting at `origin_nm`.
    Grid {
        nx: usize,
        ny: usize,
        step_nm: f64,
        #[serde(default)]
        origin_nm: [f64; 2],
    },
    HaltonDisc {
        count: usize,
        diameter_nm: f64,
        #[serde(default)]
        center_nm: [f64; 2],
    },
    HaltonSquare {
        count: usize,
        side_nm: f64,
        #[serde(default)]
        origin_nm: [f64; 2],
    },
    /// Positions CSV with header `x_nm,y_nm`.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub geometry: GeometryDoc,
    /// Width of the square object grid in pixels of the geometry's pitch.
    pub object_px: usize,
    #[serde(default)]
    pub defocus_nm: f64,
    /// Atom CSV; with neither a structure nor a potential the sample is vacuum.
    #[serde(default)]
    pub structure: Option<PathBuf>,
    /// Raw potential volume, used instead of a structure.
    #[serde(default)]
    pub potential: Option<PathBuf>,
    pub scan: ScanConfig,
    pub dose: Dose,
    #[serde(default)]
    pub seed: u64,
}

impl ResolvePaths for SimulateConfig {
    fn resolve(&mut self, base: &Path) {
        rebase(&mut self.structure, base);
        rebase(&mut self.potential, base);
        if let ScanConfig::File { path } = &mut self.scan {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_probe_gamma() -> f64 {
    0.25
}

fn default_fft_power() -> f64 {
    0.4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructConfig {
    pub optimizer: OptimizerConfig,
    /// Slice count; defaults to the dataset geometry's.
    #[serde(default)]
    pub slices: Option<usize>,
    #[serde(default)]
    pub dz_nm: Option<f64>,
    #[serde(default)]
    pub shared_slices: bool,
    /// Object width in pixels; by default the scan extent plus one probe window.
    #[serde(default)]
    pub object_px: Option<usize>,
    /// Defocus of the synthesized initial probe.
    #[serde(default)]
    pub defocus_nm: f64,
    /// Initial probe (raw complex field) instead of a synthesized one.
    #[serde(default)]
    pub probe: Option<PathBuf>,
    /// Initial positions CSV instead of the dataset's.
    #[serde(default)]
    pub positions: Option<PathBuf>,
    /// Initial potential volume instead of vacuum.
    #[serde(default)]
    pub potential: Option<PathBuf>,
    /// Scale the initial probe to the mean measured counts.
    #[serde(default = "default_true")]
    pub calibrate_probe: bool,
    #[serde(default = "default_probe_gamma")]
    pub probe_gamma: f64,
    #[serde(default = "default_fft_power")]
    pub fft_power: f64,
}

impl ResolvePaths for ReconstructConfig {
    fn resolve(&mut self, base: &Path) {
        rebase(&mut self.probe, base);
        rebase(&mut self.positions, base);
        rebase(&mut self.potential, base);
    }
}

fn default_m() -> usize {
    16
}
fn default_n() -> usize {
    12
}
fn default_slices() -> Vec<usize> {
    vec![1, 2, 3]
}
fn default_patterns() -> Vec<usize> {
    vec![1, 3]
}
fn default_metrics() -> Vec<Metric> {
    vec![Metric::E1, Metric::E2, Metric::E3]
}
fn default_mus() -> Vec<f64> {
    vec![0.0, 0.1]
}
fn default_seeds() -> Vec<u64> {
    vec![1]
}
fn default_tol_field() -> f64 {
    1e-5
}
fn default_tol_positions() -> f64 {
    2e-2
}

/// Finite-difference check over a grid of random instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_slices")]
    pub slices: Vec<usize>,
    #[serde(default = "default_patterns")]
    pub patterns: Vec<usize>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default = "default_mus")]
    pub mus: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub derivative_filter: DerivativeFilter,
    #[serde(default = "default_tol_field")]
    pub tol_potential: f64,
    #[serde(default = "default_tol_field")]
    pub tol_probe: f64,
    #[serde(default = "default_tol_positions")]
    pub tol_positions: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ResolvePaths for VerifyConfig {}
impl ResolvePaths for GeometryDoc {}
