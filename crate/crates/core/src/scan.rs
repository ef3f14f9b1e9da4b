//! Scan patterns: regular grids, Halton sequences and position perturbation.

use std::f64::consts::PI;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RopError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanKind {
    Grid,
    HaltonDisc,
    HaltonSquare,
    Perturbed,
}

impl fmt::Display for ScanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScanKind::Grid => "grid",
            ScanKind::HaltonDisc => "halton-disc",
            ScanKind::HaltonSquare => "halton-square",
            ScanKind::Perturbed => "perturbed",
        })
    }
}

/// Probe positions (nm) and their nominal spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPattern {
    positions: Vec<[f64; 2]>,
    nominal_dx: f64,
    kind: ScanKind,
}

impl ScanPattern {
    pub fn new(positions: Vec<[f64; 2]>, nominal_dx: f64, kind: ScanKind) -> Result<Self> {
        if positions.is_empty() {
            return Err(RopError::InvalidArgument("scan needs at least one position".into()));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(RopError::NonFinite("scan position".into()));
        }
        if !(nominal_dx > 0.0 && nominal_dx.is_finite()) {
            return Err(RopError::InvalidArgument("nominal spacing must be positive".into()));
        }
        Ok(ScanPattern {
            positions,
            nominal_dx,
            kind,
        })
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn into_positions(self) -> Vec<[f64; 2]> {
        self.positions
    }

    pub fn nominal_dx(&self) -> f64 {
        self.nominal_dx
    }

    pub fn kind(&self) -> ScanKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Moves every position by `offset` (nm).
    pub fn translated(&self, offset: [f64; 2]) -> Self {
        ScanPattern {
            positions: self.positions.iter().map(|p| [p[0] + offset[0], p[1] + offset[1]]).collect(),
            ..self.clone()
        }
    }

    /// Mean distance from each position to its nearest neighbour (brute force).
    pub fn mean_nearest_neighbor(&self) -> f64 {
        mean_nearest_neighbor(&self.positions)
    }

    /// CSV with header `x_nm,y_nm`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x_nm,y_nm\n");
        for p in &self.positions {
            out.push_str(&format!("{:.17e},{:.17e}\n", p[0], p[1]));
        }
        out
    }

    pub fn from_csv(text: &str, nominal_dx: f64) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == "x_nm,y_nm" => {}
            other => return Err(RopError::Format(format!("expected header x_nm,y_nm, found {other:?}"))),
        }
        let mut positions = Vec::new();
        for (k, line) in lines.enumerate() {
            let mut parts = line.split(',').map(|s| s.trim().parse::<f64>());
            match (parts.next(), parts.next(), parts.next()) {
                (Some(Ok(x)), Some(Ok(y)), None) => positions.push([x, y]),
                _ => return Err(RopError::Format(format!("bad position on data line {}", k + 1))),
            }
        }
        ScanPattern::new(positions, nominal_dx, ScanKind::Perturbed)
    }
}

pub fn mean_nearest_neighbor(positions: &[[f64; 2]]) -> f64 {
    if positions.len() < 2 {
        return 0.0;
    }
    let total: f64 = positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            positions
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / positions.len() as f64
}

/// Row-major `nx x ny` grid starting at the origin with spacing `dx` (nm).
pub fn grid_scan(nx: usize, ny: usize, dx: f64) -> Result<ScanPattern> {
    if nx == 0 || ny == 0 {
        return Err(RopError::InvalidArgument("grid needs at least one row and column".into()));
    }
    let positions = (0..ny)
        .flat_map(|j| (0..nx).map(move |i| [i as f64 * dx, j as f64 * dx]))
        .collect();
    ScanPattern::new(positions, dx, ScanKind::Grid)
}

/// Radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut factor = inv;
    let mut value = 0.0;
    while index > 0 {
        value += (index % base) as f64 * factor;
        index /= base;
        factor *= inv;
    }
    value
}

/// Point `k` (starting at 1) of the two-dimensional Halton sequence with bases 2 and 3.
pub fn halton_point(k: u64) -> (f64, f64) {
    (radical_inverse(k, 2), radical_inverse(k, 3))
}

/// First `p` Halton points mapped onto a disc of the given diameter centred
/// at the origin with the equal-area map `(u, v) -> (R sqrt(u), 2π v)`.
///
/// `nominal_dx` is the spacing of the square grid with the same density,
/// `sqrt(area / p)`.
pub fn halton_disc(p: usize, diameter: f64) -> Result<ScanPattern> {
    if p == 0 {
        return Err(RopError::InvalidArgument("scan needs at least one position".into()));
    }
    if !(diameter > 0.0 && diameter.is_finite()) {
        return Err(RopError::InvalidArgument("diameter must be positive".into()));
    }
    let radius = diameter / 2.0;
    let positions = (1..=p as u64)
        .map(|k| {
            let (u, v) = halton_point(k);
            let (r, phi) = (radius * u.sqrt(), 2.0 * PI * v);
            [r * phi.cos(), r * phi.sin()]
        })
        .collect();
    let nominal = (PI * radius * radius / p as f64).sqrt();
    ScanPattern::new(positions, nominal, ScanKind::HaltonDisc)
}

/// First `p` Halton points scaled onto `[0, side)²`.
pub fn halton_square(p: usize, side: f64) -> Result<ScanPattern> {
    if p == 0 {
        return Err(RopError::InvalidArgument("scan needs at least one position".into()));
    }
    if !(side > 0.0 && side.is_finite()) {
        return Err(RopError::InvalidArgument("side must be positive".into()));
    }
    let positions = (1..=p as u64)
        .map(|k| {
            let (u, v) = halton_point(k);
            [side * u, side * v]
        })
        .collect();
    ScanPattern::new(positions, side / (p as f64).sqrt(), ScanKind::HaltonSquare)
}

/// Adds isotropic Gaussian offsets, rescaled so their sample-mean length is
/// exactly `mean_dev * nominal_dx`.
pub fn perturb_positions(scan: &ScanPattern, mean_dev: f64, seed: u64) -> Result<ScanPattern> {
    if !(mean_dev >= 0.0 && mean_dev.is_finite()) {
        return Err(RopError::InvalidArgument(format!("mean deviation must be >= 0, got {mean_dev}")));
    }
    if mean_dev == 0.0 {
        return Ok(scan.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets: Vec<[f64; 2]> = (0..scan.len())
        .map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
        .collect();
    let mean_len = offsets.iter().map(|o| o[0].hypot(o[1])).sum::<f64>() / offsets.len() as f64;
    let scale = mean_dev * scan.nominal_dx / mean_len;
    let positions = scan
        .positions
        .iter()
        .zip(&offsets)
        .map(|(p, o)| [p[0] + scale * o[0], p[1] + scale * o[1]])
        .collect();
    ScanPattern::new(positions, scan.nominal_dx, ScanKind::Perturbed)
}
