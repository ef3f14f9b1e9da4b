//! Sampling geometry of a ptychography experiment and the oversampling-ratio
//! calculus used to judge whether a reconstruction problem is over- or
//! underdetermined.
//!
//! Internally every length is in nanometres and every angle in radians. The
//! constructors and the JSON document take picometres and milliradians, which
//! is how experimental settings are usually quoted.
//!
//! The independent quantities are the wavelength, the convergence semi-angle,
//! the grid widths `m` (simulated) and `n` (observed), the beam support `w`,
//! the scan step and the scan-area width. Everything else is derived so the
//! relations `delta = 1/w`, `d = w/m`, `d = lambda/(3 theta_cal)` and
//! `n = 2 theta_obs/(lambda delta)` hold exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RopError};

const PM: f64 = 1e-3;
const MRAD: f64 = 1e-3;

/// Relative tolerance for the exact pitch relations of a geometry document.
const PITCH_REL_TOL: f64 = 1e-12;

/// Rayleigh factor of a circular aperture's first Airy minimum.
pub const RAYLEIGH_FACTOR: f64 = 0.61;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentGeometry {
    lambda: f64,
    theta_con: f64,
    m: usize,
    n: usize,
    w: f64,
    dx: f64,
    s: f64,
    slices: usize,
    dz: f64,
}

impl ExperimentGeometry {
    /// Builds a geometry from the support width `w_nm`.
    ///
    /// `s_nm` may be `f64::INFINITY` to describe the wide-field limit.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        lambda_pm: f64,
        theta_con_mrad: f64,
        m: usize,
        n: usize,
        w_nm: f64,
        dx_pm: f64,
        s_nm: f64,
    ) -> Result<Self> {
        let g = ExperimentGeometry {
            lambda: lambda_pm * PM,
            theta_con: theta_con_mrad * MRAD,
            m,
            n,
            w: w_nm,
            dx: dx_pm * PM,
            s: s_nm,
            slices: 1,
            dz: 1.0,
        };
        g.validate()?;
        Ok(g)
    }

    /// Builds a geometry from the reciprocal pixel pitch, the way reference
    /// settings are usually quoted (`delta` in nm⁻¹).
    pub fn from_reciprocal_pitch(
        lambda_pm: f64,
        theta_con_mrad: f64,
        m: usize,
        n: usize,
        delta_per_nm: f64,
        dx_pm: f64,
        s_nm: f64,
    ) -> Result<Self> {
        if !(delta_per_nm > 0.0) {
            return Err(RopError::Geometry("delta must be positive".into()));
        }
        Self::new(lambda_pm, theta_con_mrad, m, n, 1.0 / delta_per_nm, dx_pm, s_nm)
    }

    /// Sets the slice count and slice thickness (nm).
    pub fn with_slices(mut self, slices: usize, dz_nm: f64) -> Result<Self> {
        self.slices = slices;
        self.dz = dz_nm;
        self.validate()?;
        Ok(self)
    }

    /// Replaces the scan step and scan width.
    pub fn with_scan(mut self, dx_nm: f64, s_nm: f64) -> Result<Self> {
        self.dx = dx_nm;
        self.s = s_nm;
        self.validate()?;
        Ok(self)
    }

    /// Replaces the observed pattern width `n`.
    pub fn with_observed(mut self, n: usize) -> Result<Self> {
        self.n = n;
        self.validate()?;
        Ok(self)
    }

    /// Replaces the simulation grid width `m`, keeping the support `w`.
    pub fn with_grid(mut self, m: usize) -> Result<Self> {
        self.m = m;
        self.validate()?;
        Ok(self)
    }

    /// Replaces the support width, keeping `m` (so `d` follows).
    pub fn with_support(mut self, w_nm: f64) -> Result<Self> {
        self.w = w_nm;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda", self.lambda),
            ("theta_con", self.theta_con),
            ("w", self.w),
            ("dx", self.dx),
            ("s", self.s),
            ("dz", self.dz),
        ];
        for (name, v) in positive {
            if v.is_nan() || v <= 0.0 {
                return Err(RopError::Geometry(format!("{name} must be positive, got {v}")));
            }
            if v.is_infinite() && name != "s" {
                return Err(RopError::Geometry(format!("{name} must be finite")));
            }
        }
        if self.m < 2 {
            return Err(RopError::Geometry(format!("m must be at least 2, got {}", self.m)));
        }
        if self.n == 0 || self.n > self.m {
            return Err(RopError::Geometry(format!(
                "n must satisfy 1 <= n <= m, got n={} m={}",
                self.n, self.m
            )));
        }
        if self.slices == 0 {
            return Err(RopError::Geometry("slice count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lambda_nm(&self) -> f64 {
        self.lambda
    }
    pub fn theta_con_rad(&self) -> f64 {
        self.theta_con
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn n(&self) -> usize {
        self.n
    }
    /// Beam support width (nm).
    pub fn w_nm(&self) -> f64 {
        self.w
    }
    /// Real-space pixel pitch `d = w/m` (nm).
    pub fn d_nm(&self) -> f64 {
        self.w / self.m as f64
    }
    /// Reciprocal pixel pitch `delta = 1/w` (nm⁻¹).
    pub fn delta_per_nm(&self) -> f64 {
        1.0 / self.w
    }
    pub fn dx_nm(&self) -> f64 {
        self.dx
    }
    pub fn s_nm(&self) -> f64 {
        self.s
    }
    pub fn slices(&self) -> usize {
        self.slices
    }
    pub fn dz_nm(&self) -> f64 {
        self.dz
    }

    /// Half-width of the observed patterns, `n lambda delta / 2`.
    pub fn theta_obs_rad(&self) -> f64 {
        self.n as f64 * self.lambda * self.delta_per_nm() / 2.0
    }

    /// Maximum calculated angle, the edge of the band-limit disc.
    pub fn theta_cal_rad(&self) -> f64 {
        self.lambda / (3.0 * self.d_nm())
    }

    /// Target resolution angle `rho * theta_con`.
    pub fn theta_res_rad(&self, rho: f64) -> f64 {
        rho * self.theta_con
    }

    /// Central-disc radius in reciprocal pixels.
    pub fn disc_radius_px(&self) -> f64 {
        self.theta_con / (self.lambda * self.delta_per_nm())
    }

    /// Number of knowns and unknowns, `(n² (s/dx + 1)², 2 ((s + w)/d)²)`.
    pub fn knowns_unknowns(&self) -> Result<(f64, f64)> {
        if !self.s.is_finite() {
            return Err(RopError::Domain("counts diverge for an infinite scan area".into()));
        }
        let n = self.n as f64;
        let knowns = n * n * (self.s / self.dx + 1.0).powi(2);
        let unknowns = 2.0 * ((self.s + self.w) / self.d_nm()).powi(2);
        Ok((knowns, unknowns))
    }

    /// The oversampling ratio `N_k / N_u` in closed form.
    pub fn oversampling_ratio(&self) -> f64 {
        let angles = (self.theta_obs_rad() / self.theta_cal_rad()).powi(2);
        let support = (self.w / self.dx).powi(2);
        let finite_scan = ((1.0 + self.dx / self.s) / (1.0 + self.w / self.s)).powi(2);
        2.0 / 9.0 * angles * support * finite_scan
    }

    /// Wide-field, thin-specimen limit with `theta_cal = 3 theta_con`.
    pub fn oversampling_ratio_widefield(&self) -> f64 {
        widefield_ratio(self.theta_obs_rad(), self.theta_con, self.w, self.dx)
    }

    /// Evaluates the experiment-design guidelines.
    pub fn design_check(&self) -> DesignReport {
        let ratio = self.oversampling_ratio();
        let lambda_over_theta = self.lambda / self.theta_con;
        let rayleigh = RAYLEIGH_FACTOR * lambda_over_theta;
        let step_bound = 2.0 / 3.0 * rayleigh;
        let support_bound = 2.0 * lambda_over_theta;
        let minima = minima_enclosed(self.w, self.lambda, self.theta_con);

        let findings = vec![
            Finding {
                name: "oversampling",
                passed: ratio > 1.0,
                value: ratio,
                bound: 1.0,
                detail: format!("N_k/N_u = {ratio:.4} (needs > 1)"),
            },
            Finding {
                name: "scan-step",
                passed: self.dx < step_bound,
                value: self.dx,
                bound: step_bound,
                detail: format!(
                    "dx = {:.4} nm vs 2/3 of Rayleigh width {:.4} nm = {:.4} nm (margin {:+.4} nm)",
                    self.dx,
                    rayleigh,
                    step_bound,
                    step_bound - self.dx
                ),
            },
            Finding {
                name: "support-width",
                passed: self.w >= support_bound,
                value: self.w,
                bound: support_bound,
                detail: format!(
                    "w = {:.4} nm vs 2 lambda/theta_con = {:.4} nm",
                    self.w, support_bound
                ),
            },
            Finding {
                name: "airy-minima",
                passed: minima >= 1.0,
                value: minima,
                bound: 1.0,
                detail: format!("support encloses {minima:.2} Airy minima"),
            },
        ];
        DesignReport { findings }
    }

    /// The serializable document for this geometry.
    pub fn to_doc(&self) -> GeometryDoc {
        GeometryDoc {
            lambda_pm: self.lambda / PM,
            theta_con_mrad: self.theta_con / MRAD,
            m: self.m,
            n: self.n,
            w_nm: Some(self.w),
            delta_per_nm: Some(self.delta_per_nm()),
            d_pm: Some(self.d_nm() / PM),
            dx_pm: self.dx / PM,
            s_nm: self.s,
            slices: Some(self.slices),
            dz_nm: Some(self.dz),
            theta_obs_mrad: Some(self.theta_obs_rad() / MRAD),
            theta_cal_mrad: Some(self.theta_cal_rad() / MRAD),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("geometry document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GeometryDoc = serde_json::from_str(text)?;
        Self::try_from(doc)
    }
}

/// Flat key/value form of [`ExperimentGeometry`].
///
/// `w_nm` or `delta_per_nm` must be present. The other optional keys are
/// cross-checked when given: pitches exactly, angles to within one pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryDoc {
    pub lambda_pm: f64,
    pub theta_con_mrad: f64,
    pub m: usize,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_nm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_per_nm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_pm: Option<f64>,
    pub dx_pm: f64,
    pub s_nm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slices: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dz_nm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_obs_mrad: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_cal_mrad: Option<f64>,
}

impl TryFrom<GeometryDoc> for ExperimentGeometry {
    type Error = RopError;

    fn try_from(doc: GeometryDoc) -> Result<Self> {
        let w = match (doc.w_nm, doc.delta_per_nm) {
            (Some(w), Some(delta)) => {
                check_rel("delta * w", delta * w, 1.0)?;
                w
            }
            (Some(w), None) => w,
            (None, Some(delta)) => 1.0 / delta,
            (None, None) => {
                return Err(RopError::Geometry("one of w_nm or delta_per_nm is required".into()))
            }
        };
        let mut g = ExperimentGeometry::new(
            doc.lambda_pm,
            doc.theta_con_mrad,
            doc.m,
            doc.n,
            w,
            doc.dx_pm,
            doc.s_nm,
        )?;
        if let Some(d_pm) = doc.d_pm {
            check_rel("d * m / w", d_pm * PM * g.m as f64, g.w)?;
        }
        if let Some(t) = doc.theta_obs_mrad {
            let px = 2.0 * t * MRAD / (g.lambda * g.delta_per_nm());
            if (px - g.n as f64).abs() > 1.0 {
                return Err(RopError::Geometry(format!(
                    "theta_obs implies n = {px:.2}, more than one pixel from n = {}",
                    g.n
                )));
            }
        }
        if let Some(t) = doc.theta_cal_mrad {
            let px = 3.0 * t * MRAD / (g.lambda * g.delta_per_nm());
            if (px - g.m as f64).abs() > 1.0 {
                return Err(RopError::Geometry(format!(
                    "theta_cal implies m = {px:.2}, more than one pixel from m = {}",
                    g.m
                )));
            }
        }
        if doc.slices.is_some() || doc.dz_nm.is_some() {
            g = g.with_slices(doc.slices.unwrap_or(1), doc.dz_nm.unwrap_or(1.0))?;
        }
        Ok(g)
    }
}

fn check_rel(what: &str, value: f64, expected: f64) -> Result<()> {
    if ((value - expected) / expected).abs() > PITCH_REL_TOL {
        return Err(RopError::Geometry(format!(
            "{what} = {value} violates its exact relation (expected {expected})"
        )));
    }
    Ok(())
}

/// Wide-field oversampling ratio `(2/81)(theta_obs/theta_con)² (w/dx)²`.
pub fn widefield_ratio(theta_obs: f64, theta_con: f64, w: f64, dx: f64) -> f64 {
    2.0 / 81.0 * (theta_obs / theta_con).powi(2) * (w / dx).powi(2)
}

/// Support-to-step ratio `w/dx` at which the wide-field ratio reaches one.
pub fn critical_support_ratio(theta_obs_over_con: f64) -> f64 {
    (81.0f64 / 2.0).sqrt() / theta_obs_over_con
}

/// Number of Airy minima `k` enclosed by a support `w`, from `w = (k + 0.24) lambda / theta`.
pub fn minima_enclosed(w: f64, lambda: f64, theta_con: f64) -> f64 {
    w * theta_con / lambda - 0.24
}

/// Side of the square with the same area as a `width x height` scan region.
pub fn equivalent_square_width(width: f64, height: f64) -> f64 {
    (width * height).sqrt()
}

/// Relativistic electron wavelength (pm) at an acceleration voltage in kV.
///
/// Uses CODATA values for h, m_e, e and c.
pub fn electron_wavelength_pm(kilovolts: f64) -> f64 {
    const H: f64 = 6.626_070_15e-34;
    const M_E: f64 = 9.109_383_701_5e-31;
    const E: f64 = 1.602_176_634e-19;
    const C: f64 = 299_792_458.0;
    let ev = E * kilovolts * 1e3;
    let p = (2.0 * M_E * ev * (1.0 + ev / (2.0 * M_E * C * C))).sqrt();
    H / p * 1e12
}

/// Outcome of one design guideline.
#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub name: &'static str,
    pub passed: bool,
    pub value: f64,
    pub bound: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignReport {
    pub findings: Vec<Finding>,
}

impl DesignReport {
    pub fn all_passed(&self) -> bool {
        self.findings.iter().all(|f| f.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Finding> {
        self.findings.iter().find(|f| f.name == name)
    }
}

impl std::fmt::Display for DesignReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<14} {:<6} detail", "guideline", "result")?;
        for finding in &self.findings {
            let verdict = if finding.passed { "pass" } else { "FAIL" };
            writeln!(f, "{:<14} {:<6} {}", finding.name, verdict, finding.detail)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sim_rec() -> ExperimentGeometry {
        ExperimentGeometry::from_reciprocal_pitch(3.35, 28.0, 20, 4, 4.31, 45.7, 3.71).unwrap()
    }

    #[test]
    fn pitch_relations_hold() {
        let g = sim_rec();
        assert_relative_eq!(g.delta_per_nm() * g.w_nm(), 1.0, max_relative = 1e-15);
        assert_relative_eq!(g.d_nm() * g.m() as f64, g.w_nm(), max_relative = 1e-15);
        assert_relative_eq!(g.theta_cal_rad(), g.lambda_nm() / (3.0 * g.d_nm()));
        let n_from_angle = 2.0 * g.theta_obs_rad() / (g.lambda_nm() * g.delta_per_nm());
        assert_relative_eq!(n_from_angle, 4.0, max_relative = 1e-12);
    }

    #[test]
    fn nb3cl8_sim_rec_ratio() {
        let r = sim_rec().oversampling_ratio();
        assert!((r - 0.47).abs() <= 0.01, "ratio {r}");
    }

    #[test]
    fn routes_agree() {
        let g = sim_rec();
        let (k, u) = g.knowns_unknowns().unwrap();
        assert_relative_eq!(k / u, g.oversampling_ratio(), max_relative = 1e-12);
    }

    #[test]
    fn unity_limit_is_two_ninths() {
        // theta_obs = theta_cal means n = 2m/3; w = dx; s -> infinity
        let g = ExperimentGeometry::new(3.0, 10.0, 30, 20, 0.6, 600.0, f64::INFINITY).unwrap();
        assert_relative_eq!(g.theta_obs_rad(), g.theta_cal_rad(), max_relative = 1e-12);
        assert_relative_eq!(g.oversampling_ratio(), 2.0 / 9.0, max_relative = 1e-12);
        assert!(g.knowns_unknowns().is_err());
    }

    #[test]
    fn widefield_examples() {
        assert_relative_eq!(widefield_ratio(3.0, 1.0, 2.1, 1.0), 0.98, max_relative = 1e-12);
        assert!((widefield_ratio(1.0, 1.0, 6.4, 1.0) - 1.01).abs() < 0.005);
        assert_relative_eq!(widefield_ratio(1.0, 1.0, 1.0, 1.0), 2.0 / 81.0);
    }

    #[test]
    fn widefield_is_the_infinite_scan_limit() {
        // choose w so that theta_cal = 3 theta_con exactly
        let (lambda_pm, theta_mrad, m) = (3.35, 28.0, 36usize);
        let w = m as f64 * lambda_pm * PM / (9.0 * theta_mrad * MRAD);
        let g = ExperimentGeometry::new(lambda_pm, theta_mrad, m, 12, w, 40.0, f64::INFINITY)
            .unwrap();
        assert_relative_eq!(g.theta_cal_rad(), 3.0 * g.theta_con_rad(), max_relative = 1e-12);
        assert_relative_eq!(
            g.oversampling_ratio_widefield(),
            g.oversampling_ratio(),
            max_relative = 1e-6
        );
    }

    #[test]
    fn critical_ratios() {
        assert!((critical_support_ratio(3.0) - 2.1).abs() / 2.1 < 0.02);
        assert!((critical_support_ratio(1.0) - 6.4).abs() / 6.4 < 0.02);
    }

    #[test]
    fn design_check_nb3cl8() {
        let g = sim_rec();
        let report = g.design_check();
        // 0.61 * 3.35 pm / 28 mrad by hand = 0.072982 nm
        let rayleigh: f64 = 0.61 * 3.35e-3 / 28e-3;
        assert!((rayleigh - 0.0730).abs() < 5e-5);
        let step = report.get("scan-step").unwrap();
        // 45.7 pm sits below the 48.7 pm bound
        assert!(step.passed);
        assert!((step.bound - step.value - 0.0030).abs() < 5e-5);
        assert_relative_eq!(step.bound, 2.0 / 3.0 * rayleigh, max_relative = 1e-12);
        assert!((step.bound - 0.0487).abs() < 5e-5);
        assert!(!report.get("oversampling").unwrap().passed);
        let minima = report.get("airy-minima").unwrap().value;
        // 0.232 / 0.11964 - 0.24 = 1.699
        assert!((minima - 1.70).abs() < 0.01, "{minima}");
    }

    #[test]
    fn design_check_generous_setup_passes() {
        let lambda_pm = 3.35;
        let theta_mrad = 20.0;
        // w = 25 dx, theta_obs ~ theta_cal, huge scan
        let w = 1.0;
        let m = 3 * ((w * theta_mrad * 3.0 * MRAD / (lambda_pm * PM)).round() as usize);
        let g = ExperimentGeometry::new(lambda_pm, theta_mrad, m, 2 * m / 3, w, 40.0, 1e6)
            .unwrap();
        let report = g.design_check();
        assert!(report.all_passed(), "{report}");
    }

    #[test]
    fn invalid_geometries_rejected() {
        assert!(ExperimentGeometry::new(3.35, 28.0, 20, 21, 0.2, 45.0, 3.0).is_err());
        assert!(ExperimentGeometry::new(3.35, 28.0, 20, 4, 0.2, 0.0, 3.0).is_err());
        assert!(ExperimentGeometry::new(3.35, 28.0, 20, 4, 0.2, 45.0, -1.0).is_err());
        assert!(ExperimentGeometry::new(3.35, -1.0, 20, 4, 0.2, 45.0, 3.0).is_err());
        assert!(ExperimentGeometry::new(3.35, 28.0, 1, 1, 0.2, 45.0, 3.0).is_err());
        assert!(sim_rec().with_slices(0, 1.0).is_err());
    }

    #[test]
    fn document_roundtrip_and_checks() {
        let g = sim_rec().with_slices(6, 0.67).unwrap();
        let back = ExperimentGeometry::from_json(&g.to_json()).unwrap();
        assert_eq!(g, back);

        let mut doc = g.to_doc();
        doc.d_pm = Some(11.6);
        assert!(ExperimentGeometry::try_from(doc).is_err());

        let mut doc = g.to_doc();
        doc.theta_obs_mrad = Some(doc.theta_obs_mrad.unwrap() * 1.5);
        assert!(ExperimentGeometry::try_from(doc).is_err());

        let mut doc = g.to_doc();
        doc.w_nm = None;
        doc.delta_per_nm = None;
        assert!(ExperimentGeometry::try_from(doc).is_err());
    }

    #[test]
    fn wavelengths() {
        assert!((electron_wavelength_pm(80.0) - 4.18).abs() < 0.005);
        assert!((electron_wavelength_pm(120.0) - 3.35).abs() < 0.005);
    }

    #[test]
    fn equal_area_scan_width() {
        // 87 x 51 positions at 0.021 nm
        let s = equivalent_square_width(87.0 * 0.021, 51.0 * 0.021);
        assert!((s - 1.40).abs() < 0.005);
    }
}
