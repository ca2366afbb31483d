//! Array geometry, steering vectors, and the mapping between physical path
//! angles and per-element spatial phase increments.
//!
//! The transmitter is a uniform rectangular array (URA) with `mx × my` units,
//! the receiver a uniform linear array (ULA) with `mr` units. Every steering
//! vector is Vandermonde in its phase increment, and the URA response is
//! `a_y ⊗ a_x`, so element `ly·mx + lx` carries phase `ly·ω_y + lx·ω_x`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{kron, CMat, CVec, C64};

/// Slack allowed on `asin` arguments before they count as inconsistent.
pub const ASIN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub mx: usize,
    pub my: usize,
    pub mr: usize,
    pub dx: f64,
    pub dy: f64,
    pub dr: f64,
    pub wavelength: f64,
}

impl ArrayGeometry {
    pub fn new(mx: usize, my: usize, mr: usize, dx: f64, dy: f64, dr: f64, wavelength: f64) -> Result<Self> {
        let g = Self { mx, my, mr, dx, dy, dr, wavelength };
        g.validate()?;
        Ok(g)
    }

    /// Half-wavelength spacings with unit wavelength.
    pub fn half_wavelength(mx: usize, my: usize, mr: usize) -> Result<Self> {
        Self::new(mx, my, mr, 0.5, 0.5, 0.5, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("mx", self.mx), ("my", self.my), ("mr", self.mr)] {
            if m == 0 {
                return Err(Error::Domain(format!("{name} must be at least 1")));
            }
        }
        for (name, d) in [("dx", self.dx), ("dy", self.dy), ("dr", self.dr), ("wavelength", self.wavelength)] {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive, got {d}")));
            }
        }
        Ok(())
    }

    pub fn mt(&self) -> usize {
        self.mx * self.my
    }

    /// Checks that no phase increment can exceed π for angles in `ranges`.
    pub fn check_no_wrap(&self, ranges: &AngleRanges) -> Result<()> {
        ranges.validate()?;
        let k = 2.0 * PI / self.wavelength;
        let sin_el = max_abs_sin(ranges.dod_el.0, ranges.dod_el.1);
        let checks = [
            ("dr", k * self.dr * max_abs_sin(ranges.doa.0, ranges.doa.1)),
            ("dx", k * self.dx * sin_el * max_abs_cos(ranges.dod_az.0, ranges.dod_az.1)),
            ("dy", k * self.dy * sin_el * max_abs_sin(ranges.dod_az.0, ranges.dod_az.1)),
        ];
        for (name, phase) in checks {
            if phase > PI + 1e-12 {
                return Err(Error::Domain(format!(
                    "spacing {name} wraps phase over the configured angle ranges (max {phase:.4} rad > π)"
                )));
            }
        }
        Ok(())
    }
}

fn contains(lo: f64, hi: f64, x: f64) -> bool {
    lo <= x && x <= hi
}

fn max_abs_sin(lo: f64, hi: f64) -> f64 {
    if contains(lo, hi, FRAC_PI_2) || contains(lo, hi, -FRAC_PI_2) {
        1.0
    } else {
        lo.sin().abs().max(hi.sin().abs())
    }
}

fn max_abs_cos(lo: f64, hi: f64) -> f64 {
    if contains(lo, hi, 0.0) || contains(lo, hi, PI) || contains(lo, hi, -PI) {
        1.0
    } else {
        lo.cos().abs().max(hi.cos().abs())
    }
}

/// Closed intervals (radians) for the three path angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleRanges {
    /// Receive azimuth θ.
    pub doa: (f64, f64),
    /// Transmit azimuth ϑ.
    pub dod_az: (f64, f64),
    /// Transmit elevation φ.
    pub dod_el: (f64, f64),
}

impl Default for AngleRanges {
    fn default() -> Self {
        Self { doa: (-PI / 3.0, PI / 3.0), dod_az: (-PI / 3.0, PI / 3.0), dod_el: (0.0, FRAC_PI_2) }
    }
}

impl AngleRanges {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("doa", self.doa, (-FRAC_PI_2, FRAC_PI_2)),
            ("dod_az", self.dod_az, (-PI, PI)),
            ("dod_el", self.dod_el, (0.0, FRAC_PI_2)),
        ];
        for (name, (lo, hi), (min, max)) in checks {
            if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
                return Err(Error::Domain(format!("angle range {name} = [{lo}, {hi}] is empty")));
            }
            if lo < min || hi > max {
                return Err(Error::Domain(format!("angle range {name} = [{lo}, {hi}] leaves [{min}, {max}]")));
            }
        }
        Ok(())
    }
}

/// Spatial phase increments (radians per element) of one path.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTriple {
    pub omega_r: f64,
    pub omega_x: f64,
    pub omega_y: f64,
}

/// Physical angles of one path: receive azimuth θ, transmit azimuth ϑ and
/// transmit elevation φ.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PathAngles {
    pub doa: f64,
    pub dod_az: f64,
    pub dod_el: f64,
}

impl PathAngles {
    pub fn new(doa: f64, dod_az: f64, dod_el: f64) -> Self {
        Self { doa, dod_az, dod_el }
    }
}

pub fn angles_to_phases(angles: PathAngles, geom: &ArrayGeometry) -> Result<PhaseTriple> {
    let PathAngles { doa, dod_az, dod_el } = angles;
    let in_range =
        [("doa", doa, -FRAC_PI_2, FRAC_PI_2), ("dod_az", dod_az, -PI, PI), ("dod_el", dod_el, 0.0, FRAC_PI_2)];
    for (name, v, lo, hi) in in_range {
        if !(v.is_finite() && lo <= v && v <= hi) {
            return Err(Error::Domain(format!("{name} = {v} outside [{lo}, {hi}]")));
        }
    }
    let k = 2.0 * PI / geom.wavelength;
    Ok(PhaseTriple {
        omega_r: k * geom.dr * doa.sin(),
        omega_x: k * geom.dx * dod_el.sin() * dod_az.cos(),
        omega_y: k * geom.dy * dod_el.sin() * dod_az.sin(),
    })
}

fn asin_args(w: PhaseTriple, geom: &ArrayGeometry) -> (f64, f64) {
    let k = geom.wavelength / (2.0 * PI);
    let sr = k * w.omega_r / geom.dr;
    let sx = k * w.omega_x / geom.dx;
    let sy = k * w.omega_y / geom.dy;
    (sr, (sx * sx + sy * sy).sqrt())
}

fn angles_from_args(w: PhaseTriple, geom: &ArrayGeometry, sr: f64, sel: f64) -> PathAngles {
    let dod_az =
        if w.omega_x == 0.0 && w.omega_y == 0.0 { 0.0 } else { (geom.dx * w.omega_y).atan2(geom.dy * w.omega_x) };
    PathAngles { doa: sr.clamp(-1.0, 1.0).asin(), dod_az, dod_el: sel.clamp(0.0, 1.0).asin() }
}

/// Inverts [`angles_to_phases`]. Azimuth ϑ is quadrant-aware and defined as 0
/// when both transmit phases vanish.
pub fn phases_to_angles(w: PhaseTriple, geom: &ArrayGeometry) -> Result<PathAngles> {
    let (sr, sel) = asin_args(w, geom);
    if !sr.is_finite() || sr.abs() > 1.0 + ASIN_TOL {
        return Err(Error::InconsistentPhase { what: "receive azimuth", arg: sr });
    }
    if !sel.is_finite() || sel > 1.0 + ASIN_TOL {
        return Err(Error::InconsistentPhase { what: "transmit elevation", arg: sel });
    }
    Ok(angles_from_args(w, geom, sr, sel))
}

/// Like [`phases_to_angles`] but clamps out-of-range `asin` arguments instead
/// of failing. The flag reports whether any clamping beyond tolerance happened.
pub fn phases_to_angles_clamped(w: PhaseTriple, geom: &ArrayGeometry) -> (PathAngles, bool) {
    let (sr, sel) = asin_args(w, geom);
    let clamped = sr.abs() > 1.0 + ASIN_TOL || sel > 1.0 + ASIN_TOL;
    (angles_from_args(w, geom, sr, sel), clamped)
}

/// Vandermonde vector `[1, e^{jω}, …, e^{j(m-1)ω}]`.
pub fn steering_ula(omega: f64, m: usize) -> CVec {
    CVec::from_fn(m, |i, _| C64::from_polar(1.0, i as f64 * omega))
}

/// URA response `a_y ⊗ a_x` of length `mx·my`.
pub fn steering_ura(omega_x: f64, omega_y: f64, geom: &ArrayGeometry) -> CVec {
    kron(&steering_ula(omega_y, geom.my), &steering_ula(omega_x, geom.mx))
}

/// Stacks Vandermonde columns for the given phase increments into an `m × K` matrix.
pub fn ula_manifold(omegas: impl IntoIterator<Item = f64>, m: usize) -> CMat {
    let cols: Vec<CVec> = omegas.into_iter().map(|w| steering_ula(w, m)).collect();
    if cols.is_empty() {
        return CMat::zeros(m, 0);
    }
    CMat::from_columns(&cols)
}

/// Per-path manifold matrices `(A_r, A_x, A_y)`.
pub fn manifolds(phases: &[PhaseTriple], geom: &ArrayGeometry) -> (CMat, CMat, CMat) {
    (
        ula_manifold(phases.iter().map(|w| w.omega_r), geom.mr),
        ula_manifold(phases.iter().map(|w| w.omega_x), geom.mx),
        ula_manifold(phases.iter().map(|w| w.omega_y), geom.my),
    )
}

/// Transmit manifold `A_t` with columns `a_y ⊗ a_x`.
pub fn transmit_manifold(phases: &[PhaseTriple], geom: &ArrayGeometry) -> CMat {
    let cols: Vec<CVec> = phases.iter().map(|w| steering_ura(w.omega_x, w.omega_y, geom)).collect();
    if cols.is_empty() {
        return CMat::zeros(geom.mt(), 0);
    }
    CMat::from_columns(&cols)
}
