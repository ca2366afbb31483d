//! Compressed tensor decomposition for the frugal block-diagonal pilot.
//!
//! The received blocks `X^{(p,q)} = H^{(p,q)} Q` are rearranged into
//! `Z = (A_r ⊙ E^*) B^T` with `E = Q^H A_t`. Spatial smoothing along the receive
//! array followed by shift-invariance (ESPRIT) yields the receive generators
//! and `B`; each column of `E` is then matched against `Q^H a_t(ω_x, ω_y)` to
//! recover the departure direction.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::channel::{synthesize_from_phases, PilotMatrix, ReceivedData, BLOCK_ORDER};
use crate::cpd::{feasible_paths, refit_columns, refit_dropping_duplicates, ParamEstimate};
use crate::error::{Error, Result, Theorem};
use crate::exec::map_indexed;
use crate::linalg::{eig, khatri_rao, pinv, poly_roots, svd, CMat, CVec, C64, ZERO};
use crate::manifolds::{
    phases_to_angles_clamped, steering_ula, transmit_manifold, ula_manifold, ArrayGeometry, PhaseTriple,
};

/// Pencil eigenvalues closer than this are reported as coincident.
pub const GENERATOR_SEPARATION: f64 = 1e-6;

/// Receive-array smoothing window. `pr + qr = mr + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SmoothingPlan {
    pub mr: usize,
    /// Pilot length `N`; the per-polarization block has `N/2` columns.
    pub n: usize,
    pub pr: usize,
    pub qr: usize,
    /// `min(4(pr−1), qr·N/2)`.
    pub kmax: usize,
}

impl SmoothingPlan {
    pub fn half(&self) -> usize {
        self.n / 2
    }
}

fn check_pilot_len(n: usize) -> Result<()> {
    if !n.is_multiple_of(2) || n < 4 {
        return Err(Error::Domain(format!("pilot length N={n} must be even and at least 4")));
    }
    Ok(())
}

/// Window length maximizing the identifiable path count; ties go to the longer window.
pub fn choose_pr(mr: usize, n: usize) -> Result<SmoothingPlan> {
    check_pilot_len(n)?;
    let half = n / 2;
    let mut best: Option<SmoothingPlan> = None;
    for pr in 2..=mr {
        let qr = mr + 1 - pr;
        let kmax = (4 * (pr - 1)).min(qr * half);
        if best.is_none_or(|b| kmax >= b.kmax) {
            best = Some(SmoothingPlan { mr, n, pr, qr, kmax });
        }
    }
    best.ok_or(Error::Infeasible { theorem: Theorem::Ctd, k: 1, kmax: 0 })
}

/// `Z[r·N/2 + n, p] = X^{(p)}[r, n]`, columns in block order.
pub fn build_z(rx: &ReceivedData, mr: usize, n: usize) -> Result<CMat> {
    check_pilot_len(n)?;
    if rx.x.shape() != (2 * mr, n) {
        return Err(Error::DimensionMismatch(format!(
            "received block is {}x{}, expected {}x{n}",
            rx.x.nrows(),
            rx.x.ncols(),
            2 * mr
        )));
    }
    let half = n / 2;
    let mut z = CMat::zeros(mr * half, 4);
    for (col, &(p, q)) in BLOCK_ORDER.iter().enumerate() {
        let blk = rx.x.view((p.index() * mr, q.index() * half), (mr, half));
        for r in 0..mr {
            for c in 0..half {
                z[(r * half + c, col)] = blk[(r, c)];
            }
        }
    }
    Ok(z)
}

/// `Y[r·4 + p, n] = Z[r·N/2 + n, p]`, so that `Y = (A_r ⊙ B) E^{*T}`.
fn polarization_unfolding(z: &CMat, plan: &SmoothingPlan) -> Result<CMat> {
    let half = plan.half();
    if z.shape() != (plan.mr * half, 4) {
        return Err(Error::DimensionMismatch(format!(
            "Z is {}x{}, plan expects {}x4",
            z.nrows(),
            z.ncols(),
            plan.mr * half
        )));
    }
    Ok(CMat::from_fn(4 * plan.mr, half, |row, c| z[((row / 4) * half + c, row % 4)]))
}

/// Smoothed matrix `(A_r[..pr] ⊙ B)(A_r[..qr] ⊙ E^*)^T`, of size `4pr × qr·N/2`.
pub fn smooth(z: &CMat, plan: &SmoothingPlan) -> Result<CMat> {
    let y = polarization_unfolding(z, plan)?;
    let half = plan.half();
    Ok(CMat::from_fn(4 * plan.pr, plan.qr * half, |row, col| {
        let (window, c) = (col / half, col % half);
        y[(row + 4 * window, c)]
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtdFactors {
    pub ar: CMat,
    /// Estimate of `Q^H A_t` up to per-column scaling.
    pub e: CMat,
    pub b: CMat,
    /// Receive generators `e^{jω_r}`, projected to the unit circle.
    pub z: Vec<C64>,
    /// Pencil eigenvalue moduli before projection.
    pub z_modulus: Vec<f64>,
    /// `σ₂/σ₁` of each reshaped de-mixed column.
    pub rank1_residual: Vec<f64>,
    pub warnings: Vec<String>,
}

impl CtdFactors {
    pub fn omega_r(&self) -> Vec<f64> {
        self.z.iter().map(|z| z.arg()).collect()
    }
}

/// Subspace estimate of `(A_r, E, B)` from `Z` by smoothed shift-invariance.
pub fn smoothed_esprit(z: &CMat, k: usize, plan: &SmoothingPlan) -> Result<CtdFactors> {
    if k == 0 {
        return Err(Error::Domain("K must be at least 1".into()));
    }
    if k > plan.kmax {
        return Err(Error::Infeasible { theorem: Theorem::Ctd, k, kmax: plan.kmax });
    }
    let xs = smooth(z, plan)?;
    let dec = svd(&xs)?;
    if dec.u.ncols() < k {
        return Err(Error::DimensionMismatch(format!("smoothed matrix has rank below K={k}")));
    }
    let us = dec.u.columns(0, k).into_owned();
    let rows = 4 * (plan.pr - 1);
    let up = us.rows(0, rows).into_owned();
    let dn = us.rows(4, rows).into_owned();
    let psi = pinv(&up)? * dn;
    let (vals, vecs) = eig(&psi)?;

    let mut warnings = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            if (vals[i] - vals[j]).norm() < GENERATOR_SEPARATION {
                warnings.push(format!("receive generators {i} and {j} nearly coincide"));
            }
        }
    }
    let mut gens = Vec::with_capacity(k);
    for (i, v) in vals.iter().enumerate() {
        let m = v.norm();
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::DegeneratePath(i));
        }
        gens.push(v / m);
    }

    let mixed = &us * &vecs;
    let mut b = CMat::zeros(4, k);
    let mut rank1_residual = Vec::with_capacity(k);
    for i in 0..k {
        let r = CMat::from_fn(4, plan.pr, |p, rr| mixed[(rr * 4 + p, i)]);
        let d = svd(&r)?;
        if !(d.s[0] > 0.0) {
            return Err(Error::DegeneratePath(i));
        }
        b.set_column(i, &(d.u.column(0) * C64::new(d.s[0], 0.0)));
        rank1_residual.push(d.s.get(1).copied().unwrap_or(0.0) / d.s[0]);
    }

    let ar = ula_manifold(gens.iter().map(|g| g.arg()), plan.mr);
    let y = polarization_unfolding(z, plan)?;
    let e_conj_t = pinv(&khatri_rao(&ar, &b)?)? * y;
    Ok(CtdFactors {
        ar,
        e: e_conj_t.adjoint(),
        b,
        z_modulus: vals.iter().map(|v| v.norm()).collect(),
        z: gens,
        rank1_residual,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DodOptions {
    /// Grid step as a fraction of `1/M` radians (half the half-power beamwidth).
    pub grid_step: f64,
    pub max_steps: usize,
    pub grad_tol: f64,
    pub armijo_c: f64,
    pub shrink: f64,
    /// Divide the objective by `‖Q^H a_t‖²` so candidate directions are
    /// compared by angle to `ê` rather than by residual energy. Off by default.
    pub normalized: bool,
}

impl Default for DodOptions {
    fn default() -> Self {
        Self { grid_step: 0.443, max_steps: 500, grad_tol: 1e-10, armijo_c: 1e-4, shrink: 0.5, normalized: false }
    }
}

/// `f(ω_x, ω_y) = ‖P_ê^⊥ Q^H a_t(ω_x, ω_y)‖²`.
#[derive(Debug, Clone)]
pub struct DodObjective {
    /// `Q^T` as a complex `N/2 × Mt` matrix.
    qt: CMat,
    /// Unit-norm `ê`.
    e: CVec,
    mx: usize,
    my: usize,
    normalized: bool,
}

impl DodObjective {
    pub fn new(e: &CVec, q: &DMatrix<f64>, geom: &ArrayGeometry) -> Result<Self> {
        if q.nrows() != geom.mt() || q.ncols() != e.len() {
            return Err(Error::DimensionMismatch(format!(
                "Q is {}x{}, expected {}x{}",
                q.nrows(),
                q.ncols(),
                geom.mt(),
                e.len()
            )));
        }
        let n = e.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Domain("direction vector is zero".into()));
        }
        Ok(Self {
            qt: q.transpose().map(|x| C64::new(x, 0.0)),
            e: e / C64::new(n, 0.0),
            mx: geom.mx,
            my: geom.my,
            normalized: false,
        })
    }

    /// Switch to `f / ‖Q^H a_t‖²`, the squared sine of the angle to `ê`.
    pub fn normalized(mut self, on: bool) -> Self {
        self.normalized = on;
        self
    }

    fn scale(&self, v: &CVec) -> f64 {
        if self.normalized {
            v.norm_squared()
        } else {
            1.0
        }
    }

    fn project(&self, v: &CVec) -> CVec {
        let c = self.e.dotc(v);
        v - &self.e * c
    }

    pub fn value(&self, wx: f64, wy: f64) -> f64 {
        let at = kron_steer(steering_ula(wy, self.my), steering_ula(wx, self.mx));
        let v = &self.qt * at;
        self.project(&v).norm_squared() / self.scale(&v)
    }

    /// Objective and its gradient `(∂f/∂ω_x, ∂f/∂ω_y)`.
    pub fn value_grad(&self, wx: f64, wy: f64) -> (f64, [f64; 2]) {
        let ax = steering_ula(wx, self.mx);
        let ay = steering_ula(wy, self.my);
        let dax = ramp(&ax);
        let day = ramp(&ay);
        let v = &self.qt * kron_steer(ay.clone(), ax.clone());
        let pv = self.project(&v);
        let dvx = &self.qt * kron_steer(ay, dax);
        let dvy = &self.qt * kron_steer(day, ax);
        let gx = 2.0 * pv.dotc(&dvx).re;
        let gy = 2.0 * pv.dotc(&dvy).re;
        let f = pv.norm_squared();
        if !self.normalized {
            return (f, [gx, gy]);
        }
        // Quotient rule with n = ‖v‖².
        let n = v.norm_squared();
        let nx = 2.0 * v.dotc(&dvx).re;
        let ny = 2.0 * v.dotc(&dvy).re;
        (f / n, [(gx * n - f * nx) / (n * n), (gy * n - f * ny) / (n * n)])
    }
}

fn kron_steer(ay: CVec, ax: CVec) -> CVec {
    crate::linalg::kron(&ay, &ax)
}

/// `j·m ∘ a`, the derivative of a Vandermonde vector with respect to its phase.
fn ramp(a: &CVec) -> CVec {
    CVec::from_fn(a.len(), |i, _| a[i] * C64::new(0.0, i as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DodEstimate {
    pub omega_x: f64,
    pub omega_y: f64,
    pub dod_az: f64,
    pub dod_el: f64,
    pub objective: f64,
    pub steps: usize,
    /// False when the descent exhausted its step budget.
    pub converged: bool,
    /// The phases fell outside the visible region and were projected.
    pub clamped: bool,
}

/// Largest achievable phase magnitude per transmit axis.
fn phase_extent(geom: &ArrayGeometry) -> (f64, f64) {
    let k = 2.0 * std::f64::consts::PI / geom.wavelength;
    (k * geom.dx, k * geom.dy)
}

fn linspace(half_width: f64, step: f64) -> Vec<f64> {
    let n = ((2.0 * half_width / step).ceil() as usize).max(1) + 1;
    (0..n).map(|i| -half_width + 2.0 * half_width * i as f64 / (n - 1) as f64).collect()
}

/// Exhaustive search over the visible phase ellipse.
fn grid_search(obj: &DodObjective, geom: &ArrayGeometry, opts: &DodOptions) -> (f64, f64, f64) {
    let pi = std::f64::consts::PI;
    let (kx, ky) = phase_extent(geom);
    let (sx, sy) = (opts.grid_step / geom.mx as f64, opts.grid_step / geom.my as f64);
    let margin = 1.0 + (sx / kx).max(sy / ky);
    let gx = linspace(kx.min(pi), sx);
    let gy = linspace(ky.min(pi), sy);
    let (mx, my, half) = (geom.mx, geom.my, obj.qt.nrows());
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for &wx in &gx {
        let ax = steering_ula(wx, mx);
        // partial[ly, n] = Σ_lx a_x[lx] Q[ly·Mx + lx, n]
        let partial = CMat::from_fn(my, half, |ly, n| (0..mx).map(|lx| obj.qt[(n, ly * mx + lx)] * ax[lx]).sum());
        for &wy in &gy {
            if (wx / kx).powi(2) + (wy / ky).powi(2) > margin * margin {
                continue;
            }
            let v = partial.tr_mul(&steering_ula(wy, my));
            let f = obj.project(&v).norm_squared() / obj.scale(&v);
            if f < best.0 {
                best = (f, wx, wy);
            }
        }
    }
    best
}

/// Armijo-backtracked steepest descent from `(wx, wy)`.
fn descend(obj: &DodObjective, start: (f64, f64), opts: &DodOptions) -> (f64, f64, f64, usize, bool) {
    let (mut wx, mut wy) = start;
    let (mut f, mut g) = obj.value_grad(wx, wy);
    for step in 0..opts.max_steps {
        let gn2 = g[0] * g[0] + g[1] * g[1];
        if gn2.sqrt() < opts.grad_tol {
            return (wx, wy, f, step, true);
        }
        let mut t = 1.0;
        loop {
            let (nx, ny) = (wx - t * g[0], wy - t * g[1]);
            let fnew = obj.value(nx, ny);
            if fnew <= f - opts.armijo_c * t * gn2 {
                wx = nx;
                wy = ny;
                break;
            }
            t *= opts.shrink;
            if t * gn2.sqrt() < 1e-15 * (1.0 + wx.abs() + wy.abs()) {
                // No representable step decreases f: stationary to working precision.
                return (wx, wy, f, step, true);
            }
        }
        (f, g) = obj.value_grad(wx, wy);
    }
    let gn = (g[0] * g[0] + g[1] * g[1]).sqrt();
    (wx, wy, f, opts.max_steps, gn < opts.grad_tol)
}

/// Root-MUSIC for a single Vandermonde transmit axis of length `m`, where
/// `Q^T a_t = Q^T a(ω)`. Picks the root nearest the unit circle inside the
/// visible interval.
fn root_music(obj: &DodObjective, m: usize, extent: f64) -> Result<f64> {
    let q = obj.qt.transpose();
    let proj = CMat::identity(obj.e.len(), obj.e.len()) - &obj.e * obj.e.adjoint();
    let c = &q * proj * q.transpose();
    let mut coeffs = vec![ZERO; 2 * m - 1];
    for i in 0..m {
        for j in 0..m {
            // conj(z^i)·z^j = z^{j−i} on the unit circle
            coeffs[j + m - 1 - i] += c[(i, j)];
        }
    }
    let roots = poly_roots(&coeffs)?;
    let limit = extent.min(std::f64::consts::PI) + 1e-9;
    roots
        .iter()
        .filter(|z| z.arg().abs() <= limit)
        .min_by(|a, b| (a.norm() - 1.0).abs().total_cmp(&(b.norm() - 1.0).abs()))
        .map(|z| z.arg())
        .ok_or_else(|| Error::Numerical("no admissible root-MUSIC root".into()))
}

/// Departure direction of one path from its compressed signature `ê ∝ Q^H a_t`.
pub fn recover_dod(e: &CVec, q: &DMatrix<f64>, geom: &ArrayGeometry, opts: &DodOptions) -> Result<DodEstimate> {
    if e.len() < 2 {
        return Err(Error::Domain(format!("N/2={} must be at least 2", e.len())));
    }
    let obj = DodObjective::new(e, q, geom)?.normalized(opts.normalized);
    let (kx, ky) = phase_extent(geom);
    let (wx, wy, objective, steps, converged) = match (geom.mx, geom.my) {
        (1, 1) => (0.0, 0.0, obj.value(0.0, 0.0), 0, true),
        (mx, 1) => {
            let wx = root_music(&obj, mx, kx)?;
            (wx, 0.0, obj.value(wx, 0.0), 0, true)
        }
        (1, my) => {
            let wy = root_music(&obj, my, ky)?;
            (0.0, wy, obj.value(0.0, wy), 0, true)
        }
        _ => {
            let (_, gx, gy) = grid_search(&obj, geom, opts);
            descend(&obj, (gx, gy), opts)
        }
    };
    let w = PhaseTriple { omega_r: 0.0, omega_x: wx, omega_y: wy };
    let (angles, clamped) = phases_to_angles_clamped(w, geom);
    Ok(DodEstimate {
        omega_x: wx,
        omega_y: wy,
        dod_az: angles.dod_az,
        dod_el: angles.dod_el,
        objective,
        steps,
        converged,
        clamped,
    })
}

/// Frugal-pilot estimator: Z → smoothing → ESPRIT → per-path DOD search →
/// path-loss refit → channel.
pub fn ctd_pipeline(
    rx: &ReceivedData,
    pilot: &PilotMatrix,
    k: usize,
    geom: &ArrayGeometry,
    opts: &DodOptions,
) -> Result<ParamEstimate> {
    let q = pilot.q.as_ref().ok_or_else(|| Error::Domain("compressed estimation needs the frugal pilot".into()))?;
    if q.nrows() != geom.mt() {
        return Err(Error::DimensionMismatch(format!(
            "pilot has {} transmit antennas, geometry has {}",
            q.nrows(),
            geom.mt()
        )));
    }
    let n = pilot.n();
    let plan = choose_pr(geom.mr, n)?;
    if k > plan.kmax {
        return Err(Error::Infeasible { theorem: Theorem::Ctd, k, kmax: plan.kmax });
    }
    let z = build_z(rx, geom.mr, n)?;
    let factors = smoothed_esprit(&z, k, &plan)?;
    let mut warnings = factors.warnings.clone();
    let dods = map_indexed(k, |i| recover_dod(&factors.e.column(i).into_owned(), q, geom, opts));
    let omega_r = factors.omega_r();
    let mut raw = Vec::with_capacity(k);
    for (i, d) in dods.into_iter().enumerate() {
        let d = d?;
        if !d.converged {
            warnings.push(format!("path {i}: departure search stopped after {} steps", d.steps));
        }
        raw.push(PhaseTriple { omega_r: omega_r[i], omega_x: d.omega_x, omega_y: d.omega_y });
    }
    let (phases, angles) = feasible_paths(&raw, geom, &mut warnings)?;
    let qt = q.transpose().map(|x| C64::new(x, 0.0));
    let (phases, angles, b) = refit_dropping_duplicates(phases, angles, &mut warnings, |w| {
        let ar = ula_manifold(w.iter().map(|p| p.omega_r), geom.mr);
        let compressed = &qt * transmit_manifold(w, geom).map(|z| z.conj());
        Ok(refit_columns(&khatri_rao(&ar, &compressed)?, &z)?.transpose())
    })?;
    let channel = synthesize_from_phases(&phases, &b, geom)?;
    Ok(ParamEstimate { phases, angles, b, channel, warnings })
}
