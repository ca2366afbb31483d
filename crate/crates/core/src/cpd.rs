//! Four-way tensor decomposition of a full channel estimate.
//!
//! Stacking the vectorized polarization blocks gives
//! `Ȟ = (A_y^* ⊙ A_x^* ⊙ A_r) B^T`, a rank-`K` 4-way tensor. Alternating least
//! squares recovers the factors up to permutation and scaling; spatial phases
//! are then read off each Vandermonde column in closed form, the manifolds are
//! rebuilt without scaling ambiguity, and `B` is refit by least squares.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{
    complex_gaussian, ls_channel_estimate, synthesize_from_phases, ChannelMatrix, PilotMatrix, ReceivedData,
    BLOCK_ORDER,
};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, rng_for};
use crate::linalg::{frob_norm_sq, hadamard, pinv, solve_gram, svd, CMat, CVec, C64, PINV_RCOND, ZERO};
use crate::manifolds::{
    angles_to_phases, manifolds, phases_to_angles, phases_to_angles_clamped, ArrayGeometry, PathAngles, PhaseTriple,
};

pub use crate::linalg::khatri_rao;

/// Fits below this are treated as exact and end the iteration.
pub const FIT_FLOOR: f64 = 1e-13;

/// Relative singular-value cutoff under which the data are taken to be exactly
/// of lower rank than requested.
const RANK_CUTOFF: f64 = 1e-10;

/// The four matrix unfoldings of the channel tensor `T[r, lx, ly, p]`.
///
/// Row orderings (slowest index first):
/// * `h1`: `(p, ly, lx)` × `r`  — `(B ⊙ A_y^* ⊙ A_x^*) A_r^T`
/// * `h2`: `(p, ly, r)` × `lx` — `(B ⊙ A_y^* ⊙ A_r) A_x^H`
/// * `h3`: `(p, lx, r)` × `ly` — `(B ⊙ A_x^* ⊙ A_r) A_y^H`
/// * `h4`: `(ly, lx, r)` × `p` — `(A_y^* ⊙ A_x^* ⊙ A_r) B^T`
#[derive(Debug, Clone, PartialEq)]
pub struct Unfoldings {
    pub h1: CMat,
    pub h2: CMat,
    pub h3: CMat,
    pub h4: CMat,
    pub mr: usize,
    pub mx: usize,
    pub my: usize,
}

pub fn unfold_channel(h: &ChannelMatrix, geom: &ArrayGeometry) -> Result<Unfoldings> {
    let (mr, mx, my) = (geom.mr, geom.mx, geom.my);
    if h.h.shape() != (2 * mr, 2 * mx * my) {
        return Err(Error::DimensionMismatch(format!(
            "channel is {}x{}, geometry expects {}x{}",
            h.h.nrows(),
            h.h.ncols(),
            2 * mr,
            2 * mx * my
        )));
    }
    let blocks: Vec<CMat> = BLOCK_ORDER.iter().map(|&(p, q)| h.block(p, q)).collect();
    let t = |r: usize, lx: usize, ly: usize, p: usize| blocks[p][(r, ly * mx + lx)];
    let h1 = CMat::from_fn(4 * my * mx, mr, |row, r| {
        let (p, rest) = (row / (my * mx), row % (my * mx));
        t(r, rest % mx, rest / mx, p)
    });
    let h2 = CMat::from_fn(4 * my * mr, mx, |row, lx| {
        let (p, rest) = (row / (my * mr), row % (my * mr));
        t(rest % mr, lx, rest / mr, p)
    });
    let h3 = CMat::from_fn(4 * mx * mr, my, |row, ly| {
        let (p, rest) = (row / (mx * mr), row % (mx * mr));
        t(rest % mr, rest / mr, ly, p)
    });
    let h4 = CMat::from_fn(my * mx * mr, 4, |row, p| {
        let (ly, rest) = (row / (mx * mr), row % (mx * mr));
        t(rest % mr, rest / mr, ly, p)
    });
    Ok(Unfoldings { h1, h2, h3, h4, mr, mx, my })
}

/// Rebuilds the channel matrix from the stacked unfolding `h4`.
pub fn refold_channel(unf: &Unfoldings) -> Result<ChannelMatrix> {
    let (mr, mt) = (unf.mr, unf.mx * unf.my);
    let blocks: [CMat; 4] = std::array::from_fn(|p| CMat::from_fn(mr, mt, |r, c| unf.h4[(c * mr + r, p)]));
    ChannelMatrix::from_blocks(&blocks)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpdOptions {
    pub max_iters: usize,
    /// Stop once the relative change of the fit drops below this.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Polish each closed-form phase with a periodogram peak search.
    pub refine_phases: bool,
    /// Seed restart 0 with the closed-form shift-invariance solution when the
    /// transmit array admits it; other restarts are random.
    pub algebraic_init: bool,
}

impl Default for CpdOptions {
    fn default() -> Self {
        Self { max_iters: 1000, tol: 1e-8, restarts: 10, seed: 0, refine_phases: false, algebraic_init: true }
    }
}

/// Estimated factors. `fit` is `‖Ȟ − model‖_F / ‖Ȟ‖_F`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpdFactors {
    pub ar: CMat,
    pub ax: CMat,
    pub ay: CMat,
    pub b: CMat,
    pub fit: f64,
    pub iterations: usize,
    /// Fit after every sweep of the winning run.
    pub fit_history: Vec<f64>,
    /// A subproblem Gram matrix needed diagonal loading.
    pub regularized: bool,
    /// Index of the winning restart.
    pub restart: usize,
}

impl CpdFactors {
    pub fn k(&self) -> usize {
        self.b.ncols()
    }

    /// Model unfolding `(A_y^* ⊙ A_x^* ⊙ A_r) B^T`.
    pub fn model_h4(&self) -> CMat {
        let w =
            khatri_rao(&khatri_rao(&self.ay.map(|z| z.conj()), &self.ax.map(|z| z.conj())).expect("equal K"), &self.ar)
                .expect("equal K");
        w * self.b.transpose()
    }
}

fn gram(m: &CMat) -> CMat {
    m.adjoint() * m
}

fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMat {
    let mut m = CMat::zeros(rows, cols);
    for z in m.iter_mut() {
        *z = complex_gaussian(rng);
    }
    m
}

/// Least-squares update `F = ((W^H W)^{-1} W^H Y)^T` with a precomputed Gram.
fn ls_update(w: &CMat, g: &CMat, y: &CMat) -> Result<(CMat, bool)> {
    let (x, loaded) = solve_gram(g, &(w.adjoint() * y))?;
    Ok((x.transpose(), loaded))
}

/// Unit-normalizes the columns of `f`, multiplying the norms into `b`.
fn absorb_norms(f: &mut CMat, b: &mut CMat) {
    for k in 0..f.ncols() {
        let n = f.column(k).norm();
        if n > 0.0 && n.is_finite() {
            f.column_mut(k).scale_mut(1.0 / n);
            b.column_mut(k).scale_mut(n);
        }
    }
}

struct AlsRun {
    ar: CMat,
    cx: CMat,
    cy: CMat,
    b: CMat,
    history: Vec<f64>,
    regularized: bool,
}

/// Starting factors `(A_r, C_x, C_y, B)`.
struct Start {
    ar: CMat,
    cx: CMat,
    cy: CMat,
    b: CMat,
}

fn random_start<R: Rng + ?Sized>(unf: &Unfoldings, k: usize, rng: &mut R) -> Start {
    Start { ar: randn(unf.mr, k, rng), cx: randn(unf.mx, k, rng), cy: randn(unf.my, k, rng), b: randn(4, k, rng) }
}

/// Dominant rank-1 pair `(u·σ, conj(v))` of `m`, so that `m ≈ x y^T`.
fn rank1_pair(m: &CMat) -> Result<(CVec, CVec)> {
    let d = svd(m)?;
    let x = d.u.column(0) * C64::new(d.s[0], 0.0);
    let y = d.v_t.row(0).transpose();
    Ok((x, y))
}

/// Closed-form factors from the shift invariance of the transmit manifold.
///
/// With `M = (C_y ⊙ C_x)(A_r ⊙ B)^T` (`Mt × 4Mr`), the leading `K` left singular
/// vectors span the columns of `C_y ⊙ C_x`. Both shift pencils are
/// diagonalized jointly through a fixed linear combination; the de-mixed basis
/// gives `C_y ⊙ C_x` column-wise, and a least-squares solve plus rank-1 splits
/// recovers `A_r` and `B`. Returns `None` when the dimensions do not allow it.
/// `(C_y ⊙ C_x)(A_r ⊙ B)^T`, the `Mt × 4Mr` rearrangement of `h4`.
fn probe_matrix(unf: &Unfoldings) -> CMat {
    CMat::from_fn(unf.mx * unf.my, 4 * unf.mr, |row, col| unf.h4[(row * unf.mr + col / 4, col % 4)])
}

/// Rank of the data when it is provably below `k`: the probe matrix has fewer
/// than `k` non-negligible singular values although it could hold `k`.
fn deficient_rank(unf: &Unfoldings, k: usize) -> Result<Option<usize>> {
    let m = probe_matrix(unf);
    if k > m.nrows().min(m.ncols()) {
        return Ok(None);
    }
    let s = svd(&m)?.s;
    let r = s.iter().take_while(|&&x| x > RANK_CUTOFF * s[0]).count();
    Ok((r >= 1 && r < k).then_some(r))
}

fn algebraic_start(unf: &Unfoldings, k: usize) -> Result<Option<Start>> {
    let (mr, mx, my) = (unf.mr, unf.mx, unf.my);
    let mt = mx * my;
    let y_shift = my >= 2 && (my - 1) * mx >= k;
    let x_shift = mx >= 2 && (mx - 1) * my >= k;
    if k > 4 * mr || k > mt || !(y_shift || x_shift) {
        return Ok(None);
    }
    let m = probe_matrix(unf);
    let us = svd(&m)?.u.columns(0, k).into_owned();
    let mut psi = CMat::zeros(k, k);
    if y_shift {
        let rows = (my - 1) * mx;
        psi += pinv(&us.rows(0, rows).into_owned())? * us.rows(mx, rows);
    }
    if x_shift {
        let keep = |first: usize| -> CMat {
            let idx: Vec<usize> = (0..my).flat_map(|ly| (first..first + mx - 1).map(move |lx| ly * mx + lx)).collect();
            us.select_rows(idx.iter())
        };
        // Irrational weight keeps coincident y-generators separable.
        psi += (pinv(&keep(0))? * keep(1)) * C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    }
    let (_, vecs) = crate::linalg::eig(&psi)?;
    let w = &us * vecs;
    let mut cx = CMat::zeros(mx, k);
    let mut cy = CMat::zeros(my, k);
    for i in 0..k {
        let r = CMat::from_fn(mx, my, |lx, ly| w[(ly * mx + lx, i)]);
        let (x, y) = rank1_pair(&r)?;
        cx.set_column(i, &x);
        cy.set_column(i, &y);
    }
    let f = pinv(&khatri_rao(&cy, &cx)?)? * m;
    let mut ar = CMat::zeros(mr, k);
    let mut b = CMat::zeros(4, k);
    for i in 0..k {
        let r = CMat::from_fn(mr, 4, |rr, p| f[(i, rr * 4 + p)]);
        let (x, y) = rank1_pair(&r)?;
        ar.set_column(i, &x);
        b.set_column(i, &y);
    }
    let ok = [&ar, &cx, &cy, &b].iter().all(|m| m.iter().all(|z| z.re.is_finite() && z.im.is_finite()));
    Ok(ok.then_some(Start { ar, cx, cy, b }))
}

/// One ALS run on the conjugate-free parametrization `C_x = A_x^*`, `C_y = A_y^*`.
fn als_run(unf: &Unfoldings, start: Start, opts: &CpdOptions) -> Result<AlsRun> {
    let norm = frob_norm_sq(&unf.h4).sqrt();
    let Start { mut ar, mut cx, mut cy, mut b } = start;
    let mut history = Vec::new();
    let mut regularized = false;

    for _ in 0..opts.max_iters.max(1) {
        let (gb, gy, gx) = (gram(&b), gram(&cy), gram(&cx));
        let w1 = khatri_rao(&khatri_rao(&b, &cy)?, &cx)?;
        let (next, l) = ls_update(&w1, &hadamard(&hadamard(&gb, &gy), &gx), &unf.h1)?;
        ar = next;
        regularized |= l;

        let ga = gram(&ar);
        let w2 = khatri_rao(&khatri_rao(&b, &cy)?, &ar)?;
        let (next, l) = ls_update(&w2, &hadamard(&hadamard(&gb, &gy), &ga), &unf.h2)?;
        cx = next;
        regularized |= l;

        let gx = gram(&cx);
        let w3 = khatri_rao(&khatri_rao(&b, &cx)?, &ar)?;
        let (next, l) = ls_update(&w3, &hadamard(&hadamard(&gb, &gx), &ga), &unf.h3)?;
        cy = next;
        regularized |= l;

        let gy = gram(&cy);
        let w4 = khatri_rao(&khatri_rao(&cy, &cx)?, &ar)?;
        let (next, l) = ls_update(&w4, &hadamard(&hadamard(&gy, &gx), &ga), &unf.h4)?;
        b = next;
        regularized |= l;

        let fit = frob_norm_sq(&(&unf.h4 - &w4 * b.transpose())).sqrt() / norm;
        absorb_norms(&mut ar, &mut b);
        absorb_norms(&mut cx, &mut b);
        absorb_norms(&mut cy, &mut b);

        let prev = history.last().copied();
        history.push(fit);
        if !fit.is_finite() {
            return Err(Error::Numerical("ALS fit diverged".into()));
        }
        if fit <= FIT_FLOOR {
            break;
        }
        if let Some(prev) = prev {
            if (prev - fit).abs() < opts.tol * prev {
                break;
            }
        }
    }
    Ok(AlsRun { ar, cx, cy, b, history, regularized })
}

/// Rank-`k` decomposition by ALS with `opts.restarts` initializations; the run
/// with the smallest final fit wins (ties go to the lower index). When restart
/// 0 already reaches [`FIT_FLOOR`] the others are skipped.
///
/// With `algebraic_init`, data of exactly lower rank `r < k` (noiseless input
/// with an overestimated `k`) is decomposed at rank `r`; the surplus columns are
/// unit steering vectors at random phases carrying zero path loss. An exact
/// rank-`k` fit of rank-`r` data is not unique and generally not Vandermonde.
pub fn als_cpd(unf: &Unfoldings, k: usize, opts: &CpdOptions) -> Result<CpdFactors> {
    if k == 0 {
        return Err(Error::Domain("K must be at least 1".into()));
    }
    if frob_norm_sq(&unf.h4) == 0.0 {
        return Err(Error::Domain("cannot decompose an all-zero channel".into()));
    }
    if opts.algebraic_init {
        if let Some(r) = deficient_rank(unf, k)? {
            let mut f = als_cpd_full(unf, r, opts)?;
            pad_silent(&mut f, k, &mut rng_for(opts.seed, u64::MAX));
            return Ok(f);
        }
    }
    als_cpd_full(unf, k, opts)
}

fn pad_silent<R: Rng + ?Sized>(f: &mut CpdFactors, k: usize, rng: &mut R) {
    let r = f.k();
    let steer = |m: &CMat, rng: &mut R| -> CMat {
        let mut out = m.clone().resize_horizontally(k, ZERO);
        for j in r..k {
            let w = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            out.set_column(j, &crate::manifolds::steering_ula(w, m.nrows()));
        }
        out
    };
    f.ar = steer(&f.ar, rng);
    f.ax = steer(&f.ax, rng);
    f.ay = steer(&f.ay, rng);
    f.b = f.b.clone().resize_horizontally(k, ZERO);
}

fn als_cpd_full(unf: &Unfoldings, k: usize, opts: &CpdOptions) -> Result<CpdFactors> {
    let restarts = opts.restarts.max(1);
    let start = |i: usize| -> Result<Start> {
        if i == 0 && opts.algebraic_init {
            // A failed closed-form start degrades to a random one.
            if let Ok(Some(s)) = algebraic_start(unf, k) {
                return Ok(s);
            }
        }
        Ok(random_start(unf, k, &mut rng_for(opts.seed, i as u64)))
    };
    let first = als_run(unf, start(0)?, opts)?;
    let mut runs = vec![Ok(first)];
    if *runs[0].as_ref().expect("ok").history.last().expect("non-empty") > FIT_FLOOR {
        runs.extend(map_indexed(restarts - 1, |i| als_run(unf, start(i + 1)?, opts)));
    }
    let mut best: Option<(usize, AlsRun)> = None;
    for (i, run) in runs.into_iter().enumerate() {
        let run = run?;
        let fit = *run.history.last().expect("at least one sweep");
        let better = match &best {
            None => true,
            Some((_, b)) => fit < *b.history.last().expect("non-empty"),
        };
        if better {
            best = Some((i, run));
        }
    }
    let (restart, run) = best.expect("at least one restart");
    Ok(CpdFactors {
        ar: run.ar,
        ax: run.cx.map(|z| z.conj()),
        ay: run.cy.map(|z| z.conj()),
        b: run.b,
        fit: *run.history.last().expect("non-empty"),
        iterations: run.history.len(),
        fit_history: run.history,
        regularized: run.regularized,
        restart,
    })
}

/// Closed-form phase increment of a Vandermonde-like column:
/// `∠(a[0..M-1]^H a[1..M])`. Columns of length one carry no phase and give 0.
pub fn shift_phase(col: &CVec) -> Option<f64> {
    let m = col.len();
    if m < 2 {
        return Some(0.0);
    }
    let lag: C64 = (0..m - 1).map(|i| col[i].conj() * col[i + 1]).sum();
    if lag.norm() == 0.0 || !lag.re.is_finite() || !lag.im.is_finite() {
        return None;
    }
    Some(lag.arg())
}

/// Periodogram-peak phase of `col`: coarse grid of `16·M` points followed by a
/// golden-section polish inside the winning cell.
pub fn tone_phase(col: &CVec) -> f64 {
    let m = col.len();
    if m < 2 {
        return 0.0;
    }
    let power = |w: f64| -> f64 {
        let mut acc = ZERO;
        for (i, z) in col.iter().enumerate() {
            acc += C64::from_polar(1.0, -(i as f64) * w) * z;
        }
        acc.norm_sqr()
    };
    let grid = 16 * m;
    let step = 2.0 * std::f64::consts::PI / grid as f64;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for g in 0..grid {
        let w = -std::f64::consts::PI + g as f64 * step;
        let p = power(w);
        if p > best.0 {
            best = (p, w);
        }
    }
    // Bisect the sign change of dP/dω across the winning cell.
    let slope = |w: f64| -> f64 {
        let (mut v, mut dv) = (ZERO, ZERO);
        for (i, z) in col.iter().enumerate() {
            let t = C64::from_polar(1.0, -(i as f64) * w) * z;
            v += t;
            dv += t * C64::new(0.0, -(i as f64));
        }
        2.0 * (v.conj() * dv).re
    };
    let (mut lo, mut hi) = (best.1 - step, best.1 + step);
    if !(slope(lo) > 0.0 && slope(hi) < 0.0) {
        return best.1;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let w = 0.5 * (lo + hi);
    (w + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI
}

fn column_phases(f: &CMat, refine: bool) -> Result<Vec<f64>> {
    let max_norm = f.column_iter().map(|c| c.norm()).fold(0.0_f64, f64::max);
    (0..f.ncols())
        .map(|k| {
            let col: CVec = f.column(k).into_owned();
            let n = col.norm();
            if !(n > 1e-12 * max_norm) || !n.is_finite() {
                return Err(Error::DegeneratePath(k));
            }
            if refine {
                Ok(tone_phase(&col))
            } else {
                shift_phase(&col).ok_or(Error::DegeneratePath(k))
            }
        })
        .collect()
}

/// Per-path spatial phases read from the factor columns.
pub fn extract_phases(factors: &CpdFactors, refine: bool) -> Result<Vec<PhaseTriple>> {
    let wr = column_phases(&factors.ar, refine)?;
    let wx = column_phases(&factors.ax, refine)?;
    let wy = column_phases(&factors.ay, refine)?;
    Ok((0..factors.k()).map(|k| PhaseTriple { omega_r: wr[k], omega_x: wx[k], omega_y: wy[k] }).collect())
}

/// Per-path phases and physical angles. Fails if a phase triple maps outside
/// the visible region.
pub fn extract_angles(factors: &CpdFactors, geom: &ArrayGeometry) -> Result<Vec<(PhaseTriple, PathAngles)>> {
    extract_phases(factors, false)?.into_iter().map(|w| Ok((w, phases_to_angles(w, geom)?))).collect()
}

/// Solves `min_X ‖data − design·X‖_F` and returns `X`, refusing designs whose
/// columns are (nearly) parallel.
pub(crate) fn refit_columns(design: &CMat, data: &CMat) -> Result<CMat> {
    let k = design.ncols();
    let norms: Vec<f64> = design.column_iter().map(|c| c.norm()).collect();
    for i in 0..k {
        for j in (i + 1)..k {
            let c = design.column(i).dotc(&design.column(j)).norm() / (norms[i] * norms[j]);
            if c > 1.0 - 1e-10 {
                return Err(Error::CollidingPaths(i, j));
            }
        }
    }
    let s = svd(design)?.s;
    let smax = s.first().copied().unwrap_or(0.0);
    let smin = s.last().copied().unwrap_or(0.0);
    if s.len() < k || smin <= PINV_RCOND * smax {
        return Err(Error::RankDeficient(format!(
            "design matrix of {k} reconstructed paths has condition beyond {:e}",
            1.0 / PINV_RCOND
        )));
    }
    Ok(pinv(design)? * data)
}

/// Scaling-free path losses `B̂` (4 × K) from manifolds rebuilt at `phases`.
pub fn refit_pathloss(h4: &CMat, phases: &[PhaseTriple], geom: &ArrayGeometry) -> Result<CMat> {
    let (ar, ax, ay) = manifolds(phases, geom);
    let w = khatri_rao(&khatri_rao(&ay.map(|z| z.conj()), &ax.map(|z| z.conj()))?, &ar)?;
    if w.nrows() != h4.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "unfolding has {} rows, manifolds give {}",
            h4.nrows(),
            w.nrows()
        )));
    }
    Ok(refit_columns(&w, h4)?.transpose())
}

/// Recovered multipath parameters and the channel they generate.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEstimate {
    pub phases: Vec<PhaseTriple>,
    pub angles: Vec<PathAngles>,
    pub b: CMat,
    pub channel: ChannelMatrix,
    pub warnings: Vec<String>,
}

impl ParamEstimate {
    pub fn k(&self) -> usize {
        self.angles.len()
    }
}

/// Maps estimated phases to angles, projecting infeasible triples onto the
/// visible region so the phases always agree with the reported angles.
pub(crate) fn feasible_paths(
    phases: &[PhaseTriple],
    geom: &ArrayGeometry,
    warnings: &mut Vec<String>,
) -> Result<(Vec<PhaseTriple>, Vec<PathAngles>)> {
    let mut out_w = Vec::with_capacity(phases.len());
    let mut out_a = Vec::with_capacity(phases.len());
    for (k, &w) in phases.iter().enumerate() {
        let (a, clamped) = phases_to_angles_clamped(w, geom);
        if clamped {
            warnings.push(format!("path {k}: phases outside the visible region were projected"));
        }
        out_w.push(angles_to_phases(a, geom)?);
        out_a.push(a);
    }
    Ok((out_w, out_a))
}

/// Refits path losses, dropping later members of colliding path pairs.
pub(crate) fn refit_dropping_duplicates<F>(
    mut phases: Vec<PhaseTriple>,
    mut angles: Vec<PathAngles>,
    warnings: &mut Vec<String>,
    mut fit: F,
) -> Result<(Vec<PhaseTriple>, Vec<PathAngles>, CMat)>
where
    F: FnMut(&[PhaseTriple]) -> Result<CMat>,
{
    loop {
        match fit(&phases) {
            Ok(b) => return Ok((phases, angles, b)),
            Err(Error::CollidingPaths(i, j)) if phases.len() > 1 => {
                warnings.push(format!("paths {i} and {j} coincide; merged"));
                phases.remove(j);
                angles.remove(j);
            }
            Err(e) => return Err(e),
        }
    }
}

/// Factor → phases → angles → path-loss refit → channel, starting from a full
/// channel estimate.
pub fn estimate_from_channel(
    h: &ChannelMatrix,
    k: usize,
    geom: &ArrayGeometry,
    opts: &CpdOptions,
) -> Result<(ParamEstimate, CpdFactors)> {
    let unf = unfold_channel(h, geom)?;
    let factors = als_cpd(&unf, k, opts)?;
    let mut warnings = Vec::new();
    if factors.regularized {
        warnings.push("ALS used diagonal loading on a near-singular Gram matrix".into());
    }
    let raw = extract_phases(&factors, opts.refine_phases)?;
    let (phases, angles) = feasible_paths(&raw, geom, &mut warnings)?;
    let (phases, angles, b) =
        refit_dropping_duplicates(phases, angles, &mut warnings, |w| refit_pathloss(&unf.h4, w, geom))?;
    let channel = synthesize_from_phases(&phases, &b, geom)?;
    Ok((ParamEstimate { phases, angles, b, channel, warnings }, factors))
}

/// Full pipeline for a row-orthogonal (or full row rank) pilot.
pub fn parafac_pipeline(
    rx: &ReceivedData,
    pilot: &PilotMatrix,
    k: usize,
    geom: &ArrayGeometry,
    opts: &CpdOptions,
) -> Result<ParamEstimate> {
    let h = ls_channel_estimate(rx, pilot)?;
    Ok(estimate_from_channel(&h, k, geom, opts)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{make_orthogonal_pilot, sample_paths, synthesize_channel, transmit, PathParams};
    use crate::linalg::ONE;
    use crate::manifolds::{steering_ula, AngleRanges};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom() -> ArrayGeometry {
        ArrayGeometry::half_wavelength(4, 8, 2).unwrap()
    }

    fn truth(k: usize, seed: u64, g: &ArrayGeometry) -> (PathParams, ChannelMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = sample_paths(k, 13.2, &AngleRanges::default(), &mut rng).unwrap();
        let h = synthesize_channel(&p, g).unwrap();
        (p, h)
    }

    #[test]
    fn khatri_rao_examples() {
        let ones = CMat::from_element(2, 1, ONE);
        let kr = khatri_rao(&ones, &ones).unwrap();
        assert_eq!(kr.shape(), (4, 1));
        assert!(kr.iter().all(|z| *z == ONE));
        assert!(khatri_rao(&CMat::zeros(2, 2), &CMat::zeros(2, 3)).is_err());
    }

    #[test]
    fn unfoldings_match_khatri_rao_models() {
        let g = geom();
        let (p, h) = truth(2, 1, &g);
        let unf = unfold_channel(&h, &g).unwrap();
        let (ar, ax, ay) = manifolds(&p.phases(&g).unwrap(), &g);
        let (cx, cy) = (ax.map(|z| z.conj()), ay.map(|z| z.conj()));
        let b = &p.b;
        let m1 = khatri_rao(&khatri_rao(b, &cy).unwrap(), &cx).unwrap() * ar.transpose();
        let m2 = khatri_rao(&khatri_rao(b, &cy).unwrap(), &ar).unwrap() * ax.adjoint();
        let m3 = khatri_rao(&khatri_rao(b, &cx).unwrap(), &ar).unwrap() * ay.adjoint();
        let m4 = khatri_rao(&khatri_rao(&cy, &cx).unwrap(), &ar).unwrap() * b.transpose();
        let scale = h.h.norm();
        assert!((m1 - &unf.h1).norm() < 1e-12 * scale);
        assert!((m2 - &unf.h2).norm() < 1e-12 * scale);
        assert!((m3 - &unf.h3).norm() < 1e-12 * scale);
        assert!((m4 - &unf.h4).norm() < 1e-12 * scale);
        for m in [&unf.h1, &unf.h2, &unf.h3, &unf.h4] {
            assert_eq!(m.len(), 4 * 2 * 4 * 8);
        }
        assert_eq!(refold_channel(&unf).unwrap(), h);
    }

    #[test]
    fn unfold_rejects_wrong_shape() {
        let g = geom();
        let h = crate::channel::zero_channel(3, 32);
        assert!(unfold_channel(&h, &g).is_err());
    }

    #[test]
    fn rank_one_is_exact() {
        let g = geom();
        let (_, h) = truth(1, 3, &g);
        let unf = unfold_channel(&h, &g).unwrap();
        let f = als_cpd(&unf, 1, &CpdOptions { restarts: 1, ..Default::default() }).unwrap();
        assert!(f.fit <= 1e-10, "fit {}", f.fit);
        assert!(f.iterations <= 50, "iterations {}", f.iterations);
    }

    #[test]
    fn fit_history_is_monotone() {
        let g = geom();
        for seed in 0..5 {
            let (_, h) = truth(4, 100 + seed, &g);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = make_orthogonal_pilot(g.mt(), &mut rng).unwrap();
            let rx = transmit(&h, &p, Some(5.0), &mut rng).unwrap();
            let hls = ls_channel_estimate(&rx, &p).unwrap();
            let unf = unfold_channel(&hls, &g).unwrap();
            let f = als_cpd(&unf, 4, &CpdOptions { restarts: 1, max_iters: 200, seed, ..Default::default() }).unwrap();
            for w in f.fit_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn shift_phase_is_exact_and_scale_free() {
        let a = steering_ula(0.7, 6);
        assert!((shift_phase(&a).unwrap() - 0.7).abs() < 1e-12);
        let c = C64::new(-2.3, 0.4);
        assert!((shift_phase(&(a.clone() * c)).unwrap() - 0.7).abs() < 1e-12);
        assert!((tone_phase(&(a * c)) - 0.7).abs() < 1e-9);
        assert!(shift_phase(&CVec::zeros(4)).is_none());
    }

    #[test]
    fn degenerate_column_is_reported() {
        let g = geom();
        let (_, h) = truth(2, 5, &g);
        let unf = unfold_channel(&h, &g).unwrap();
        let mut f = als_cpd(&unf, 2, &CpdOptions { restarts: 2, ..Default::default() }).unwrap();
        f.ax.column_mut(1).fill(ZERO);
        assert!(matches!(extract_phases(&f, false), Err(Error::DegeneratePath(1))));
    }

    #[test]
    fn refit_with_exact_angles() {
        let g = geom();
        let (p, h) = truth(3, 7, &g);
        let unf = unfold_channel(&h, &g).unwrap();
        let b = refit_pathloss(&unf.h4, &p.phases(&g).unwrap(), &g).unwrap();
        assert!((b - &p.b).norm() < 1e-10);

        let one = PathParams::new(vec![PathAngles::new(0.2, 0.3, 0.4)], CMat::from_element(4, 1, ONE), 1.0).unwrap();
        let h1 = synthesize_channel(&one, &g).unwrap();
        let unf1 = unfold_channel(&h1, &g).unwrap();
        let b1 = refit_pathloss(&unf1.h4, &one.phases(&g).unwrap(), &g).unwrap();
        assert!(b1.iter().all(|z| (z - ONE).norm() < 1e-12));
    }

    #[test]
    fn refit_names_colliding_paths() {
        let g = geom();
        let (p, h) = truth(2, 9, &g);
        let unf = unfold_channel(&h, &g).unwrap();
        let mut w = p.phases(&g).unwrap();
        w.push(w[0]);
        assert_eq!(refit_pathloss(&unf.h4, &w, &g), Err(Error::CollidingPaths(0, 2)));
    }

    #[test]
    fn refit_is_continuous_in_angles() {
        let g = geom();
        let (p, h) = truth(3, 13, &g);
        let unf = unfold_channel(&h, &g).unwrap();
        let mut angles = p.angles.clone();
        angles[1].doa += 1e-3;
        let w: Vec<_> = angles.iter().map(|&a| angles_to_phases(a, &g).unwrap()).collect();
        let b = refit_pathloss(&unf.h4, &w, &g).unwrap();
        let rel = (b - &p.b).norm() / p.b.norm();
        assert!(rel < 0.1, "relative change {rel}");
    }

    #[test]
    fn noiseless_pipeline_small_k() {
        let g = geom();
        for (k, seed) in [(1, 1u64), (2, 2), (3, 3)] {
            let (p, h) = truth(k, seed, &g);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pilot = make_orthogonal_pilot(g.mt(), &mut rng).unwrap();
            let rx = transmit(&h, &pilot, None, &mut rng).unwrap();
            let est = parafac_pipeline(&rx, &pilot, k, &g, &CpdOptions::default()).unwrap();
            let nmse = frob_norm_sq(&(&est.channel.h - &h.h)) / frob_norm_sq(&h.h);
            assert!(nmse < 1e-10, "K={k} nmse {nmse}");
            assert_eq!(est.k(), p.k());
        }
    }
}
