//! Ground-truth path sampling, dual-polarized channel synthesis, pilot design,
//! noisy transmission and the least-squares channel estimate.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frob_norm_sq, svd, CMat, C64, ZERO};
use crate::manifolds::{
    angles_to_phases, transmit_manifold, ula_manifold, AngleRanges, ArrayGeometry, PathAngles, PhaseTriple,
};

/// Polarization of one antenna of a dual-polarized pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pol {
    V,
    H,
}

impl Pol {
    pub fn index(self) -> usize {
        match self {
            Pol::V => 0,
            Pol::H => 1,
        }
    }
}

/// (receive, transmit) polarization of each row of the path-loss matrix and of
/// each column of the stacked channel unfolding.
pub const BLOCK_ORDER: [(Pol, Pol); 4] = [(Pol::V, Pol::V), (Pol::V, Pol::H), (Pol::H, Pol::V), (Pol::H, Pol::H)];

/// Converts decibels to a linear power ratio.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub(crate) fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Multipath parameters: one angle triple per path plus the `4 × K` path-loss
/// matrix whose rows follow [`BLOCK_ORDER`]. Path 0 is the line-of-sight path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathParams {
    pub angles: Vec<PathAngles>,
    pub b: CMat,
    /// Linear LOS/NLOS power ratio.
    pub kappa: f64,
}

impl PathParams {
    pub fn new(angles: Vec<PathAngles>, b: CMat, kappa: f64) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::Domain("at least one path is required".into()));
        }
        if b.nrows() != 4 || b.ncols() != angles.len() {
            return Err(Error::DimensionMismatch(format!(
                "path-loss matrix is {}x{}, expected 4x{}",
                b.nrows(),
                b.ncols(),
                angles.len()
            )));
        }
        if !(kappa > 0.0) {
            return Err(Error::Domain(format!("kappa must be positive, got {kappa}")));
        }
        Ok(Self { angles, b, kappa })
    }

    pub fn k(&self) -> usize {
        self.angles.len()
    }

    pub fn phases(&self, geom: &ArrayGeometry) -> Result<Vec<PhaseTriple>> {
        self.angles.iter().map(|&a| angles_to_phases(a, geom)).collect()
    }
}

/// Per-path amplitude scales: LOS gets `√(κ/(κ+1))`, the remaining `K−1` paths
/// share `1/(κ+1)` of the power equally.
pub fn path_scales(k: usize, kappa: f64) -> Vec<f64> {
    let los = (kappa / (kappa + 1.0)).sqrt();
    let nlos = if k > 1 { (1.0 / ((kappa + 1.0) * (k - 1) as f64)).sqrt() } else { 0.0 };
    (0..k).map(|i| if i == 0 { los } else { nlos }).collect()
}

/// Draws `k` paths with angles uniform over `ranges` and Rician-split complex
/// Gaussian path losses.
pub fn sample_paths<R: Rng + ?Sized>(k: usize, kappa_db: f64, ranges: &AngleRanges, rng: &mut R) -> Result<PathParams> {
    if k == 0 {
        return Err(Error::Domain("K must be at least 1".into()));
    }
    ranges.validate()?;
    let mut angles: Vec<PathAngles> = Vec::with_capacity(k);
    while angles.len() < k {
        let a = PathAngles::new(
            rng.random_range(ranges.doa.0..ranges.doa.1),
            rng.random_range(ranges.dod_az.0..ranges.dod_az.1),
            rng.random_range(ranges.dod_el.0..ranges.dod_el.1),
        );
        let clash = angles
            .iter()
            .any(|b| (a.doa - b.doa).abs().max((a.dod_az - b.dod_az).abs()).max((a.dod_el - b.dod_el).abs()) < 1e-6);
        if !clash {
            angles.push(a);
        }
    }
    let kappa = db_to_linear(kappa_db);
    let scales = path_scales(k, kappa);
    let mut b = CMat::zeros(4, k);
    for col in 0..k {
        for row in 0..4 {
            b[(row, col)] = complex_gaussian(rng) * scales[col];
        }
    }
    PathParams::new(angles, b, kappa)
}

/// The `2Mr × 2Mt` dual-polarized channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub h: CMat,
    pub mr: usize,
    pub mt: usize,
}

impl ChannelMatrix {
    pub fn new(h: CMat, mr: usize, mt: usize) -> Result<Self> {
        if h.shape() != (2 * mr, 2 * mt) {
            return Err(Error::DimensionMismatch(format!(
                "channel is {}x{}, expected {}x{}",
                h.nrows(),
                h.ncols(),
                2 * mr,
                2 * mt
            )));
        }
        Ok(Self { h, mr, mt })
    }

    /// The `Mr × Mt` sub-channel between receive polarization `p` and transmit polarization `q`.
    pub fn block(&self, p: Pol, q: Pol) -> CMat {
        self.h.view((p.index() * self.mr, q.index() * self.mt), (self.mr, self.mt)).into_owned()
    }

    /// Assembles the channel from its four blocks in [`BLOCK_ORDER`].
    pub fn from_blocks(blocks: &[CMat; 4]) -> Result<Self> {
        let (mr, mt) = blocks[0].shape();
        let mut h = CMat::zeros(2 * mr, 2 * mt);
        for (blk, &(p, q)) in blocks.iter().zip(BLOCK_ORDER.iter()) {
            if blk.shape() != (mr, mt) {
                return Err(Error::DimensionMismatch("channel blocks differ in shape".into()));
            }
            h.view_mut((p.index() * mr, q.index() * mt), (mr, mt)).copy_from(blk);
        }
        Self::new(h, mr, mt)
    }
}

/// Builds `H^{(p,q)} = A_r diag(β^{(p,q)}) A_t^H` for every block from spatial phases.
pub fn synthesize_from_phases(phases: &[PhaseTriple], b: &CMat, geom: &ArrayGeometry) -> Result<ChannelMatrix> {
    if b.nrows() != 4 || b.ncols() != phases.len() {
        return Err(Error::DimensionMismatch(format!(
            "path-loss matrix is {}x{} for {} paths",
            b.nrows(),
            b.ncols(),
            phases.len()
        )));
    }
    let ar = ula_manifold(phases.iter().map(|w| w.omega_r), geom.mr);
    let at_h = transmit_manifold(phases, geom).adjoint();
    let blocks: [CMat; 4] = std::array::from_fn(|row| {
        let mut scaled = ar.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= b[(row, k)];
        }
        scaled * &at_h
    });
    ChannelMatrix::from_blocks(&blocks)
}

pub fn synthesize_channel(params: &PathParams, geom: &ArrayGeometry) -> Result<ChannelMatrix> {
    synthesize_from_phases(&params.phases(geom)?, &params.b, geom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PilotKind {
    RowOrthogonal,
    Frugal,
}

/// Training matrix `S` (`2Mt × N`). The frugal kind also keeps its real `Mt × N/2` block `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix {
    pub kind: PilotKind,
    pub s: CMat,
    pub q: Option<DMatrix<f64>>,
}

impl PilotMatrix {
    pub fn n(&self) -> usize {
        self.s.ncols()
    }

    pub fn mt(&self) -> usize {
        self.s.nrows() / 2
    }
}

/// Square unitary pilot: a DFT matrix with randomly phased rows, so `S S^H = I`.
pub fn make_orthogonal_pilot<R: Rng + ?Sized>(mt: usize, rng: &mut R) -> Result<PilotMatrix> {
    if mt == 0 {
        return Err(Error::Domain("Mt must be at least 1".into()));
    }
    let n = 2 * mt;
    let norm = 1.0 / (n as f64).sqrt();
    let row_phase: Vec<C64> = (0..n).map(|_| C64::from_polar(1.0, rng.random_range(-PI..PI))).collect();
    let s = CMat::from_fn(n, n, |m, c| {
        let ang = -2.0 * PI * ((m * c) % n) as f64 / n as f64;
        row_phase[m] * C64::from_polar(norm, ang)
    });
    Ok(PilotMatrix { kind: PilotKind::RowOrthogonal, s, q: None })
}

/// Block-diagonal pilot `blockdiag(Q, Q)` with i.i.d. standard Gaussian real `Q`.
pub fn make_frugal_pilot<R: Rng + ?Sized>(mt: usize, n: usize, rng: &mut R) -> Result<PilotMatrix> {
    if !n.is_multiple_of(2) {
        return Err(Error::Domain(format!("frugal pilot length N={n} must be even")));
    }
    if n < 4 {
        return Err(Error::Domain(format!("frugal pilot length N={n} must be at least 4")));
    }
    if n >= 2 * mt {
        return Err(Error::Domain(format!("frugal pilot length N={n} must be below 2Mt={}", 2 * mt)));
    }
    let half = n / 2;
    let q = DMatrix::<f64>::from_fn(mt, half, |_, _| StandardNormal.sample(rng));
    let mut s = CMat::zeros(2 * mt, n);
    for r in 0..mt {
        for c in 0..half {
            let v = C64::new(q[(r, c)], 0.0);
            s[(r, c)] = v;
            s[(mt + r, half + c)] = v;
        }
    }
    Ok(PilotMatrix { kind: PilotKind::Frugal, s, q: Some(q) })
}

/// Received training block `X = H S + noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedData {
    pub x: CMat,
    pub snr_db: Option<f64>,
    /// Per-entry complex noise variance σ².
    pub noise_variance: f64,
}

/// Sends `S` through `H`. The noise variance satisfies
/// `SNR = ‖HS‖_F² / (2Mr·N·σ²)`; `snr_db = None` is noiseless.
pub fn transmit<R: Rng + ?Sized>(
    h: &ChannelMatrix,
    pilot: &PilotMatrix,
    snr_db: Option<f64>,
    rng: &mut R,
) -> Result<ReceivedData> {
    if pilot.s.nrows() != h.h.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "pilot has {} rows but the channel has {} transmit antennas",
            pilot.s.nrows(),
            h.h.ncols()
        )));
    }
    let clean = &h.h * &pilot.s;
    let Some(snr) = snr_db else {
        return Ok(ReceivedData { x: clean, snr_db: None, noise_variance: 0.0 });
    };
    let entries = (clean.nrows() * clean.ncols()) as f64;
    let sigma2 = frob_norm_sq(&clean) / (entries * db_to_linear(snr));
    let sigma = sigma2.sqrt();
    let mut x = clean;
    for z in x.iter_mut() {
        *z += complex_gaussian(rng) * sigma;
    }
    Ok(ReceivedData { x, snr_db: Some(snr), noise_variance: sigma2 })
}

/// Linear least-squares channel estimate `Ĥ = X S^H (S S^H)^{-1}`.
pub fn ls_channel_estimate(rx: &ReceivedData, pilot: &PilotMatrix) -> Result<ChannelMatrix> {
    let s = &pilot.s;
    if rx.x.ncols() != s.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "received block has {} columns, pilot has {}",
            rx.x.ncols(),
            s.ncols()
        )));
    }
    let (rows, n) = s.shape();
    if n < rows {
        return Err(Error::Singular(format!("pilot is {rows}x{n}: S S^H has rank at most {n} < {rows}")));
    }
    let gram = s * s.adjoint();
    let sv = svd(&gram)?.s;
    let smax = sv.first().copied().unwrap_or(0.0);
    let smin = sv.last().copied().unwrap_or(0.0);
    if smax == 0.0 || smin <= 1e-12 * smax {
        return Err(Error::Singular("S S^H is numerically singular".into()));
    }
    let ch = gram.cholesky().ok_or_else(|| Error::Singular("S S^H is not positive definite".into()))?;
    let h_adj = ch.solve(&(s * rx.x.adjoint()));
    ChannelMatrix::new(h_adj.adjoint(), rx.x.nrows() / 2, rows / 2)
}

/// A channel of zeros with the given dimensions.
pub fn zero_channel(mr: usize, mt: usize) -> ChannelMatrix {
    ChannelMatrix { h: CMat::from_element(2 * mr, 2 * mt, ZERO), mr, mt }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{khatri_rao, rank, ONE};
    use crate::manifolds::manifolds;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom() -> ArrayGeometry {
        ArrayGeometry::half_wavelength(4, 8, 2).unwrap()
    }

    #[test]
    fn kappa_scaling() {
        let kappa = db_to_linear(13.2);
        assert!((kappa - 20.892961308540396).abs() < 1e-9);
        let s = path_scales(3, kappa);
        assert!((s[0] - 0.976_894_681_611_246).abs() < 1e-12);
        let total: f64 = s.iter().map(|x| x * x).sum();
        assert!((total - 1.0).abs() < 1e-14);
        assert_eq!(path_scales(1, kappa), vec![(kappa / (kappa + 1.0)).sqrt()]);
    }

    #[test]
    fn sample_paths_is_deterministic_and_in_range() {
        let r = AngleRanges::default();
        let a = sample_paths(5, 13.2, &r, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_paths(5, 13.2, &r, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        for p in &a.angles {
            assert!(r.doa.0 <= p.doa && p.doa <= r.doa.1);
            assert!(r.dod_el.0 <= p.dod_el && p.dod_el <= r.dod_el.1);
        }
        assert!(sample_paths(0, 13.2, &r, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
        let empty = AngleRanges { doa: (0.5, 0.5), ..r };
        assert!(sample_paths(2, 13.2, &empty, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn single_los_path_uses_los_scale_only() {
        // With K = 1 every entry of B is a unit Gaussian draw times the LOS factor.
        let r = AngleRanges::default();
        let n = 4000;
        let mut power = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..n {
            let p = sample_paths(1, 13.2, &r, &mut rng).unwrap();
            power += frob_norm_sq(&p.b) / 4.0;
        }
        let kappa = db_to_linear(13.2);
        assert!((power / n as f64 - kappa / (kappa + 1.0)).abs() < 0.05);
    }

    #[test]
    fn all_ones_channel() {
        let g = geom();
        let params = PathParams::new(vec![PathAngles::default()], CMat::from_element(4, 1, ONE), 1.0).unwrap();
        let h = synthesize_channel(&params, &g).unwrap();
        assert_eq!(h.h.shape(), (4, 64));
        assert!(h.h.iter().all(|z| (z - ONE).norm() < 1e-15));
    }

    #[test]
    fn blocks_have_rank_at_most_k_and_vec_identity_holds() {
        let g = geom();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = sample_paths(2, 13.2, &AngleRanges::default(), &mut rng).unwrap();
        let h = synthesize_channel(&params, &g).unwrap();
        let (ar, _, _) = manifolds(&params.phases(&g).unwrap(), &g);
        let at = transmit_manifold(&params.phases(&g).unwrap(), &g);
        let kr = khatri_rao(&at.map(|z| z.conj()), &ar).unwrap();
        for (row, &(p, q)) in BLOCK_ORDER.iter().enumerate() {
            let blk = h.block(p, q);
            assert!(rank(&blk, 1e-10).unwrap() <= 2);
            let vec_blk = CMat::from_column_slice(blk.len(), 1, blk.as_slice());
            let beta = params.b.row(row).transpose();
            assert!((vec_blk - &kr * beta).norm() < 1e-12);
        }
        // top-left block is (V_r, V_t)
        assert_eq!(h.h.view((0, 0), (2, 32)).into_owned(), h.block(Pol::V, Pol::V));
    }

    #[test]
    fn orthogonal_pilot_and_matched_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = make_orthogonal_pilot(2, &mut rng).unwrap();
        assert_eq!(p.n(), 4);
        assert!((&p.s * p.s.adjoint() - CMat::identity(4, 4)).norm() < 1e-12);

        let g = geom();
        let params = sample_paths(3, 13.2, &AngleRanges::default(), &mut rng).unwrap();
        let h = synthesize_channel(&params, &g).unwrap();
        let p = make_orthogonal_pilot(g.mt(), &mut rng).unwrap();
        let rx = transmit(&h, &p, None, &mut rng).unwrap();
        assert_eq!(rx.x, &h.h * &p.s);
        let mf = &rx.x * p.s.adjoint();
        assert!((mf - &h.h).norm() < 1e-12 * h.h.norm());
        let ls = ls_channel_estimate(&rx, &p).unwrap();
        assert!((ls.h - &h.h).norm() < 1e-12 * h.h.norm());
    }

    #[test]
    fn frugal_pilot_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = make_frugal_pilot(64, 16, &mut rng).unwrap();
        let q = p.q.clone().unwrap();
        assert_eq!(q.shape(), (64, 8));
        let nonzero = p.s.iter().filter(|z| z.norm() != 0.0).count();
        assert_eq!(nonzero, 2 * 64 * 8);
        assert!(p.s.view((0, 8), (64, 8)).iter().all(|z| *z == ZERO));
        assert!(p.s.view((64, 0), (64, 8)).iter().all(|z| *z == ZERO));
        let again = make_frugal_pilot(64, 16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(again.q.unwrap(), q);
        assert!(make_frugal_pilot(64, 15, &mut rng).is_err());
        assert!(make_frugal_pilot(64, 2, &mut rng).is_err());
    }

    #[test]
    fn ls_fails_on_frugal_pilot() {
        let g = ArrayGeometry::half_wavelength(8, 8, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = sample_paths(3, 13.2, &AngleRanges::default(), &mut rng).unwrap();
        let h = synthesize_channel(&params, &g).unwrap();
        let p = make_frugal_pilot(g.mt(), 16, &mut rng).unwrap();
        let rx = transmit(&h, &p, None, &mut rng).unwrap();
        assert!(matches!(ls_channel_estimate(&rx, &p), Err(Error::Singular(_))));
    }

    #[test]
    fn noise_power_matches_snr() {
        let g = ArrayGeometry::half_wavelength(2, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = sample_paths(2, 13.2, &AngleRanges::default(), &mut rng).unwrap();
        let h = synthesize_channel(&params, &g).unwrap();
        let p = make_orthogonal_pilot(g.mt(), &mut rng).unwrap();
        let clean = &h.h * &p.s;
        let entries = (clean.nrows() * clean.ncols()) as f64;
        let signal = frob_norm_sq(&clean) / entries;
        let draws = 1000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let rx = transmit(&h, &p, Some(0.0), &mut rng).unwrap();
            acc += frob_norm_sq(&(rx.x - &clean)) / entries;
        }
        let empirical = acc / draws as f64;
        assert!((empirical / signal - 1.0).abs() < 0.03, "ratio {}", empirical / signal);
    }

    #[test]
    fn ls_nmse_improves_with_snr() {
        let g = geom();
        let mut prev = f64::INFINITY;
        for snr in [0.0, 10.0, 20.0] {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut acc = 0.0;
            for _ in 0..50 {
                let params = sample_paths(3, 13.2, &AngleRanges::default(), &mut rng).unwrap();
                let h = synthesize_channel(&params, &g).unwrap();
                let p = make_orthogonal_pilot(g.mt(), &mut rng).unwrap();
                let rx = transmit(&h, &p, Some(snr), &mut rng).unwrap();
                let est = ls_channel_estimate(&rx, &p).unwrap();
                acc += frob_norm_sq(&(est.h - &h.h)) / frob_norm_sq(&h.h);
            }
            assert!(acc < prev);
            prev = acc;
        }
    }
}
