//! Dense complex linear-algebra helpers shared by the estimators.
//!
//! Vectorization is column-stacking throughout, and Kronecker / Khatri-Rao
//! products put the left operand's index slowest: `(a ⊗ b)[i·J + j] = a[i]·b[j]`.

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);

/// Relative cutoff under which singular values are treated as zero.
pub const PINV_RCOND: f64 = 1e-12;

pub fn kron(a: &CVec, b: &CVec) -> CVec {
    let j = b.len();
    CVec::from_fn(a.len() * j, |idx, _| a[idx / j] * b[idx % j])
}

/// Column-wise Kronecker product. Row `i·J + j` of column `k` is `A[i,k]·B[j,k]`.
pub fn khatri_rao(a: &CMat, b: &CMat) -> Result<CMat> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "khatri-rao operands have {} and {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    let j = b.nrows();
    Ok(CMat::from_fn(a.nrows() * j, a.ncols(), |row, k| a[(row / j, k)] * b[(row % j, k)]))
}

/// Elementwise (Hadamard) product of equally shaped matrices.
pub fn hadamard(a: &CMat, b: &CMat) -> CMat {
    debug_assert_eq!(a.shape(), b.shape());
    a.component_mul(b)
}

pub fn frob_norm_sq(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

/// Singular value decomposition with descending singular values.
pub struct Svd {
    pub u: CMat,
    pub s: Vec<f64>,
    pub v_t: CMat,
}

/// Thin SVD `M = U diag(s) V^H` by one-sided (Hestenes) Jacobi rotations.
///
/// `U` is `m × min(m,n)` with orthonormal columns (columns for zero singular
/// values are an orthonormal completion) and `v_t` is `min(m,n) × n`.
pub fn svd(m: &CMat) -> Result<Svd> {
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numerical("svd of a non-finite matrix".into()));
    }
    if m.nrows() < m.ncols() {
        let Svd { u, s, v_t } = svd_tall(&m.adjoint())?;
        return Ok(Svd { u: v_t.adjoint(), s, v_t: u.adjoint() });
    }
    svd_tall(m)
}

const JACOBI_SWEEPS: usize = 80;

fn svd_tall(m: &CMat) -> Result<Svd> {
    let (rows, n) = m.shape();
    let mut a = m.clone();
    let mut v = CMat::identity(n, n);
    let mut converged = n < 2;
    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dotc(&a.column(q));
                let g = gamma.norm();
                if g == 0.0 || g <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                // Make the inner product real, then apply a real Jacobi rotation.
                let phase = gamma / g;
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut a, &mut v] {
                    for i in 0..mat.nrows() {
                        let xp = mat[(i, p)];
                        let xq = mat[(i, q)] * phase.conj();
                        mat[(i, p)] = xp * c - xq * s;
                        mat[(i, q)] = xp * s + xq * c;
                    }
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical("jacobi svd did not converge".into()));
    }
    let mut order: Vec<(f64, usize)> = (0..n).map(|k| (a.column(k).norm(), k)).collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0));
    let smax = order.first().map_or(0.0, |o| o.0);
    let mut u = CMat::zeros(rows, n);
    let mut v_t = CMat::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (i, &(sk, k)) in order.iter().enumerate() {
        s.push(sk);
        v_t.set_row(i, &v.column(k).adjoint());
        if sk > f64::EPSILON * smax * rows as f64 && sk > 0.0 {
            u.set_column(i, &(a.column(k) / C64::new(sk, 0.0)));
        } else {
            missing.push(i);
        }
    }
    complete_orthonormal(&mut u, &missing);
    Ok(Svd { u, s, v_t })
}

/// Fills the listed columns of `u` with unit vectors orthogonal to all others.
fn complete_orthonormal(u: &mut CMat, missing: &[usize]) {
    let rows = u.nrows();
    let mut basis = 0;
    for &col in missing {
        u.column_mut(col).fill(ZERO);
        while basis < rows {
            let mut x = CVec::zeros(rows);
            x[basis] = ONE;
            basis += 1;
            for _ in 0..2 {
                for j in 0..u.ncols() {
                    if j != col {
                        let c = u.column(j).dotc(&x);
                        x -= u.column(j) * c;
                    }
                }
            }
            let nx = x.norm();
            if nx > 1e-8 {
                u.set_column(col, &(x / C64::new(nx, 0.0)));
                break;
            }
        }
    }
}

/// Numerical rank with singular values below `rcond·σ_max` discarded.
pub fn rank(m: &CMat, rcond: f64) -> Result<usize> {
    let s = svd(m)?.s;
    let smax = s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&x| x > rcond * smax).count())
}

/// Moore-Penrose pseudoinverse via SVD, truncating below `PINV_RCOND·σ_max`.
pub fn pinv(m: &CMat) -> Result<CMat> {
    let Svd { u, s, v_t } = svd(m)?;
    let smax = s.first().copied().unwrap_or(0.0);
    let mut out = CMat::zeros(m.ncols(), m.nrows());
    if smax == 0.0 {
        return Ok(out);
    }
    for (i, &si) in s.iter().enumerate() {
        if si <= PINV_RCOND * smax {
            break;
        }
        let vi = v_t.row(i).adjoint();
        let ui = u.column(i).adjoint();
        out += (vi * ui).scale(1.0 / si);
    }
    Ok(out)
}

/// Solves `G X = R` for Hermitian positive (semi)definite `G`.
///
/// Falls back to diagonal loading of `1e-12·trace(G)` when the Cholesky
/// factorization fails; the returned flag reports whether loading was used.
pub fn solve_gram(gram: &CMat, rhs: &CMat) -> Result<(CMat, bool)> {
    if let Some(ch) = gram.clone().cholesky() {
        let x = ch.solve(rhs);
        if x.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Ok((x, false));
        }
    }
    let tr: f64 = (0..gram.nrows()).map(|i| gram[(i, i)].re).sum();
    let load = 1e-12 * tr.abs().max(f64::MIN_POSITIVE);
    let mut loaded = gram.clone();
    for i in 0..loaded.nrows() {
        loaded[(i, i)] += C64::new(load, 0.0);
    }
    match loaded.clone().cholesky() {
        Some(ch) => Ok((ch.solve(rhs), true)),
        None => {
            let x = pinv(&loaded)? * rhs;
            Ok((x, true))
        }
    }
}

/// Eigen-decomposition of a general square complex matrix.
///
/// Eigenvalues come from the complex Schur form `A = Z T Z^H`; eigenvectors are
/// obtained by back-substitution on `T` and mapped back through `Z`. Columns are
/// normalized to unit norm.
pub fn eig(a: &CMat) -> Result<(Vec<C64>, CMat)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::DimensionMismatch(format!("eig needs a square matrix, got {}x{}", a.nrows(), a.ncols())));
    }
    if n == 0 {
        return Ok((Vec::new(), CMat::zeros(0, 0)));
    }
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("complex schur did not converge".into()))?;
    let (z, t) = schur.unpack();
    let values: Vec<C64> = (0..n).map(|i| t[(i, i)]).collect();
    let scale = t.iter().map(|x| x.norm()).fold(0.0_f64, f64::max).max(1e-300);
    let mut vecs = CMat::zeros(n, n);
    for (i, &lambda) in values.iter().enumerate() {
        let mut y = CVec::zeros(n);
        y[i] = ONE;
        for j in (0..i).rev() {
            let mut acc = ZERO;
            for l in (j + 1)..=i {
                acc += t[(j, l)] * y[l];
            }
            let mut denom = t[(j, j)] - lambda;
            if denom.norm() < f64::EPSILON * scale {
                denom = C64::new(f64::EPSILON * scale, 0.0);
            }
            y[j] = -acc / denom;
        }
        let v = &z * y;
        let nv = v.norm();
        vecs.set_column(i, &(v / C64::new(nv, 0.0)));
    }
    Ok((values, vecs))
}

/// Roots of `c[0] + c[1] z + … + c[d] z^d` via companion-matrix eigenvalues.
pub fn poly_roots(coeffs: &[C64]) -> Result<Vec<C64>> {
    let mut c = coeffs.to_vec();
    while c.len() > 1 && c.last().is_some_and(|z| z.norm() == 0.0) {
        c.pop();
    }
    let d = c.len().saturating_sub(1);
    if d == 0 {
        return Ok(Vec::new());
    }
    let lead = c[d];
    let mut comp = CMat::zeros(d, d);
    for i in 1..d {
        comp[(i, i - 1)] = ONE;
    }
    for i in 0..d {
        comp[(i, d - 1)] = -c[i] / lead;
    }
    let schur = Schur::try_new(comp, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("companion schur did not converge".into()))?;
    let (_, t) = schur.unpack();
    Ok((0..d).map(|i| t[(i, i)]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, seed: u64) -> CMat {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CMat::from_fn(r, c, |_, _| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            C64::new(re, im)
        })
    }

    #[test]
    fn kron_index_order() {
        let a = CVec::from_vec(vec![ONE, C64::new(2.0, 0.0)]);
        let b = CVec::from_vec(vec![ONE, C64::new(0.0, 1.0), C64::new(3.0, 0.0)]);
        let k = kron(&a, &b);
        assert_eq!(k.len(), 6);
        assert_eq!(k[4], C64::new(0.0, 2.0));
        assert_eq!(k[5], C64::new(6.0, 0.0));
    }

    #[test]
    fn pinv_of_tall_full_rank() {
        let a = rand_mat(7, 3, 1);
        let p = pinv(&a).unwrap();
        let id = &p * &a;
        assert!((id - CMat::identity(3, 3)).norm() < 1e-12);
    }

    fn reconstruct(d: &Svd) -> CMat {
        let k = d.s.len();
        let s = CMat::from_diagonal(&CVec::from_iterator(k, d.s.iter().map(|&x| C64::new(x, 0.0))));
        &d.u * s * &d.v_t
    }

    #[test]
    fn svd_of_rank_deficient_complex() {
        for (r, c, seed) in [(4, 3, 8), (3, 5, 9), (12, 8, 10)] {
            let a = rand_mat(r, 1, seed) * rand_mat(1, c, seed + 100)
                + rand_mat(r, 1, seed + 200) * rand_mat(1, c, seed + 300);
            let d = svd(&a).unwrap();
            assert!((reconstruct(&d) - &a).norm() < 1e-12 * a.norm());
            let k = r.min(c);
            assert!((d.u.adjoint() * &d.u - CMat::identity(k, k)).norm() < 1e-12);
            assert!((&d.v_t * d.v_t.adjoint() - CMat::identity(k, k)).norm() < 1e-12);
            assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
            assert!(d.s[2] < 1e-12 * d.s[0]);
        }
    }

    #[test]
    fn pinv_truncates_rank_one() {
        let u = rand_mat(4, 1, 2);
        let v = rand_mat(1, 3, 3);
        let a = &u * &v;
        let p = pinv(&a).unwrap();
        // Penrose condition A A^+ A = A
        assert!((&a * &p * &a - &a).norm() < 1e-10 * a.norm());
    }

    #[test]
    fn eig_reconstructs_matrix() {
        let a = rand_mat(6, 6, 4);
        let (vals, vecs) = eig(&a).unwrap();
        for (i, lambda) in vals.iter().enumerate() {
            let v = vecs.column(i);
            let r = &a * v - v * *lambda;
            assert!(r.norm() < 1e-10, "residual {}", r.norm());
        }
    }

    #[test]
    fn poly_roots_of_known_polynomial() {
        // (z - 1)(z - i)(z + 2) = z^3 + (1 - i) z^2 + (-2 - i) z + 2i
        let c = [C64::new(0.0, 2.0), C64::new(-2.0, -1.0), C64::new(1.0, -1.0), ONE];
        let mut roots = poly_roots(&c).unwrap();
        roots.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap());
        assert!((roots[0] - C64::new(-2.0, 0.0)).norm() < 1e-12);
        assert!((roots[1] - C64::new(0.0, 1.0)).norm() < 1e-12);
        assert!((roots[2] - ONE).norm() < 1e-12);
    }

    #[test]
    fn solve_gram_flags_singular() {
        let u = rand_mat(3, 1, 5);
        let g = &u * u.adjoint();
        let rhs = rand_mat(3, 2, 6);
        let (_, loaded) = solve_gram(&g, &rhs).unwrap();
        assert!(loaded);
        let h = rand_mat(5, 3, 7);
        let g = h.adjoint() * &h;
        let (x, loaded) = solve_gram(&g, &rhs).unwrap();
        assert!(!loaded);
        assert!((&g * x - rhs).norm() < 1e-10);
    }
}
