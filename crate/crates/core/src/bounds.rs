//! Identifiability calculators: largest number of paths a configuration is
//! guaranteed to resolve under each sufficient condition.

use serde::Serialize;

use crate::ctd::choose_pr;
use crate::error::Theorem;

/// Window lengths attaining a bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Witness {
    pub pr: usize,
    pub px: Option<usize>,
    pub py: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BoundReport {
    pub theorem: Theorem,
    pub mr: usize,
    pub mx: Option<usize>,
    pub my: Option<usize>,
    pub n: Option<usize>,
    pub kmax: usize,
    pub witness: Option<Witness>,
}

/// k-rank condition `min(Mr,K) + min(Mx,K) + min(My,K) + min(4,K) ≥ 2K + 3`.
pub fn kruskal_holds(mr: usize, mx: usize, my: usize, k: usize) -> bool {
    mr.min(k) + mx.min(k) + my.min(k) + 4.min(k) >= 2 * k + 3
}

pub fn kmax_kruskal(mr: usize, mx: usize, my: usize) -> BoundReport {
    // Left side is at most Mr+Mx+My+4, so nothing beyond that can hold.
    let kmax = (1..=mr + mx + my + 4).filter(|&k| kruskal_holds(mr, mx, my, k)).max().unwrap_or(0);
    BoundReport { theorem: Theorem::Kruskal, mr, mx: Some(mx), my: Some(my), n: None, kmax, witness: None }
}

/// Largest `F` allowed by the harmonic-retrieval constraints for fixed windows.
pub fn imdf_capacity(dims: (usize, usize, usize), windows: (usize, usize, usize)) -> usize {
    let (mr, mx, my) = dims;
    let (pr, px, py) = windows;
    let (qr, qx, qy) = (mr + 1 - pr, mx + 1 - px, my + 1 - py);
    let shift = ((pr - 1) * px * py).max(pr * (px - 1) * py).max(pr * px * (py - 1));
    shift.min(8 * qr * qx * qy)
}

pub fn kmax_imdf(mr: usize, mx: usize, my: usize) -> BoundReport {
    let mut best = (0, None);
    for pr in 1..=mr {
        for px in 1..=mx {
            for py in 1..=my {
                let f = imdf_capacity((mr, mx, my), (pr, px, py));
                if f > best.0 {
                    best = (f, Some(Witness { pr, px: Some(px), py: Some(py) }));
                }
            }
        }
    }
    BoundReport { theorem: Theorem::Imdf, mr, mx: Some(mx), my: Some(my), n: None, kmax: best.0, witness: best.1 }
}

/// Smoothing bound of the compressed-pilot estimator; 0 when no window works.
pub fn kmax_ctd(mr: usize, n: usize) -> BoundReport {
    let (kmax, witness) = match choose_pr(mr, n) {
        Ok(plan) => (plan.kmax, Some(Witness { pr: plan.pr, px: None, py: None })),
        Err(_) => (0, None),
    };
    BoundReport { theorem: Theorem::Ctd, mr, mx: None, my: None, n: Some(n), kmax, witness }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        assert_eq!(kmax_kruskal(2, 4, 8).kmax, 7);
        assert_eq!(kmax_kruskal(4, 4, 4).kmax, 6);
        assert_eq!(kmax_kruskal(1, 1, 1).kmax, 0);
        let r = kmax_imdf(2, 4, 8);
        assert_eq!(r.kmax, 32);
        let w = r.witness.unwrap();
        assert_eq!(imdf_capacity((2, 4, 8), (w.pr, w.px.unwrap(), w.py.unwrap())), 32);
        assert_eq!(kmax_imdf(1, 1, 1).kmax, 0);
        assert_eq!(kmax_ctd(3, 16).kmax, 8);
        assert_eq!(kmax_ctd(3, 16).witness.unwrap().pr, 3);
        assert_eq!(kmax_ctd(2, 8).kmax, 4);
        assert_eq!(kmax_ctd(1, 16).kmax, 0);
    }

    #[test]
    fn witness_satisfies_both_constraints() {
        let w = kmax_imdf(2, 4, 8).witness.unwrap();
        let (pr, px, py) = (w.pr, w.px.unwrap(), w.py.unwrap());
        let (qr, qx, qy) = (3 - pr, 5 - px, 9 - py);
        let shift = ((pr - 1) * px * py).max(pr * (px - 1) * py).max(pr * px * (py - 1));
        assert!(shift >= 32);
        assert!(8 * qr * qx * qy >= 32);
    }

    fn brute_kruskal(mr: usize, mx: usize, my: usize) -> usize {
        let mut best = 0;
        for k in 1..=40 {
            let lhs = [mr, mx, my, 4].iter().map(|&m| m.min(k)).sum::<usize>();
            if lhs >= 2 * k + 3 {
                best = k;
            }
        }
        best
    }

    fn brute_imdf(mr: usize, mx: usize, my: usize) -> usize {
        let mut best = 0;
        for pr in 1..=mr {
            for px in 1..=mx {
                for py in 1..=my {
                    let (qr, qx, qy) = (mr + 1 - pr, mx + 1 - px, my + 1 - py);
                    for f in 1..=8 * mr * mx * my {
                        let ok_shift = (pr - 1) * px * py >= f || pr * (px - 1) * py >= f || pr * px * (py - 1) >= f;
                        if ok_shift && 8 * qr * qx * qy >= f && f > best {
                            best = f;
                        }
                    }
                }
            }
        }
        best
    }

    #[test]
    fn calculators_match_brute_force() {
        for mr in 1..=10 {
            for mx in 1..=10 {
                for my in 1..=10 {
                    assert_eq!(kmax_kruskal(mr, mx, my).kmax, brute_kruskal(mr, mx, my), "{mr},{mx},{my}");
                }
            }
        }
        for mr in 1..=4 {
            for mx in 1..=5 {
                for my in 1..=5 {
                    assert_eq!(kmax_imdf(mr, mx, my).kmax, brute_imdf(mr, mx, my), "{mr},{mx},{my}");
                }
            }
        }
        for mr in 1..=10 {
            for n in (4..=20).step_by(2) {
                let brute = (2..=mr).map(|p| (4 * (p - 1)).min((mr + 1 - p) * n / 2)).max().unwrap_or(0);
                assert_eq!(kmax_ctd(mr, n).kmax, brute, "{mr},{n}");
            }
        }
    }
}
