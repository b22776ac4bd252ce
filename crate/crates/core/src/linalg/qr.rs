//! Householder QR orthonormalization for basis-pool construction.
//!
//! Reflectors are accumulated panel-wise in compact-WY form (I - V T V^T),
//! so the trailing matrix and the Q accumulation are touched once per panel
//! instead of once per column. Summation order is fixed, so results are
//! reproducible run to run.

use crate::error::{Error, Result};
use crate::linalg::rng::{gaussian_matrix, DetRng};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

const MAX_RETRIES: usize = 3;
const PANEL: usize = 16;

/// Orthonormal d x d matrix: Q factor of a seeded random Gaussian draw,
/// with the sign convention diag(R) >= 0 so the result is unique.
///
/// A numerically rank-deficient draw is regenerated from the advanced rng
/// state, at most three times.
pub fn qr_orthonormal<S: Scalar>(rng: &mut DetRng, d: usize) -> Result<Matrix<S>> {
    assert!(d >= 1, "qr_orthonormal needs d >= 1");
    for _ in 0..=MAX_RETRIES {
        let a: Matrix<S> = gaussian_matrix(rng, d, d, 1.0);
        match householder_q(a) {
            Ok(q) => return Ok(q),
            Err(Error::DegenerateDraw { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::DegenerateDraw { retries: MAX_RETRIES })
}

/// Q factor of a Householder QR of `a`, sign-fixed to diag(R) >= 0.
/// Exposed so tests can feed hand-built (including degenerate) inputs.
pub fn householder_q<S: Scalar>(mut a: Matrix<S>) -> Result<Matrix<S>> {
    let d = a.rows();
    assert_eq!(d, a.cols(), "householder_q expects a square matrix");

    // Column norms of a Gaussian draw sit near sqrt(d); anything this small
    // means the draw (or an injected test input) is effectively singular.
    let degenerate_floor = S::lit(1e-150);

    let mut taus = vec![S::zero(); d];
    let mut r_diag = vec![S::zero(); d];
    let mut w = vec![S::zero(); d];

    let mut panel_starts = Vec::new();
    let mut s = 0;
    while s < d {
        let pw = PANEL.min(d - s);
        panel_starts.push((s, pw));

        // Unblocked factorization of the panel columns.
        for kk in 0..pw {
            let k = s + kk;
            let alpha = a.get(k, k);
            let mut tail_sq = S::zero();
            for i in (k + 1)..d {
                let v = a.get(i, k);
                tail_sq += v * v;
            }
            let norm = (alpha * alpha + tail_sq).sqrt();
            if !norm.is_finite() || norm <= degenerate_floor {
                return Err(Error::DegenerateDraw { retries: 0 });
            }

            // Reflect column k onto beta * e1 with beta = -sign(alpha) * norm.
            let beta = if alpha >= S::zero() { -norm } else { norm };
            let tau = (beta - alpha) / beta;
            let denom = alpha - beta;
            for i in (k + 1)..d {
                let v = a.get(i, k) / denom;
                a.set(i, k, v);
            }
            taus[k] = tau;
            r_diag[k] = beta;

            // Apply H = I - tau v v^T to the columns remaining in this panel.
            let panel_end = s + pw;
            if k + 1 < panel_end {
                for x in w[k + 1..panel_end].iter_mut() {
                    *x = S::zero();
                }
                for i in k..d {
                    let vi = if i == k { S::one() } else { a.get(i, k) };
                    let row = a.row(i);
                    for (wj, &aij) in w[k + 1..panel_end].iter_mut().zip(&row[k + 1..panel_end]) {
                        *wj += vi * aij;
                    }
                }
                for i in k..d {
                    let vi = if i == k { S::one() } else { a.get(i, k) };
                    let t = tau * vi;
                    let row = a.row_mut(i);
                    for (aij, &wj) in row[k + 1..panel_end].iter_mut().zip(&w[k + 1..panel_end]) {
                        *aij -= t * wj;
                    }
                }
            }
        }

        // Blocked update of the trailing columns:
        // A <- (H_{s+pw-1} ... H_s) A = (I - V T^T V^T) A.
        let trail = s + pw;
        if trail < d {
            let (v, t) = panel_vt(&a, &taus, s, pw, d);
            // U = V^T A_trail, W = T^T U, A_trail -= V W.
            let ncols = d - trail;
            let mut u = Matrix::<S>::zeros(pw, ncols);
            for i in 0..(d - s) {
                let vrow = v.row(i);
                let arow = &a.row(s + i)[trail..d];
                for j in 0..pw {
                    let vij = vrow[j];
                    if vij != S::zero() {
                        for (uj, &al) in u.row_mut(j).iter_mut().zip(arow) {
                            *uj += vij * al;
                        }
                    }
                }
            }
            let wmat = small_left_mul(&t, &u, true);
            for i in 0..(d - s) {
                let vrow = v.row(i);
                let arow = &mut a.row_mut(s + i)[trail..d];
                for j in 0..pw {
                    let vij = vrow[j];
                    if vij != S::zero() {
                        for (al, &wl) in arow.iter_mut().zip(wmat.row(j)) {
                            *al -= vij * wl;
                        }
                    }
                }
            }
        }
        s += pw;
    }

    // Q = H_0 H_1 ... H_{d-1} = P_0 P_1 ... P_last, accumulated backwards:
    // Q <- (I - V T V^T) Q per panel, touching only the trailing block.
    let mut q = Matrix::<S>::identity(d);
    for &(s, pw) in panel_starts.iter().rev() {
        let (v, t) = panel_vt(&a, &taus, s, pw, d);
        let ncols = d - s;
        let mut u = Matrix::<S>::zeros(pw, ncols);
        for i in 0..(d - s) {
            let vrow = v.row(i);
            let qrow = &q.row(s + i)[s..d];
            for j in 0..pw {
                let vij = vrow[j];
                if vij != S::zero() {
                    for (uj, &ql) in u.row_mut(j).iter_mut().zip(qrow) {
                        *uj += vij * ql;
                    }
                }
            }
        }
        let wmat = small_left_mul(&t, &u, false);
        for i in 0..(d - s) {
            let vrow = v.row(i);
            let qrow = &mut q.row_mut(s + i)[s..d];
            for j in 0..pw {
                let vij = vrow[j];
                if vij != S::zero() {
                    for (ql, &wl) in qrow.iter_mut().zip(wmat.row(j)) {
                        *ql -= vij * wl;
                    }
                }
            }
        }
    }

    // diag(R) >= 0: flip the matching Q column where beta came out negative.
    for k in 0..d {
        if r_diag[k] < S::zero() {
            for i in 0..d {
                let v = q.get(i, k);
                q.set(i, k, -v);
            }
        }
    }
    Ok(q)
}

/// Compact V ((d-s) x pw, unit lower trapezoidal) and forward-columnwise T
/// for the panel starting at `s`: H_s ... H_{s+pw-1} = I - V T V^T.
fn panel_vt<S: Scalar>(
    a: &Matrix<S>,
    taus: &[S],
    s: usize,
    pw: usize,
    d: usize,
) -> (Matrix<S>, Matrix<S>) {
    let mut v = Matrix::<S>::zeros(d - s, pw);
    for j in 0..pw {
        v.set(j, j, S::one());
        for i in (j + 1)..(d - s) {
            v.set(i, j, a.get(s + i, s + j));
        }
    }
    let mut t = Matrix::<S>::zeros(pw, pw);
    for i in 0..pw {
        let tau = taus[s + i];
        t.set(i, i, tau);
        if i > 0 {
            // tmp = V[:, 0..i]^T v_i, then T[0..i, i] = -tau * T[0..i, 0..i] * tmp.
            let mut tmp = vec![S::zero(); i];
            for r in 0..(d - s) {
                let vri = v.get(r, i);
                if vri != S::zero() {
                    let row = v.row(r);
                    for (t_acc, &vrj) in tmp.iter_mut().zip(&row[0..i]) {
                        *t_acc += vrj * vri;
                    }
                }
            }
            for r in 0..i {
                let mut acc = S::zero();
                for (c, &tm) in tmp.iter().enumerate() {
                    acc += t.get(r, c) * tm;
                }
                t.set(r, i, -tau * acc);
            }
        }
    }
    (v, t)
}

/// W = T^T U (transposed = true) or W = T U (false); T is pw x pw and small.
fn small_left_mul<S: Scalar>(t: &Matrix<S>, u: &Matrix<S>, transposed: bool) -> Matrix<S> {
    let pw = t.rows();
    let mut w = Matrix::<S>::zeros(pw, u.cols());
    for j in 0..pw {
        for m in 0..pw {
            let coeff = if transposed { t.get(m, j) } else { t.get(j, m) };
            if coeff != S::zero() {
                let urow = u.row(m);
                for (wl, &ul) in w.row_mut(j).iter_mut().zip(urow) {
                    *wl += coeff * ul;
                }
            }
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    type Mat = Matrix<f64>;

    fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn orthonormality_residual(q: &Mat) -> f64 {
        let qtq = naive_matmul(&q.transpose(), q);
        qtq.sub(&Mat::identity(q.rows())).unwrap().max_abs()
    }

    #[test]
    fn d1_is_sign_of_draw() {
        // The stream's first normal draw decides the sign.
        let mut probe = DetRng::new(11);
        let first = probe.normal(1.0);
        let q: Mat = qr_orthonormal(&mut DetRng::new(11), 1).unwrap();
        let expected = if first > 0.0 { 1.0 } else { -1.0 };
        assert_eq!(q.get(0, 0), expected);
    }

    #[test]
    fn d4_orthonormal_within_tolerance() {
        let q: Mat = qr_orthonormal(&mut DetRng::new(11), 4).unwrap();
        assert!(orthonormality_residual(&q) <= 4e-10);
    }

    #[test]
    fn sizes_around_panel_boundary() {
        // Exercise panel widths below, at, and above the blocking size.
        for d in [2, 15, 16, 17, 33, 40] {
            let q: Mat = qr_orthonormal(&mut DetRng::new(7), d).unwrap();
            let residual = orthonormality_residual(&q);
            assert!(residual <= 1e-10 * d as f64, "d={d} residual {residual}");
        }
    }

    #[test]
    fn column_subsets_stay_orthonormal() {
        let d = 24;
        let q: Mat = qr_orthonormal(&mut DetRng::new(3), d).unwrap();
        let sub = q.gather_cols(&[1, 5, 6, 17, 23]);
        let gram = naive_matmul(&sub.transpose(), &sub);
        let residual = gram.sub(&Mat::identity(5)).unwrap().max_abs();
        assert!(residual <= 1e-10 * d as f64);
    }

    #[test]
    fn same_seed_byte_identical() {
        let a: Mat = qr_orthonormal(&mut DetRng::new(42), 16).unwrap();
        let b: Mat = qr_orthonormal(&mut DetRng::new(42), 16).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        let err = householder_q(Mat::zeros(3, 3)).unwrap_err();
        assert!(matches!(err, Error::DegenerateDraw { .. }));
    }

    #[test]
    fn nonnegative_r_makes_q_unique() {
        // Reconstruct R = Q^T A; the convention pins its diagonal sign.
        let a: Mat = gaussian_matrix(&mut DetRng::new(5), 24, 24, 1.0);
        let q = householder_q(a.clone()).unwrap();
        let r = naive_matmul(&q.transpose(), &a);
        for k in 0..24 {
            assert!(r.get(k, k) >= 0.0, "R[{k},{k}] = {}", r.get(k, k));
        }
        // And Q R actually reconstructs A.
        let qr = naive_matmul(&q, &r);
        assert!(qr.sub(&a).unwrap().max_abs() <= 1e-12 * 24.0);
    }
}
