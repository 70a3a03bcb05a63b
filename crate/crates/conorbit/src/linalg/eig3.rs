//! Eigenvalues of real 3x3 matrices via the characteristic cubic, with a
//! companion-matrix QR fallback for ill-conditioned cases.

use num_complex::Complex64;

/// Eigenvalues of a 3x3 row-major matrix.
pub fn eig3(a: &[f64; 9]) -> [Complex64; 3] {
    // characteristic polynomial lambda^3 - c2 lambda^2 + c1 lambda - c0
    let tr = a[0] + a[4] + a[8];
    let m01 = a[0] * a[4] - a[1] * a[3];
    let m02 = a[0] * a[8] - a[2] * a[6];
    let m12 = a[4] * a[8] - a[5] * a[7];
    let c1 = m01 + m02 + m12;
    let det = a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
        + a[2] * (a[3] * a[7] - a[4] * a[6]);

    let roots = cubic_roots(-tr, c1, -det);
    // Accept closed-form roots when they reproduce the polynomial well.
    let scale = 1.0 + tr.abs().max(c1.abs()).max(det.abs());
    let ok = roots.iter().all(|&r| {
        let p = ((r - tr) * r + c1) * r - det;
        p.norm() <= 1e-8 * scale * (1.0 + r.norm() * r.norm() * r.norm())
    });
    if ok {
        return roots;
    }
    companion_qr(-tr, c1, -det)
}

/// Roots of x^3 + b x^2 + c x + d with one Newton polish step each.
fn cubic_roots(b: f64, c: f64, d: f64) -> [Complex64; 3] {
    // depressed cubic t^3 + p t + q, x = t - b/3
    let shift = -b / 3.0;
    let p = c - b * b / 3.0;
    let q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
    let disc = -4.0 * p * p * p - 27.0 * q * q;

    let mut roots = if disc >= 0.0 {
        // three real roots, trigonometric form
        if p.abs() < 1e-300 {
            let r = Complex64::new(shift + (-q).cbrt(), 0.0);
            [r, r, r]
        } else {
            let m = 2.0 * (-p / 3.0).sqrt();
            let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
            let theta = arg.acos() / 3.0;
            let mut out = [Complex64::new(0.0, 0.0); 3];
            for (k, o) in out.iter_mut().enumerate() {
                let t = m * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos();
                *o = Complex64::new(shift + t, 0.0);
            }
            out
        }
    } else {
        // one real root (Cardano, cancellation-safe branch) and a complex pair
        let half_q = q / 2.0;
        let r = (half_q * half_q + p * p * p / 27.0).sqrt();
        let u = if half_q >= 0.0 { -half_q - r } else { -half_q + r };
        let u3 = u.cbrt();
        let t0 = if u3 != 0.0 { u3 - p / (3.0 * u3) } else { 0.0 };
        let x0 = shift + t0;
        // deflate: x^2 + (b + x0) x + (c + (b + x0) x0) = 0
        let b2 = b + x0;
        let c2 = c + b2 * x0;
        let disc2 = b2 * b2 - 4.0 * c2;
        let (r1, r2) = if disc2 >= 0.0 {
            let s = disc2.sqrt();
            (Complex64::new((-b2 + s) / 2.0, 0.0), Complex64::new((-b2 - s) / 2.0, 0.0))
        } else {
            let s = (-disc2).sqrt() / 2.0;
            (Complex64::new(-b2 / 2.0, s), Complex64::new(-b2 / 2.0, -s))
        };
        [Complex64::new(x0, 0.0), r1, r2]
    };

    // one complex Newton step against the undepressed cubic
    for r in roots.iter_mut() {
        let f = ((*r + b) * *r + c) * *r + d;
        let df = (3.0 * *r + 2.0 * b) * *r + c;
        if df.norm() > 1e-30 {
            let step = f / df;
            if step.norm() < 1.0 + r.norm() {
                *r -= step;
            }
        }
    }
    roots
}

/// Shifted QR iteration on the companion matrix of x^3 + b x^2 + c x + d.
fn companion_qr(b: f64, c: f64, d: f64) -> [Complex64; 3] {
    // companion (upper Hessenberg)
    let mut h = [[-b, -c, -d], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
    let mut out = [Complex64::new(0.0, 0.0); 3];
    let mut hi = 2usize; // active block is h[0..=hi]
    for _ in 0..200 {
        // deflation test
        while hi > 0 {
            let off = h[hi][hi - 1].abs();
            let diag = h[hi][hi].abs() + h[hi - 1][hi - 1].abs();
            if off <= 1e-15 * (diag + 1e-300) {
                out[hi] = Complex64::new(h[hi][hi], 0.0);
                hi -= 1;
            } else {
                break;
            }
        }
        if hi == 0 {
            out[0] = Complex64::new(h[0][0], 0.0);
            return out;
        }
        if hi == 1 {
            let (r1, r2) = eig2(h[0][0], h[0][1], h[1][0], h[1][1]);
            out[0] = r1;
            out[1] = r2;
            return out;
        }
        // Wilkinson shift from trailing 2x2
        let (e1, e2) = eig2(h[1][1], h[1][2], h[2][1], h[2][2]);
        let t = Complex64::new(h[2][2], 0.0);
        let shift = if (e1 - t).norm() < (e2 - t).norm() { e1.re } else { e2.re };
        // explicit QR step on shifted matrix via Givens rotations
        for i in 0..3 {
            h[i][i] -= shift;
        }
        let mut rot = [[0.0f64; 2]; 2];
        for k in 0..2 {
            let (a1, a2) = (h[k][k], h[k + 1][k]);
            let r = (a1 * a1 + a2 * a2).sqrt();
            let (cs, sn) = if r > 0.0 { (a1 / r, a2 / r) } else { (1.0, 0.0) };
            rot[k] = [cs, sn];
            for j in 0..3 {
                let (x, y) = (h[k][j], h[k + 1][j]);
                h[k][j] = cs * x + sn * y;
                h[k + 1][j] = -sn * x + cs * y;
            }
        }
        for (k, r) in rot.iter().enumerate() {
            let (cs, sn) = (r[0], r[1]);
            for row in h.iter_mut() {
                let (x, y) = (row[k], row[k + 1]);
                row[k] = cs * x + sn * y;
                row[k + 1] = -sn * x + cs * y;
            }
        }
        for i in 0..3 {
            h[i][i] += shift;
        }
    }
    // did not fully deflate; report current diagonal estimates
    for (i, o) in out.iter_mut().enumerate().take(hi + 1) {
        *o = Complex64::new(h[i][i], 0.0);
    }
    out
}

fn eig2(a: f64, b: f64, c: f64, d: f64) -> (Complex64, Complex64) {
    let tr = a + d;
    let det = a * d - b * c;
    let disc = tr * tr / 4.0 - det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (Complex64::new(tr / 2.0 + s, 0.0), Complex64::new(tr / 2.0 - s, 0.0))
    } else {
        let s = (-disc).sqrt();
        (Complex64::new(tr / 2.0, s), Complex64::new(tr / 2.0, -s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::XorShift;

    fn char_residual(a: &[f64; 9], lam: Complex64) -> f64 {
        let tr = a[0] + a[4] + a[8];
        let c1 = (a[0] * a[4] - a[1] * a[3]) + (a[0] * a[8] - a[2] * a[6])
            + (a[4] * a[8] - a[5] * a[7]);
        let det = a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
            + a[2] * (a[3] * a[7] - a[4] * a[6]);
        (((lam - tr) * lam + c1) * lam - det).norm()
    }

    #[test]
    fn diagonal_matrix() {
        let a = [3.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.5];
        let mut ev: Vec<f64> = eig3(&a).iter().map(|z| z.re).collect();
        ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!((ev[0] + 1.0).abs() < 1e-12);
        assert!((ev[1] - 0.5).abs() < 1e-12);
        assert!((ev[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn complex_pair() {
        // eigenvalues beta +/- i and -1
        let beta = 0.3;
        let a = [beta, -1.0, 0.0, 1.0, beta, 0.0, 0.0, 0.0, -1.0];
        let ev = eig3(&a);
        let mut n_complex = 0;
        for z in ev {
            if z.im.abs() > 1e-12 {
                n_complex += 1;
                assert!((z.re - beta).abs() < 1e-12);
                assert!((z.im.abs() - 1.0).abs() < 1e-12);
            } else {
                assert!((z.re + 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(n_complex, 2);
    }

    #[test]
    fn random_matrices_satisfy_characteristic_polynomial() {
        let mut rng = XorShift::new(99);
        for _ in 0..500 {
            let mut a = [0.0; 9];
            for v in a.iter_mut() {
                *v = 10.0 * rng.next_f64();
            }
            for lam in eig3(&a) {
                assert!(char_residual(&a, lam) < 1e-6 * 1e3, "residual too large");
            }
        }
    }

    #[test]
    fn repeated_root() {
        let a = [2.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0];
        for z in eig3(&a) {
            assert!((z - Complex64::new(2.0, 0.0)).norm() < 1e-5);
        }
    }

    #[test]
    fn companion_fallback_agrees() {
        let r = companion_qr(-6.0, 11.0, -6.0); // roots 1, 2, 3
        let mut re: Vec<f64> = r.iter().map(|z| z.re).collect();
        re.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!((re[0] - 1.0).abs() < 1e-10);
        assert!((re[1] - 2.0).abs() < 1e-10);
        assert!((re[2] - 3.0).abs() < 1e-10);
    }
}
