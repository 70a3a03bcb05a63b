//! Row-major dense matrices with LU factorization (partial pivoting).

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub nrows: usize,
    pub ncols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Mat { nrows, ncols, data: vec![0.0; nrows * ncols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let nrows = rows.len();
        let ncols = rows[0].len();
        let mut data = Vec::with_capacity(nrows * ncols);
        for r in rows {
            assert_eq!(r.len(), ncols);
            data.extend_from_slice(r);
        }
        Mat { nrows, ncols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn swap_rows(&mut self, i: usize, j: usize) {
        if i == j {
            return;
        }
        let n = self.ncols;
        let (lo, hi) = (i.min(j), i.max(j));
        let (a, b) = self.data.split_at_mut(hi * n);
        a[lo * n..lo * n + n].swap_with_slice(&mut b[..n]);
    }

    /// out = self * v
    pub fn matvec(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.ncols);
        assert_eq!(out.len(), self.nrows);
        for i in 0..self.nrows {
            out[i] = crate::linalg::dot(self.row(i), v);
        }
    }

    /// out = self^T * v
    pub fn matvec_t(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.nrows);
        assert_eq!(out.len(), self.ncols);
        out.fill(0.0);
        for i in 0..self.nrows {
            crate::linalg::axpy(v[i], self.row(i), out);
        }
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.ncols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.ncols + j]
    }
}

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Clone, Debug)]
pub struct DenseLu {
    lu: Mat,
    /// piv[k] = row swapped into position k at step k.
    piv: Vec<usize>,
    perm_sign: f64,
}

impl DenseLu {
    /// Factor a square matrix. Returns None if a pivot is exactly zero.
    pub fn factor(mut a: Mat) -> Option<Self> {
        assert_eq!(a.nrows, a.ncols);
        let n = a.nrows;
        let mut piv = vec![0usize; n];
        let mut perm_sign = 1.0;
        for k in 0..n {
            // pivot search in column k
            let mut p = k;
            let mut best = a[(k, k)].abs();
            for i in k + 1..n {
                let v = a[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 {
                return None;
            }
            piv[k] = p;
            if p != k {
                a.swap_rows(p, k);
                perm_sign = -perm_sign;
            }
            let d = a[(k, k)];
            for i in k + 1..n {
                let m = a[(i, k)] / d;
                a[(i, k)] = m;
                if m != 0.0 {
                    let (pk, pi) = (k * n, i * n);
                    for j in k + 1..n {
                        a.data[pi + j] -= m * a.data[pk + j];
                    }
                }
            }
        }
        Some(DenseLu { lu: a, piv, perm_sign })
    }

    pub fn n(&self) -> usize {
        self.lu.nrows
    }

    /// Solve A x = b in place.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n();
        assert_eq!(b.len(), n);
        for k in 0..n {
            b.swap(k, self.piv[k]);
        }
        // L y = Pb
        for i in 1..n {
            let mut s = b[i];
            let row = self.lu.row(i);
            for j in 0..i {
                s -= row[j] * b[j];
            }
            b[i] = s;
        }
        // U x = y
        for i in (0..n).rev() {
            let row = self.lu.row(i);
            let mut s = b[i];
            for j in i + 1..n {
                s -= row[j] * b[j];
            }
            b[i] = s / row[i];
        }
    }

    /// Solve A^T x = b in place.
    pub fn solve_t(&self, b: &mut [f64]) {
        let n = self.n();
        assert_eq!(b.len(), n);
        // A^T = U^T L^T P, so U^T z = b, L^T w = z, x = P^T w.
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.lu[(k, i)] * b[k];
            }
            b[i] = s / self.lu[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.lu[(k, i)] * b[k];
            }
            b[i] = s;
        }
        for k in (0..n).rev() {
            b.swap(k, self.piv[k]);
        }
    }

    /// (sign, log|det|) of the factored matrix.
    pub fn logdet(&self) -> (f64, f64) {
        let mut sign = self.perm_sign;
        let mut logabs = 0.0;
        for i in 0..self.n() {
            let d = self.lu[(i, i)];
            sign *= d.signum();
            logabs += d.abs().ln();
        }
        (sign, logabs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::XorShift;

    fn random_mat(n: usize, rng: &mut XorShift) -> Mat {
        let mut a = Mat::zeros(n, n);
        for v in a.data.iter_mut() {
            *v = rng.next_f64();
        }
        a
    }

    #[test]
    fn solve_and_transpose_solve() {
        let mut rng = XorShift::new(17);
        for n in [1, 2, 3, 7, 25] {
            let a = random_mat(n, &mut rng);
            let x_true: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
            let mut b = vec![0.0; n];
            a.matvec(&x_true, &mut b);
            let lu = DenseLu::factor(a.clone()).unwrap();
            lu.solve(&mut b);
            for (xi, ti) in b.iter().zip(&x_true) {
                assert!((xi - ti).abs() < 1e-9, "solve mismatch n={n}");
            }

            let mut bt = vec![0.0; n];
            a.matvec_t(&x_true, &mut bt);
            lu.solve_t(&mut bt);
            for (xi, ti) in bt.iter().zip(&x_true) {
                assert!((xi - ti).abs() < 1e-9, "transpose solve mismatch n={n}");
            }
        }
    }

    #[test]
    fn determinant_of_known_matrix() {
        // det [[2,1],[1,2]] = 3
        let a = Mat::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let lu = DenseLu::factor(a).unwrap();
        let (sign, logabs) = lu.logdet();
        assert!((sign * logabs.exp() - 3.0).abs() < 1e-12);

        // det [[0,1],[1,0]] = -1 (exercises permutation sign)
        let a = Mat::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let lu = DenseLu::factor(a).unwrap();
        let (sign, logabs) = lu.logdet();
        assert!(sign < 0.0 && logabs.abs() < 1e-12);
    }

    #[test]
    fn singular_matrix_rejected() {
        let a = Mat::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(DenseLu::factor(a).is_none());
    }
}
