//! Gauss-Legendre quadrature and Lagrange basis tables for collocation.

/// Gauss-Legendre nodes and weights on [0, 1], computed by Newton iteration
/// on the Legendre polynomial from Chebyshev starting guesses.
pub fn gauss_legendre_01(m: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(m >= 1, "need at least one Gauss point");
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    let n = m as f64;
    for i in 0..m {
        // initial guess on [-1,1]
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_derivative(m, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_and_derivative(m, x);
        let wgt = 2.0 / ((1.0 - x * x) * dp * dp);
        // map to [0,1]; nodes come out descending in x, store ascending
        nodes[m - 1 - i] = 0.5 * (x + 1.0);
        weights[m - 1 - i] = 0.5 * wgt;
    }
    (nodes, weights)
}

fn legendre_and_derivative(m: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if m == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=m {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Values of the Lagrange basis on `nodes` at `x`.
pub fn lagrange_values(nodes: &[f64], x: f64, out: &mut [f64]) {
    let n = nodes.len();
    assert_eq!(out.len(), n);
    for j in 0..n {
        let mut p = 1.0;
        for k in 0..n {
            if k != j {
                p *= (x - nodes[k]) / (nodes[j] - nodes[k]);
            }
        }
        out[j] = p;
    }
}

/// Derivatives of the Lagrange basis on `nodes` at `x`.
pub fn lagrange_derivatives(nodes: &[f64], x: f64, out: &mut [f64]) {
    let n = nodes.len();
    assert_eq!(out.len(), n);
    for j in 0..n {
        let mut s = 0.0;
        for i in 0..n {
            if i == j {
                continue;
            }
            let mut p = 1.0 / (nodes[j] - nodes[i]);
            for k in 0..n {
                if k != j && k != i {
                    p *= (x - nodes[k]) / (nodes[j] - nodes[k]);
                }
            }
            s += p;
        }
        out[j] = s;
    }
}

/// Precomputed collocation tables for `m` Gauss points per mesh interval and
/// the degree-m Lagrange representation on m+1 equispaced local points.
#[derive(Clone, Debug)]
pub struct CollocTables {
    pub m: usize,
    /// Gauss points in local coordinates (0,1), ascending.
    pub gauss: Vec<f64>,
    /// Gauss weights on [0,1].
    pub weights: Vec<f64>,
    /// Representation points j/m, j = 0..=m.
    pub rep_points: Vec<f64>,
    /// vals[l][j] = L_j(gauss[l]), row-major m x (m+1).
    pub vals: Vec<f64>,
    /// ders[l][j] = L_j'(gauss[l]), local derivative (multiply by 1/h).
    pub ders: Vec<f64>,
}

impl CollocTables {
    pub fn new(m: usize) -> Self {
        assert!((2..=7).contains(&m), "collocation order m must be in 2..=7");
        let (gauss, weights) = gauss_legendre_01(m);
        let rep_points: Vec<f64> = (0..=m).map(|j| j as f64 / m as f64).collect();
        let mut vals = vec![0.0; m * (m + 1)];
        let mut ders = vec![0.0; m * (m + 1)];
        for l in 0..m {
            lagrange_values(&rep_points, gauss[l], &mut vals[l * (m + 1)..(l + 1) * (m + 1)]);
            lagrange_derivatives(&rep_points, gauss[l], &mut ders[l * (m + 1)..(l + 1) * (m + 1)]);
        }
        CollocTables { m, gauss, weights, rep_points, vals, ders }
    }

    pub fn vals_at(&self, l: usize) -> &[f64] {
        &self.vals[l * (self.m + 1)..(l + 1) * (self.m + 1)]
    }

    pub fn ders_at(&self, l: usize) -> &[f64] {
        &self.ders[l * (self.m + 1)..(l + 1) * (self.m + 1)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_weights_sum_to_one() {
        for m in 1..=7 {
            let (x, w) = gauss_legendre_01(m);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            for i in 1..m {
                assert!(x[i] > x[i - 1]);
            }
            // symmetry about 1/2
            for i in 0..m {
                assert!((x[i] + x[m - 1 - i] - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gauss_exact_for_polynomials() {
        // degree 2m-1 is integrated exactly on [0,1]
        for m in 2..=7 {
            let (x, w) = gauss_legendre_01(m);
            for d in 0..2 * m {
                let q: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(d as i32)).sum();
                let exact = 1.0 / (d as f64 + 1.0);
                assert!((q - exact).abs() < 1e-13, "m={m} degree={d}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn known_two_point_nodes() {
        let (x, _) = gauss_legendre_01(2);
        let r = 0.5 - 0.5 / 3f64.sqrt();
        assert!((x[0] - r).abs() < 1e-15);
        assert!((x[1] - (1.0 - r)).abs() < 1e-15);
    }

    #[test]
    fn lagrange_reproduces_polynomials() {
        let nodes = [0.0, 0.25, 0.5, 0.75, 1.0];
        let coef = [0.3, -1.2, 0.7, 2.0, -0.5]; // degree-4 polynomial coefficients
        let poly = |x: f64| coef.iter().rev().fold(0.0, |a, c| a * x + c);
        let dpoly = |x: f64| {
            let mut s = 0.0;
            for (k, c) in coef.iter().enumerate().skip(1) {
                s += c * k as f64 * x.powi(k as i32 - 1);
            }
            s
        };
        let fvals: Vec<f64> = nodes.iter().map(|&x| poly(x)).collect();
        let mut basis = [0.0; 5];
        for &x in &[0.1, 0.37, 0.62, 0.99] {
            lagrange_values(&nodes, x, &mut basis);
            let v: f64 = basis.iter().zip(&fvals).map(|(b, f)| b * f).sum();
            assert!((v - poly(x)).abs() < 1e-12);
            lagrange_derivatives(&nodes, x, &mut basis);
            let dv: f64 = basis.iter().zip(&fvals).map(|(b, f)| b * f).sum();
            assert!((dv - dpoly(x)).abs() < 1e-11);
        }
        // exactness at a node
        lagrange_values(&nodes, 0.5, &mut basis);
        for (j, b) in basis.iter().enumerate() {
            let expect = if j == 2 { 1.0 } else { 0.0 };
            assert!((b - expect).abs() < 1e-13);
        }
    }
}
