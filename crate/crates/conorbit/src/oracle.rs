//! Independent verification engine: adaptive explicit Runge-Kutta time
//! integration, monodromy matrices and Floquet multipliers. Everything here
//! is deliberately separate from the collocation path so the two can
//! cross-check each other.

use crate::linalg::eig3;
use crate::model::OdeSystem;
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("step size underflow at t = {t}; last state recorded")]
    StepUnderflow { t: f64, last_state: Vec<f64> },
    #[error("step budget exhausted at t = {t}")]
    TooManySteps { t: f64 },
}

/// Time series with dense output by cubic Hermite interpolation on accepted
/// steps.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub dim: usize,
    pub ts: Vec<f64>,
    /// Row-major: state at ts[i] occupies xs[i*dim..(i+1)*dim].
    pub xs: Vec<f64>,
    /// Derivatives at the sample times, same layout.
    pub dxs: Vec<f64>,
    /// Local tolerance actually enforced.
    pub tol: f64,
}

impl Trajectory {
    pub fn state(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.ts.len() - 1)
    }

    /// Dense output at time t (clamped to the integration span).
    pub fn sample(&self, t: f64, out: &mut [f64]) {
        let n = self.ts.len();
        let t = t.clamp(self.ts[0].min(self.ts[n - 1]), self.ts[0].max(self.ts[n - 1]));
        let mut lo = 0;
        let mut hi = n - 1;
        let fwd = self.ts[n - 1] >= self.ts[0];
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if (self.ts[mid] <= t) == fwd {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (t0, t1) = (self.ts[lo], self.ts[hi]);
        let h = t1 - t0;
        if h == 0.0 {
            out.copy_from_slice(self.state(lo));
            return;
        }
        let s = (t - t0) / h;
        let (h00, h10, h01, h11) = hermite_weights(s);
        let x0 = self.state(lo);
        let x1 = self.state(hi);
        let d0 = &self.dxs[lo * self.dim..(lo + 1) * self.dim];
        let d1 = &self.dxs[hi * self.dim..(hi + 1) * self.dim];
        for k in 0..self.dim {
            out[k] = h00 * x0[k] + h10 * h * d0[k] + h01 * x1[k] + h11 * h * d1[k];
        }
    }

    /// CSV export: header `t,x1,..,xn`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for k in 0..self.dim {
            s.push_str(&format!(",x{}", k + 1));
        }
        s.push('\n');
        for (i, t) in self.ts.iter().enumerate() {
            s.push_str(&format!("{:.16e}", t));
            for v in self.state(i) {
                s.push_str(&format!(",{:.16e}", v));
            }
            s.push('\n');
        }
        s
    }
}

fn hermite_weights(s: f64) -> (f64, f64, f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0, s3 - 2.0 * s2 + s, -2.0 * s3 + 3.0 * s2, s3 - s2)
}

/// Dormand-Prince 5(4) with PI step-size control over a generic rhs closure.
pub fn rk45<F: FnMut(f64, &[f64], &mut [f64])>(
    mut f: F,
    dim: usize,
    x0: &[f64],
    t_span: (f64, f64),
    tol: f64,
) -> Result<Trajectory, OracleError> {
    assert!(tol > 0.0);
    let (t0, t1) = t_span;
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();
    let max_steps = 4_000_000usize;

    let mut t = t0;
    let mut x = x0.to_vec();
    let mut k1 = vec![0.0; dim];
    f(t, &x, &mut k1);

    let mut traj = Trajectory { dim, ts: vec![t0], xs: x.clone(), dxs: k1.clone(), tol };

    let mut h = (span / 100.0).clamp(1e-8, 1.0) * dir;
    let mut err_prev: f64 = 1.0;
    let mut stages = vec![vec![0.0; dim]; 7];
    stages[0].copy_from_slice(&k1);
    let mut xtmp = vec![0.0; dim];
    let mut xnew = vec![0.0; dim];

    let a: [&[f64]; 6] = [
        &[1.0 / 5.0],
        &[3.0 / 40.0, 9.0 / 40.0],
        &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
        &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
        &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    let c = [0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    let e = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];

    for _ in 0..max_steps {
        if (t - t1) * dir >= 0.0 {
            return Ok(traj);
        }
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
        }
        for s in 0..6 {
            xtmp.copy_from_slice(&x);
            for (j, &aij) in a[s].iter().enumerate() {
                if aij != 0.0 {
                    crate::linalg::axpy(h * aij, &stages[j], &mut xtmp);
                }
            }
            let (head, tail) = stages.split_at_mut(s + 1);
            let _ = head;
            f(t + c[s] * h, &xtmp, &mut tail[0]);
        }
        // the 5th-order solution is the last stage's evaluation point (FSAL)
        xnew.copy_from_slice(&xtmp);
        let mut err: f64 = 0.0;
        for kk in 0..dim {
            let mut de = 0.0;
            for (s, es) in e.iter().enumerate() {
                de += es * stages[s][kk];
            }
            de *= h;
            let sc = tol * (1.0 + x[kk].abs().max(xnew[kk].abs()));
            err = err.max((de / sc).abs());
        }
        if !err.is_finite() {
            err = 1e10;
        }

        if err <= 1.0 {
            t += h;
            x.copy_from_slice(&xnew);
            let (head, tail) = stages.split_at_mut(1);
            head[0].copy_from_slice(&tail[5]); // FSAL
            traj.ts.push(t);
            traj.xs.extend_from_slice(&x);
            traj.dxs.extend_from_slice(&stages[0]);
            let fac = 0.9 * err.max(1e-10).powf(-0.14) * err_prev.max(1e-10).powf(0.08);
            h *= fac.clamp(0.2, 5.0);
            err_prev = err;
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
        }
        if h.abs() < 1e-14 * span.max(1.0) {
            return Err(OracleError::StepUnderflow { t, last_state: x.clone() });
        }
    }
    Err(OracleError::TooManySteps { t })
}

/// Integrate du/dt = f(u, alpha) over `t_span` with local tolerance `tol`.
pub fn integrate(
    sys: &dyn OdeSystem,
    u0: &[f64],
    alpha: &[f64],
    t_span: (f64, f64),
    tol: f64,
) -> Result<Trajectory, OracleError> {
    let dim = sys.dim();
    rk45(|_t, x, dx| sys.rhs(x, alpha, dx), dim, u0, t_span, tol)
}

/// Monodromy matrix and Floquet multipliers of a periodic orbit.
#[derive(Clone, Debug)]
pub struct MonodromyResult {
    /// Row-major 3x3 monodromy matrix.
    pub m: [f64; 9],
    pub multipliers: [Complex64; 3],
    /// Index of the multiplier closest to 1.
    pub trivial_index: usize,
}

impl MonodromyResult {
    /// Multipliers sorted by descending magnitude, excluding the trivial one.
    pub fn nontrivial(&self) -> [Complex64; 2] {
        let mut idx: Vec<usize> = (0..3).filter(|&i| i != self.trivial_index).collect();
        idx.sort_by(|&i, &j| {
            self.multipliers[j].norm().partial_cmp(&self.multipliers[i].norm()).unwrap()
        });
        [self.multipliers[idx[0]], self.multipliers[idx[1]]]
    }
}

/// Integrate the variational equation dY/dtau = T f_u(x(tau), alpha) Y over
/// one period of a cycle given by the unit-interval interpolant `x_of_tau`.
pub fn monodromy(
    sys: &dyn OdeSystem,
    alpha: &[f64],
    period: f64,
    x_of_tau: &dyn Fn(f64, &mut [f64]),
    tol: f64,
) -> Result<MonodromyResult, OracleError> {
    assert_eq!(sys.dim(), 3, "monodromy oracle supports 3D systems");
    let mut xbuf = [0.0; 3];
    let mut jbuf = [0.0; 9];
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
        x_of_tau(t, &mut xbuf);
        sys.jac_state(&xbuf, alpha, &mut jbuf);
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += jbuf[i * 3 + k] * y[k * 3 + j];
                }
                dy[i * 3 + j] = period * s;
            }
        }
    };
    let y0 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let traj = rk45(rhs, 9, &y0, (0.0, 1.0), tol)?;
    let mut m = [0.0; 9];
    m.copy_from_slice(traj.last_state());
    let multipliers = eig3(&m);
    let trivial_index = (0..3)
        .min_by(|&i, &j| {
            (multipliers[i] - 1.0).norm().partial_cmp(&(multipliers[j] - 1.0).norm()).unwrap()
        })
        .unwrap();
    Ok(MonodromyResult { m, multipliers, trivial_index })
}

/// Residual of the adjoint eigenproblem: || M^T w0 - mu w0 ||.
pub fn adjoint_check(m: &[f64; 9], w0: &[f64], mu: f64) -> f64 {
    let mut r = [0.0; 3];
    for j in 0..3 {
        let mut s = 0.0;
        for i in 0..3 {
            s += m[i * 3 + j] * w0[i];
        }
        r[j] = s - mu * w0[j];
    }
    crate::linalg::norm2(&r)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct LinearDecay;
    impl OdeSystem for LinearDecay {
        fn dim(&self) -> usize {
            1
        }
        fn n_params(&self) -> usize {
            0
        }
        fn param_names(&self) -> &[&'static str] {
            &[]
        }
        fn rhs(&self, u: &[f64], _a: &[f64], out: &mut [f64]) {
            out[0] = -u[0];
        }
    }

    /// Planar limit-cycle normal form with radial contraction rate kappa,
    /// padded to 3D with a decoupled contracting coordinate.
    struct RadialCycle {
        kappa: f64,
    }
    impl OdeSystem for RadialCycle {
        fn dim(&self) -> usize {
            3
        }
        fn n_params(&self) -> usize {
            0
        }
        fn param_names(&self) -> &[&'static str] {
            &[]
        }
        fn rhs(&self, u: &[f64], _a: &[f64], out: &mut [f64]) {
            let r2 = u[0] * u[0] + u[1] * u[1];
            out[0] = -u[1] + self.kappa * u[0] * (1.0 - r2);
            out[1] = u[0] + self.kappa * u[1] * (1.0 - r2);
            out[2] = -0.7 * u[2];
        }
    }

    #[test]
    fn linear_decay_endpoint() {
        let traj = integrate(&LinearDecay, &[1.0], &[], (0.0, 1.0), 1e-10).unwrap();
        assert!((traj.last_state()[0] - (-1.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn tolerance_refinement_reduces_error() {
        let exact = (-1.0f64).exp();
        let mut errs = Vec::new();
        for tol in [1e-4, 1e-6, 1e-8] {
            let traj = integrate(&LinearDecay, &[1.0], &[], (0.0, 1.0), tol).unwrap();
            errs.push((traj.last_state()[0] - exact).abs().max(1e-17));
        }
        // each 100x tolerance refinement buys at least 4x accuracy
        assert!(errs[1] * 4.0 <= errs[0], "{errs:?}");
        assert!(errs[2] * 4.0 <= errs[1], "{errs:?}");
    }

    #[test]
    fn dense_output_matches_exponential() {
        let traj = integrate(&LinearDecay, &[1.0], &[], (0.0, 2.0), 1e-10).unwrap();
        let mut out = [0.0];
        for &t in &[0.1, 0.5, 0.777, 1.3, 1.99] {
            traj.sample(t, &mut out);
            assert!((out[0] - (-t).exp()).abs() < 1e-7, "t={t}");
        }
    }

    #[test]
    fn radial_cycle_multipliers() {
        // unit-circle cycle of period 2*pi; nontrivial planar multiplier
        // exp(-2*kappa*2*pi), plus exp(-0.7*2*pi) in the decoupled direction
        let sys = RadialCycle { kappa: 0.5 };
        let period = 2.0 * std::f64::consts::PI;
        let x_of_tau = |tau: f64, out: &mut [f64]| {
            out[0] = (2.0 * std::f64::consts::PI * tau).cos();
            out[1] = (2.0 * std::f64::consts::PI * tau).sin();
            out[2] = 0.0;
        };
        let mr = monodromy(&sys, &[], period, &x_of_tau, 1e-11).unwrap();
        let triv = mr.multipliers[mr.trivial_index];
        assert!((triv - Complex64::new(1.0, 0.0)).norm() < 1e-6);
        let nt = mr.nontrivial();
        let mut expected = [(-2.0 * 0.5 * period).exp(), (-0.7 * period).exp()];
        expected.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut got: Vec<f64> = nt.iter().map(|z| z.re).collect();
        got.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((got[0] - expected[0]).abs() < 1e-6, "{got:?} vs {expected:?}");
        assert!((got[1] - expected[1]).abs() < 1e-6, "{got:?} vs {expected:?}");
    }

    #[test]
    fn adjoint_check_on_exact_eigenvector() {
        // M = diag(2, 0.5, 1): left eigenvector e1 with mu = 2
        let m = [2.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 1.0];
        assert!(adjoint_check(&m, &[1.0, 0.0, 0.0], 2.0) < 1e-15);
        let r = adjoint_check(&m, &[0.6, 0.8, 0.0], 2.0);
        assert!(r > 0.1, "random unit vector must keep a positive residual");
    }

    #[test]
    fn csv_values_reparse_exactly() {
        let traj = integrate(&LinearDecay, &[1.0], &[], (0.0, 0.5), 1e-8).unwrap();
        let csv = traj.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,x1");
        for line in csv.lines().skip(1) {
            for field in line.split(',') {
                let v: f64 = field.parse().unwrap();
                assert_eq!(format!("{:.16e}", v), field);
            }
        }
    }
}
