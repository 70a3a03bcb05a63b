//! Defining systems for saddle cycles, their adjoint eigenfunctions and
//! cycle-to-cycle connecting orbits, assembled as generic BVPs over the
//! composite state (x-, x+, w-, w+, u) or its homotopy-stage subsets.
//!
//! Time is scaled to [0,1] everywhere, so cycle periods and the connection
//! time are parameters. The adjoint equations use the scaled form
//! `w' + T f_u^T w + lambda w = 0` with (anti)periodic boundary conditions,
//! where `lambda` is the log-modulus of the adjoint multiplier; this keeps
//! the eigenfunctions O(1) along the whole cycle. A homoclinic connection is
//! the heteroclinic machinery with the cycle data duplicated: the two
//! periodic sub-solutions represent the same orbit but keep independent base
//! points.

use crate::collocation::{
    read_solution, write_solution, BvpSpec, CollocationError, CollocationSolution,
    IntegralConstraint, Mesh,
};
use crate::model::OdeSystem;
use crate::oracle;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DefiningError {
    #[error("integration of the seed orbit failed even after shortening: {0}")]
    SeedIntegration(String),
    #[error("seed time was reduced from {requested} to {actual} to avoid blow-up")]
    SeedShortened { requested: f64, actual: f64 },
    #[error(transparent)]
    Collocation(#[from] CollocationError),
    #[error("invalid data: {0}")]
    Invalid(String),
}

/// Which cycle a sub-problem refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CycleSide {
    Minus,
    Plus,
}

/// Slots appended to the model parameters in the shared beta layout of all
/// defining systems.
#[derive(Clone, Copy, Debug)]
pub struct ParamLayout {
    pub p_model: usize,
}

impl ParamLayout {
    pub fn for_system(sys: &dyn OdeSystem) -> Self {
        ParamLayout { p_model: sys.n_params() }
    }
    pub fn t_minus(&self) -> usize {
        self.p_model
    }
    pub fn t_plus(&self) -> usize {
        self.p_model + 1
    }
    pub fn t_conn(&self) -> usize {
        self.p_model + 2
    }
    pub fn lambda_minus(&self) -> usize {
        self.p_model + 3
    }
    pub fn lambda_plus(&self) -> usize {
        self.p_model + 4
    }
    pub fn eps2(&self) -> usize {
        self.p_model + 5
    }
    pub fn h11(&self) -> usize {
        self.p_model + 6
    }
    pub fn h12(&self) -> usize {
        self.p_model + 7
    }
    pub fn h21(&self) -> usize {
        self.p_model + 8
    }
    pub fn h22(&self) -> usize {
        self.p_model + 9
    }
    pub fn mu(&self) -> usize {
        self.p_model + 10
    }
    pub fn h_norm(&self) -> usize {
        self.p_model + 11
    }
    pub fn n_beta(&self) -> usize {
        self.p_model + 12
    }
    pub fn t_side(&self, side: CycleSide) -> usize {
        match side {
            CycleSide::Minus => self.t_minus(),
            CycleSide::Plus => self.t_plus(),
        }
    }
    pub fn lambda_side(&self, side: CycleSide) -> usize {
        match side {
            CycleSide::Minus => self.lambda_minus(),
            CycleSide::Plus => self.lambda_plus(),
        }
    }
}

/// A converged periodic solution on [0,1] with its period.
#[derive(Clone, Debug)]
pub struct CycleData {
    pub x: CollocationSolution,
    pub period: f64,
}

impl CycleData {
    pub fn base_point(&self) -> [f64; 3] {
        let p = self.x.point(0);
        [p[0], p[1], p[2]]
    }

    /// || x(0) - x(1) ||
    pub fn periodicity_residual(&self) -> f64 {
        let a = self.x.point(0);
        let b = self.x.point(self.x.n_points() - 1);
        a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
    }

    /// Oracle monodromy of this cycle via the collocation interpolant.
    pub fn monodromy(
        &self,
        sys: &dyn OdeSystem,
        alpha: &[f64],
        tol: f64,
    ) -> Result<oracle::MonodromyResult, oracle::OracleError> {
        let interp = |tau: f64, out: &mut [f64]| {
            self.x.interpolate(tau.clamp(0.0, 1.0), out).expect("tau in range");
        };
        oracle::monodromy(sys, alpha, self.period, &interp, tol)
    }
}

/// Scaled adjoint eigenfunction data: lambda is the log-modulus of the
/// adjoint multiplier, sign its sign.
#[derive(Clone, Debug)]
pub struct AdjointEigenData {
    pub w: CollocationSolution,
    pub lambda: f64,
    pub sign: f64,
}

impl AdjointEigenData {
    pub fn w0(&self) -> [f64; 3] {
        let p = self.w.point(0);
        [p[0], p[1], p[2]]
    }

    /// || w(1) - s w(0) ||
    pub fn boundary_residual(&self) -> f64 {
        let a = self.w.point(0);
        let b = self.w.point(self.w.n_points() - 1);
        a.iter().zip(b).map(|(p, q)| (q - self.sign * p) * (q - self.sign * p)).sum::<f64>().sqrt()
    }

    /// | <w(0), w(0)> - 1 |
    pub fn norm_residual(&self) -> f64 {
        let p = self.w.point(0);
        (p.iter().map(|v| v * v).sum::<f64>() - 1.0).abs()
    }
}

/// Non-adjoint eigenfunction v with multiplier mu (v(1) = mu v(0)).
#[derive(Clone, Debug)]
pub struct EigenfunctionData {
    pub v: CollocationSolution,
    pub mu: f64,
}

impl EigenfunctionData {
    pub fn v0(&self) -> [f64; 3] {
        let p = self.v.point(0);
        [p[0], p[1], p[2]]
    }
}

/// Truncated connecting orbit segment with its time span and departure
/// distance.
#[derive(Clone, Debug)]
pub struct ConnectionData {
    pub u: CollocationSolution,
    pub t_conn: f64,
    pub eps: f64,
}

/// Base-point anchors and homotopy gap values for the start-up BVP.
/// Coordinate indices are 0-based.
#[derive(Clone, Copy, Debug)]
pub struct HomotopyAnchors {
    pub j_minus: usize,
    pub a_minus: f64,
    pub j_plus: usize,
    pub a_plus: f64,
    /// Gap values (h11, h12, h21, h22).
    pub h: [f64; 4],
}

impl HomotopyAnchors {
    pub fn validate(&self) -> Result<(), DefiningError> {
        if self.j_minus > 2 || self.j_plus > 2 {
            return Err(DefiningError::Invalid("anchor coordinate index out of 0..3".into()));
        }
        Ok(())
    }
}

/// Required free-parameter count for an isolated branch of cycle-to-cycle
/// connections: p = n - m_s_plus - m_u_minus + 2.
pub fn check_isolation_count(n: usize, m_s_plus: usize, m_u_minus: usize) -> isize {
    n as isize - m_s_plus as isize - m_u_minus as isize + 2
}

/// Phase condition variant for a standalone cycle BVP.
#[derive(Clone, Copy, Debug)]
pub enum PhaseCondition {
    /// Integral phase condition against the previous solution.
    Integral,
    /// Pin one coordinate of the base point: x[index](0) = value.
    Anchor { index: usize, value: f64 },
}

fn standard_phase_ic(n_dim: usize) -> IntegralConstraint {
    // integrand <x_old'(tau), x(tau)> over the first 3 components; the
    // reference layout is [U_old (n_dim), U_old' (n_dim)]
    IntegralConstraint {
        integrand: Box::new(move |u, _b, r| {
            let mut s = 0.0;
            for k in 0..3 {
                s += r[n_dim + k] * u[k];
            }
            s
        }),
        jac_u: Some(Box::new(move |_u, _b, r, out| {
            out.fill(0.0);
            out[..3].copy_from_slice(&r[n_dim..n_dim + 3]);
        })),
        jac_p: Some(Box::new(|_u, _b, _r, _active, out| out.fill(0.0))),
    }
}

/// Periodic BVP for one saddle cycle: x' = T f(x, alpha), x(0) = x(1), plus a
/// phase condition. Free parameters: [principal, T_side].
pub fn build_cycle_bvp(
    sys: Arc<dyn OdeSystem>,
    side: CycleSide,
    phase: PhaseCondition,
    principal: usize,
) -> Result<BvpSpec, DefiningError> {
    let layout = ParamLayout::for_system(&*sys);
    let t_idx = layout.t_side(side);
    if principal == t_idx {
        return Err(DefiningError::Invalid("principal parameter equals the period".into()));
    }
    let nd = 3usize;
    let p_model = layout.p_model;

    let rhs = {
        let sys = sys.clone();
        Box::new(move |u: &[f64], b: &[f64], out: &mut [f64]| {
            sys.rhs(u, &b[..p_model], out);
            for o in out.iter_mut() {
                *o *= b[t_idx];
            }
        })
    };
    let rhs_jac_u = {
        let sys = sys.clone();
        Box::new(move |u: &[f64], b: &[f64], out: &mut [f64]| {
            sys.jac_state(u, &b[..p_model], out);
            for o in out.iter_mut() {
                *o *= b[t_idx];
            }
        })
    };
    let rhs_jac_p = {
        let sys = sys.clone();
        Box::new(move |u: &[f64], b: &[f64], active: &[usize], out: &mut [f64]| {
            let na = active.len();
            let mut f = [0.0; 3];
            let mut jp = vec![0.0; 3 * p_model];
            sys.rhs(u, &b[..p_model], &mut f);
            sys.jac_params(u, &b[..p_model], &mut jp);
            for (a, &idx) in active.iter().enumerate() {
                for k in 0..3 {
                    out[k * na + a] = if idx == t_idx {
                        f[k]
                    } else if idx < p_model {
                        b[t_idx] * jp[k * p_model + idx]
                    } else {
                        0.0
                    };
                }
            }
        })
    };

    let (n_bc, bc, bc_jac, ics): (usize, crate::collocation::BcFn, crate::collocation::BcJacFn, Vec<IntegralConstraint>) =
        match phase {
            PhaseCondition::Integral => (
                3,
                Box::new(|u0: &[f64], u1: &[f64], _b: &[f64], out: &mut [f64]| {
                    for k in 0..3 {
                        out[k] = u0[k] - u1[k];
                    }
                }),
                Box::new(
                    |_u0: &[f64],
                     _u1: &[f64],
                     _b: &[f64],
                     active: &[usize],
                     d0: &mut [f64],
                     d1: &mut [f64],
                     dp: &mut [f64]| {
                        d0.fill(0.0);
                        d1.fill(0.0);
                        dp.fill(0.0);
                        let _ = active;
                        for k in 0..3 {
                            d0[k * 3 + k] = 1.0;
                            d1[k * 3 + k] = -1.0;
                        }
                    },
                ),
                vec![standard_phase_ic(nd)],
            ),
            PhaseCondition::Anchor { index, value } => (
                4,
                Box::new(move |u0: &[f64], u1: &[f64], _b: &[f64], out: &mut [f64]| {
                    for k in 0..3 {
                        out[k] = u0[k] - u1[k];
                    }
                    out[3] = u0[index] - value;
                }),
                Box::new(
                    move |_u0: &[f64],
                          _u1: &[f64],
                          _b: &[f64],
                          _active: &[usize],
                          d0: &mut [f64],
                          d1: &mut [f64],
                          dp: &mut [f64]| {
                        d0.fill(0.0);
                        d1.fill(0.0);
                        dp.fill(0.0);
                        for k in 0..3 {
                            d0[k * 3 + k] = 1.0;
                            d1[k * 3 + k] = -1.0;
                        }
                        d0[3 * 3 + index] = 1.0;
                    },
                ),
                vec![],
            ),
        };

    let spec = BvpSpec::new(nd, layout.n_beta(), n_bc, rhs, bc, ics, vec![principal, t_idx])?
        .with_rhs_jacobians(rhs_jac_u, rhs_jac_p)
        .with_bc_jacobian(bc_jac);
    Ok(spec)
}

/// Variational-pair right-hand side (x, v): x' = T f(x), v' = T f_u(x) v.
struct EigenRhs {
    sys: Arc<dyn OdeSystem>,
    p_model: usize,
    t_idx: usize,
}

impl EigenRhs {
    fn eval(&self, y: &[f64], b: &[f64], out: &mut [f64]) {
        let (x, v) = y.split_at(3);
        let t = b[self.t_idx];
        let mut j = [0.0; 9];
        self.sys.rhs(x, &b[..self.p_model], &mut out[..3]);
        self.sys.jac_state(x, &b[..self.p_model], &mut j);
        for k in 0..3 {
            out[k] *= t;
            out[3 + k] = t * (j[k * 3] * v[0] + j[k * 3 + 1] * v[1] + j[k * 3 + 2] * v[2]);
        }
    }
}

/// Adjoint-pair right-hand side (x, w): x' = T f(x),
/// w' = -T f_u^T(x) w - lambda w.
struct AdjointRhs {
    sys: Arc<dyn OdeSystem>,
    p_model: usize,
    t_idx: usize,
    lam_idx: usize,
}

impl AdjointRhs {
    fn eval(&self, y: &[f64], b: &[f64], out: &mut [f64]) {
        let (x, w) = y.split_at(3);
        let t = b[self.t_idx];
        let lam = b[self.lam_idx];
        let mut j = [0.0; 9];
        self.sys.rhs(x, &b[..self.p_model], &mut out[..3]);
        self.sys.jac_state(x, &b[..self.p_model], &mut j);
        for k in 0..3 {
            out[k] *= t;
            out[3 + k] = -t * (j[k] * w[0] + j[3 + k] * w[1] + j[6 + k] * w[2]) - lam * w[k];
        }
    }
}

/// Central-difference column of d(rhs)/d(beta[idx]) for a 6-dim pair system.
fn fd_model_column6(
    eval: &dyn Fn(&[f64], &[f64], &mut [f64]),
    y: &[f64],
    b: &[f64],
    idx: usize,
    na: usize,
    a: usize,
    out: &mut [f64],
) {
    let mut bb = b.to_vec();
    let h = f64::EPSILON.cbrt() * (1.0_f64).max(b[idx].abs());
    let mut fp = [0.0; 6];
    let mut fm = [0.0; 6];
    bb[idx] = b[idx] + h;
    eval(y, &bb, &mut fp);
    bb[idx] = b[idx] - h;
    eval(y, &bb, &mut fm);
    for k in 0..6 {
        out[k * na + a] = (fp[k] - fm[k]) / (2.0 * h);
    }
}

/// Eigenfunction homotopy BVP over (x-, v): the cycle equations plus
/// v' = T f_u(x) v, v(1) - mu v(0) = 0, <v(0),v(0)> - h = 0, with the
/// integral phase condition on x. Free parameters: (mu, h, T-). The family
/// v = 0, h = 0 solves it for every mu; branch points on that family sit at
/// the Floquet multipliers of the cycle.
pub fn build_eigenfunction_homotopy_bvp(sys: Arc<dyn OdeSystem>) -> Result<BvpSpec, DefiningError> {
    let layout = ParamLayout::for_system(&*sys);
    let p_model = layout.p_model;
    let t_idx = layout.t_minus();
    let mu_idx = layout.mu();
    let h_idx = layout.h_norm();
    let nd = 6usize;

    let core = Arc::new(EigenRhs { sys: sys.clone(), p_model, t_idx });
    let rhs = {
        let core = core.clone();
        Box::new(move |y: &[f64], b: &[f64], out: &mut [f64]| core.eval(y, b, out))
    };
    let rhs_jac_u = {
        let sys = sys.clone();
        Box::new(move |y: &[f64], b: &[f64], out: &mut [f64]| {
            let (x, v) = y.split_at(3);
            let t = b[t_idx];
            let mut j = [0.0; 9];
            let mut dj = [0.0; 9];
            sys.jac_state(x, &b[..p_model], &mut j);
            sys.jac_state_dir(x, &b[..p_model], v, &mut dj);
            out.fill(0.0);
            for k in 0..3 {
                for l in 0..3 {
                    out[k * nd + l] = t * j[k * 3 + l];
                    out[(3 + k) * nd + l] = t * dj[k * 3 + l];
                    out[(3 + k) * nd + 3 + l] = t * j[k * 3 + l];
                }
            }
        })
    };
    let rhs_jac_p = {
        let sys = sys.clone();
        let core = core.clone();
        Box::new(move |y: &[f64], b: &[f64], active: &[usize], out: &mut [f64]| {
            let (x, v) = y.split_at(3);
            let na = active.len();
            out.fill(0.0);
            let mut f = [0.0; 3];
            let mut j = [0.0; 9];
            sys.rhs(x, &b[..p_model], &mut f);
            sys.jac_state(x, &b[..p_model], &mut j);
            for (a, &idx) in active.iter().enumerate() {
                if idx == t_idx {
                    for k in 0..3 {
                        out[k * na + a] = f[k];
                        out[(3 + k) * na + a] =
                            j[k * 3] * v[0] + j[k * 3 + 1] * v[1] + j[k * 3 + 2] * v[2];
                    }
                } else if idx < p_model {
                    let core = core.clone();
                    fd_model_column6(&move |y, b, o| core.eval(y, b, o), y, b, idx, na, a, out);
                }
            }
        })
    };

    let bc = Box::new(move |u0: &[f64], u1: &[f64], b: &[f64], out: &mut [f64]| {
        for k in 0..3 {
            out[k] = u0[k] - u1[k];
            out[3 + k] = u1[3 + k] - b[mu_idx] * u0[3 + k];
        }
        out[6] = u0[3] * u0[3] + u0[4] * u0[4] + u0[5] * u0[5] - b[h_idx];
    });
    let bc_jac = Box::new(
        move |u0: &[f64],
              _u1: &[f64],
              b: &[f64],
              active: &[usize],
              d0: &mut [f64],
              d1: &mut [f64],
              dp: &mut [f64]| {
            d0.fill(0.0);
            d1.fill(0.0);
            dp.fill(0.0);
            let na = active.len();
            for k in 0..3 {
                d0[k * nd + k] = 1.0;
                d1[k * nd + k] = -1.0;
                d0[(3 + k) * nd + 3 + k] = -b[mu_idx];
                d1[(3 + k) * nd + 3 + k] = 1.0;
                d0[6 * nd + 3 + k] = 2.0 * u0[3 + k];
            }
            for (a, &idx) in active.iter().enumerate() {
                if idx == mu_idx {
                    for k in 0..3 {
                        dp[(3 + k) * na + a] = -u0[3 + k];
                    }
                } else if idx == h_idx {
                    dp[6 * na + a] = -1.0;
                }
            }
        },
    );

    let spec = BvpSpec::new(
        nd,
        layout.n_beta(),
        7,
        rhs,
        bc,
        vec![standard_phase_ic(nd)],
        vec![mu_idx, h_idx, t_idx],
    )?
    .with_rhs_jacobians(rhs_jac_u, rhs_jac_p)
    .with_bc_jacobian(bc_jac);
    Ok(spec)
}

/// Adjoint homotopy BVP over (x, w) for one side: the cycle equations plus
/// the scaled adjoint equation w' + T f_u^T(x) w + lambda w = 0 with
/// w(1) - s w(0) = 0 and <w(0),w(0)> - h = 0. Free: (lambda, h, T).
/// Branch points on the trivial family w = 0 sit at the logs of the adjoint
/// multipliers.
pub fn build_adjoint_homotopy_bvp(
    sys: Arc<dyn OdeSystem>,
    side: CycleSide,
    sign: f64,
) -> Result<BvpSpec, DefiningError> {
    let layout = ParamLayout::for_system(&*sys);
    let p_model = layout.p_model;
    let t_idx = layout.t_side(side);
    let lam_idx = layout.lambda_side(side);
    let h_idx = layout.h_norm();
    let nd = 6usize;

    let core = Arc::new(AdjointRhs { sys: sys.clone(), p_model, t_idx, lam_idx });
    let rhs = {
        let core = core.clone();
        Box::new(move |y: &[f64], b: &[f64], out: &mut [f64]| core.eval(y, b, out))
    };
    let rhs_jac_u = {
        let sys = sys.clone();
        Box::new(move |y: &[f64], b: &[f64], out: &mut [f64]| {
            let (x, w) = y.split_at(3);
            let t = b[t_idx];
            let lam = b[lam_idx];
            let mut j = [0.0; 9];
            let mut hj = [0.0; 9];
            sys.jac_state(x, &b[..p_model], &mut j);
            sys.jac_state_tr_dir(x, &b[..p_model], w, &mut hj);
            out.fill(0.0);
            for k in 0..3 {
                for l in 0..3 {
                    out[k * nd + l] = t * j[k * 3 + l];
                    // d/dx of (f_u^T w) is the symmetric contraction hj
                    out[(3 + k) * nd + l] = -t * hj[k * 3 + l];
                    out[(3 + k) * nd + 3 + l] = -t * j[l * 3 + k];
                }
                out[(3 + k) * nd + 3 + k] -= lam;
            }
        })
    };
    let rhs_jac_p = {
        let sys = sys.clone();
        let core = core.clone();
        Box::new(move |y: &[f64], b: &[f64], active: &[usize], out: &mut [f64]| {
            let (x, w) = y.split_at(3);
            let na = active.len();
            out.fill(0.0);
            let mut f = [0.0; 3];
            let mut j = [0.0; 9];
            sys.rhs(x, &b[..p_model], &mut f);
            sys.jac_state(x, &b[..p_model], &mut j);
            for (a, &idx) in active.iter().enumerate() {
                if idx == t_idx {
                    for k in 0..3 {
                        out[k * na + a] = f[k];
                        out[(3 + k) * na + a] = -(j[k] * w[0] + j[3 + k] * w[1] + j[6 + k] * w[2]);
                    }
                } else if idx == lam_idx {
                    for k in 0..3 {
                        out[(3 + k) * na + a] = -w[k];
                    }
                } else if idx < p_model {
                    let core = core.clone();
                    fd_model_column6(&move |y, b, o| core.eval(y, b, o), y, b, idx, na, a, out);
                }
            }
        })
    };

    let bc = Box::new(move |u0: &[f64], u1: &[f64], b: &[f64], out: &mut [f64]| {
        for k in 0..3 {
            out[k] = u0[k] - u1[k];
            out[3 + k] = u1[3 + k] - sign * u0[3 + k];
        }
        out[6] = u0[3] * u0[3] + u0[4] * u0[4] + u0[5] * u0[5] - b[h_idx];
    });
    let bc_jac = Box::new(
        move |u0: &[f64],
              _u1: &[f64],
              _b: &[f64],
              active: &[usize],
              d0: &mut [f64],
              d1: &mut [f64],
              dp: &mut [f64]| {
            d0.fill(0.0);
            d1.fill(0.0);
            dp.fill(0.0);
            let na = active.len();
            for k in 0..3 {
                d0[k * nd + k] = 1.0;
                d1[k * nd + k] = -1.0;
                d0[(3 + k) * nd + 3 + k] = -sign;
                d1[(3 + k) * nd + 3 + k] = 1.0;
                d0[6 * nd + 3 + k] = 2.0 * u0[3 + k];
            }
            for (a, &idx) in active.iter().enumerate() {
                if idx == h_idx {
                    dp[6 * na + a] = -1.0;
                }
            }
        },
    );

    let spec = BvpSpec::new(
        nd,
        layout.n_beta(),
        7,
        rhs,
        bc,
        vec![standard_phase_ic(nd)],
        vec![lam_idx, h_idx, t_idx],
    )?
    .with_rhs_jacobians(rhs_jac_u, rhs_jac_p)
    .with_bc_jacobian(bc_jac);
    Ok(spec)
}

/// The composite 15-dimensional right-hand side and its derivative closures,
/// shared by the homotopy and complete connection BVPs.
struct CompositeRhs {
    sys: Arc<dyn OdeSystem>,
    layout: ParamLayout,
}

impl CompositeRhs {
    fn eval(&self, y: &[f64], b: &[f64], out: &mut [f64]) {
        let p = self.layout.p_model;
        let alpha = &b[..p];
        let (tm, tp, tc) = (b[self.layout.t_minus()], b[self.layout.t_plus()], b[self.layout.t_conn()]);
        let (lm, lp) = (b[self.layout.lambda_minus()], b[self.layout.lambda_plus()]);
        let xm = &y[0..3];
        let xp = &y[3..6];
        let wm = &y[6..9];
        let wp = &y[9..12];
        let u = &y[12..15];
        let mut j = [0.0; 9];

        self.sys.rhs(xm, alpha, &mut out[0..3]);
        for k in 0..3 {
            out[k] *= tm;
        }
        self.sys.rhs(xp, alpha, &mut out[3..6]);
        for k in 3..6 {
            out[k] *= tp;
        }
        self.sys.jac_state(xm, alpha, &mut j);
        for k in 0..3 {
            out[6 + k] = -tm * (j[k] * wm[0] + j[3 + k] * wm[1] + j[6 + k] * wm[2]) - lm * wm[k];
        }
        self.sys.jac_state(xp, alpha, &mut j);
        for k in 0..3 {
            out[9 + k] = -tp * (j[k] * wp[0] + j[3 + k] * wp[1] + j[6 + k] * wp[2]) - lp * wp[k];
        }
        self.sys.rhs(u, alpha, &mut out[12..15]);
        for k in 12..15 {
            out[k] *= tc;
        }
    }

    fn jac_u(&self, y: &[f64], b: &[f64], out: &mut [f64]) {
        let nd = 15;
        let p = self.layout.p_model;
        let alpha = &b[..p];
        let (tm, tp, tc) = (b[self.layout.t_minus()], b[self.layout.t_plus()], b[self.layout.t_conn()]);
        let (lm, lp) = (b[self.layout.lambda_minus()], b[self.layout.lambda_plus()]);
        let xm = &y[0..3];
        let xp = &y[3..6];
        let wm = &y[6..9];
        let wp = &y[9..12];
        let u = &y[12..15];
        let mut j = [0.0; 9];
        let mut hj = [0.0; 9];
        out.fill(0.0);

        // x- block
        self.sys.jac_state(xm, alpha, &mut j);
        for k in 0..3 {
            for l in 0..3 {
                out[k * nd + l] = tm * j[k * 3 + l];
                // w- rows: d/dx- and d/dw-
                out[(6 + k) * nd + 3 + l - 3] += 0.0; // keep layout obvious
                out[(6 + k) * nd + 6 + l] = -tm * j[l * 3 + k];
            }
            out[(6 + k) * nd + 6 + k] -= lm;
        }
        self.sys.jac_state_tr_dir(xm, alpha, wm, &mut hj);
        for k in 0..3 {
            for l in 0..3 {
                out[(6 + k) * nd + l] = -tm * hj[k * 3 + l];
            }
        }
        // x+ block
        self.sys.jac_state(xp, alpha, &mut j);
        for k in 0..3 {
            for l in 0..3 {
                out[(3 + k) * nd + 3 + l] = tp * j[k * 3 + l];
                out[(9 + k) * nd + 9 + l] = -tp * j[l * 3 + k];
            }
            out[(9 + k) * nd + 9 + k] -= lp;
        }
        self.sys.jac_state_tr_dir(xp, alpha, wp, &mut hj);
        for k in 0..3 {
            for l in 0..3 {
                out[(9 + k) * nd + 3 + l] = -tp * hj[k * 3 + l];
            }
        }
        // u block
        self.sys.jac_state(u, alpha, &mut j);
        for k in 0..3 {
            for l in 0..3 {
                out[(12 + k) * nd + 12 + l] = tc * j[k * 3 + l];
            }
        }
    }

    fn jac_p(&self, y: &[f64], b: &[f64], active: &[usize], out: &mut [f64]) {
        let p = self.layout.p_model;
        let alpha = &b[..p];
        let na = active.len();
        out.fill(0.0);
        let xm = &y[0..3];
        let xp = &y[3..6];
        let wm = &y[6..9];
        let wp = &y[9..12];
        let u = &y[12..15];
        let mut f = [0.0; 3];
        let mut j = [0.0; 9];
        for (a, &idx) in active.iter().enumerate() {
            if idx == self.layout.t_minus() {
                self.sys.rhs(xm, alpha, &mut f);
                self.sys.jac_state(xm, alpha, &mut j);
                for k in 0..3 {
                    out[k * na + a] = f[k];
                    out[(6 + k) * na + a] =
                        -(j[k] * wm[0] + j[3 + k] * wm[1] + j[6 + k] * wm[2]);
                }
            } else if idx == self.layout.t_plus() {
                self.sys.rhs(xp, alpha, &mut f);
                self.sys.jac_state(xp, alpha, &mut j);
                for k in 0..3 {
                    out[(3 + k) * na + a] = f[k];
                    out[(9 + k) * na + a] =
                        -(j[k] * wp[0] + j[3 + k] * wp[1] + j[6 + k] * wp[2]);
                }
            } else if idx == self.layout.t_conn() {
                self.sys.rhs(u, alpha, &mut f);
                for k in 0..3 {
                    out[(12 + k) * na + a] = f[k];
                }
            } else if idx == self.layout.lambda_minus() {
                for k in 0..3 {
                    out[(6 + k) * na + a] = -wm[k];
                }
            } else if idx == self.layout.lambda_plus() {
                for k in 0..3 {
                    out[(9 + k) * na + a] = -wp[k];
                }
            } else if idx < p {
                // model parameter: central differences of the composite rhs
                let mut bb = b.to_vec();
                let h = f64::EPSILON.cbrt() * (1.0_f64).max(b[idx].abs());
                let mut fp = [0.0; 15];
                let mut fm = [0.0; 15];
                bb[idx] = b[idx] + h;
                self.eval(y, &bb, &mut fp);
                bb[idx] = b[idx] - h;
                self.eval(y, &bb, &mut fm);
                for k in 0..15 {
                    out[k * na + a] = (fp[k] - fm[k]) / (2.0 * h);
                }
            }
        }
    }
}

fn composite_rhs_closures(
    sys: Arc<dyn OdeSystem>,
) -> (crate::collocation::RhsFn, crate::collocation::RhsJacUFn, crate::collocation::RhsJacPFn) {
    let layout = ParamLayout::for_system(&*sys);
    let r1 = Arc::new(CompositeRhs { sys, layout });
    let r2 = r1.clone();
    let r3 = r1.clone();
    (
        Box::new(move |y, b, out| r1.eval(y, b, out)),
        Box::new(move |y, b, out| r2.jac_u(y, b, out)),
        Box::new(move |y, b, active, out| r3.jac_p(y, b, active, out)),
    )
}

/// The gap conditions shared by the homotopy and complete BVPs, evaluated on
/// the composite boundary values. `alpha` is read from beta.
struct GapTerms;

impl GapTerms {
    /// <f(x+(0)), u(1) - x+(0)>, <f(x-(0)), u(0) - x-(0)>,
    /// <w+(0), u(1) - x+(0)>, <w-(0), u(0) - x-(0)>, ||u(0)-x-(0)||^2
    fn eval(sys: &dyn OdeSystem, alpha: &[f64], u0: &[f64], u1: &[f64]) -> [f64; 5] {
        let xm0 = &u0[0..3];
        let xp0 = &u0[3..6];
        let wm0 = &u0[6..9];
        let wp0 = &u0[9..12];
        let uc0 = &u0[12..15];
        let uc1 = &u1[12..15];
        let mut fp = [0.0; 3];
        let mut fm = [0.0; 3];
        sys.rhs(xp0, alpha, &mut fp);
        sys.rhs(xm0, alpha, &mut fm);
        let d1: [f64; 3] = [uc1[0] - xp0[0], uc1[1] - xp0[1], uc1[2] - xp0[2]];
        let d0: [f64; 3] = [uc0[0] - xm0[0], uc0[1] - xm0[1], uc0[2] - xm0[2]];
        [
            fp[0] * d1[0] + fp[1] * d1[1] + fp[2] * d1[2],
            fm[0] * d0[0] + fm[1] * d0[1] + fm[2] * d0[2],
            wp0[0] * d1[0] + wp0[1] * d1[1] + wp0[2] * d1[2],
            wm0[0] * d0[0] + wm0[1] * d0[1] + wm0[2] * d0[2],
            d0[0] * d0[0] + d0[1] * d0[1] + d0[2] * d0[2],
        ]
    }

    /// Jacobian rows of the five gap terms with respect to (U0, U1) and the
    /// active model parameter, written into caller matrices at `row`.
    #[allow(clippy::too_many_arguments)]
    fn jac(
        sys: &dyn OdeSystem,
        alpha: &[f64],
        u0: &[f64],
        u1: &[f64],
        which: usize,
        nd: usize,
        row: usize,
        active: &[usize],
        p_model: usize,
        d0m: &mut [f64],
        d1m: &mut [f64],
        dpm: &mut [f64],
    ) {
        let na = active.len();
        let xm0 = &u0[0..3];
        let xp0 = &u0[3..6];
        let wm0 = &u0[6..9];
        let wp0 = &u0[9..12];
        let uc0 = &u0[12..15];
        let uc1 = &u1[12..15];
        let mut f = [0.0; 3];
        let mut j = [0.0; 9];
        let mut jp = vec![0.0; 3 * p_model];
        match which {
            0 => {
                // <f(x+0), u(1) - x+0>
                sys.rhs(xp0, alpha, &mut f);
                sys.jac_state(xp0, alpha, &mut j);
                let d: [f64; 3] = [uc1[0] - xp0[0], uc1[1] - xp0[1], uc1[2] - xp0[2]];
                for l in 0..3 {
                    // d/dx+0: d^T f_u - f^T
                    d0m[row * nd + 3 + l] =
                        d[0] * j[l] + d[1] * j[3 + l] + d[2] * j[6 + l] - f[l];
                    d1m[row * nd + 12 + l] = f[l];
                }
                sys.jac_params(xp0, alpha, &mut jp);
                for (a, &idx) in active.iter().enumerate() {
                    if idx < p_model {
                        dpm[row * na + a] = d[0] * jp[idx]
                            + d[1] * jp[p_model + idx]
                            + d[2] * jp[2 * p_model + idx];
                    }
                }
            }
            1 => {
                // <f(x-0), u(0) - x-0>
                sys.rhs(xm0, alpha, &mut f);
                sys.jac_state(xm0, alpha, &mut j);
                let d: [f64; 3] = [uc0[0] - xm0[0], uc0[1] - xm0[1], uc0[2] - xm0[2]];
                for l in 0..3 {
                    d0m[row * nd + l] = d[0] * j[l] + d[1] * j[3 + l] + d[2] * j[6 + l] - f[l];
                    d0m[row * nd + 12 + l] = f[l];
                }
                sys.jac_params(xm0, alpha, &mut jp);
                for (a, &idx) in active.iter().enumerate() {
                    if idx < p_model {
                        dpm[row * na + a] = d[0] * jp[idx]
                            + d[1] * jp[p_model + idx]
                            + d[2] * jp[2 * p_model + idx];
                    }
                }
            }
            2 => {
                // <w+0, u(1) - x+0>
                let d: [f64; 3] = [uc1[0] - xp0[0], uc1[1] - xp0[1], uc1[2] - xp0[2]];
                for l in 0..3 {
                    d0m[row * nd + 9 + l] = d[l];
                    d0m[row * nd + 3 + l] = -wp0[l];
                    d1m[row * nd + 12 + l] = wp0[l];
                }
            }
            3 => {
                // <w-0, u(0) - x-0>
                let d: [f64; 3] = [uc0[0] - xm0[0], uc0[1] - xm0[1], uc0[2] - xm0[2]];
                for l in 0..3 {
                    d0m[row * nd + 6 + l] = d[l];
                    d0m[row * nd + l] = -wm0[l];
                    d0m[row * nd + 12 + l] = wm0[l];
                }
            }
            4 => {
                // ||u(0) - x-0||^2
                let d: [f64; 3] = [uc0[0] - xm0[0], uc0[1] - xm0[1], uc0[2] - xm0[2]];
                for l in 0..3 {
                    d0m[row * nd + 12 + l] = 2.0 * d[l];
                    d0m[row * nd + l] = -2.0 * d[l];
                }
            }
            _ => unreachable!(),
        }
    }
}

/// Which homotopy gap is being driven.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActiveGap {
    H11,
    H12,
    H21,
    H22,
}

impl ActiveGap {
    pub fn all() -> [ActiveGap; 4] {
        [ActiveGap::H11, ActiveGap::H12, ActiveGap::H21, ActiveGap::H22]
    }
    pub fn index(&self, layout: &ParamLayout) -> usize {
        match self {
            ActiveGap::H11 => layout.h11(),
            ActiveGap::H12 => layout.h12(),
            ActiveGap::H21 => layout.h21(),
            ActiveGap::H22 => layout.h22(),
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            ActiveGap::H11 => "h11",
            ActiveGap::H12 => "h12",
            ActiveGap::H21 => "h21",
            ActiveGap::H22 => "h22",
        }
    }
}

/// Start-up homotopy BVP over the full composite state: base points pinned by
/// coordinate anchors, all four connection conditions carrying gap values
/// h11, h12, h21, h22. Free parameters: (active gap, T, T-, T+, lambda-,
/// lambda+), n_bc = 20.
pub fn build_connection_homotopy_bvp(
    sys: Arc<dyn OdeSystem>,
    anchors: HomotopyAnchors,
    active_h: ActiveGap,
    s_minus: f64,
    s_plus: f64,
) -> Result<BvpSpec, DefiningError> {
    anchors.validate()?;
    let layout = ParamLayout::for_system(&*sys);
    let p_model = layout.p_model;
    let nd = 15usize;
    let (rhs, jac_u, jac_p) = composite_rhs_closures(sys.clone());
    let h_idx = [layout.h11(), layout.h12(), layout.h21(), layout.h22()];

    let bc = {
        let sys = sys.clone();
        Box::new(move |u0: &[f64], u1: &[f64], b: &[f64], out: &mut [f64]| {
            let alpha = &b[..p_model];
            for k in 0..3 {
                out[k] = u0[k] - u1[k]; // x- periodicity
                out[3 + k] = u0[3 + k] - u1[3 + k]; // x+ periodicity
                out[8 + k] = u1[6 + k] - s_minus * u0[6 + k]; // w- (anti)periodicity
                out[11 + k] = u1[9 + k] - s_plus * u0[9 + k]; // w+
            }
            out[6] = u0[anchors.j_minus] - anchors.a_minus;
            out[7] = u0[3 + anchors.j_plus] - anchors.a_plus;
            out[14] = u0[6] * u0[6] + u0[7] * u0[7] + u0[8] * u0[8] - 1.0;
            out[15] = u0[9] * u0[9] + u0[10] * u0[10] + u0[11] * u0[11] - 1.0;
            let gaps = GapTerms::eval(&*sys, alpha, u0, u1);
            out[16] = gaps[0] - b[h_idx[0]];
            out[17] = gaps[1] - b[h_idx[1]];
            out[18] = gaps[2] - b[h_idx[2]];
            out[19] = gaps[3] - b[h_idx[3]];
        })
    };
    let bc_jac = {
        let sys = sys.clone();
        Box::new(
            move |u0: &[f64],
                  u1: &[f64],
                  b: &[f64],
                  active: &[usize],
                  d0: &mut [f64],
                  d1: &mut [f64],
                  dp: &mut [f64]| {
                let alpha = &b[..p_model];
                let na = active.len();
                d0.fill(0.0);
                d1.fill(0.0);
                dp.fill(0.0);
                for k in 0..3 {
                    d0[k * nd + k] = 1.0;
                    d1[k * nd + k] = -1.0;
                    d0[(3 + k) * nd + 3 + k] = 1.0;
                    d1[(3 + k) * nd + 3 + k] = -1.0;
                    d0[(8 + k) * nd + 6 + k] = -s_minus;
                    d1[(8 + k) * nd + 6 + k] = 1.0;
                    d0[(11 + k) * nd + 9 + k] = -s_plus;
                    d1[(11 + k) * nd + 9 + k] = 1.0;
                    d0[14 * nd + 6 + k] = 2.0 * u0[6 + k];
                    d0[15 * nd + 9 + k] = 2.0 * u0[9 + k];
                }
                d0[6 * nd + anchors.j_minus] = 1.0;
                d0[7 * nd + 3 + anchors.j_plus] = 1.0;
                for (g, row) in (16..20).enumerate() {
                    GapTerms::jac(&*sys, alpha, u0, u1, g, nd, row, active, p_model, d0, d1, dp);
                    for (a, &idx) in active.iter().enumerate() {
                        if idx == h_idx[g] {
                            dp[row * na + a] = -1.0;
                        }
                    }
                }
            },
        )
    };

    let free = vec![
        active_h.index(&layout),
        layout.t_conn(),
        layout.t_minus(),
        layout.t_plus(),
        layout.lambda_minus(),
        layout.lambda_plus(),
    ];
    let spec = BvpSpec::new(nd, layout.n_beta(), 20, rhs, bc, vec![], free)?
        .with_rhs_jacobians(jac_u, jac_p)
        .with_bc_jacobian(bc_jac);
    Ok(spec)
}

/// The complete truncated connection BVP: 19 boundary conditions (6
/// periodicity, 6 adjoint (anti)periodicity, 2 norms, 2 flow-orthogonality
/// phase conditions, 2 projections, 1 squared departure distance), no
/// integral constraints. Free parameters: [principal, T-, T+, lambda-,
/// lambda+]; the principal is typically a model parameter (fold detection at
/// fixed T) or the connection time (truncation improvement at fixed alpha).
pub fn build_complete_bvp(
    sys: Arc<dyn OdeSystem>,
    s_minus: f64,
    s_plus: f64,
    principal: usize,
) -> Result<BvpSpec, DefiningError> {
    let layout = ParamLayout::for_system(&*sys);
    let p_model = layout.p_model;
    let nd = 15usize;
    let secondaries =
        [layout.t_minus(), layout.t_plus(), layout.lambda_minus(), layout.lambda_plus()];
    if secondaries.contains(&principal) {
        return Err(DefiningError::Invalid(
            "principal parameter collides with the cycle unknowns (T+-, lambda+-)".into(),
        ));
    }
    let (rhs, jac_u, jac_p) = composite_rhs_closures(sys.clone());
    let eps2_idx = layout.eps2();

    let bc = {
        let sys = sys.clone();
        Box::new(move |u0: &[f64], u1: &[f64], b: &[f64], out: &mut [f64]| {
            let alpha = &b[..p_model];
            for k in 0..3 {
                out[k] = u0[k] - u1[k];
                out[3 + k] = u0[3 + k] - u1[3 + k];
                out[6 + k] = u1[6 + k] - s_minus * u0[6 + k];
                out[9 + k] = u1[9 + k] - s_plus * u0[9 + k];
            }
            out[12] = u0[6] * u0[6] + u0[7] * u0[7] + u0[8] * u0[8] - 1.0;
            out[13] = u0[9] * u0[9] + u0[10] * u0[10] + u0[11] * u0[11] - 1.0;
            let gaps = GapTerms::eval(&*sys, alpha, u0, u1);
            out[14] = gaps[0];
            out[15] = gaps[1];
            out[16] = gaps[2];
            out[17] = gaps[3];
            out[18] = gaps[4] - b[eps2_idx];
        })
    };
    let bc_jac = {
        let sys = sys.clone();
        Box::new(
            move |u0: &[f64],
                  u1: &[f64],
                  b: &[f64],
                  active: &[usize],
                  d0: &mut [f64],
                  d1: &mut [f64],
                  dp: &mut [f64]| {
                let alpha = &b[..p_model];
                let na = active.len();
                d0.fill(0.0);
                d1.fill(0.0);
                dp.fill(0.0);
                for k in 0..3 {
                    d0[k * nd + k] = 1.0;
                    d1[k * nd + k] = -1.0;
                    d0[(3 + k) * nd + 3 + k] = 1.0;
                    d1[(3 + k) * nd + 3 + k] = -1.0;
                    d0[(6 + k) * nd + 6 + k] = -s_minus;
                    d1[(6 + k) * nd + 6 + k] = 1.0;
                    d0[(9 + k) * nd + 9 + k] = -s_plus;
                    d1[(9 + k) * nd + 9 + k] = 1.0;
                    d0[12 * nd + 6 + k] = 2.0 * u0[6 + k];
                    d0[13 * nd + 9 + k] = 2.0 * u0[9 + k];
                }
                for (g, row) in (14..19).enumerate() {
                    GapTerms::jac(&*sys, alpha, u0, u1, g, nd, row, active, p_model, d0, d1, dp);
                }
                for (a, &idx) in active.iter().enumerate() {
                    if idx == eps2_idx {
                        dp[18 * na + a] = -1.0;
                    }
                }
            },
        )
    };

    let mut free = vec![principal];
    free.extend_from_slice(&secondaries);
    let spec = BvpSpec::new(nd, layout.n_beta(), 19, rhs, bc, vec![], free)?
        .with_rhs_jacobians(jac_u, jac_p)
        .with_bc_jacobian(bc_jac);
    Ok(spec)
}

/// Initial connecting orbit by time integration from a small step along the
/// unstable eigenfunction: u(0) = x-(0) + eps v-(0), integrated over
/// `t_seed` and resampled onto `mesh`. On integrator blow-up the time span is
/// halved (up to three times) and the shortened span is reported in the
/// result.
pub fn seed_connection(
    sys: &dyn OdeSystem,
    alpha: &[f64],
    cycle: &CycleData,
    v0: &[f64],
    eps: f64,
    t_seed: f64,
    mesh: Mesh,
    tol: f64,
) -> Result<ConnectionData, DefiningError> {
    seed_connection_impl(sys, alpha, cycle, v0, eps, t_seed, mesh, tol, false)
}

/// Like [`seed_connection`], but the integration span is trimmed to the
/// orbit's closest re-approach to the cycle after its farthest excursion, so
/// that the truncation endpoint u(1) sits as near the target cycle as the
/// seed orbit allows.
#[allow(clippy::too_many_arguments)]
pub fn seed_connection_auto(
    sys: &dyn OdeSystem,
    alpha: &[f64],
    cycle: &CycleData,
    v0: &[f64],
    eps: f64,
    t_max: f64,
    mesh: Mesh,
    tol: f64,
) -> Result<ConnectionData, DefiningError> {
    seed_connection_impl(sys, alpha, cycle, v0, eps, t_max, mesh, tol, true)
}

#[allow(clippy::too_many_arguments)]
fn seed_connection_impl(
    sys: &dyn OdeSystem,
    alpha: &[f64],
    cycle: &CycleData,
    v0: &[f64],
    eps: f64,
    t_seed: f64,
    mesh: Mesh,
    tol: f64,
    trim_to_closest_approach: bool,
) -> Result<ConnectionData, DefiningError> {
    let x0 = cycle.base_point();
    let u0: Vec<f64> = (0..3).map(|k| x0[k] + eps * v0[k]).collect();
    let mut span = t_seed;
    let mut traj = None;
    for _ in 0..4 {
        match oracle::integrate(sys, &u0, alpha, (0.0, span), tol) {
            Ok(t) => {
                traj = Some(t);
                break;
            }
            Err(oracle::OracleError::StepUnderflow { .. }) => {
                span *= 0.5;
            }
            Err(e) => return Err(DefiningError::SeedIntegration(e.to_string())),
        }
    }
    let traj = traj.ok_or_else(|| {
        DefiningError::SeedIntegration("blow-up persisted after three halvings".into())
    })?;

    if trim_to_closest_approach {
        // distance to the cycle along the trajectory on a fine grid
        let n_scan = 4000usize;
        let mut buf = [0.0; 3];
        let dists: Vec<f64> = (0..=n_scan)
            .map(|k| {
                let t = span * k as f64 / n_scan as f64;
                traj.sample(t, &mut buf);
                distance_to_cycle(&buf, cycle)
            })
            .collect();
        let far = dists
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if let Some((kmin, _)) = dists
            .iter()
            .enumerate()
            .skip(far)
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        {
            if kmin > far {
                span *= kmin as f64 / n_scan as f64;
            }
        }
    }

    let mut u = CollocationSolution::from_fn(mesh, 3, vec![], |tau, out| {
        traj.sample(tau * span, out);
    });
    u.beta = vec![];
    Ok(ConnectionData { u, t_conn: span, eps })
}

fn distance_to_cycle(p: &[f64], cycle: &CycleData) -> f64 {
    let mut best = f64::INFINITY;
    for k in 0..cycle.x.n_points() {
        let q = cycle.x.point(k);
        let d = (0..3).map(|i| (p[i] - q[i]) * (p[i] - q[i])).sum::<f64>().sqrt();
        best = best.min(d);
    }
    best
}

/// Bundle the sub-solutions into the 15-dimensional composite state on the
/// connection mesh; cycle and eigenfunction parts are re-interpolated.
#[allow(clippy::too_many_arguments)]
pub fn assemble_composite(
    sys: &dyn OdeSystem,
    alpha: &[f64],
    xm: &CycleData,
    xp: &CycleData,
    wm: &AdjointEigenData,
    wp: &AdjointEigenData,
    conn: &ConnectionData,
    eps2: f64,
) -> CollocationSolution {
    let layout = ParamLayout::for_system(sys);
    let mesh = conn.u.mesh.clone();
    let mut beta = vec![0.0; layout.n_beta()];
    beta[..layout.p_model].copy_from_slice(alpha);
    beta[layout.t_minus()] = xm.period;
    beta[layout.t_plus()] = xp.period;
    beta[layout.t_conn()] = conn.t_conn;
    beta[layout.lambda_minus()] = wm.lambda;
    beta[layout.lambda_plus()] = wp.lambda;
    beta[layout.eps2()] = eps2;

    let mut bufs = [[0.0; 3]; 5];
    CollocationSolution::from_fn(mesh, 15, beta, |tau, out| {
        xm.x.interpolate(tau, &mut bufs[0]).expect("tau");
        xp.x.interpolate(tau, &mut bufs[1]).expect("tau");
        wm.w.interpolate(tau, &mut bufs[2]).expect("tau");
        wp.w.interpolate(tau, &mut bufs[3]).expect("tau");
        conn.u.interpolate(tau, &mut bufs[4]).expect("tau");
        for (b, o) in bufs.iter().zip(out.chunks_mut(3)) {
            o.copy_from_slice(b);
        }
    })
}

/// View a contiguous component range of a solution as its own solution.
pub fn split_block(sol: &CollocationSolution, start: usize, len: usize) -> CollocationSolution {
    assert!(start + len <= sol.n_dim);
    let n_pts = sol.n_points();
    let mut values = Vec::with_capacity(n_pts * len);
    for k in 0..n_pts {
        values.extend_from_slice(&sol.point(k)[start..start + len]);
    }
    CollocationSolution { mesh: sol.mesh.clone(), n_dim: len, values, beta: sol.beta.clone() }
}

/// One 3-component block of the 15-dimensional composite state
/// (0: x-, 1: x+, 2: w-, 3: w+, 4: u).
pub fn split_composite(sol: &CollocationSolution, block: usize) -> CollocationSolution {
    assert_eq!(sol.n_dim, 15);
    assert!(block < 5);
    split_block(sol, block * 3, 3)
}

/// One 3-component block of a 6-dimensional pair state (0: x, 1: v or w).
pub fn split_composite6(sol: &CollocationSolution, block: usize) -> CollocationSolution {
    assert_eq!(sol.n_dim, 6);
    assert!(block < 2);
    split_block(sol, block * 3, 3)
}

/// The five gap values on composite boundary data: the two flow-orthogonality
/// terms, the two projections, and the squared departure distance.
pub fn gap_values(sys: &dyn OdeSystem, alpha: &[f64], u0: &[f64], u1: &[f64]) -> [f64; 5] {
    GapTerms::eval(sys, alpha, u0, u1)
}

/// Number of end excursions of the connection near the target cycle: sign
/// changes of <f(x+(0)), u(tau) - x+(0)> at points within `radius` of the
/// cycle, counted only after the orbit's farthest point from the cycle (the
/// departure windings around the start cycle do not count).
pub fn count_end_excursions(
    sys: &dyn OdeSystem,
    alpha: &[f64],
    u: &CollocationSolution,
    cycle: &CycleData,
    radius: f64,
) -> usize {
    let xp0 = cycle.base_point();
    let mut f0 = [0.0; 3];
    sys.rhs(&xp0, alpha, &mut f0);
    let dists: Vec<f64> =
        (0..u.n_points()).map(|k| distance_to_cycle(u.point(k), cycle)).collect();
    let far = dists
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut count = 0usize;
    let mut prev_sign = 0.0_f64;
    for k in far..u.n_points() {
        let p = u.point(k);
        let g: f64 = (0..3).map(|i| f0[i] * (p[i] - xp0[i])).sum();
        let near = dists[k] < radius;
        let s = g.signum();
        if near && prev_sign != 0.0 && s != prev_sign {
            count += 1;
        }
        prev_sign = if near { s } else { 0.0 };
    }
    count
}

/// Rotate the phase of a periodic 3-component solution: the result samples
/// x((tau + shift) mod 1) on the same mesh. Used to move the base point of a
/// cycle before applying coordinate anchors.
pub fn rotate_phase(sol: &CollocationSolution, shift: f64) -> CollocationSolution {
    let shift = shift.rem_euclid(1.0);
    CollocationSolution::from_fn(
        sol.mesh.clone(),
        sol.n_dim,
        sol.beta.clone(),
        |tau, out| {
            let t = (tau + shift).rem_euclid(1.0);
            sol.interpolate(t, out).expect("tau in range");
        },
    )
}

/// Phase shift that brings a cycle's base point closest to `target`, found by
/// a fine scan plus golden-section refinement.
pub fn nearest_phase(cycle: &CollocationSolution, target: &[f64]) -> f64 {
    let dist2 = |tau: f64| -> f64 {
        let mut p = vec![0.0; cycle.n_dim];
        cycle.interpolate(tau.rem_euclid(1.0), &mut p).expect("tau");
        p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let n_scan = 4 * cycle.n_points();
    let mut best_tau = 0.0;
    let mut best = f64::INFINITY;
    for k in 0..n_scan {
        let tau = k as f64 / n_scan as f64;
        let d = dist2(tau);
        if d < best {
            best = d;
            best_tau = tau;
        }
    }
    let mut lo = best_tau - 1.0 / n_scan as f64;
    let mut hi = best_tau + 1.0 / n_scan as f64;
    for _ in 0..60 {
        let m1 = lo + 0.382 * (hi - lo);
        let m2 = lo + 0.618 * (hi - lo);
        if dist2(m1) < dist2(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    0.5 * (lo + hi)
}

/// Composite solution file: the collocation format plus a block-index
/// metadata line.
pub fn write_composite(sol: &CollocationSolution, n_fp: usize) -> String {
    let mut s = String::from("# blocks xminus=1:3 xplus=4:6 wminus=7:9 wplus=10:12 conn=13:15\n");
    s.push_str(&write_solution(sol, n_fp));
    s
}

pub fn read_composite(text: &str) -> Result<(CollocationSolution, usize), CollocationError> {
    read_solution(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collocation::{
        eval_residual, newton_solve, sample_refs, NewtonSettings, NoRef, RefSource, SolutionRef,
    };
    use crate::model::testsys::RadialCycle;
    use crate::model::FoodChain;
    use crate::quad::CollocTables;

    fn radial_cycle_solution(layout: &ParamLayout, n: usize, m: usize) -> CycleData {
        let mesh = Mesh::uniform(n, m);
        let mut beta = vec![0.0; layout.n_beta()];
        beta[layout.t_minus()] = 2.0 * std::f64::consts::PI;
        beta[layout.t_plus()] = 2.0 * std::f64::consts::PI;
        let x = CollocationSolution::from_fn(mesh, 3, beta, |tau, out| {
            let a = 2.0 * std::f64::consts::PI * tau;
            out[0] = a.cos();
            out[1] = a.sin();
            out[2] = 0.0;
        });
        CycleData { x, period: 2.0 * std::f64::consts::PI }
    }

    #[test]
    fn isolation_count_examples() {
        assert_eq!(check_isolation_count(3, 2, 2), 1);
        assert_eq!(check_isolation_count(3, 3, 2), 0);
        assert_eq!(check_isolation_count(4, 2, 2), 2);
    }

    #[test]
    fn builder_counting_identities() {
        let sys: Arc<dyn OdeSystem> = Arc::new(FoodChain);
        let layout = ParamLayout::for_system(&*sys);
        // cycle, integral phase: (3, 3, 1) -> 2
        let c = build_cycle_bvp(sys.clone(), CycleSide::Minus, PhaseCondition::Integral, 4)
            .unwrap();
        assert_eq!((c.n_dim, c.n_bc, c.n_ic(), c.n_fp()), (3, 3, 1, 2));
        // eigenfunction homotopy: (6, 7, 1) -> 3
        let e = build_eigenfunction_homotopy_bvp(sys.clone()).unwrap();
        assert_eq!((e.n_dim, e.n_bc, e.n_ic(), e.n_fp()), (6, 7, 1, 3));
        // adjoint homotopy: same counting
        let a = build_adjoint_homotopy_bvp(sys.clone(), CycleSide::Plus, 1.0).unwrap();
        assert_eq!((a.n_dim, a.n_bc, a.n_ic(), a.n_fp()), (6, 7, 1, 3));
        // connection homotopy: (15, 20, 0) -> 6
        let anchors =
            HomotopyAnchors { j_minus: 1, a_minus: 0.1, j_plus: 0, a_plus: 0.8, h: [0.0; 4] };
        let h = build_connection_homotopy_bvp(sys.clone(), anchors, ActiveGap::H11, 1.0, 1.0)
            .unwrap();
        assert_eq!((h.n_dim, h.n_bc, h.n_ic(), h.n_fp()), (15, 20, 0, 6));
        // complete: (15, 19, 0) -> 5
        let k = build_complete_bvp(sys.clone(), 1.0, 1.0, crate::model::FC_D1).unwrap();
        assert_eq!((k.n_dim, k.n_bc, k.n_ic(), k.n_fp()), (15, 19, 0, 5));
        let _ = layout;
    }

    #[test]
    fn complete_bvp_rejects_colliding_principal() {
        let sys: Arc<dyn OdeSystem> = Arc::new(FoodChain);
        let layout = ParamLayout::for_system(&*sys);
        assert!(build_complete_bvp(sys, 1.0, 1.0, layout.t_minus()).is_err());
    }

    #[test]
    fn harmonic_cycle_period_recovered() {
        // the radial normal form has the exact unit-circle cycle of period
        // 2 pi; a perturbed guess converges back to it
        let sys: Arc<dyn OdeSystem> = Arc::new(RadialCycle::default());
        let layout = ParamLayout::for_system(&*sys);
        let spec = build_cycle_bvp(sys, CycleSide::Minus, PhaseCondition::Integral, 0).unwrap();
        let mesh = Mesh::uniform(20, 4);
        let mut beta = vec![0.0; layout.n_beta()];
        beta[layout.t_minus()] = 6.0; // wrong period on purpose
        let guess = CollocationSolution::from_fn(mesh, 3, beta, |tau, out| {
            let a = 2.0 * std::f64::consts::PI * tau;
            out[0] = 1.07 * a.cos();
            out[1] = 1.07 * a.sin();
            out[2] = 0.02;
        });
        let reference = guess.clone();
        let (sol, _rep) = newton_solve(
            &spec,
            &guess,
            &SolutionRef { sol: &reference },
            &NewtonSettings::default(),
        )
        .unwrap();
        let period = sol.beta[layout.t_minus()];
        assert!(
            (period - 2.0 * std::f64::consts::PI).abs() < 1e-6,
            "period {period} vs 2 pi"
        );
        let cd = CycleData { x: sol, period };
        assert!(cd.periodicity_residual() < 1e-8);
        // radius 1
        let p = cd.base_point();
        assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0).abs() < 1e-6);
        assert!(p[2].abs() < 1e-8);
    }

    #[test]
    fn trivial_eigenfunction_family_solves_exactly() {
        // with the cycle part converged, v = 0 / h = 0 zeroes the v-rows for
        // any mu
        let sys: Arc<dyn OdeSystem> = Arc::new(RadialCycle::default());
        let layout = ParamLayout::for_system(&*sys);
        let spec = build_eigenfunction_homotopy_bvp(sys.clone()).unwrap();

        // solve the cycle first
        let cyc_spec =
            build_cycle_bvp(sys, CycleSide::Minus, PhaseCondition::Integral, 0).unwrap();
        let mesh = Mesh::uniform(16, 4);
        let mut beta = vec![0.0; layout.n_beta()];
        beta[layout.t_minus()] = 6.3;
        let guess = CollocationSolution::from_fn(mesh.clone(), 3, beta, |tau, out| {
            let a = 2.0 * std::f64::consts::PI * tau;
            out[0] = a.cos();
            out[1] = a.sin();
            out[2] = 0.0;
        });
        let reference = guess.clone();
        let (cycle, _) = newton_solve(
            &cyc_spec,
            &guess,
            &SolutionRef { sol: &reference },
            &NewtonSettings::default(),
        )
        .unwrap();

        for mu in [-2.0, 0.3, 1.7] {
            let mut beta6 = cycle.beta.clone();
            beta6[layout.mu()] = mu;
            beta6[layout.h_norm()] = 0.0;
            let comp = CollocationSolution::from_fn(mesh.clone(), 6, beta6, |tau, out| {
                cycle.interpolate(tau, &mut out[..3]).unwrap();
                out[3..].fill(0.0);
            });
            let tables = CollocTables::new(mesh.m);
            let refsrc = SolutionRef { sol: &comp };
            let refs = sample_refs(&refsrc, &comp.mesh, &tables);
            let res = eval_residual(
                &spec,
                &comp,
                &spec.free_params,
                &refs,
                refsrc.dim(),
                &[crate::collocation::ClosureRow::Pin { slot: 0, value: mu }],
                &tables,
            )
            .unwrap();
            // v-rows (second half of each collocation block) and the norm /
            // eigen BC rows vanish identically on the trivial family
            let m = mesh.m;
            let nivl = mesh.n_intervals();
            for i in 0..nivl {
                for l in 0..m {
                    for k in 3..6 {
                        let r = res[(i * m + l) * 6 + k + i * 0 + (i * m + l) * 0];
                        // row index: interval-major blocks of m*6
                        let idx = i * m * 6 + l * 6 + k;
                        assert!(res[idx].abs() < 1e-14, "v-row {idx}: {r}");
                    }
                }
            }
            let base = nivl * m * 6;
            for r in 3..7 {
                assert!(res[base + r].abs() < 1e-14, "bc row {r}: {}", res[base + r]);
            }
        }
    }

    #[test]
    fn seed_connection_zero_eps_starts_at_base_point() {
        let sys = RadialCycle::default();
        let layout = ParamLayout::for_system(&sys);
        let cycle = radial_cycle_solution(&layout, 16, 4);
        let v0 = [0.0, 0.0, 1.0];
        let conn = seed_connection(
            &sys,
            &[0.0],
            &cycle,
            &v0,
            0.0,
            5.0,
            Mesh::uniform(10, 4),
            1e-10,
        )
        .unwrap();
        let u0 = conn.u.point(0);
        let x0 = cycle.base_point();
        for k in 0..3 {
            assert!((u0[k] - x0[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn seed_connection_follows_the_flow() {
        // from a point off the invariant plane, the z-component decays like
        // exp(-zeta t)
        let sys = RadialCycle::default();
        let layout = ParamLayout::for_system(&sys);
        let cycle = radial_cycle_solution(&layout, 16, 4);
        let v0 = [0.0, 0.0, 1.0];
        let eps = 0.5;
        let t_seed = 3.0;
        let conn = seed_connection(
            &sys,
            &[0.0],
            &cycle,
            &v0,
            eps,
            t_seed,
            Mesh::uniform(20, 4),
            1e-10,
        )
        .unwrap();
        let mut end = [0.0; 3];
        conn.u.interpolate(1.0, &mut end).unwrap();
        let expect = eps * (-0.7 * t_seed).exp();
        assert!((end[2] - expect).abs() < 1e-6, "z(T) = {} vs {}", end[2], expect);
    }

    #[test]
    fn composite_assembly_and_block_split_roundtrip() {
        let sys = RadialCycle::default();
        let layout = ParamLayout::for_system(&sys);
        let cycle = radial_cycle_solution(&layout, 12, 4);
        let wm = AdjointEigenData {
            w: CollocationSolution::from_fn(cycle.x.mesh.clone(), 3, vec![], |_t, out| {
                out.copy_from_slice(&[0.0, 0.0, 1.0]);
            }),
            lambda: 0.7 * 2.0 * std::f64::consts::PI,
            sign: 1.0,
        };
        let wp = wm.clone();
        let conn = ConnectionData {
            u: CollocationSolution::from_fn(cycle.x.mesh.clone(), 3, vec![], |tau, out| {
                out.copy_from_slice(&[tau, -tau, 0.5]);
            }),
            t_conn: 12.0,
            eps: 0.1,
        };
        let comp = assemble_composite(&sys, &[0.0], &cycle, &cycle, &wm, &wp, &conn, 0.01);
        assert_eq!(comp.n_dim, 15);
        assert_eq!(comp.beta[layout.t_conn()], 12.0);
        let ublock = split_composite(&comp, 4);
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        ublock.interpolate(0.37, &mut a).unwrap();
        conn.u.interpolate(0.37, &mut b).unwrap();
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
        // file round trip with the block metadata line
        let text = write_composite(&comp, 5);
        assert!(text.starts_with("# blocks"));
        let (back, n_fp) = read_composite(&text).unwrap();
        assert_eq!(n_fp, 5);
        assert_eq!(back.values, comp.values);
    }

    #[test]
    fn excursion_counter_on_synthetic_orbit() {
        let sys = RadialCycle::default();
        let layout = ParamLayout::for_system(&sys);
        let cycle = radial_cycle_solution(&layout, 24, 4);
        // an excursion away from the cycle followed by three near-cycle
        // windings; only the windings after the farthest point count, two
        // section crossings each
        let u = CollocationSolution::from_fn(Mesh::uniform(120, 4), 3, vec![], |tau, out| {
            if tau < 0.25 {
                // bump out to distance ~3 and back
                let s = (std::f64::consts::PI * tau / 0.25).sin();
                out[0] = 1.0 + 3.0 * s;
                out[1] = 0.1;
                out[2] = 0.0;
            } else {
                let local = (tau - 0.25) / 0.75;
                // phase offset keeps the endpoints off the section plane
                let a = 3.0 * 2.0 * std::f64::consts::PI * local + 0.4;
                out[0] = 1.02 * a.cos();
                out[1] = 1.02 * a.sin();
                out[2] = 0.0;
            }
        });
        let n = count_end_excursions(&sys, &[0.0], &u, &cycle, 0.5);
        assert_eq!(n, 6, "three tail windings cross the section plane six times");
        // a far-away orbit contributes nothing
        let far = CollocationSolution::from_fn(Mesh::uniform(20, 4), 3, vec![], |tau, out| {
            out.copy_from_slice(&[5.0 + tau, 5.0, 5.0]);
        });
        assert_eq!(count_end_excursions(&sys, &[0.0], &far, &cycle, 0.5), 0);
        let _ = NoRef;
    }
}
