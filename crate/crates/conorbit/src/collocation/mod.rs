//! Piecewise-polynomial orthogonal collocation for boundary value problems
//!
//! ```text
//!   U'(tau) = F(U(tau), beta),  tau in [0,1]
//!   b(U(0), U(1), beta) = 0                      (n_bc conditions)
//!   int_0^1 q_c(U(tau), beta, ref(tau)) dtau = 0 (n_ic constraints)
//! ```
//!
//! with the counting rule `n_fp = n_bc + n_ic - n_d + 1` for the number of
//! free parameters. The solution is represented per mesh interval by its
//! values at m+1 equispaced points (shared endpoints give C0 continuity),
//! collocated at the m Gauss points of each interval.

mod adapt;
mod assemble;
mod io;
mod newton;

pub use adapt::adapt_mesh;
pub use assemble::{
    apply_update, assemble_system, eval_residual, pack_state, sample_refs, Assembled, ClosureRow,
};
pub use io::{read_solution, write_solution};
pub use newton::{newton_correct, newton_solve, NewtonSettings, SolveReport};

use crate::quad::CollocTables;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CollocationError {
    #[error(
        "free-parameter count violates n_fp = n_bc + n_ic - n_d + 1: \
         n_d={n_dim}, n_bc={n_bc}, n_ic={n_ic} requires {expected}, got {got}"
    )]
    CountingViolation { n_dim: usize, n_bc: usize, n_ic: usize, expected: isize, got: usize },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("tau = {0} outside [0, 1]")]
    TauOutOfRange(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Newton did not converge after {iterations} iterations, residual {residual:.3e}")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("singular collocation Jacobian: {0}")]
    SingularJacobian(String),
    #[error("solution file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type RhsFn = Box<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// State Jacobian dF/dU, row-major n_d x n_d.
pub type RhsJacUFn = Box<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Jacobian columns dF/dbeta[a] for the listed beta indices, row-major
/// n_d x len(active).
pub type RhsJacPFn = Box<dyn Fn(&[f64], &[f64], &[usize], &mut [f64]) + Send + Sync>;
/// Boundary conditions b(U0, U1, beta), n_bc values.
pub type BcFn = Box<dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Boundary condition Jacobian: fills db/dU0 (n_bc x n_d), db/dU1 (n_bc x n_d)
/// and db/dbeta[active] (n_bc x len(active)), all row-major.
pub type BcJacFn =
    Box<dyn Fn(&[f64], &[f64], &[f64], &[usize], &mut [f64], &mut [f64], &mut [f64]) + Send + Sync>;

/// One integral constraint: integrand q(U(tau), beta, ref(tau)).
pub struct IntegralConstraint {
    pub integrand: Box<dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync>,
    /// dq/dU; finite differences when absent.
    pub jac_u: Option<Box<dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>>,
    /// dq/dbeta over active indices; finite differences when absent.
    pub jac_p: Option<Box<dyn Fn(&[f64], &[f64], &[f64], &[usize], &mut [f64]) + Send + Sync>>,
}

/// Generic boundary value problem in the form solved by this module.
pub struct BvpSpec {
    pub n_dim: usize,
    pub n_beta: usize,
    pub n_bc: usize,
    pub rhs: RhsFn,
    pub rhs_jac_u: Option<RhsJacUFn>,
    pub rhs_jac_p: Option<RhsJacPFn>,
    pub bc: BcFn,
    pub bc_jac: Option<BcJacFn>,
    pub ics: Vec<IntegralConstraint>,
    /// Indices into beta of the n_fp free parameters. The first entry is the
    /// principal continuation parameter; a plain Newton solve keeps it pinned.
    pub free_params: Vec<usize>,
}

impl BvpSpec {
    pub fn new(
        n_dim: usize,
        n_beta: usize,
        n_bc: usize,
        rhs: RhsFn,
        bc: BcFn,
        ics: Vec<IntegralConstraint>,
        free_params: Vec<usize>,
    ) -> Result<Self, CollocationError> {
        let n_ic = ics.len();
        let expected = n_bc as isize + n_ic as isize - n_dim as isize + 1;
        if expected < 0 || free_params.len() != expected as usize {
            return Err(CollocationError::CountingViolation {
                n_dim,
                n_bc,
                n_ic,
                expected,
                got: free_params.len(),
            });
        }
        for &p in &free_params {
            if p >= n_beta {
                return Err(CollocationError::DimensionMismatch(format!(
                    "free parameter index {p} out of range (n_beta={n_beta})"
                )));
            }
        }
        Ok(BvpSpec {
            n_dim,
            n_beta,
            n_bc,
            rhs,
            rhs_jac_u: None,
            rhs_jac_p: None,
            bc,
            bc_jac: None,
            ics,
            free_params,
        })
    }

    pub fn with_rhs_jacobians(mut self, jac_u: RhsJacUFn, jac_p: RhsJacPFn) -> Self {
        self.rhs_jac_u = Some(jac_u);
        self.rhs_jac_p = Some(jac_p);
        self
    }

    pub fn with_bc_jacobian(mut self, jac: BcJacFn) -> Self {
        self.bc_jac = Some(jac);
        self
    }

    pub fn n_ic(&self) -> usize {
        self.ics.len()
    }

    pub fn n_fp(&self) -> usize {
        self.free_params.len()
    }
}

/// Collocation mesh on [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    /// Interval endpoints, strictly increasing, taus[0] = 0, taus[N] = 1.
    pub taus: Vec<f64>,
    /// Gauss points per interval, 2..=7.
    pub m: usize,
}

impl Mesh {
    pub fn uniform(n_intervals: usize, m: usize) -> Self {
        let taus = (0..=n_intervals).map(|i| i as f64 / n_intervals as f64).collect();
        let mesh = Mesh { taus, m };
        mesh.validate().expect("uniform mesh is valid");
        mesh
    }

    pub fn n_intervals(&self) -> usize {
        self.taus.len() - 1
    }

    pub fn validate(&self) -> Result<(), CollocationError> {
        if self.n_intervals() < 2 {
            return Err(CollocationError::InvalidMesh("need at least 2 intervals".into()));
        }
        if !(2..=7).contains(&self.m) {
            return Err(CollocationError::InvalidMesh(format!("m = {} not in 2..=7", self.m)));
        }
        if (self.taus[0]).abs() > 1e-14 || (self.taus[self.n_intervals()] - 1.0).abs() > 1e-14 {
            return Err(CollocationError::InvalidMesh("mesh must span [0, 1]".into()));
        }
        for i in 1..self.taus.len() {
            if self.taus[i] <= self.taus[i - 1] {
                return Err(CollocationError::InvalidMesh("mesh not strictly increasing".into()));
            }
        }
        Ok(())
    }

    /// Fine (representation) points: m per interval plus the final endpoint.
    pub fn fine_taus(&self) -> Vec<f64> {
        let n = self.n_intervals();
        let mut out = Vec::with_capacity(n * self.m + 1);
        for i in 0..n {
            let h = self.taus[i + 1] - self.taus[i];
            for j in 0..self.m {
                out.push(self.taus[i] + h * j as f64 / self.m as f64);
            }
        }
        out.push(self.taus[n]);
        out
    }

    /// Index of the interval containing tau.
    pub fn locate(&self, tau: f64) -> usize {
        let n = self.n_intervals();
        match self.taus.binary_search_by(|t| t.partial_cmp(&tau).unwrap()) {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }
}

/// A BVP solution: mesh plus the per-interval degree-m vector polynomial,
/// stored as values at the fine points, plus the full parameter vector.
#[derive(Clone, Debug)]
pub struct CollocationSolution {
    pub mesh: Mesh,
    pub n_dim: usize,
    /// (N*m + 1) * n_dim values, point-major.
    pub values: Vec<f64>,
    pub beta: Vec<f64>,
}

impl CollocationSolution {
    pub fn n_points(&self) -> usize {
        self.mesh.n_intervals() * self.mesh.m + 1
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_dim..(k + 1) * self.n_dim]
    }

    pub fn point_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.n_dim..(k + 1) * self.n_dim]
    }

    /// Build from a function of tau evaluated at the fine points.
    pub fn from_fn(
        mesh: Mesh,
        n_dim: usize,
        beta: Vec<f64>,
        mut f: impl FnMut(f64, &mut [f64]),
    ) -> Self {
        let fine = mesh.fine_taus();
        let mut values = vec![0.0; fine.len() * n_dim];
        for (k, &tau) in fine.iter().enumerate() {
            f(tau, &mut values[k * n_dim..(k + 1) * n_dim]);
        }
        CollocationSolution { mesh, n_dim, values, beta }
    }

    /// Evaluate the piecewise polynomial at tau.
    pub fn interpolate(&self, tau: f64, out: &mut [f64]) -> Result<(), CollocationError> {
        if !(-1e-12..=1.0 + 1e-12).contains(&tau) {
            return Err(CollocationError::TauOutOfRange(tau));
        }
        let tau = tau.clamp(0.0, 1.0);
        let i = self.mesh.locate(tau);
        let m = self.mesh.m;
        let h = self.mesh.taus[i + 1] - self.mesh.taus[i];
        let s = (tau - self.mesh.taus[i]) / h;
        // exact at representation points
        for j in 0..=m {
            if (s - j as f64 / m as f64).abs() < 5e-15 {
                out.copy_from_slice(self.point(i * m + j));
                return Ok(());
            }
        }
        let nodes: Vec<f64> = (0..=m).map(|j| j as f64 / m as f64).collect();
        let mut basis = vec![0.0; m + 1];
        crate::quad::lagrange_values(&nodes, s, &mut basis);
        out.fill(0.0);
        for (j, &bj) in basis.iter().enumerate() {
            let p = self.point(i * m + j);
            for (o, &v) in out.iter_mut().zip(p) {
                *o += bj * v;
            }
        }
        Ok(())
    }

    /// d/dtau of the piecewise polynomial at tau.
    pub fn interpolate_derivative(&self, tau: f64, out: &mut [f64]) -> Result<(), CollocationError> {
        if !(-1e-12..=1.0 + 1e-12).contains(&tau) {
            return Err(CollocationError::TauOutOfRange(tau));
        }
        let tau = tau.clamp(0.0, 1.0);
        let i = self.mesh.locate(tau);
        let m = self.mesh.m;
        let h = self.mesh.taus[i + 1] - self.mesh.taus[i];
        let s = (tau - self.mesh.taus[i]) / h;
        let nodes: Vec<f64> = (0..=m).map(|j| j as f64 / m as f64).collect();
        let mut basis = vec![0.0; m + 1];
        crate::quad::lagrange_derivatives(&nodes, s, &mut basis);
        out.fill(0.0);
        for (j, &bj) in basis.iter().enumerate() {
            let p = self.point(i * m + j);
            for (o, &v) in out.iter_mut().zip(p) {
                *o += bj * v / h;
            }
        }
        Ok(())
    }

    /// L2 norm of the solution values (quadrature-weighted) over [0,1].
    pub fn l2_norm(&self) -> f64 {
        let tables = CollocTables::new(self.mesh.m);
        let m = self.mesh.m;
        let mut acc = 0.0;
        let mut ubuf = vec![0.0; self.n_dim];
        for i in 0..self.mesh.n_intervals() {
            let h = self.mesh.taus[i + 1] - self.mesh.taus[i];
            for l in 0..m {
                let vals = tables.vals_at(l);
                ubuf.fill(0.0);
                for (j, &vj) in vals.iter().enumerate() {
                    let p = self.point(i * m + j);
                    for (o, &v) in ubuf.iter_mut().zip(p) {
                        *o += vj * v;
                    }
                }
                let s2: f64 = ubuf.iter().map(|x| x * x).sum();
                acc += tables.weights[l] * h * s2;
            }
        }
        acc.sqrt()
    }
}

/// Reference data sampled along tau for integral constraints.
pub trait RefSource {
    fn dim(&self) -> usize;
    fn sample(&self, tau: f64, out: &mut [f64]);
}

/// No reference data (specs without integral constraints).
pub struct NoRef;

impl RefSource for NoRef {
    fn dim(&self) -> usize {
        0
    }
    fn sample(&self, _tau: f64, _out: &mut [f64]) {}
}

/// Previous-step solution as reference: provides [U_old(tau), U_old'(tau)].
pub struct SolutionRef<'a> {
    pub sol: &'a CollocationSolution,
}

impl RefSource for SolutionRef<'_> {
    fn dim(&self) -> usize {
        2 * self.sol.n_dim
    }
    fn sample(&self, tau: f64, out: &mut [f64]) {
        let nd = self.sol.n_dim;
        self.sol.interpolate(tau, &mut out[..nd]).expect("tau in range");
        self.sol.interpolate_derivative(tau, &mut out[nd..]).expect("tau in range");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_rule_enforced_at_construction() {
        let rhs: RhsFn = Box::new(|_u, _b, out| out[0] = 0.0);
        let bc: BcFn = Box::new(|u0, _u1, _b, out| out[0] = u0[0]);
        // n_d=1, n_bc=1, n_ic=0 -> n_fp must be 1
        let bad = BvpSpec::new(
            1,
            2,
            1,
            Box::new(|_u, _b, out| out[0] = 0.0),
            Box::new(|u0, _u1, _b, out| out[0] = u0[0]),
            vec![],
            vec![0, 1],
        );
        assert!(matches!(bad, Err(CollocationError::CountingViolation { .. })));
        let good = BvpSpec::new(1, 2, 1, rhs, bc, vec![], vec![0]);
        assert!(good.is_ok());
    }

    #[test]
    fn mesh_validation() {
        assert!(Mesh { taus: vec![0.0, 0.5, 1.0], m: 4 }.validate().is_ok());
        assert!(Mesh { taus: vec![0.0, 1.0], m: 4 }.validate().is_err());
        assert!(Mesh { taus: vec![0.0, 0.6, 0.5, 1.0], m: 4 }.validate().is_err());
        assert!(Mesh { taus: vec![0.0, 0.5, 1.0], m: 1 }.validate().is_err());
        assert!(Mesh { taus: vec![0.0, 0.5, 1.0], m: 8 }.validate().is_err());
    }

    #[test]
    fn interpolation_is_exact_at_fine_points_and_for_polynomials() {
        let mesh = Mesh::uniform(4, 3);
        // linear function reproduced exactly everywhere
        let sol = CollocationSolution::from_fn(mesh.clone(), 2, vec![], |tau, out| {
            out[0] = 2.0 * tau - 0.5;
            out[1] = -tau;
        });
        let mut out = [0.0; 2];
        for &tau in &[0.0, 0.1, 0.33333, 0.5, 0.77, 1.0] {
            sol.interpolate(tau, &mut out).unwrap();
            assert!((out[0] - (2.0 * tau - 0.5)).abs() < 1e-13);
            assert!((out[1] + tau).abs() < 1e-13);
            sol.interpolate_derivative(tau, &mut out).unwrap();
            assert!((out[0] - 2.0).abs() < 1e-11);
            assert!((out[1] + 1.0).abs() < 1e-11);
        }
        // stored value returned exactly at a fine point
        let fine = mesh.fine_taus();
        sol.interpolate(fine[5], &mut out).unwrap();
        assert_eq!(out[0], sol.point(5)[0]);
        // out of range
        assert!(sol.interpolate(1.5, &mut out).is_err());
    }
}
