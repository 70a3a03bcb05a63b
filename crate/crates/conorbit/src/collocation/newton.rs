//! Damped Newton iteration on the collocation equations.

use super::assemble::{apply_update, assemble_system, eval_residual, sample_refs, ClosureRow};
use super::{BvpSpec, CollocationError, CollocationSolution, RefSource};
use crate::linalg::{norm_inf, AbdLu};
use crate::quad::CollocTables;

#[derive(Clone, Copy, Debug)]
pub struct NewtonSettings {
    pub max_iterations: usize,
    /// Max-norm residual at which a solve counts as converged.
    pub residual_tol: f64,
    /// Step size below which stagnation is declared.
    pub step_tol: f64,
    /// Number of step halvings tried when the residual fails to decrease.
    pub max_halvings: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings { max_iterations: 20, residual_tol: 1e-10, step_tol: 1e-14, max_halvings: 8 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_residual: f64,
    /// Max-norm residual before each iteration plus the final one.
    pub residuals: Vec<f64>,
    pub damped_steps: usize,
}

impl SolveReport {
    /// Constant C with r_end <= C r_prev^2 over the last pair, a cheap
    /// Newton-quadratic-tail diagnostic.
    pub fn quadratic_tail_constant(&self) -> Option<f64> {
        let n = self.residuals.len();
        if n < 2 {
            return None;
        }
        let (r_prev, r_end) = (self.residuals[n - 2], self.residuals[n - 1]);
        if r_prev <= 0.0 {
            return None;
        }
        Some(r_end / (r_prev * r_prev))
    }
}

/// Newton correction with fixed closure rows. Used by the plain solver and by
/// the continuation corrector.
pub fn newton_correct(
    spec: &BvpSpec,
    sol: &mut CollocationSolution,
    active: &[usize],
    refs: &[f64],
    ref_dim: usize,
    closures: &[ClosureRow],
    tables: &CollocTables,
    settings: &NewtonSettings,
) -> Result<SolveReport, CollocationError> {
    let mut report = SolveReport::default();
    let mut res = eval_residual(spec, sol, active, refs, ref_dim, closures, tables)?;
    let mut rnorm = norm_inf(&res);
    report.residuals.push(rnorm);

    for it in 0..settings.max_iterations {
        if rnorm <= settings.residual_tol {
            report.iterations = it;
            report.final_residual = rnorm;
            return Ok(report);
        }
        let asm = assemble_system(spec, sol, active, refs, ref_dim, closures, tables)?;
        let lu = AbdLu::factor(&asm.abd)
            .map_err(|e| CollocationError::SingularJacobian(e.to_string()))?;
        let delta = lu.solve(&res);

        // damped step: halve until the residual decreases
        let mut scale = 1.0;
        let mut accepted = false;
        for k in 0..=settings.max_halvings {
            apply_update(sol, active, &delta, scale);
            let trial = eval_residual(spec, sol, active, refs, ref_dim, closures, tables)?;
            let tnorm = norm_inf(&trial);
            if tnorm.is_finite() && (tnorm < rnorm || tnorm <= settings.residual_tol) {
                res = trial;
                rnorm = tnorm;
                accepted = true;
                if k > 0 {
                    report.damped_steps += 1;
                }
                break;
            }
            // undo and halve
            apply_update(sol, active, &delta, -scale);
            scale *= 0.5;
        }
        report.residuals.push(rnorm);
        if !accepted {
            return Err(CollocationError::NonConvergence { iterations: it + 1, residual: rnorm });
        }
        let step = norm_inf(&delta) * scale;
        if step < settings.step_tol && rnorm > settings.residual_tol {
            return Err(CollocationError::NonConvergence { iterations: it + 1, residual: rnorm });
        }
    }
    if rnorm <= settings.residual_tol {
        report.iterations = settings.max_iterations;
        report.final_residual = rnorm;
        return Ok(report);
    }
    Err(CollocationError::NonConvergence { iterations: settings.max_iterations, residual: rnorm })
}

/// Solve the BVP from an initial guess, keeping the principal continuation
/// parameter (free_params[0]) pinned at its current value.
pub fn newton_solve(
    spec: &BvpSpec,
    sol0: &CollocationSolution,
    refs: &dyn RefSource,
    settings: &NewtonSettings,
) -> Result<(CollocationSolution, SolveReport), CollocationError> {
    sol0.mesh.validate()?;
    if sol0.beta.len() != spec.n_beta {
        return Err(CollocationError::DimensionMismatch(format!(
            "beta length {} vs spec {}",
            sol0.beta.len(),
            spec.n_beta
        )));
    }
    let tables = CollocTables::new(sol0.mesh.m);
    let refs_sampled = sample_refs(refs, &sol0.mesh, &tables);
    let active = spec.free_params.clone();
    let mut sol = sol0.clone();
    let pin = ClosureRow::Pin { slot: 0, value: sol.beta[active[0]] };
    let report = newton_correct(
        spec,
        &mut sol,
        &active,
        &refs_sampled,
        refs.dim(),
        &[pin],
        &tables,
        settings,
    )?;
    Ok((sol, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collocation::{BvpSpec, Mesh, NoRef};

    /// U' = lambda U, bc U(0) = 1, U(1) = c with c = 2 pinned; lambda free.
    /// Converges to lambda = ln 2.
    #[test]
    fn scalar_eigenvalue_problem_converges_to_ln2() {
        let spec = BvpSpec::new(
            1,
            2,
            2,
            Box::new(|u, b, out| out[0] = b[1] * u[0]),
            Box::new(|u0, u1, b, out| {
                out[0] = u0[0] - 1.0;
                out[1] = u1[0] - b[0];
            }),
            vec![],
            vec![0, 1], // principal: c (pinned in plain solve); lambda free
        )
        .unwrap();
        let mesh = Mesh::uniform(8, 4);
        let sol0 = CollocationSolution::from_fn(mesh, 1, vec![2.0, 0.5], |_tau, out| out[0] = 1.0);
        let (sol, report) = newton_solve(&spec, &sol0, &NoRef, &NewtonSettings::default()).unwrap();
        assert!((sol.beta[1] - 2.0_f64.ln()).abs() < 1e-10, "lambda = {}", sol.beta[1]);
        assert!(report.final_residual <= 1e-10);
        // solution profile is 2^tau
        let mut out = [0.0];
        sol.interpolate(0.5, &mut out).unwrap();
        assert!((out[0] - 2.0_f64.sqrt()).abs() < 1e-9);
    }

    /// Newton quadratic tail: on a converged run the last two residuals
    /// satisfy r_next <= C r_prev^2 with moderate C.
    #[test]
    fn quadratic_convergence_tail() {
        let spec = BvpSpec::new(
            1,
            2,
            2,
            Box::new(|u, b, out| out[0] = b[1] * u[0] * (1.0 + 0.1 * u[0])),
            Box::new(|u0, u1, b, out| {
                out[0] = u0[0] - 1.0;
                out[1] = u1[0] - b[0];
            }),
            vec![],
            vec![0, 1],
        )
        .unwrap();
        let mesh = Mesh::uniform(10, 4);
        let sol0 = CollocationSolution::from_fn(mesh, 1, vec![2.0, 0.6], |_t, out| out[0] = 1.2);
        let (_sol, report) =
            newton_solve(&spec, &sol0, &NoRef, &NewtonSettings::default()).unwrap();
        // pick the last pair above roundoff level
        let rs: Vec<f64> = report.residuals.iter().copied().filter(|r| *r > 1e-14).collect();
        assert!(rs.len() >= 2, "need at least two residuals: {rs:?}");
        let c = rs[rs.len() - 1] / (rs[rs.len() - 2] * rs[rs.len() - 2]);
        assert!(c < 1e3, "quadratic tail constant {c} (history {rs:?})");
    }

    #[test]
    fn nonconvergence_reported() {
        // U' = beta1 U with impossible boundary data and no useful freedom:
        // U(0)=1, U(1)=-1 cannot be met by an exponential; lambda diverges.
        let spec = BvpSpec::new(
            1,
            2,
            2,
            Box::new(|u, b, out| out[0] = b[1] * u[0]),
            Box::new(|u0, u1, b, out| {
                out[0] = u0[0] - 1.0;
                out[1] = u1[0] - b[0];
            }),
            vec![],
            vec![0, 1],
        )
        .unwrap();
        let mesh = Mesh::uniform(6, 3);
        let sol0 = CollocationSolution::from_fn(mesh, 1, vec![-1.0, 0.1], |_t, out| out[0] = 1.0);
        let r = newton_solve(
            &spec,
            &sol0,
            &NoRef,
            &NewtonSettings { max_iterations: 12, ..Default::default() },
        );
        assert!(matches!(r, Err(CollocationError::NonConvergence { .. })), "{r:?}");
    }
}
