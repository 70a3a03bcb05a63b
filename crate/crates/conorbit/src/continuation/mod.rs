//! Pseudo-arclength continuation of BVP solution families with fold,
//! branch-point and user-condition detection.

mod equilibrium;
mod fold;
mod switch;

pub use equilibrium::{
    continue_equilibrium, cycle_guess_from_hopf, detect_hopf, EquilibriumBranch, HopfPoint,
};
pub use fold::{fold_follow, one_param_fold_residual, FoldProblem};
pub use switch::switch_at_branch_point;

use crate::collocation::{
    assemble_system, newton_correct, pack_state, sample_refs, BvpSpec, ClosureRow,
    CollocationError, CollocationSolution, NewtonSettings, RefSource, SolutionRef,
};
use crate::linalg::AbdLu;
use crate::quad::CollocTables;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContinuationError {
    #[error("step size underflow (ds = {ds:.3e}) after {accepted} accepted points")]
    StepUnderflow { ds: f64, accepted: usize },
    #[error("failed to converge the starting point: {0}")]
    BadStart(CollocationError),
    #[error("null space is not two-dimensional at the branch point ({0})")]
    NullSpaceDimension(String),
    #[error("bordering vectors produced a singular system")]
    BorderingSingular,
    #[error("test function localization failed: {0}")]
    Localization(String),
    #[error(transparent)]
    Collocation(#[from] CollocationError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointLabel {
    Regular,
    Fold,
    Branch,
    Hopf,
    User,
    Endpoint,
}

impl PointLabel {
    pub fn code(&self) -> &'static str {
        match self {
            PointLabel::Regular => "RG",
            PointLabel::Fold => "LP",
            PointLabel::Branch => "BP",
            PointLabel::Hopf => "HB",
            PointLabel::User => "UZ",
            PointLabel::Endpoint => "EP",
        }
    }
}

/// Accepted continuation point with its unit tangent and test-function data.
#[derive(Clone, Debug)]
pub struct BranchPoint {
    pub sol: CollocationSolution,
    /// Unit tangent in the weighted inner product, [values, active params].
    pub tangent: Vec<f64>,
    /// Fold test: tangent component along the principal free parameter.
    pub fold_test: f64,
    /// Branch-point test: sign and log-magnitude of det of the bordered Jacobian.
    pub det_sign: f64,
    pub det_logabs: f64,
    pub label: PointLabel,
    /// Arclength step that produced this point (0 for the start).
    pub ds_used: f64,
}

/// An ordered family of accepted points.
pub struct Branch {
    pub points: Vec<BranchPoint>,
    pub active: Vec<usize>,
    /// Why stepping ended.
    pub termination: String,
}

impl Branch {
    pub fn labeled(&self, label: PointLabel) -> impl Iterator<Item = &BranchPoint> {
        self.points.iter().filter(move |p| p.label == label)
    }
}

/// Record or stop when a parameter value crosses a target.
#[derive(Clone, Copy, Debug)]
pub struct UserCondition {
    /// Index into beta.
    pub param: usize,
    pub target: f64,
    /// Stop the branch at the localized crossing.
    pub stop: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct StepControl {
    pub ds0: f64,
    pub ds_min: f64,
    pub ds_max: f64,
    /// Growth factor applied after easy corrector convergence.
    pub grow: f64,
    /// Iteration count at or below which the step grows.
    pub grow_iters: usize,
    pub max_steps: usize,
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl { ds0: 0.01, ds_min: 1e-6, ds_max: 0.5, grow: 1.3, grow_iters: 3, max_steps: 200 }
    }
}

#[derive(Clone, Debug)]
pub struct ContinuationOptions {
    pub step: StepControl,
    pub newton: NewtonSettings,
    pub detect_folds: bool,
    pub detect_branch_points: bool,
    pub user_conditions: Vec<UserCondition>,
    /// Refresh integral-constraint reference data from each accepted point.
    pub update_reference: bool,
    /// Redistribute the mesh every `adapt_every` accepted steps (0 = never).
    pub adapt_every: usize,
    /// |phi| tolerance for localized sign changes.
    pub test_tol: f64,
    /// Weight of the state part relative to parameters in the arclength metric.
    pub state_weight: f64,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        ContinuationOptions {
            step: StepControl::default(),
            newton: NewtonSettings::default(),
            detect_folds: true,
            detect_branch_points: false,
            user_conditions: Vec::new(),
            update_reference: true,
            adapt_every: 1,
            test_tol: 1e-8,
            state_weight: 1.0,
        }
    }
}

/// Trapezoid weights over the fine points (summing to ~1 per component),
/// extended by unit weights for the active parameters.
pub fn continuation_weights(
    sol: &CollocationSolution,
    n_active: usize,
    state_weight: f64,
) -> Vec<f64> {
    let fine = sol.mesh.fine_taus();
    let n = fine.len();
    let nd = sol.n_dim;
    let mut w = Vec::with_capacity(n * nd + n_active);
    for k in 0..n {
        let left = if k == 0 { fine[0] } else { fine[k - 1] };
        let right = if k == n - 1 { fine[n - 1] } else { fine[k + 1] };
        let wk = state_weight * 0.5 * (right - left);
        for _ in 0..nd {
            w.push(wk);
        }
    }
    for _ in 0..n_active {
        w.push(1.0);
    }
    w
}

pub(crate) fn weighted_norm(w: &[f64], v: &[f64]) -> f64 {
    v.iter().zip(w).map(|(x, wk)| wk * x * x).sum::<f64>().sqrt()
}

pub(crate) fn weighted_dot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).zip(w).map(|((x, y), wk)| wk * x * y).sum()
}

pub(crate) struct Evaluated {
    pub sol: CollocationSolution,
    pub tangent: Vec<f64>,
    pub fold_test: f64,
    pub det_sign: f64,
    pub det_logabs: f64,
}

/// Driver context over one spec and one active-parameter set.
pub(crate) struct Driver<'a> {
    pub spec: &'a BvpSpec,
    pub active: Vec<usize>,
    pub tables: CollocTables,
    pub newton: NewtonSettings,
    pub state_weight: f64,
    pub ref_dim: usize,
    pub refs: Vec<f64>,
    pub ref_sol: Option<CollocationSolution>,
}

impl<'a> Driver<'a> {
    pub fn new(
        spec: &'a BvpSpec,
        m: usize,
        newton: NewtonSettings,
        state_weight: f64,
        reference: Option<&CollocationSolution>,
    ) -> Self {
        Driver {
            spec,
            active: spec.free_params.clone(),
            tables: CollocTables::new(m),
            newton,
            state_weight,
            ref_dim: 0,
            refs: Vec::new(),
            ref_sol: reference.cloned(),
        }
    }

    pub fn weights(&self, sol: &CollocationSolution) -> Vec<f64> {
        continuation_weights(sol, self.active.len(), self.state_weight)
    }

    pub fn resample_refs(&mut self, mesh: &crate::collocation::Mesh) {
        if let Some(ref rs) = self.ref_sol {
            let src = SolutionRef { sol: rs };
            self.ref_dim = src.dim();
            self.refs = sample_refs(&src, mesh, &self.tables);
        }
    }

    /// Converge from a predictor along `tangent` with step `ds`, then compute
    /// the new tangent (oriented along `tangent`) and test functions.
    pub fn converge(
        &mut self,
        base: &CollocationSolution,
        tangent: &[f64],
        ds: f64,
    ) -> Result<Evaluated, CollocationError> {
        let weights = self.weights(base);
        let mut sol = base.clone();
        let nv = sol.values.len();
        for (v, t) in sol.values.iter_mut().zip(&tangent[..nv]) {
            *v += ds * t;
        }
        for (slot, &p) in self.active.iter().enumerate() {
            sol.beta[p] += ds * tangent[nv + slot];
        }
        let y_base = pack_state(base, &self.active);
        {
            let closure = ClosureRow::Arclength { tangent, base: &y_base, weights: &weights, ds };
            newton_correct(
                self.spec,
                &mut sol,
                &self.active,
                &self.refs,
                self.ref_dim,
                &[closure],
                &self.tables,
                &self.newton,
            )?;
        }
        self.evaluate(sol, tangent)
    }

    /// Tangent and test functions at a converged solution.
    pub fn evaluate(
        &self,
        sol: CollocationSolution,
        prev_tangent: &[f64],
    ) -> Result<Evaluated, CollocationError> {
        let weights = self.weights(&sol);
        let y = pack_state(&sol, &self.active);
        let closure =
            ClosureRow::Arclength { tangent: prev_tangent, base: &y, weights: &weights, ds: 0.0 };
        let asm = assemble_system(
            self.spec,
            &sol,
            &self.active,
            &self.refs,
            self.ref_dim,
            &[closure],
            &self.tables,
        )?;
        let lu = AbdLu::factor(&asm.abd)
            .map_err(|e| CollocationError::SingularJacobian(e.to_string()))?;
        let n = asm.abd.n();
        let mut rhs = vec![0.0; n];
        rhs[n - 1] = 1.0;
        let mut t = lu.solve(&rhs);
        let nrm = weighted_norm(&weights, &t);
        if !nrm.is_finite() || nrm == 0.0 {
            return Err(CollocationError::SingularJacobian("tangent norm".into()));
        }
        for v in t.iter_mut() {
            *v /= nrm;
        }
        if weighted_dot(&weights, &t, prev_tangent) < 0.0 {
            for v in t.iter_mut() {
                *v = -*v;
            }
        }
        let (det_sign, det_logabs) = lu.logdet();
        let nv = sol.values.len();
        let fold_test = t[nv];
        Ok(Evaluated { sol, tangent: t, fold_test, det_sign, det_logabs })
    }
}

/// Continue a solution family from a converged start point.
///
/// `direction` (+1/-1) picks the branch direction via the sign of the
/// principal-parameter tangent component (or the largest parameter component
/// when that vanishes).
pub fn continue_branch(
    spec: &BvpSpec,
    start: &CollocationSolution,
    reference: Option<&CollocationSolution>,
    direction: f64,
    opts: &ContinuationOptions,
) -> Result<Branch, ContinuationError> {
    let mut driver = Driver::new(spec, start.mesh.m, opts.newton, opts.state_weight, reference);
    driver.resample_refs(&start.mesh);

    // converge the start point with the principal parameter pinned
    let mut sol0 = start.clone();
    let active = driver.active.clone();
    {
        let pin = ClosureRow::Pin { slot: 0, value: sol0.beta[active[0]] };
        newton_correct(
            spec,
            &mut sol0,
            &active,
            &driver.refs,
            driver.ref_dim,
            &[pin],
            &driver.tables,
            &opts.newton,
        )
        .map_err(ContinuationError::BadStart)?;
    }

    // initial tangent, oriented by the requested direction
    let nv = sol0.values.len();
    let mut seed = vec![0.0; nv + active.len()];
    seed[nv] = 1.0;
    let ev0 = driver.evaluate(sol0, &seed)?;
    let mut t0 = ev0.tangent.clone();
    let principal = t0[nv];
    let orient = if principal.abs() > 1e-12 {
        direction * principal.signum()
    } else {
        let maxc =
            t0[nv..].iter().cloned().fold(0.0_f64, |a, b| if b.abs() > a.abs() { b } else { a });
        direction * if maxc != 0.0 { maxc.signum() } else { 1.0 }
    };
    if orient < 0.0 {
        for v in t0.iter_mut() {
            *v = -*v;
        }
    }
    let first = BranchPoint {
        fold_test: t0[nv],
        det_sign: ev0.det_sign,
        det_logabs: ev0.det_logabs,
        tangent: t0,
        sol: ev0.sol,
        label: PointLabel::Endpoint,
        ds_used: 0.0,
    };
    continue_from(driver, first, opts)
}

/// Continue from a point with a caller-supplied tangent (used after branch
/// switching). The start may sit exactly at a branch point, where the
/// bordered Jacobian is singular, so the driver first takes a small step
/// along the tangent and converges there before evaluating anything.
pub fn continue_branch_with_tangent(
    spec: &BvpSpec,
    start: &CollocationSolution,
    tangent: Vec<f64>,
    reference: Option<&CollocationSolution>,
    opts: &ContinuationOptions,
) -> Result<Branch, ContinuationError> {
    let mut driver = Driver::new(spec, start.mesh.m, opts.newton, opts.state_weight, reference);
    driver.resample_refs(&start.mesh);
    let mut ds = opts.step.ds0;
    let ev = loop {
        match driver.converge(start, &tangent, ds) {
            Ok(ev) => break ev,
            Err(CollocationError::NonConvergence { .. })
            | Err(CollocationError::SingularJacobian(_)) => {
                ds *= 0.5;
                if ds < opts.step.ds_min {
                    return Err(ContinuationError::StepUnderflow { ds, accepted: 0 });
                }
            }
            Err(e) => return Err(e.into()),
        }
    };
    let first = BranchPoint {
        fold_test: ev.tangent[start.values.len()],
        det_sign: ev.det_sign,
        det_logabs: ev.det_logabs,
        tangent: ev.tangent,
        sol: ev.sol,
        label: PointLabel::Endpoint,
        ds_used: ds,
    };
    continue_from(driver, first, opts)
}

fn continue_from(
    mut driver: Driver,
    first: BranchPoint,
    opts: &ContinuationOptions,
) -> Result<Branch, ContinuationError> {
    let active = driver.active.clone();
    let mut points = vec![first];
    let mut ds = opts.step.ds0;
    let mut termination = String::from("max steps reached");
    let mut accepted_since_adapt = 0usize;

    if opts.update_reference && driver.spec.n_ic() > 0 {
        driver.ref_sol = Some(points[0].sol.clone());
        let mesh = points[0].sol.mesh.clone();
        driver.resample_refs(&mesh);
    }

    'outer: for _step in 0..opts.step.max_steps {
        let (prev_sol, prev_tan) = {
            let prev = points.last().unwrap();
            (prev.sol.clone(), prev.tangent.clone())
        };

        let mut attempt = ds;
        let ev = loop {
            match driver.converge(&prev_sol, &prev_tan, attempt) {
                Ok(ev) => break ev,
                Err(CollocationError::NonConvergence { .. })
                | Err(CollocationError::SingularJacobian(_)) => {
                    attempt *= 0.5;
                    if attempt < opts.step.ds_min {
                        termination = format!("step underflow at ds = {attempt:.3e}");
                        break 'outer;
                    }
                }
                Err(e) => return Err(e.into()),
            }
        };

        let mut new_point = BranchPoint {
            fold_test: ev.fold_test,
            det_sign: ev.det_sign,
            det_logabs: ev.det_logabs,
            tangent: ev.tangent,
            sol: ev.sol,
            label: PointLabel::Regular,
            ds_used: attempt,
        };

        let prev_snapshot = points.last().unwrap().clone();
        let mut stop_after: Option<String> = None;

        if opts.detect_folds && prev_snapshot.fold_test * new_point.fold_test < 0.0 {
            match localize(&mut driver, &prev_snapshot, &new_point, attempt, opts, TestKind::Fold) {
                Ok(Some(mut lp)) => {
                    lp.label = PointLabel::Fold;
                    points.push(lp);
                }
                Ok(None) => {}
                Err(e) => {
                    termination = format!("fold localization failed: {e}");
                    break 'outer;
                }
            }
        }
        if opts.detect_branch_points && prev_snapshot.det_sign * new_point.det_sign < 0.0 {
            match localize(
                &mut driver,
                &prev_snapshot,
                &new_point,
                attempt,
                opts,
                TestKind::BranchPoint,
            ) {
                Ok(Some(mut bp)) => {
                    bp.label = PointLabel::Branch;
                    points.push(bp);
                }
                Ok(None) => {}
                Err(e) => {
                    termination = format!("branch point localization failed: {e}");
                    break 'outer;
                }
            }
        }
        for (ci, cond) in opts.user_conditions.iter().enumerate() {
            let a = prev_snapshot.sol.beta[cond.param] - cond.target;
            let b = new_point.sol.beta[cond.param] - cond.target;
            if a * b < 0.0 {
                match localize(
                    &mut driver,
                    &prev_snapshot,
                    &new_point,
                    attempt,
                    opts,
                    TestKind::User(ci),
                ) {
                    Ok(Some(mut up)) => {
                        up.label = PointLabel::User;
                        if cond.stop {
                            new_point = up;
                            stop_after = Some(format!(
                                "user condition beta[{}] = {}",
                                cond.param, cond.target
                            ));
                        } else {
                            points.push(up);
                        }
                    }
                    Ok(None) => {}
                    Err(e) => {
                        termination = format!("user condition localization failed: {e}");
                        break 'outer;
                    }
                }
            }
        }

        points.push(new_point);
        if let Some(reason) = stop_after {
            termination = reason;
            break 'outer;
        }

        if opts.update_reference && driver.spec.n_ic() > 0 {
            driver.ref_sol = Some(points.last().unwrap().sol.clone());
            let mesh = points.last().unwrap().sol.mesh.clone();
            driver.resample_refs(&mesh);
        }
        accepted_since_adapt += 1;
        if opts.adapt_every > 0 && accepted_since_adapt >= opts.adapt_every {
            accepted_since_adapt = 0;
            adapt_last_point(&mut driver, &mut points, &active, opts);
        }

        if attempt >= ds {
            ds = (ds * opts.step.grow).min(opts.step.ds_max);
        } else {
            ds = attempt;
        }
    }

    if let Some(p) = points.last_mut() {
        if p.label == PointLabel::Regular {
            p.label = PointLabel::Endpoint;
        }
    }
    Ok(Branch { points, active, termination })
}

/// Redistribute the mesh of the last accepted point and re-interpolate its
/// solution and tangent. Kept best-effort: failures leave the point as is.
fn adapt_last_point(
    driver: &mut Driver,
    points: &mut [BranchPoint],
    active: &[usize],
    opts: &ContinuationOptions,
) {
    let last = match points.last() {
        Some(p) => p.clone(),
        None => return,
    };
    let adapted = match crate::collocation::adapt_mesh(&last.sol) {
        Ok(a) => a,
        Err(_) => return,
    };
    if adapted.mesh.taus == last.sol.mesh.taus {
        return;
    }
    let nv_old = last.sol.values.len();
    let tan_sol = CollocationSolution {
        mesh: last.sol.mesh.clone(),
        n_dim: last.sol.n_dim,
        values: last.tangent[..nv_old].to_vec(),
        beta: vec![],
    };
    let fine = adapted.mesh.fine_taus();
    let nd = adapted.n_dim;
    let mut tan_new = vec![0.0; fine.len() * nd + active.len()];
    let mut buf = vec![0.0; nd];
    for (k, &tau) in fine.iter().enumerate() {
        if tan_sol.interpolate(tau, &mut buf).is_err() {
            return;
        }
        tan_new[k * nd..(k + 1) * nd].copy_from_slice(&buf);
    }
    tan_new[fine.len() * nd..].copy_from_slice(&last.tangent[nv_old..]);
    let w = continuation_weights(&adapted, active.len(), opts.state_weight);
    let nrm = weighted_norm(&w, &tan_new);
    if nrm <= 0.0 || !nrm.is_finite() {
        return;
    }
    for v in tan_new.iter_mut() {
        *v /= nrm;
    }
    let lastp = points.last_mut().unwrap();
    lastp.sol = adapted;
    lastp.tangent = tan_new;
    if opts.update_reference && driver.spec.n_ic() > 0 {
        driver.ref_sol = Some(lastp.sol.clone());
        let mesh = lastp.sol.mesh.clone();
        driver.resample_refs(&mesh);
    }
}

enum TestKind {
    Fold,
    BranchPoint,
    User(usize),
}

/// Secant localization of a test-function sign change between two accepted
/// points, stepping along the branch from `prev`.
fn localize(
    driver: &mut Driver,
    prev: &BranchPoint,
    next: &BranchPoint,
    ds: f64,
    opts: &ContinuationOptions,
    kind: TestKind,
) -> Result<Option<BranchPoint>, ContinuationError> {
    let logref = prev.det_logabs.max(next.det_logabs);
    let value = |p: &BranchPoint| -> f64 {
        match &kind {
            TestKind::Fold => p.fold_test,
            TestKind::BranchPoint => p.det_sign * (p.det_logabs - logref).exp(),
            TestKind::User(ci) => {
                let c = &opts.user_conditions[*ci];
                p.sol.beta[c.param] - c.target
            }
        }
    };
    let tol = opts.test_tol;

    let mut xi0 = 0.0_f64;
    let mut f0 = value(prev);
    let mut xi1 = 1.0_f64;
    let mut f1 = value(next);
    let mut best: Option<(f64, BranchPoint)> = None;

    for _ in 0..40 {
        if (f1 - f0).abs() < 1e-300 || (xi1 - xi0).abs() < 1e-13 {
            break;
        }
        let mut xi = xi1 - f1 * (xi1 - xi0) / (f1 - f0);
        if !(xi > xi0 && xi < xi1) {
            xi = 0.5 * (xi0 + xi1);
        }
        let ev = match driver.converge(&prev.sol, &prev.tangent, xi * ds) {
            Ok(ev) => ev,
            Err(_) => {
                let ximid = 0.5 * (xi0 + xi1);
                match driver.converge(&prev.sol, &prev.tangent, ximid * ds) {
                    Ok(ev) => {
                        xi = ximid;
                        ev
                    }
                    Err(e) => return Err(ContinuationError::Localization(e.to_string())),
                }
            }
        };
        let cand = BranchPoint {
            fold_test: ev.fold_test,
            det_sign: ev.det_sign,
            det_logabs: ev.det_logabs,
            tangent: ev.tangent,
            sol: ev.sol,
            label: PointLabel::Regular,
            ds_used: xi * ds,
        };
        let fv = value(&cand);
        let better = match &best {
            Some((bf, _)) => fv.abs() < bf.abs(),
            None => true,
        };
        if better {
            best = Some((fv, cand.clone()));
        }
        if fv.abs() <= tol {
            return Ok(Some(cand));
        }
        if f0 * fv <= 0.0 {
            xi1 = xi;
            f1 = fv;
        } else {
            xi0 = xi;
            f0 = fv;
        }
    }
    match best {
        Some((fv, p)) if fv.abs() <= tol.max(1e-6) => Ok(Some(p)),
        Some((fv, _)) => {
            Err(ContinuationError::Localization(format!("best |phi| = {fv:.3e} above tolerance")))
        }
        None => Ok(None),
    }
}

/// Tab-separated branch file: one line per accepted point:
/// `index label beta_active... l2norm extras...`, 17 significant digits.
pub fn write_branch(branch: &Branch, extra_params: &[usize]) -> String {
    let mut s = String::new();
    for (i, p) in branch.points.iter().enumerate() {
        s.push_str(&format!("{}\t{}", i, p.label.code()));
        for &a in &branch.active {
            s.push_str(&format!("\t{:.16e}", p.sol.beta[a]));
        }
        s.push_str(&format!("\t{:.16e}", p.sol.l2_norm()));
        for &a in extra_params {
            s.push_str(&format!("\t{:.16e}", p.sol.beta[a]));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collocation::Mesh;

    /// x^2 + beta^2 = 1 posed as the trivial BVP U' = 0 with one boundary
    /// condition; folds of the circle at beta = +/-1.
    fn circle_spec() -> BvpSpec {
        BvpSpec::new(
            1,
            1,
            1,
            Box::new(|_u, _b, out| out[0] = 0.0),
            Box::new(|u0, _u1, b, out| out[0] = u0[0] * u0[0] + b[0] * b[0] - 1.0),
            vec![],
            vec![0],
        )
        .unwrap()
    }

    #[test]
    fn circle_fold_localized() {
        let spec = circle_spec();
        let mesh = Mesh::uniform(2, 2);
        let start = CollocationSolution::from_fn(mesh, 1, vec![0.0], |_t, out| out[0] = 1.0);
        let opts = ContinuationOptions {
            step: StepControl { ds0: 0.1, max_steps: 60, ..Default::default() },
            adapt_every: 0,
            ..Default::default()
        };
        let branch = continue_branch(&spec, &start, None, 1.0, &opts).unwrap();
        let folds: Vec<&BranchPoint> = branch.labeled(PointLabel::Fold).collect();
        assert!(!folds.is_empty(), "no fold found: {}", branch.termination);
        let beta_at_fold = folds[0].sol.beta[0];
        assert!(
            (beta_at_fold.abs() - 1.0).abs() < 1e-8,
            "fold at beta = {beta_at_fold}, expected +/-1"
        );
        assert!(folds[0].fold_test.abs() < 1e-6);
        assert!(folds[0].sol.point(0)[0].abs() < 1e-4);
    }

    #[test]
    fn arclength_steps_have_requested_length() {
        let spec = circle_spec();
        let mesh = Mesh::uniform(2, 2);
        let start = CollocationSolution::from_fn(mesh, 1, vec![0.0], |_t, out| out[0] = 1.0);
        let opts = ContinuationOptions {
            step: StepControl { ds0: 0.05, ds_max: 0.05, max_steps: 10, ..Default::default() },
            detect_folds: false,
            adapt_every: 0,
            ..Default::default()
        };
        let branch = continue_branch(&spec, &start, None, 1.0, &opts).unwrap();
        assert!(branch.points.len() > 5);
        for pair in branch.points.windows(2) {
            let w = continuation_weights(&pair[1].sol, 1, 1.0);
            let y0 = pack_state(&pair[0].sol, &branch.active);
            let y1 = pack_state(&pair[1].sol, &branch.active);
            let diff: Vec<f64> = y1.iter().zip(&y0).map(|(a, b)| a - b).collect();
            let len = weighted_norm(&w, &diff);
            let ds = pair[1].ds_used;
            assert!((len - ds).abs() <= 0.1 * ds, "step length {len} vs ds {ds}");
        }
    }

    #[test]
    fn user_condition_stops_branch() {
        let spec = circle_spec();
        let mesh = Mesh::uniform(2, 2);
        let start = CollocationSolution::from_fn(mesh, 1, vec![0.0], |_t, out| out[0] = 1.0);
        let opts = ContinuationOptions {
            step: StepControl { ds0: 0.07, max_steps: 50, ..Default::default() },
            user_conditions: vec![UserCondition { param: 0, target: 0.5, stop: true }],
            adapt_every: 0,
            ..Default::default()
        };
        let branch = continue_branch(&spec, &start, None, 1.0, &opts).unwrap();
        let last = branch.points.last().unwrap();
        assert_eq!(last.label, PointLabel::User);
        assert!((last.sol.beta[0] - 0.5).abs() < 1e-8, "stopped at beta = {}", last.sol.beta[0]);
        assert!((last.sol.point(0)[0] - 0.75_f64.sqrt()).abs() < 1e-8);
    }

    #[test]
    fn reversing_direction_retraces_the_family() {
        let spec = circle_spec();
        let mesh = Mesh::uniform(2, 2);
        let start = CollocationSolution::from_fn(mesh, 1, vec![0.0], |_t, out| out[0] = 1.0);
        let opts = ContinuationOptions {
            step: StepControl {
                ds0: 1e-3,
                ds_max: 1e-3,
                max_steps: 10,
                grow: 1.0,
                ..Default::default()
            },
            detect_folds: false,
            adapt_every: 0,
            ..Default::default()
        };
        let fwd = continue_branch(&spec, &start, None, 1.0, &opts).unwrap();
        let mid = fwd.points.last().unwrap();
        let rev = continue_branch(&spec, &mid.sol, None, -1.0, &opts).unwrap();
        let back = rev.points.last().unwrap();
        assert!(
            (back.sol.beta[0] - start.beta[0]).abs() < 1e-6,
            "beta retraced to {} (started at 0)",
            back.sol.beta[0]
        );
        assert!((back.sol.point(0)[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn branch_file_values_reparse_exactly() {
        let spec = circle_spec();
        let mesh = Mesh::uniform(2, 2);
        let start = CollocationSolution::from_fn(mesh, 1, vec![0.0], |_t, out| out[0] = 1.0);
        let opts = ContinuationOptions {
            step: StepControl { ds0: 0.1, max_steps: 5, ..Default::default() },
            adapt_every: 0,
            ..Default::default()
        };
        let branch = continue_branch(&spec, &start, None, 1.0, &opts).unwrap();
        let text = write_branch(&branch, &[]);
        let first = text.lines().next().unwrap();
        let fields: Vec<&str> = first.split('\t').collect();
        assert_eq!(fields[0], "0");
        assert_eq!(fields[1], "EP");
        for f in &fields[2..] {
            let v: f64 = f.parse().unwrap();
            assert_eq!(format!("{:.16e}", v), *f);
        }
    }

    /// Consecutive tangents keep a positive inner product along a branch.
    #[test]
    fn tangent_orientation_is_consistent() {
        let spec = circle_spec();
        let mesh = Mesh::uniform(2, 2);
        let start = CollocationSolution::from_fn(mesh, 1, vec![0.0], |_t, out| out[0] = 1.0);
        let opts = ContinuationOptions {
            step: StepControl { ds0: 0.1, max_steps: 30, ..Default::default() },
            adapt_every: 0,
            ..Default::default()
        };
        let branch = continue_branch(&spec, &start, None, 1.0, &opts).unwrap();
        for pair in branch.points.windows(2) {
            let w = continuation_weights(&pair[1].sol, 1, 1.0);
            let d = weighted_dot(&w, &pair[0].tangent, &pair[1].tangent);
            assert!(d > 0.0, "tangent reversal: {d}");
        }
    }
}
