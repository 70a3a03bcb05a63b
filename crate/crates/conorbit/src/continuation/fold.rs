//! Two-parameter fold following with a minimally augmented system: the
//! original BVP plus one bordered test-function equation phi = 0 and one
//! additional free parameter.
//!
//! phi is the lower-right entry g of the bordered solve
//!
//! ```text
//!   [ M  b ] [v]   [0]
//!   [ c^T 0 ] [g] = [1]
//! ```
//!
//! where M is the Jacobian of the one-parameter problem at fixed parameters
//! (square by the counting rule); g vanishes exactly where M is singular,
//! i.e. at a fold of the one-parameter family. The Newton row for phi is
//! -w^T (dM/dz) v, assembled by central differences of Jacobian-transpose
//! products, with w from the transposed bordered solve.

use super::{
    continuation_weights, weighted_dot, weighted_norm, Branch, BranchPoint, ContinuationError,
    ContinuationOptions, Driver, PointLabel,
};
use crate::collocation::{
    apply_update, assemble_system, newton_correct, pack_state, sample_refs, BvpSpec, ClosureRow,
    CollocationSolution, SolutionRef,
};
use crate::linalg::{AbdLu, AbdMatrix, XorShift};
use crate::quad::CollocTables;

/// A fold-following task: the one-parameter spec (free_params =
/// [fold_param, secondaries...]) plus the second parameter freed along the
/// fold curve.
pub struct FoldProblem<'a> {
    pub spec: &'a BvpSpec,
    pub second_param: usize,
}

impl FoldProblem<'_> {
    fn fold_param(&self) -> usize {
        self.spec.free_params[0]
    }

    fn secondaries(&self) -> &[usize] {
        &self.spec.free_params[1..]
    }

    /// Outer active set: [second, fold, secondaries...].
    fn outer_active(&self) -> Vec<usize> {
        let mut v = vec![self.second_param, self.fold_param()];
        v.extend_from_slice(self.secondaries());
        v
    }
}

/// Add one dense border column and row to an assembled ABD matrix.
fn expand_bordered(a: &AbdMatrix, bcol: &[f64], brow: &[f64]) -> AbdMatrix {
    let (q, w) = (a.rows_per_block, a.block_width);
    let mut out = AbdMatrix::new(a.n_blocks, q, w, a.n_border_cols + 1);
    let nm = a.n_mesh_cols();
    for i in 0..a.n_blocks {
        for r in 0..q {
            let src = a.blocks[i].row(r);
            let dst = out.blocks[i].row_mut(r);
            dst[..w + a.n_border_cols].copy_from_slice(src);
            dst[w + a.n_border_cols] = bcol[i * q + r];
        }
    }
    // old border rows gain the b-column entry; the new last row is c^T
    for r in 0..a.n_border_rows {
        let src = a.border.row(r);
        let dst = out.border.row_mut(r);
        dst[..nm + a.n_border_cols].copy_from_slice(src);
        dst[nm + a.n_border_cols] = bcol[a.n_blocks * q + r];
    }
    let last = out.border.row_mut(a.n_border_rows);
    last[..nm + a.n_border_cols].copy_from_slice(brow);
    last[nm + a.n_border_cols] = 0.0;
    out
}

struct FoldState {
    /// Border column over the rows of M (block rows then border rows).
    b: Vec<f64>,
    /// Border row over the columns of M (mesh cols then secondary params).
    c: Vec<f64>,
}

struct PhiData {
    phi: f64,
    /// Newton row of phi over the outer unknowns.
    row: Vec<f64>,
}

fn compute_phi(
    fp: &FoldProblem,
    sol: &CollocationSolution,
    state: &mut FoldState,
    refs: &[f64],
    ref_dim: usize,
    tables: &CollocTables,
    with_row: bool,
) -> Result<PhiData, ContinuationError> {
    let inner_active = fp.secondaries().to_vec();
    let asm = assemble_system(fp.spec, sol, &inner_active, refs, ref_dim, &[], tables)?;
    let n_inner = asm.abd.n();
    if state.b.len() != n_inner {
        let mut rng = XorShift::new(0xb0bd);
        state.b = (0..n_inner).map(|_| rng.next_f64()).collect();
        state.c = (0..n_inner).map(|_| rng.next_f64()).collect();
        normalize(&mut state.b);
        normalize(&mut state.c);
    }

    let expanded = expand_bordered(&asm.abd, &state.b, &state.c);
    let lu = match AbdLu::factor(&expanded) {
        Ok(lu) => lu,
        Err(_) => {
            // re-border with fresh vectors and retry once
            let mut rng = XorShift::new(0x5eed ^ n_inner as u64);
            state.b = (0..n_inner).map(|_| rng.next_f64()).collect();
            state.c = (0..n_inner).map(|_| rng.next_f64()).collect();
            normalize(&mut state.b);
            normalize(&mut state.c);
            let expanded = expand_bordered(&asm.abd, &state.b, &state.c);
            AbdLu::factor(&expanded).map_err(|_| ContinuationError::BorderingSingular)?
        }
    };
    let ne = n_inner + 1;
    let mut rhs = vec![0.0; ne];
    rhs[ne - 1] = 1.0;
    let vg = lu.solve(&rhs); // columns: [mesh values, secondaries, g]
    let phi = vg[ne - 1];
    let mut grhs = vec![0.0; ne];
    grhs[ne - 1] = 1.0;
    let wg = lu.solve_t(&grhs); // rows: [inner rows..., c-row]
    let v = &vg[..ne - 1];
    let w = &wg[..ne - 1];

    if !with_row {
        return Ok(PhiData { phi, row: Vec::new() });
    }

    // embed v into the outer unknown layout (second and fold slots zero)
    let outer_active = fp.outer_active();
    let nv = sol.values.len();
    let n_outer = nv + outer_active.len();
    let mut v_outer = vec![0.0; n_outer];
    v_outer[..nv].copy_from_slice(&v[..nv]);
    for (k, _sec) in fp.secondaries().iter().enumerate() {
        v_outer[nv + 2 + k] = v[nv + k];
    }
    let vnorm = crate::linalg::norm2(&v_outer);
    let delta = 1e-6 * (1.0 + crate::linalg::norm_inf(&pack_state(sol, &outer_active)))
        / vnorm.max(1e-12);

    // pad w over the outer rows (two dummy closure rows at the end)
    let mut w_pad = vec![0.0; n_outer];
    w_pad[..w.len()].copy_from_slice(w);

    let zero_row = vec![0.0; n_outer];
    let closures =
        [ClosureRow::External { row: &zero_row, residual: 0.0 }, ClosureRow::External {
            row: &zero_row,
            residual: 0.0,
        }];
    let mut sol_shift = sol.clone();
    apply_update(&mut sol_shift, &outer_active, &v_outer, -delta);
    let ap = assemble_system(fp.spec, &sol_shift, &outer_active, refs, ref_dim, &closures, tables)?;
    apply_update(&mut sol_shift, &outer_active, &v_outer, 2.0 * delta);
    let am = assemble_system(fp.spec, &sol_shift, &outer_active, refs, ref_dim, &closures, tables)?;

    let mut jp = vec![0.0; n_outer];
    let mut jm = vec![0.0; n_outer];
    ap.abd.matvec_t(&w_pad, &mut jp);
    am.abd.matvec_t(&w_pad, &mut jm);
    let row: Vec<f64> = jp.iter().zip(&jm).map(|(p, m)| -(p - m) / (2.0 * delta)).collect();

    // adapt the bordering vectors for the next call
    let mut bnew = vec![0.0; n_inner];
    // b lives in row space: w is the left vector; v in column space
    bnew.copy_from_slice(w);
    normalize(&mut bnew);
    let mut cnew = v[..n_inner].to_vec();
    normalize(&mut cnew);
    if bnew.iter().all(|x| x.is_finite()) && cnew.iter().all(|x| x.is_finite()) {
        // b approximates the left null direction, c the right one; this keeps
        // the bordered system maximally nonsingular at the fold
        state.b = bnew;
        state.c = cnew;
    }

    Ok(PhiData { phi, row })
}

fn normalize(v: &mut [f64]) {
    let n = crate::linalg::norm2(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Residual of the plain one-parameter fold condition at a solution: the
/// principal-parameter component of the unit branch tangent.
pub fn one_param_fold_residual(
    spec: &BvpSpec,
    sol: &CollocationSolution,
    reference: Option<&CollocationSolution>,
    opts: &ContinuationOptions,
) -> Result<f64, ContinuationError> {
    let mut driver = Driver::new(spec, sol.mesh.m, opts.newton, opts.state_weight, reference);
    driver.resample_refs(&sol.mesh);
    let nv = sol.values.len();
    // generic bordering seed: a principal-direction seed would make the
    // bordered matrix singular exactly at the fold being verified
    let mut rng = XorShift::new(0xf01d);
    let mut seed: Vec<f64> = (0..nv + spec.free_params.len()).map(|_| rng.next_f64()).collect();
    normalize(&mut seed);
    let ev = driver.evaluate(sol.clone(), &seed)?;
    Ok(ev.fold_test.abs())
}

/// Continue a localized fold in two parameters. `start` must be a converged
/// fold of the one-parameter problem. The branch's active set is
/// [second_param, fold_param, secondaries...].
pub fn fold_follow(
    fp: &FoldProblem,
    start: &CollocationSolution,
    reference: Option<&CollocationSolution>,
    direction: f64,
    opts: &ContinuationOptions,
) -> Result<Branch, ContinuationError> {
    let outer_active = fp.outer_active();
    let tables = CollocTables::new(start.mesh.m);
    let mut ref_sol = reference.cloned();
    let mut state = FoldState { b: Vec::new(), c: Vec::new() };

    let sample = |ref_sol: &Option<CollocationSolution>,
                  mesh: &crate::collocation::Mesh,
                  tables: &CollocTables| match ref_sol {
        Some(r) => {
            let src = SolutionRef { sol: r };
            (sample_refs(&src, mesh, tables), 2 * r.n_dim)
        }
        None => (Vec::new(), 0),
    };
    let (mut refs, mut ref_dim) = sample(&ref_sol, &start.mesh, &tables);

    // Newton on the augmented system from a point and a frozen arclength row
    let converge_point = |sol: &mut CollocationSolution,
                          state: &mut FoldState,
                          refs: &[f64],
                          ref_dim: usize,
                          arc: Option<(&[f64], &[f64], &[f64], f64)>|
     -> Result<(), ContinuationError> {
        for it in 0..opts.newton.max_iterations {
            let pd = compute_phi(fp, sol, state, refs, ref_dim, &tables, true)?;
            let phi_row = pd.row.clone();
            let mut closures = vec![ClosureRow::External { row: &phi_row, residual: pd.phi }];
            let arc_closure;
            if let Some((tan, base, weights, ds)) = arc {
                arc_closure = ClosureRow::Arclength { tangent: tan, base, weights, ds };
                closures.push(arc_closure);
            } else {
                closures.push(ClosureRow::Pin { slot: 0, value: sol.beta[fp.second_param] });
            }
            let asm =
                assemble_system(fp.spec, sol, &outer_active, refs, ref_dim, &closures, &tables)?;
            let rnorm = crate::linalg::norm_inf(&asm.residual);
            if rnorm <= opts.newton.residual_tol.max(1e-9) {
                return Ok(());
            }
            let lu = AbdLu::factor(&asm.abd).map_err(|_| ContinuationError::BorderingSingular)?;
            let delta = lu.solve(&asm.residual);
            apply_update(sol, &outer_active, &delta, 1.0);
            if it == opts.newton.max_iterations - 1 {
                return Err(ContinuationError::Collocation(
                    crate::collocation::CollocationError::NonConvergence {
                        iterations: it + 1,
                        residual: rnorm,
                    },
                ));
            }
        }
        Ok(())
    };

    // tangent of the fold curve at a converged point
    let tangent_at = |sol: &CollocationSolution,
                      state: &mut FoldState,
                      refs: &[f64],
                      ref_dim: usize,
                      orient: &[f64]|
     -> Result<Vec<f64>, ContinuationError> {
        let pd = compute_phi(fp, sol, state, refs, ref_dim, &tables, true)?;
        let weights = continuation_weights(sol, outer_active.len(), opts.state_weight);
        let phi_row = pd.row.clone();
        let y = pack_state(sol, &outer_active);
        let closures = [
            ClosureRow::External { row: &phi_row, residual: pd.phi },
            ClosureRow::Arclength { tangent: orient, base: &y, weights: &weights, ds: 0.0 },
        ];
        let asm = assemble_system(fp.spec, sol, &outer_active, refs, ref_dim, &closures, &tables)?;
        let lu = AbdLu::factor(&asm.abd).map_err(|_| ContinuationError::BorderingSingular)?;
        let n = asm.abd.n();
        let mut rhs = vec![0.0; n];
        rhs[n - 1] = 1.0;
        let mut t = lu.solve(&rhs);
        let nrm = weighted_norm(&weights, &t);
        if nrm == 0.0 || !nrm.is_finite() {
            return Err(ContinuationError::BorderingSingular);
        }
        for v in t.iter_mut() {
            *v /= nrm;
        }
        if weighted_dot(&weights, &t, orient) < 0.0 {
            for v in t.iter_mut() {
                *v = -*v;
            }
        }
        Ok(t)
    };

    // Converge the start point onto the fold manifold (second param pinned).
    // A plain pre-polish with the fold parameter pinned would be singular at
    // an exact fold, so it is attempted only best-effort.
    let mut sol0 = start.clone();
    {
        let one_active = fp.spec.free_params.clone();
        let pin = ClosureRow::Pin { slot: 0, value: sol0.beta[fp.fold_param()] };
        let mut trial = sol0.clone();
        if newton_correct(
            fp.spec,
            &mut trial,
            &one_active,
            &refs,
            ref_dim,
            &[pin],
            &tables,
            &opts.newton,
        )
        .is_ok()
        {
            sol0 = trial;
        }
    }
    converge_point(&mut sol0, &mut state, &refs, ref_dim, None)?;

    let nv = sol0.values.len();
    let mut seed = vec![0.0; nv + outer_active.len()];
    seed[nv] = direction;
    let t0 = tangent_at(&sol0, &mut state, &refs, ref_dim, &seed)?;

    let mut points = vec![BranchPoint {
        fold_test: t0[nv],
        det_sign: 0.0,
        det_logabs: 0.0,
        tangent: t0,
        sol: sol0,
        label: PointLabel::Endpoint,
        ds_used: 0.0,
    }];
    let mut ds = opts.step.ds0;
    let mut termination = String::from("max steps reached");

    'outer: for _ in 0..opts.step.max_steps {
        let (prev_sol, prev_tan) = {
            let p = points.last().unwrap();
            (p.sol.clone(), p.tangent.clone())
        };
        let weights = continuation_weights(&prev_sol, outer_active.len(), opts.state_weight);
        let y_prev = pack_state(&prev_sol, &outer_active);

        let mut attempt = ds;
        let accepted = loop {
            let mut sol = prev_sol.clone();
            for (v, t) in sol.values.iter_mut().zip(&prev_tan[..nv]) {
                *v += attempt * t;
            }
            for (slot, &p) in outer_active.iter().enumerate() {
                sol.beta[p] += attempt * prev_tan[nv + slot];
            }
            let r = converge_point(
                &mut sol,
                &mut state,
                &refs,
                ref_dim,
                Some((&prev_tan, &y_prev, &weights, attempt)),
            );
            match r {
                Ok(()) => break Some(sol),
                Err(ContinuationError::Collocation(_)) | Err(ContinuationError::BorderingSingular) => {
                    attempt *= 0.5;
                    if attempt < opts.step.ds_min {
                        termination = format!("step underflow at ds = {attempt:.3e}");
                        break None;
                    }
                }
                Err(e) => return Err(e),
            }
        };
        let sol = match accepted {
            Some(s) => s,
            None => break 'outer,
        };
        let t = tangent_at(&sol, &mut state, &refs, ref_dim, &prev_tan)?;
        points.push(BranchPoint {
            fold_test: t[nv],
            det_sign: 0.0,
            det_logabs: 0.0,
            tangent: t,
            sol,
            label: PointLabel::Regular,
            ds_used: attempt,
        });

        if fp.spec.n_ic() > 0 {
            ref_sol = Some(points.last().unwrap().sol.clone());
            let mesh = points.last().unwrap().sol.mesh.clone();
            let (r, rd) = sample(&ref_sol, &mesh, &tables);
            refs = r;
            ref_dim = rd;
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
    Ok(Branch { points, active: outer_active, termination })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collocation::Mesh;
    use crate::continuation::StepControl;

    /// Family x^2 + b1^2 = b2 (as trivial BVP): the solution set at fixed b2
    /// is a circle in (x, b1); its folds in b1 sit at x = 0, b1 = +/-sqrt(b2),
    /// so the fold curve in (b1, b2) is the parabola b2 = b1^2.
    #[test]
    fn circle_fold_curve_is_traced() {
        let spec = BvpSpec::new(
            1,
            2,
            1,
            Box::new(|_u, _b, out| out[0] = 0.0),
            Box::new(|u0, _u1, b, out| out[0] = u0[0] * u0[0] + b[0] * b[0] - b[1]),
            vec![],
            vec![0], // fold parameter b1
        )
        .unwrap();
        let mesh = Mesh::uniform(2, 2);
        // fold of the one-parameter family at x = 0, b1 = 1, b2 = 1
        let start = CollocationSolution::from_fn(mesh, 1, vec![1.0, 1.0], |_t, out| out[0] = 0.0);
        let fp = FoldProblem { spec: &spec, second_param: 1 };
        let opts = ContinuationOptions {
            step: StepControl { ds0: 0.1, max_steps: 25, ..Default::default() },
            adapt_every: 0,
            ..Default::default()
        };
        let curve = fold_follow(&fp, &start, None, 1.0, &opts).unwrap();
        assert!(curve.points.len() >= 10, "{} points: {}", curve.points.len(), curve.termination);
        let first_b2 = curve.points.first().unwrap().sol.beta[1];
        let last_b2 = curve.points.last().unwrap().sol.beta[1];
        assert!((last_b2 - first_b2).abs() > 0.5, "curve did not move in b2");
        for p in &curve.points {
            let (b1, b2) = (p.sol.beta[0], p.sol.beta[1]);
            let x = p.sol.point(0)[0];
            assert!(x.abs() < 1e-6, "fold solution should sit at x = 0, got {x}");
            assert!((b1 * b1 - b2).abs() < 1e-6, "curve left b2 = b1^2: {b1}, {b2}");
        }
        // every point re-verifies as a one-parameter fold
        for p in curve.points.iter().step_by(5) {
            let r = one_param_fold_residual(&spec, &p.sol, None, &opts).unwrap();
            assert!(r < 1e-5, "one-parameter fold residual {r}");
        }
    }
}
