//! Branch switching at a localized branch point via the algebraic branching
//! equation, with the two-dimensional null space computed by dense inverse
//! iteration on the bordered Jacobian.

use super::{
    continuation_weights, weighted_dot, weighted_norm, BranchPoint, ContinuationError,
    ContinuationOptions,
};
use crate::collocation::{
    apply_update, assemble_system, pack_state, sample_refs, BvpSpec, ClosureRow,
    CollocationSolution, SolutionRef,
};
use crate::linalg::{DenseLu, XorShift};
use crate::quad::CollocTables;

const MAX_DENSE: usize = 6000;

/// Compute the tangent of the secondary family crossing at a branch point.
/// The returned vector lives in the same [values, active params] layout as
/// branch tangents and is W-normalized; step along +/- of it to leave the
/// current family.
pub fn switch_at_branch_point(
    spec: &BvpSpec,
    bp: &BranchPoint,
    reference: Option<&CollocationSolution>,
    opts: &ContinuationOptions,
) -> Result<Vec<f64>, ContinuationError> {
    let active = spec.free_params.clone();
    let tables = CollocTables::new(bp.sol.mesh.m);
    let (refs, ref_dim) = match reference {
        Some(r) => {
            let src = SolutionRef { sol: r };
            (sample_refs(&src, &bp.sol.mesh, &tables), 2 * r.n_dim)
        }
        None => (Vec::new(), 0),
    };
    let weights = continuation_weights(&bp.sol, active.len(), opts.state_weight);
    let y = pack_state(&bp.sol, &active);
    let n = y.len();
    if n > MAX_DENSE {
        return Err(ContinuationError::NullSpaceDimension(format!(
            "system too large for dense branch-point analysis ({n} unknowns)"
        )));
    }

    let assemble_at = |sol: &CollocationSolution| {
        let closure = ClosureRow::Arclength {
            tangent: &bp.tangent,
            base: &y,
            weights: &weights,
            ds: 0.0,
        };
        assemble_system(spec, sol, &active, &refs, ref_dim, &[closure], &tables)
            .map_err(ContinuationError::Collocation)
    };

    let asm = assemble_at(&bp.sol)?;
    let dense = asm.abd.to_dense();
    let lu = DenseLu::factor(dense).ok_or(ContinuationError::BorderingSingular)?;

    // right null vector of the bordered matrix by inverse iteration,
    // orthogonalized against the branch tangent
    let mut rng = XorShift::new(0x5eed_b0a7);
    let mut z: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
    for _ in 0..3 {
        lu.solve(&mut z);
        let nrm = weighted_norm(&weights, &z);
        if !nrm.is_finite() || nrm == 0.0 {
            return Err(ContinuationError::BorderingSingular);
        }
        for v in z.iter_mut() {
            *v /= nrm;
        }
    }
    let proj = weighted_dot(&weights, &z, &bp.tangent);
    for (zi, ti) in z.iter_mut().zip(&bp.tangent) {
        *zi -= proj * ti;
    }
    let znrm = weighted_norm(&weights, &z);
    if znrm < 1e-8 {
        return Err(ContinuationError::NullSpaceDimension(
            "second null direction collapsed onto the tangent".into(),
        ));
    }
    for v in z.iter_mut() {
        *v /= znrm;
    }

    // left null vector of the equation rows (drop the closure row)
    let mut w: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
    for _ in 0..3 {
        lu.solve_t(&mut w);
        let nrm = crate::linalg::norm2(&w);
        if !nrm.is_finite() || nrm == 0.0 {
            return Err(ContinuationError::BorderingSingular);
        }
        for v in w.iter_mut() {
            *v /= nrm;
        }
    }
    let psi = &w[..n - 1];

    // algebraic branching equation coefficients via finite differences of
    // Jacobian-vector products
    let delta = 1e-5 * (1.0 + crate::linalg::norm_inf(&y));
    let mut jt_p = vec![0.0; n];
    let mut jt_m = vec![0.0; n];
    let mut jz_p = vec![0.0; n];
    let mut jz_m = vec![0.0; n];
    let mut sol_shift = bp.sol.clone();
    let mut coeff = [0.0_f64; 3]; // c11, c12, c22
    for (which, dir) in [&bp.tangent, &z].iter().enumerate() {
        // y + delta*dir
        apply_update(&mut sol_shift, &active, dir, -delta);
        let ap = assemble_at(&sol_shift)?;
        ap.abd.matvec(&bp.tangent, &mut jt_p);
        ap.abd.matvec(&z, &mut jz_p);
        // y - delta*dir
        apply_update(&mut sol_shift, &active, dir, 2.0 * delta);
        let am = assemble_at(&sol_shift)?;
        am.abd.matvec(&bp.tangent, &mut jt_m);
        am.abd.matvec(&z, &mut jz_m);
        // restore
        apply_update(&mut sol_shift, &active, dir, -delta);

        let contract = |p: &[f64], m_: &[f64]| -> f64 {
            psi.iter()
                .zip(p.iter().zip(m_))
                .map(|(ps, (a, b))| ps * (a - b) / (2.0 * delta))
                .sum()
        };
        if which == 0 {
            coeff[0] = contract(&jt_p, &jt_m); // c11 = psi B(t,t)
            coeff[1] = contract(&jz_p, &jz_m); // c12 = psi B(z,t)
        } else {
            coeff[2] = contract(&jz_p, &jz_m); // c22 = psi B(z,z)
        }
    }
    let (c11, c12, c22) = (coeff[0], coeff[1], coeff[2]);

    // c11 r^2 + 2 c12 r + c22 = 0 with secondary direction r*t + z
    let scale = c11.abs().max(c12.abs()).max(c22.abs());
    let mut candidates: Vec<f64> = Vec::new();
    if scale > 0.0 {
        let (a, b, c) = (c11 / scale, c12 / scale, c22 / scale);
        let disc = b * b - a * c;
        if a.abs() < 1e-10 {
            if b.abs() > 1e-12 {
                candidates.push(-c / (2.0 * b));
            }
        } else if disc >= 0.0 {
            let sq = disc.sqrt();
            candidates.push((-b + sq) / a);
            candidates.push((-b - sq) / a);
        }
    }
    // assemble candidate directions; fall back to the raw null direction
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut consider = |dir: Vec<f64>| {
        let nrm = weighted_norm(&weights, &dir);
        if !(nrm.is_finite()) || nrm == 0.0 {
            return;
        }
        let d: Vec<f64> = dir.iter().map(|v| v / nrm).collect();
        let par = weighted_dot(&weights, &d, &bp.tangent).abs();
        if best.as_ref().map(|(p, _)| par < *p).unwrap_or(true) {
            best = Some((par, d));
        }
    };
    for r in candidates {
        let dir: Vec<f64> =
            bp.tangent.iter().zip(&z).map(|(ti, zi)| r * ti + zi).collect();
        consider(dir);
    }
    consider(z.clone());

    let (par, secondary) = best.ok_or(ContinuationError::BorderingSingular)?;
    // the secondary family must be transversal to the current one
    let angle = par.min(1.0).acos();
    if angle <= 1e-3 {
        return Err(ContinuationError::NullSpaceDimension(format!(
            "secondary direction nearly parallel to the branch (angle {angle:.2e} rad)"
        )));
    }
    Ok(secondary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collocation::Mesh;
    use crate::continuation::{
        continue_branch, continue_branch_with_tangent, PointLabel, StepControl,
    };

    /// Pitchfork normal form x' = beta x - x^3 posed as a trivial BVP
    /// (U' = 0, bc beta U - U^3 = 0). The trivial family U = 0 has a branch
    /// point at beta = 0 where the x^2 = beta family crosses.
    #[test]
    fn pitchfork_switch_lands_on_secondary_family() {
        let spec = BvpSpec::new(
            1,
            1,
            1,
            Box::new(|_u, _b, out| out[0] = 0.0),
            Box::new(|u0, _u1, b, out| out[0] = b[0] * u0[0] - u0[0] * u0[0] * u0[0]),
            vec![],
            vec![0],
        )
        .unwrap();
        let mesh = Mesh::uniform(2, 2);
        let start = CollocationSolution::from_fn(mesh, 1, vec![-0.5], |_t, out| out[0] = 0.0);
        let opts = crate::continuation::ContinuationOptions {
            step: StepControl { ds0: 0.1, max_steps: 20, ..Default::default() },
            detect_branch_points: true,
            detect_folds: false,
            adapt_every: 0,
            ..Default::default()
        };
        let branch = continue_branch(&spec, &start, None, 1.0, &opts).unwrap();
        let bps: Vec<&BranchPoint> = branch.labeled(PointLabel::Branch).collect();
        assert!(!bps.is_empty(), "no branch point: {}", branch.termination);
        let bp = bps[0];
        assert!(bp.sol.beta[0].abs() < 1e-6, "BP at beta = {}", bp.sol.beta[0]);

        let secondary = switch_at_branch_point(&spec, bp, None, &opts).unwrap();
        // transversality invariant
        let w = continuation_weights(&bp.sol, 1, 1.0);
        let cosang = weighted_dot(&w, &secondary, &bp.tangent).abs();
        assert!(cosang.min(1.0).acos() > 1e-3);

        // step onto the secondary family and continue; x^2 = beta must hold
        let sw = continue_branch_with_tangent(
            &spec,
            &bp.sol,
            secondary,
            None,
            &crate::continuation::ContinuationOptions {
                step: StepControl { ds0: 0.05, max_steps: 10, ..Default::default() },
                detect_folds: false,
                detect_branch_points: false,
                adapt_every: 0,
                ..Default::default()
            },
        )
        .unwrap();
        let far = sw.points.last().unwrap();
        let x = far.sol.point(0)[0];
        let beta = far.sol.beta[0];
        assert!(x.abs() > 1e-3, "did not leave the trivial family: x = {x}");
        assert!((x * x - beta).abs() < 1e-6, "x^2 = {} vs beta = {}", x * x, beta);
    }
}
