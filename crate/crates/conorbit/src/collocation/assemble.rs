//! Residual and Jacobian assembly into the bordered almost-block-diagonal form.

use super::{BvpSpec, CollocationError, CollocationSolution, RefSource};
use crate::linalg::AbdMatrix;
use crate::quad::CollocTables;

/// Closure equations appended below the boundary and integral conditions.
/// The unknown vector is [fine-point values, active parameters].
pub enum ClosureRow<'a> {
    /// beta[active[slot]] - value = 0
    Pin { slot: usize, value: f64 },
    /// <weights .* tangent, y - base> - ds = 0
    Arclength { tangent: &'a [f64], base: &'a [f64], weights: &'a [f64], ds: f64 },
    /// A caller-supplied dense row with its residual value.
    External { row: &'a [f64], residual: f64 },
}

pub struct Assembled {
    pub abd: AbdMatrix,
    /// Row-layout residual (collocation rows, then border rows).
    pub residual: Vec<f64>,
}

/// Sample reference data at every collocation point (interval-major).
pub fn sample_refs(
    refsrc: &dyn RefSource,
    mesh: &super::Mesh,
    tables: &CollocTables,
) -> Vec<f64> {
    let rd = refsrc.dim();
    let n = mesh.n_intervals();
    let m = mesh.m;
    let mut out = vec![0.0; n * m * rd];
    if rd == 0 {
        return out;
    }
    for i in 0..n {
        let h = mesh.taus[i + 1] - mesh.taus[i];
        for l in 0..m {
            let tau = mesh.taus[i] + h * tables.gauss[l];
            refsrc.sample(tau, &mut out[(i * m + l) * rd..(i * m + l + 1) * rd]);
        }
    }
    out
}

/// Pack the unknown vector [values, beta[active]].
pub fn pack_state(sol: &CollocationSolution, active: &[usize]) -> Vec<f64> {
    let mut y = Vec::with_capacity(sol.values.len() + active.len());
    y.extend_from_slice(&sol.values);
    for &p in active {
        y.push(sol.beta[p]);
    }
    y
}

/// Apply a Newton update y -= delta (delta in column layout).
pub fn apply_update(sol: &mut CollocationSolution, active: &[usize], delta: &[f64], scale: f64) {
    let nv = sol.values.len();
    for (v, d) in sol.values.iter_mut().zip(&delta[..nv]) {
        *v -= scale * d;
    }
    for (slot, &p) in active.iter().enumerate() {
        sol.beta[p] -= scale * delta[nv + slot];
    }
}

struct WorkBufs {
    u: Vec<f64>,
    f: Vec<f64>,
    ju: Vec<f64>,
    jp: Vec<f64>,
}

fn rhs_jac_u_fd(spec: &BvpSpec, u: &[f64], beta: &[f64], out: &mut [f64]) {
    let nd = spec.n_dim;
    let eps = f64::EPSILON.cbrt();
    let mut up = u.to_vec();
    let mut fp = vec![0.0; nd];
    let mut fm = vec![0.0; nd];
    for j in 0..nd {
        let h = eps * (1.0_f64).max(u[j].abs());
        let saved = up[j];
        up[j] = saved + h;
        (spec.rhs)(&up, beta, &mut fp);
        up[j] = saved - h;
        (spec.rhs)(&up, beta, &mut fm);
        up[j] = saved;
        for i in 0..nd {
            out[i * nd + j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
}

fn rhs_jac_p_fd(spec: &BvpSpec, u: &[f64], beta: &[f64], active: &[usize], out: &mut [f64]) {
    let nd = spec.n_dim;
    let na = active.len();
    let eps = f64::EPSILON.cbrt();
    let mut bb = beta.to_vec();
    let mut fp = vec![0.0; nd];
    let mut fm = vec![0.0; nd];
    for (a, &pidx) in active.iter().enumerate() {
        let h = eps * (1.0_f64).max(beta[pidx].abs());
        let saved = bb[pidx];
        bb[pidx] = saved + h;
        (spec.rhs)(u, &bb, &mut fp);
        bb[pidx] = saved - h;
        (spec.rhs)(u, &bb, &mut fm);
        bb[pidx] = saved;
        for i in 0..nd {
            out[i * na + a] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
}

fn bc_jac_fd(
    spec: &BvpSpec,
    u0: &[f64],
    u1: &[f64],
    beta: &[f64],
    active: &[usize],
    d0: &mut [f64],
    d1: &mut [f64],
    dp: &mut [f64],
) {
    let nd = spec.n_dim;
    let nbc = spec.n_bc;
    let na = active.len();
    let eps = f64::EPSILON.cbrt();
    let mut bp = vec![0.0; nbc];
    let mut bm = vec![0.0; nbc];
    let mut x = u0.to_vec();
    for j in 0..nd {
        let h = eps * (1.0_f64).max(u0[j].abs());
        let saved = x[j];
        x[j] = saved + h;
        (spec.bc)(&x, u1, beta, &mut bp);
        x[j] = saved - h;
        (spec.bc)(&x, u1, beta, &mut bm);
        x[j] = saved;
        for r in 0..nbc {
            d0[r * nd + j] = (bp[r] - bm[r]) / (2.0 * h);
        }
    }
    let mut x = u1.to_vec();
    for j in 0..nd {
        let h = eps * (1.0_f64).max(u1[j].abs());
        let saved = x[j];
        x[j] = saved + h;
        (spec.bc)(u0, &x, beta, &mut bp);
        x[j] = saved - h;
        (spec.bc)(u0, &x, beta, &mut bm);
        x[j] = saved;
        for r in 0..nbc {
            d1[r * nd + j] = (bp[r] - bm[r]) / (2.0 * h);
        }
    }
    let mut bb = beta.to_vec();
    for (a, &pidx) in active.iter().enumerate() {
        let h = eps * (1.0_f64).max(beta[pidx].abs());
        let saved = bb[pidx];
        bb[pidx] = saved + h;
        (spec.bc)(u0, u1, &bb, &mut bp);
        bb[pidx] = saved - h;
        (spec.bc)(u0, u1, &bb, &mut bm);
        bb[pidx] = saved;
        for r in 0..nbc {
            dp[r * na + a] = (bp[r] - bm[r]) / (2.0 * h);
        }
    }
}

/// Evaluate the full residual without forming the Jacobian.
pub fn eval_residual(
    spec: &BvpSpec,
    sol: &CollocationSolution,
    active: &[usize],
    refs: &[f64],
    ref_dim: usize,
    closures: &[ClosureRow],
    tables: &CollocTables,
) -> Result<Vec<f64>, CollocationError> {
    let nd = spec.n_dim;
    let m = tables.m;
    let nivl = sol.mesh.n_intervals();
    let q = m * nd;
    let n_border = spec.n_bc + spec.n_ic() + closures.len();
    let mut res = vec![0.0; nivl * q + n_border];

    let mut u = vec![0.0; nd];
    let mut f = vec![0.0; nd];

    for i in 0..nivl {
        let h = sol.mesh.taus[i + 1] - sol.mesh.taus[i];
        for l in 0..m {
            let vals = tables.vals_at(l);
            let ders = tables.ders_at(l);
            u.fill(0.0);
            for (j, (&vj, _)) in vals.iter().zip(ders).enumerate() {
                let p = sol.point(i * m + j);
                for (uu, &pv) in u.iter_mut().zip(p) {
                    *uu += vj * pv;
                }
            }
            (spec.rhs)(&u, &sol.beta, &mut f);
            let row0 = i * q + l * nd;
            for k in 0..nd {
                let mut du = 0.0;
                for (j, &dj) in ders.iter().enumerate() {
                    du += dj * sol.point(i * m + j)[k];
                }
                res[row0 + k] = du - h * f[k];
            }
        }
    }

    let base = nivl * q;
    let u0 = sol.point(0).to_vec();
    let u1 = sol.point(sol.n_points() - 1).to_vec();
    (spec.bc)(&u0, &u1, &sol.beta, &mut res[base..base + spec.n_bc]);

    // integral constraints with the collocation quadrature
    for (c, ic) in spec.ics.iter().enumerate() {
        let mut acc = 0.0;
        for i in 0..nivl {
            let h = sol.mesh.taus[i + 1] - sol.mesh.taus[i];
            for l in 0..m {
                let vals = tables.vals_at(l);
                u.fill(0.0);
                for (j, &vj) in vals.iter().enumerate() {
                    let p = sol.point(i * m + j);
                    for (uu, &pv) in u.iter_mut().zip(p) {
                        *uu += vj * pv;
                    }
                }
                let r = &refs[(i * m + l) * ref_dim..(i * m + l + 1) * ref_dim];
                acc += tables.weights[l] * h * (ic.integrand)(&u, &sol.beta, r);
            }
        }
        res[base + spec.n_bc + c] = acc;
    }

    let y = pack_state(sol, active);
    for (c, cl) in closures.iter().enumerate() {
        let row = base + spec.n_bc + spec.n_ic() + c;
        res[row] = match cl {
            ClosureRow::Pin { slot, value } => sol.beta[active[*slot]] - value,
            ClosureRow::Arclength { tangent, base: b, weights, ds } => {
                let mut s = 0.0;
                for k in 0..y.len() {
                    s += weights[k] * tangent[k] * (y[k] - b[k]);
                }
                s - ds
            }
            ClosureRow::External { row: _, residual } => *residual,
        };
    }
    Ok(res)
}

/// Assemble the residual and the bordered ABD Jacobian.
pub fn assemble_system(
    spec: &BvpSpec,
    sol: &CollocationSolution,
    active: &[usize],
    refs: &[f64],
    ref_dim: usize,
    closures: &[ClosureRow],
    tables: &CollocTables,
) -> Result<Assembled, CollocationError> {
    let nd = spec.n_dim;
    let m = tables.m;
    let nivl = sol.mesh.n_intervals();
    let q = m * nd;
    let w = (m + 1) * nd;
    let na = active.len();
    let n_border = spec.n_bc + spec.n_ic() + closures.len();
    if n_border != nd + na {
        return Err(CollocationError::DimensionMismatch(format!(
            "border rows ({n_border}) must equal n_dim + active ({})",
            nd + na
        )));
    }
    if sol.n_dim != nd {
        return Err(CollocationError::DimensionMismatch("solution dimension".into()));
    }

    let mut abd = AbdMatrix::new(nivl, q, w, na);
    let residual = eval_residual(spec, sol, active, refs, ref_dim, closures, tables)?;
    let nm = abd.n_mesh_cols();

    let mut bufs = WorkBufs {
        u: vec![0.0; nd],
        f: vec![0.0; nd],
        ju: vec![0.0; nd * nd],
        jp: vec![0.0; nd * na],
    };

    for i in 0..nivl {
        let h = sol.mesh.taus[i + 1] - sol.mesh.taus[i];
        let blk = &mut abd.blocks[i];
        for l in 0..m {
            let vals = tables.vals_at(l);
            let ders = tables.ders_at(l);
            bufs.u.fill(0.0);
            for (j, &vj) in vals.iter().enumerate() {
                let p = sol.point(i * m + j);
                for (uu, &pv) in bufs.u.iter_mut().zip(p) {
                    *uu += vj * pv;
                }
            }
            match &spec.rhs_jac_u {
                Some(jac) => jac(&bufs.u, &sol.beta, &mut bufs.ju),
                None => rhs_jac_u_fd(spec, &bufs.u, &sol.beta, &mut bufs.ju),
            }
            if na > 0 {
                match &spec.rhs_jac_p {
                    Some(jac) => jac(&bufs.u, &sol.beta, active, &mut bufs.jp),
                    None => rhs_jac_p_fd(spec, &bufs.u, &sol.beta, active, &mut bufs.jp),
                }
            }
            for k in 0..nd {
                let r = l * nd + k;
                for j in 0..=m {
                    let row = blk.row_mut(r);
                    for kp in 0..nd {
                        row[j * nd + kp] = -h * vals[j] * bufs.ju[k * nd + kp];
                    }
                    row[j * nd + k] += ders[j];
                }
                let row = blk.row_mut(r);
                for a in 0..na {
                    row[w + a] = -h * bufs.jp[k * na + a];
                }
            }
        }
    }

    // boundary condition rows
    let u0 = sol.point(0).to_vec();
    let u1 = sol.point(sol.n_points() - 1).to_vec();
    let nbc = spec.n_bc;
    let mut d0 = vec![0.0; nbc * nd];
    let mut d1 = vec![0.0; nbc * nd];
    let mut dp = vec![0.0; nbc * na.max(1)];
    match &spec.bc_jac {
        Some(jac) => jac(&u0, &u1, &sol.beta, active, &mut d0, &mut d1, &mut dp),
        None => bc_jac_fd(spec, &u0, &u1, &sol.beta, active, &mut d0, &mut d1, &mut dp),
    }
    for r in 0..nbc {
        let row = abd.border.row_mut(r);
        row[..nd].copy_from_slice(&d0[r * nd..(r + 1) * nd]);
        row[nm - nd..nm].copy_from_slice(&d1[r * nd..(r + 1) * nd]);
        for a in 0..na {
            row[nm + a] = dp[r * na + a];
        }
    }

    // integral constraint rows
    let eps = f64::EPSILON.cbrt();
    for (c, ic) in spec.ics.iter().enumerate() {
        let brow = nbc + c;
        let mut qdu = vec![0.0; nd];
        let mut qdp = vec![0.0; na.max(1)];
        for i in 0..nivl {
            let h = sol.mesh.taus[i + 1] - sol.mesh.taus[i];
            for l in 0..m {
                let vals = tables.vals_at(l);
                bufs.u.fill(0.0);
                for (j, &vj) in vals.iter().enumerate() {
                    let p = sol.point(i * m + j);
                    for (uu, &pv) in bufs.u.iter_mut().zip(p) {
                        *uu += vj * pv;
                    }
                }
                let rdata = &refs[(i * m + l) * ref_dim..(i * m + l + 1) * ref_dim];
                match &ic.jac_u {
                    Some(j) => j(&bufs.u, &sol.beta, rdata, &mut qdu),
                    None => {
                        let mut up = bufs.u.clone();
                        for k in 0..nd {
                            let hh = eps * (1.0_f64).max(up[k].abs());
                            let saved = up[k];
                            up[k] = saved + hh;
                            let p = (ic.integrand)(&up, &sol.beta, rdata);
                            up[k] = saved - hh;
                            let mn = (ic.integrand)(&up, &sol.beta, rdata);
                            up[k] = saved;
                            qdu[k] = (p - mn) / (2.0 * hh);
                        }
                    }
                }
                if na > 0 {
                    match &ic.jac_p {
                        Some(j) => j(&bufs.u, &sol.beta, rdata, active, &mut qdp),
                        None => {
                            let mut bb = sol.beta.clone();
                            for (a, &pidx) in active.iter().enumerate() {
                                let hh = eps * (1.0_f64).max(bb[pidx].abs());
                                let saved = bb[pidx];
                                bb[pidx] = saved + hh;
                                let p = (ic.integrand)(&bufs.u, &bb, rdata);
                                bb[pidx] = saved - hh;
                                let mn = (ic.integrand)(&bufs.u, &bb, rdata);
                                bb[pidx] = saved;
                                qdp[a] = (p - mn) / (2.0 * hh);
                            }
                        }
                    }
                }
                let wh = tables.weights[l] * h;
                let row = abd.border.row_mut(brow);
                for (j, &vj) in vals.iter().enumerate() {
                    let col0 = (i * m + j) * nd;
                    for k in 0..nd {
                        row[col0 + k] += wh * vj * qdu[k];
                    }
                }
                for a in 0..na {
                    row[nm + a] += wh * qdp[a];
                }
            }
        }
    }

    // closure rows
    for (c, cl) in closures.iter().enumerate() {
        let brow = nbc + spec.n_ic() + c;
        let row = abd.border.row_mut(brow);
        match cl {
            ClosureRow::Pin { slot, .. } => {
                row[nm + slot] = 1.0;
            }
            ClosureRow::Arclength { tangent, weights, .. } => {
                for k in 0..row.len() {
                    row[k] = weights[k] * tangent[k];
                }
            }
            ClosureRow::External { row: r, .. } => {
                row.copy_from_slice(r);
            }
        }
    }

    let _ = &bufs.f;
    Ok(Assembled { abd, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collocation::{BvpSpec, IntegralConstraint, Mesh, NoRef};
    use crate::quad::CollocTables;

    /// scalar U' = 0 with bc U(0) - c = 0; exact constant solution
    #[test]
    fn constant_problem_has_zero_residual() {
        let spec = BvpSpec::new(
            1,
            1,
            1,
            Box::new(|_u, _b, out| out[0] = 0.0),
            Box::new(|u0, _u1, b, out| out[0] = u0[0] - b[0]),
            vec![],
            vec![0],
        )
        .unwrap();
        let mesh = Mesh::uniform(4, 3);
        let sol = CollocationSolution::from_fn(mesh, 1, vec![0.7], |_tau, out| out[0] = 0.7);
        let tables = CollocTables::new(3);
        let refs = sample_refs(&NoRef, &sol.mesh, &tables);
        let closures = [ClosureRow::Pin { slot: 0, value: 0.7 }];
        let res = eval_residual(&spec, &sol, &[0], &refs, 0, &closures, &tables).unwrap();
        for r in &res {
            assert!(r.abs() < 1e-14, "{res:?}");
        }
    }

    /// scalar U' = lambda U, bc U(0)=1, U(1)=e with lambda = 1 exactly
    #[test]
    fn exponential_exact_solution_residual_small() {
        // beta = [c, lambda]; n_bc=2 -> n_fp=2
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
        let mesh = Mesh::uniform(8, 4);
        let sol = CollocationSolution::from_fn(mesh, 1, vec![std::f64::consts::E, 1.0], |tau, out| {
            out[0] = tau.exp()
        });
        let tables = CollocTables::new(4);
        let refs = sample_refs(&NoRef, &sol.mesh, &tables);
        let closures = [ClosureRow::Pin { slot: 0, value: std::f64::consts::E }];
        let res = eval_residual(&spec, &sol, &[0, 1], &refs, 0, &closures, &tables).unwrap();
        let norm = crate::linalg::norm_inf(&res);
        // interpolation of e^tau by degree-4 pieces on 8 intervals
        assert!(norm < 1e-7, "residual {norm}");
    }

    /// Jacobian matches finite differences of the residual on a small random
    /// problem (n_d=2, N=4, m=3) with an integral constraint.
    #[test]
    fn jacobian_matches_finite_differences() {
        let spec = BvpSpec::new(
            2,
            2,
            2,
            Box::new(|u, b, out| {
                out[0] = b[0] * u[1] + 0.3 * u[0] * u[0];
                out[1] = -u[0] + b[1] * u[1] * u[1];
            }),
            Box::new(|u0, u1, b, out| {
                out[0] = u0[0] - 0.5 * u1[1] + b[0];
                out[1] = u0[1] * u1[0] - 1.0;
            }),
            vec![IntegralConstraint {
                integrand: Box::new(|u, b, _r| u[0] * u[1] + b[1]),
                jac_u: None,
                jac_p: None,
            }],
            vec![0, 1],
        )
        .unwrap();
        let mesh = Mesh::uniform(4, 3);
        let mut sol = CollocationSolution::from_fn(mesh, 2, vec![0.4, -0.3], |tau, out| {
            out[0] = 0.2 + tau;
            out[1] = 1.0 - 0.5 * tau;
        });
        let tables = CollocTables::new(3);
        let refs = sample_refs(&NoRef, &sol.mesh, &tables);
        let weights = vec![1.0; sol.values.len() + 2];
        let base = pack_state(&sol, &[0, 1]);
        let tangent: Vec<f64> = (0..base.len()).map(|k| ((k * 7 % 13) as f64 - 6.0) / 6.0).collect();
        let closures = [ClosureRow::Arclength {
            tangent: &tangent,
            base: &base,
            weights: &weights,
            ds: 0.05,
        }];
        let asm = assemble_system(&spec, &sol, &[0, 1], &refs, 0, &closures, &tables).unwrap();
        let dense = asm.abd.to_dense();
        let n = dense.nrows;

        // finite differences of the residual in every unknown
        let h = 1e-6;
        for col in 0..n {
            let mut up = vec![0.0; n];
            up[col] = h;
            apply_update(&mut sol, &[0, 1], &up, -1.0); // y += h e_col
            let rp = eval_residual(&spec, &sol, &[0, 1], &refs, 0, &closures, &tables).unwrap();
            apply_update(&mut sol, &[0, 1], &up, 2.0); // y -= 2h
            let rm = eval_residual(&spec, &sol, &[0, 1], &refs, 0, &closures, &tables).unwrap();
            apply_update(&mut sol, &[0, 1], &up, -1.0); // restore
            for row in 0..n {
                let fd = (rp[row] - rm[row]) / (2.0 * h);
                let an = dense[(row, col)];
                assert!(
                    (fd - an).abs() <= 1e-4 * (1.0 + an.abs()),
                    "J[{row},{col}] analytic {an} vs fd {fd}"
                );
            }
        }
    }
}
