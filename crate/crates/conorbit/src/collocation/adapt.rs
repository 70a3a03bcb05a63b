//! Mesh redistribution by equidistributing an interpolation-error estimate.

use super::{CollocationError, CollocationSolution, Mesh};

/// New mesh equidistributing the local error monitor h^(m+1) |U^(m+1)|, with
/// the (m+1)-th derivative estimated from jumps of the per-interval m-th
/// derivative (a divided-difference estimate). The interval count is
/// preserved and the solution is re-interpolated. Returns the input unchanged
/// when the monitor is already equidistributed within a factor of 2.
pub fn adapt_mesh(sol: &CollocationSolution) -> Result<CollocationSolution, CollocationError> {
    let mesh = &sol.mesh;
    let n = mesh.n_intervals();
    let m = mesh.m;
    let nd = sol.n_dim;

    // component scales for relative weighting
    let mut scale = vec![0.0_f64; nd];
    for k in 0..sol.n_points() {
        for (s, &v) in scale.iter_mut().zip(sol.point(k)) {
            *s = s.max(v.abs());
        }
    }
    for s in scale.iter_mut() {
        *s = 1.0 + *s;
    }

    // m-th derivative of each interval polynomial (constant per interval):
    // m-th forward difference over the m+1 equispaced points / (h/m)^m
    let mut dm = vec![0.0_f64; n * nd];
    let mut binom = vec![0.0_f64; m + 1];
    for (j, b) in binom.iter_mut().enumerate() {
        let mut c = 1.0;
        for t in 0..j {
            c = c * (m - t) as f64 / (t + 1) as f64;
        }
        *b = if (m - j) % 2 == 0 { c } else { -c };
    }
    for i in 0..n {
        let h = mesh.taus[i + 1] - mesh.taus[i];
        let dx = h / m as f64;
        for k in 0..nd {
            let mut acc = 0.0;
            for (j, &bj) in binom.iter().enumerate() {
                acc += bj * sol.point(i * m + j)[k];
            }
            dm[i * nd + k] = acc / dx.powi(m as i32);
        }
    }

    // interface jumps -> estimate of the (m+1)-th derivative per interval
    let mut g = vec![0.0_f64; n];
    for i in 1..n {
        let gap = 0.5 * (mesh.taus[i + 1] - mesh.taus[i - 1]);
        let mut jump = 0.0;
        for k in 0..nd {
            jump += ((dm[i * nd + k] - dm[(i - 1) * nd + k]) / scale[k]).abs();
        }
        let est = jump / gap;
        g[i] = g[i].max(est);
        g[i - 1] = g[i - 1].max(est);
    }
    let gmax = g.iter().cloned().fold(0.0, f64::max);
    if gmax <= 1e-300 {
        return Ok(sol.clone()); // constant or polynomial-exact solution
    }
    for gi in g.iter_mut() {
        *gi = gi.max(1e-8 * gmax);
    }

    // already equidistributed within factor 2?
    let mut emax: f64 = 0.0;
    let mut emin = f64::INFINITY;
    for i in 0..n {
        let h = mesh.taus[i + 1] - mesh.taus[i];
        let e = h.powi(m as i32 + 1) * g[i];
        emax = emax.max(e);
        emin = emin.min(e);
    }
    if emax <= 2.0 * emin {
        return Ok(sol.clone());
    }

    // equidistribute the density g^(1/(m+1)) by its piecewise-constant
    // cumulative integral
    let p = 1.0 / (m as f64 + 1.0);
    let mut cum = vec![0.0_f64; n + 1];
    for i in 0..n {
        let h = mesh.taus[i + 1] - mesh.taus[i];
        cum[i + 1] = cum[i] + h * g[i].powf(p);
    }
    let total = cum[n];
    let mut new_taus = vec![0.0_f64; n + 1];
    new_taus[n] = 1.0;
    let mut seg = 0usize;
    for j in 1..n {
        let target = total * j as f64 / n as f64;
        while seg + 1 < n && cum[seg + 1] < target {
            seg += 1;
        }
        let frac = (target - cum[seg]) / (cum[seg + 1] - cum[seg]);
        new_taus[j] = mesh.taus[seg] + frac * (mesh.taus[seg + 1] - mesh.taus[seg]);
    }
    // guard monotonicity against degenerate monitors
    for j in 1..=n {
        if new_taus[j] <= new_taus[j - 1] {
            return Ok(sol.clone());
        }
    }

    let new_mesh = Mesh { taus: new_taus, m };
    let mut out = CollocationSolution {
        mesh: new_mesh,
        n_dim: nd,
        values: vec![0.0; sol.values.len()],
        beta: sol.beta.clone(),
    };
    let fine = out.mesh.fine_taus();
    let mut buf = vec![0.0; nd];
    for (k, &tau) in fine.iter().enumerate() {
        sol.interpolate(tau, &mut buf)?;
        out.point_mut(k).copy_from_slice(&buf);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collocation::{newton_solve, BvpSpec, NewtonSettings, NoRef};

    #[test]
    fn constant_solution_keeps_mesh() {
        let mesh = Mesh::uniform(6, 4);
        let sol = CollocationSolution::from_fn(mesh.clone(), 2, vec![], |_t, out| {
            out[0] = 1.0;
            out[1] = -2.0;
        });
        let adapted = adapt_mesh(&sol).unwrap();
        assert_eq!(adapted.mesh.taus, mesh.taus);
    }

    #[test]
    fn boundary_layer_attracts_intervals() {
        let mesh = Mesh::uniform(20, 4);
        let sol = CollocationSolution::from_fn(mesh, 1, vec![], |tau, out| {
            out[0] = (50.0 * (tau - 0.5)).tanh();
        });
        let adapted = adapt_mesh(&sol).unwrap();
        let count_in = |lo: f64, hi: f64, m: &Mesh| {
            (0..m.n_intervals())
                .filter(|&i| m.taus[i] >= lo - 1e-12 && m.taus[i + 1] <= hi + 1e-12)
                .count()
        };
        let center = count_in(0.4, 0.6, &adapted.mesh);
        let edge = count_in(0.0, 0.2, &adapted.mesh);
        assert!(
            center >= 2 * edge.max(1),
            "center {center} vs edge {edge}: {:?}",
            adapted.mesh.taus
        );
        assert_eq!(adapted.mesh.n_intervals(), 20);
    }

    #[test]
    fn reinterpolation_consistency_and_parameter_reproduction() {
        // solve U' = lambda U, U(0)=1, U(1)=2, then adapt and re-solve
        let make_spec = || {
            BvpSpec::new(
                1,
                2,
                2,
                Box::new(|u: &[f64], b: &[f64], out: &mut [f64]| out[0] = b[1] * u[0]),
                Box::new(|u0: &[f64], u1: &[f64], b: &[f64], out: &mut [f64]| {
                    out[0] = u0[0] - 1.0;
                    out[1] = u1[0] - b[0];
                }),
                vec![],
                vec![0, 1],
            )
            .unwrap()
        };
        let mesh = Mesh::uniform(8, 4);
        let sol0 = CollocationSolution::from_fn(mesh, 1, vec![2.0, 0.5], |_t, out| out[0] = 1.0);
        let (sol, _) = newton_solve(&make_spec(), &sol0, &NoRef, &NewtonSettings::default()).unwrap();
        let lambda = sol.beta[1];

        let adapted = adapt_mesh(&sol).unwrap();
        // values at matched tau agree closely after re-interpolation
        let mut a = [0.0];
        let mut b = [0.0];
        for &tau in &[0.1, 0.35, 0.5, 0.81, 0.99] {
            sol.interpolate(tau, &mut a).unwrap();
            adapted.interpolate(tau, &mut b).unwrap();
            assert!((a[0] - b[0]).abs() < 1e-8, "tau={tau}: {} vs {}", a[0], b[0]);
        }
        // re-solving on the adapted mesh reproduces lambda to 1e-8 relative
        let (sol2, _) =
            newton_solve(&make_spec(), &adapted, &NoRef, &NewtonSettings::default()).unwrap();
        assert!(((sol2.beta[1] - lambda) / lambda).abs() < 1e-8);
    }
}
