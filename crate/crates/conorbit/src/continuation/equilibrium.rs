//! Equilibrium branches of 3D systems with analytic eigenvalues, Hopf
//! detection by bisection on the real part of the complex pair, and initial
//! cycle guesses from Hopf data.

use super::ContinuationError;
use crate::collocation::{CollocationSolution, Mesh};
use crate::linalg::eig3;
use crate::model::OdeSystem;
use num_complex::Complex64;

/// Equilibrium family u*(alpha[param]) with eigenvalue data.
pub struct EquilibriumBranch {
    pub param: usize,
    pub param_values: Vec<f64>,
    pub states: Vec<[f64; 3]>,
    pub eigenvalues: Vec<[Complex64; 3]>,
    /// Hopf test: real part of the product of pairwise eigenvalue sums.
    pub hopf_tests: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct HopfPoint {
    pub param_value: f64,
    pub u: [f64; 3],
    pub omega: f64,
    pub eigvec: [Complex64; 3],
}

fn newton_equilibrium(
    sys: &dyn OdeSystem,
    alpha: &[f64],
    u0: &[f64; 3],
) -> Option<[f64; 3]> {
    let mut u = *u0;
    let mut f = [0.0; 3];
    let mut j = [0.0; 9];
    for _ in 0..40 {
        sys.rhs(&u, alpha, &mut f);
        let r = crate::linalg::norm_inf(&f);
        if r < 1e-12 {
            return Some(u);
        }
        sys.jac_state(&u, alpha, &mut j);
        let m = crate::linalg::Mat { nrows: 3, ncols: 3, data: j.to_vec() };
        let lu = crate::linalg::DenseLu::factor(m)?;
        let mut d = f.to_vec();
        lu.solve(&mut d);
        for k in 0..3 {
            u[k] -= d[k];
        }
        if !u.iter().all(|v| v.is_finite()) {
            return None;
        }
    }
    sys.rhs(&u, alpha, &mut f);
    (crate::linalg::norm_inf(&f) < 1e-10).then_some(u)
}

fn eig_data(sys: &dyn OdeSystem, alpha: &[f64], u: &[f64; 3]) -> ([Complex64; 3], f64) {
    let mut j = [0.0; 9];
    sys.jac_state(u, alpha, &mut j);
    let ev = eig3(&j);
    let prod = (ev[0] + ev[1]) * (ev[0] + ev[2]) * (ev[1] + ev[2]);
    (ev, prod.re)
}

/// Follow the equilibrium u*(alpha[param]) from `u0` at `alpha` to
/// `param_to`, recording eigenvalues along the way. Steps are halved when
/// Newton fails to track the family.
pub fn continue_equilibrium(
    sys: &dyn OdeSystem,
    alpha: &[f64],
    u0: &[f64; 3],
    param: usize,
    param_to: f64,
    n_steps: usize,
) -> Result<EquilibriumBranch, ContinuationError> {
    assert_eq!(sys.dim(), 3, "equilibrium branches are for 3D systems");
    let mut a = alpha.to_vec();
    let mut u = newton_equilibrium(sys, &a, u0).ok_or_else(|| {
        ContinuationError::Localization("initial equilibrium did not converge".into())
    })?;
    let mut branch = EquilibriumBranch {
        param,
        param_values: vec![a[param]],
        states: vec![u],
        eigenvalues: Vec::new(),
        hopf_tests: Vec::new(),
    };
    let (ev, ht) = eig_data(sys, &a, &u);
    branch.eigenvalues.push(ev);
    branch.hopf_tests.push(ht);

    let span = param_to - a[param];
    let mut step = span / n_steps.max(1) as f64;
    let mut current = a[param];
    while (param_to - current) * span.signum() > 1e-14 {
        let next = if (current + step - param_to) * span.signum() > 0.0 {
            param_to
        } else {
            current + step
        };
        a[param] = next;
        match newton_equilibrium(sys, &a, &u) {
            Some(un) => {
                u = un;
                current = next;
                let (ev, ht) = eig_data(sys, &a, &u);
                branch.param_values.push(current);
                branch.states.push(u);
                branch.eigenvalues.push(ev);
                branch.hopf_tests.push(ht);
                step = (step * 1.3).clamp(-span.abs() / 8.0, span.abs() / 8.0)
                    * if span >= 0.0 { 1.0 } else { 1.0 };
                if step.abs() > span.abs() / n_steps.max(1) as f64 {
                    step = span / n_steps.max(1) as f64;
                }
            }
            None => {
                step *= 0.5;
                if step.abs() < 1e-12 * (1.0 + span.abs()) {
                    return Err(ContinuationError::Localization(
                        "equilibrium tracking stalled".into(),
                    ));
                }
            }
        }
    }
    Ok(branch)
}

/// Real part of the complex eigenvalue pair, or None when all eigenvalues are
/// real.
fn pair_real_part(ev: &[Complex64; 3]) -> Option<(f64, f64)> {
    for e in ev {
        if e.im.abs() > 1e-12 {
            return Some((e.re, e.im.abs()));
        }
    }
    None
}

/// Locate parameter values where a complex eigenvalue pair crosses the
/// imaginary axis, by bisection on the real part between branch samples.
pub fn detect_hopf(
    sys: &dyn OdeSystem,
    alpha: &[f64],
    branch: &EquilibriumBranch,
) -> Vec<HopfPoint> {
    let mut out = Vec::new();
    for k in 1..branch.param_values.len() {
        let (ra, _) = match pair_real_part(&branch.eigenvalues[k - 1]) {
            Some(x) => x,
            None => continue,
        };
        let (rb, _) = match pair_real_part(&branch.eigenvalues[k]) {
            Some(x) => x,
            None => continue,
        };
        if ra * rb >= 0.0 {
            continue;
        }
        // bisection on the pair real part
        let mut a = alpha.to_vec();
        let mut lo = branch.param_values[k - 1];
        let mut hi = branch.param_values[k];
        let mut flo = ra;
        let mut u = branch.states[k - 1];
        let mut located: Option<HopfPoint> = None;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            a[branch.param] = mid;
            let um = match newton_equilibrium(sys, &a, &u) {
                Some(x) => x,
                None => break,
            };
            u = um;
            let (ev, _) = eig_data(sys, &a, &u);
            let (rm, im) = match pair_real_part(&ev) {
                Some(x) => x,
                None => break,
            };
            if rm.abs() < 1e-12 || (hi - lo).abs() < 1e-13 * (1.0 + mid.abs()) {
                let mut j = [0.0; 9];
                sys.jac_state(&u, &a, &mut j);
                let v = complex_eigvec(&j, Complex64::new(0.0, im));
                located = Some(HopfPoint { param_value: mid, u, omega: im, eigvec: v });
                break;
            }
            if flo * rm < 0.0 {
                hi = mid;
            } else {
                lo = mid;
                flo = rm;
            }
        }
        if let Some(h) = located {
            out.push(h);
        }
    }
    out
}

/// Null vector of (J - lambda I) for a simple complex eigenvalue, via the
/// cross product of the two most independent rows.
fn complex_eigvec(j: &[f64; 9], lambda: Complex64) -> [Complex64; 3] {
    let a = |r: usize, c: usize| {
        Complex64::new(j[r * 3 + c], 0.0) - if r == c { lambda } else { Complex64::new(0.0, 0.0) }
    };
    let rows: [[Complex64; 3]; 3] =
        [[a(0, 0), a(0, 1), a(0, 2)], [a(1, 0), a(1, 1), a(1, 2)], [a(2, 0), a(2, 1), a(2, 2)]];
    let cross = |p: &[Complex64; 3], q: &[Complex64; 3]| -> [Complex64; 3] {
        [
            p[1] * q[2] - p[2] * q[1],
            p[2] * q[0] - p[0] * q[2],
            p[0] * q[1] - p[1] * q[0],
        ]
    };
    let mut best = [Complex64::new(0.0, 0.0); 3];
    let mut best_norm = -1.0;
    for (p, q) in [(0, 1), (0, 2), (1, 2)] {
        let v = cross(&rows[p], &rows[q]);
        let n: f64 = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if n > best_norm {
            best_norm = n;
            best = v;
        }
    }
    let n: f64 = best.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if n > 0.0 {
        for z in best.iter_mut() {
            *z /= n;
        }
    }
    best
}

/// First cycle guess near a Hopf point:
/// x(tau) = u* + eps0 (Re v cos 2 pi tau - Im v sin 2 pi tau), period 2 pi / omega.
pub fn cycle_guess_from_hopf(
    hopf: &HopfPoint,
    eps0: f64,
    mesh: Mesh,
    n_beta: usize,
) -> CollocationSolution {
    let v = hopf.eigvec;
    CollocationSolution::from_fn(mesh, 3, vec![0.0; n_beta], |tau, out| {
        let ang = 2.0 * std::f64::consts::PI * tau;
        let (c, s) = (ang.cos(), ang.sin());
        for k in 0..3 {
            out[k] = hopf.u[k] + eps0 * (v[k].re * c - v[k].im * s);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FoodChain, FoodChainParams, OdeSystem};

    /// Linear system with eigenvalues beta +/- i and -1.
    struct LinearHopf;
    impl OdeSystem for LinearHopf {
        fn dim(&self) -> usize {
            3
        }
        fn n_params(&self) -> usize {
            1
        }
        fn param_names(&self) -> &[&'static str] {
            &["beta"]
        }
        fn rhs(&self, u: &[f64], a: &[f64], out: &mut [f64]) {
            out[0] = a[0] * u[0] - u[1];
            out[1] = u[0] + a[0] * u[1];
            out[2] = -u[2];
        }
        fn jac_state(&self, _u: &[f64], a: &[f64], out: &mut [f64]) {
            out.copy_from_slice(&[a[0], -1.0, 0.0, 1.0, a[0], 0.0, 0.0, 0.0, -1.0]);
        }
    }

    #[test]
    fn linear_hopf_at_zero_with_unit_frequency() {
        let sys = LinearHopf;
        let branch =
            continue_equilibrium(&sys, &[-0.5], &[0.0, 0.0, 0.0], 0, 0.5, 20).unwrap();
        let hopfs = detect_hopf(&sys, &[-0.5], &branch);
        assert_eq!(hopfs.len(), 1);
        let h = &hopfs[0];
        assert!(h.param_value.abs() < 1e-9, "Hopf at beta = {}", h.param_value);
        assert!((h.omega - 1.0).abs() < 1e-9);
        // eigenvector lies in the (x1, x2) plane
        assert!(h.eigvec[2].norm() < 1e-9);
    }

    /// Hopf of the planar Rosenzweig-MacArthur subsystem (x3 = 0 face):
    /// analytic location d1* = a1 (b1 - 1) / (b1 (b1 + 1)) = 5/6.
    #[test]
    fn planar_food_chain_hopf_matches_analytic_condition() {
        let sys = FoodChain;
        let alpha = FoodChainParams::with_death_rates(0.9, 0.0125).to_vec();
        // planar equilibrium at d1 = 0.9: x1 = d1/(a1 - b1 d1), x2 from f1 balance
        let x1 = 0.9 / (5.0 - 3.0 * 0.9);
        let x2 = (1.0 - x1) * (1.0 + 3.0 * x1) / 5.0;
        let branch =
            continue_equilibrium(&sys, &alpha, &[x1, x2, 0.0], crate::model::FC_D1, 0.75, 40)
                .unwrap();
        let hopfs = detect_hopf(&sys, &alpha, &branch);
        assert_eq!(hopfs.len(), 1, "expected exactly one Hopf crossing");
        let analytic = 5.0 / 6.0;
        assert!(
            (hopfs[0].param_value - analytic).abs() < 1e-8,
            "Hopf at {} vs analytic {}",
            hopfs[0].param_value,
            analytic
        );
        // the face is invariant: third eigenvector component decouples
        assert!(hopfs[0].u[2].abs() < 1e-12);
    }

    /// 3D food-chain Hopf at d2 = 0.0125: cross-checked against an
    /// independent eigenvalue scan (shooting oracle gives 0.5122706620).
    #[test]
    fn food_chain_3d_hopf_location() {
        let sys = FoodChain;
        let alpha = FoodChainParams::with_death_rates(0.25, 0.0125).to_vec();
        let eq = FoodChain::coexistence_equilibrium(&alpha).unwrap();
        let branch =
            continue_equilibrium(&sys, &alpha, &eq, crate::model::FC_D1, 0.7, 60).unwrap();
        let hopfs = detect_hopf(&sys, &alpha, &branch);
        assert_eq!(hopfs.len(), 1);
        assert!(
            (hopfs[0].param_value - 0.5122706620).abs() < 1e-6,
            "3D Hopf at {}",
            hopfs[0].param_value
        );
        assert!((hopfs[0].omega - 0.0913005704).abs() < 1e-6);
    }

    #[test]
    fn equilibria_satisfy_rhs_tolerance() {
        let sys = FoodChain;
        let alpha = FoodChainParams::with_death_rates(0.25, 0.0125).to_vec();
        let eq = FoodChain::coexistence_equilibrium(&alpha).unwrap();
        let branch =
            continue_equilibrium(&sys, &alpha, &eq, crate::model::FC_D1, 0.4, 20).unwrap();
        let mut a = alpha.clone();
        let mut f = [0.0; 3];
        for (pv, u) in branch.param_values.iter().zip(&branch.states) {
            a[crate::model::FC_D1] = *pv;
            sys.rhs(u, &a, &mut f);
            assert!(crate::linalg::norm_inf(&f) < 1e-10);
        }
    }
}
