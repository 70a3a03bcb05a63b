// scratch: distance-to-cycle profile of the seed orbit, to pick T_seed
use conorbit::collocation::{newton_solve, CollocationSolution, Mesh, NewtonSettings, SolutionRef};
use conorbit::continuation::*;
use conorbit::defining::*;
use conorbit::model::{FoodChain, FoodChainParams, OdeSystem, FC_D1};
use conorbit::oracle;
use std::sync::Arc;

fn main() {
    let sys: Arc<dyn OdeSystem> = Arc::new(FoodChain);
    let layout = ParamLayout::for_system(&*sys);
    let alpha = FoodChainParams::with_death_rates(0.25, 0.0125).to_vec();
    let eq = FoodChain::coexistence_equilibrium(&alpha).unwrap();
    let branch = continue_equilibrium(&*sys, &alpha, &eq, FC_D1, 0.7, 60).unwrap();
    let hopf = &detect_hopf(&*sys, &alpha, &branch)[0];
    let cycle_spec = build_cycle_bvp(sys.clone(), CycleSide::Minus, PhaseCondition::Integral, FC_D1).unwrap();
    let mut guess = cycle_guess_from_hopf(hopf, 0.1, Mesh::uniform(40, 4), layout.n_beta());
    guess.beta[..6].copy_from_slice(&alpha);
    guess.beta[FC_D1] = hopf.param_value - 0.001;
    guess.beta[layout.t_minus()] = 2.0 * std::f64::consts::PI / hopf.omega;
    let refc = guess.clone();
    let (fc, _) = newton_solve(&cycle_spec, &guess, &SolutionRef { sol: &refc }, &NewtonSettings::default()).unwrap();
    let opts = ContinuationOptions {
        step: StepControl { ds0: 0.05, ds_max: 2.0, ds_min: 1e-8, max_steps: 150, ..Default::default() },
        user_conditions: vec![UserCondition { param: FC_D1, target: 0.25, stop: false }],
        ..Default::default()
    };
    let cb = continue_branch(&cycle_spec, &fc, Some(&fc), -1.0, &opts).unwrap();
    let fi = cb.points.iter().position(|p| p.label == PointLabel::Fold).unwrap();
    let saddle = cb.points[fi..].iter().find(|p| p.label == PointLabel::User).unwrap();
    let t_saddle = saddle.sol.beta[layout.t_minus()];
    let cycle = CycleData { x: saddle.sol.clone(), period: t_saddle };
    let mr = cycle.monodromy(&*sys, &alpha, 1e-11).unwrap();
    let nt = mr.nontrivial();
    let mu_u = nt[0].re;

    // eigenfunction
    let spec = build_eigenfunction_homotopy_bvp(sys.clone()).unwrap();
    let mut b = cycle.x.beta.clone();
    b[layout.mu()] = mu_u - 0.3;
    b[layout.h_norm()] = 0.0;
    let trivial = CollocationSolution::from_fn(cycle.x.mesh.clone(), 6, b, |tau, out| {
        cycle.x.interpolate(tau, &mut out[..3]).unwrap();
        out[3..].fill(0.0);
    });
    let o = ContinuationOptions {
        step: StepControl { ds0: 0.05, ds_max: 0.2, max_steps: 40, ..Default::default() },
        detect_folds: false,
        detect_branch_points: true,
        adapt_every: 0,
        ..Default::default()
    };
    let triv = continue_branch(&spec, &trivial, Some(&trivial), 1.0, &o).unwrap();
    let bp = triv.points.iter().find(|p| p.label == PointLabel::Branch).unwrap();
    let dir = switch_at_branch_point(&spec, bp, Some(&bp.sol), &o).unwrap();
    let h_stop = ContinuationOptions {
        step: StepControl { ds0: 0.05, ds_max: 0.5, max_steps: 120, ..Default::default() },
        detect_folds: false,
        user_conditions: vec![UserCondition { param: layout.h_norm(), target: 1.0, stop: true }],
        adapt_every: 0,
        ..Default::default()
    };
    let sec = continue_branch_with_tangent(&spec, &bp.sol, dir, Some(&bp.sol), &h_stop).unwrap();
    let vend = sec.points.last().unwrap();
    let xm = CycleData { x: split_composite6(&vend.sol, 0), period: t_saddle };
    let mut v0 = [vend.sol.point(0)[3], vend.sol.point(0)[4], vend.sol.point(0)[5]];

    for eps in [-0.001, 0.001] {
        let mut v = v0;
        if eps * v[2] < 0.0 {
            for x in v.iter_mut() { *x = -*x; }
        }
        let x0 = xm.base_point();
        let u0: Vec<f64> = (0..3).map(|k| x0[k] + eps * v[k]).collect();
        let traj = oracle::integrate(&*sys, &u0, &alpha, (0.0, 900.0), 1e-11).unwrap();
        let dist = |p: &[f64]| -> f64 {
            let mut best = f64::INFINITY;
            for k in 0..xm.x.n_points() {
                let q = xm.x.point(k);
                let d = (0..3).map(|i| (p[i] - q[i]) * (p[i] - q[i])).sum::<f64>().sqrt();
                best = best.min(d);
            }
            best
        };
        println!("=== eps = {eps}, v = {v:?}");
        let mut buf = [0.0; 3];
        let mut tmin = 0.0;
        let mut dmin = f64::INFINITY;
        for k in 0..900 {
            let t = k as f64;
            traj.sample(t, &mut buf);
            let d = dist(&buf);
            if t > 300.0 && d < dmin {
                dmin = d;
                tmin = t;
            }
            if k % 25 == 0 {
                println!("  t={t:5.0} dist={d:.4}");
            }
        }
        println!("  min dist after t=300: {dmin:.5} at t={tmin}");
        // refine around tmin
        let mut best = (tmin, dmin);
        for k in -400..=400 {
            let t = tmin + k as f64 * 0.05;
            traj.sample(t, &mut buf);
            let d = dist(&buf);
            if d < best.1 { best = (t, d); }
        }
        println!("  refined: dist={:.5} at t={:.2}", best.1, best.0);
    }
    let _ = &mut v0;
}
