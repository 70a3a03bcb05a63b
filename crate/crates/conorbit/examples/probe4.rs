// scratch probe: linear solve accuracy on the composite homotopy system
use conorbit::collocation::{
    assemble_system, sample_refs, ClosureRow, CollocationSolution, Mesh, NoRef, RefSource,
};
use conorbit::continuation::{
    continue_branch, continue_branch_with_tangent, continue_equilibrium, cycle_guess_from_hopf,
    detect_hopf, switch_at_branch_point, ContinuationOptions, PointLabel, StepControl,
    UserCondition,
};
use conorbit::collocation::{newton_solve, NewtonSettings, SolutionRef};
use conorbit::defining::*;
use conorbit::linalg::AbdLu;
use conorbit::model::{FoodChain, FoodChainParams, OdeSystem, FC_D1};
use conorbit::quad::CollocTables;
use std::sync::Arc;

fn main() {
    let sys: Arc<dyn OdeSystem> = Arc::new(FoodChain);
    let layout = ParamLayout::for_system(&*sys);
    let alpha = FoodChainParams::with_death_rates(0.25, 0.0125).to_vec();

    // fast path to the saddle cycle (phase arbitrary)
    let eq = FoodChain::coexistence_equilibrium(&alpha).unwrap();
    let branch = continue_equilibrium(&*sys, &alpha, &eq, FC_D1, 0.7, 60).unwrap();
    let hopf = &detect_hopf(&*sys, &alpha, &branch)[0];
    let cycle_spec =
        build_cycle_bvp(sys.clone(), CycleSide::Minus, PhaseCondition::Integral, FC_D1).unwrap();
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
    let (mu_u, mu_s) = (nt[0].re, nt[1].re);

    // eigen + adjoints (phase of the cycle kept)
    let eigen = |target: f64, adjoint: Option<(CycleSide, f64)>| -> (CollocationSolution, f64) {
        let (spec, pidx) = match adjoint {
            None => (build_eigenfunction_homotopy_bvp(sys.clone()).unwrap(), layout.mu()),
            Some((side, sign)) => (
                build_adjoint_homotopy_bvp(sys.clone(), side, sign).unwrap(),
                layout.lambda_side(side),
            ),
        };
        let mut b = cycle.x.beta.clone();
        b[pidx] = target - 0.3;
        b[layout.h_norm()] = 0.0;
        if let Some((side, _)) = adjoint {
            b[layout.t_side(side)] = cycle.period;
        }
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
        let end = sec.points.last().unwrap();
        (end.sol.clone(), end.sol.beta[pidx])
    };
    let (veig, _mu) = eigen(mu_u, None);
    let (wms, lam_m) = eigen(-mu_s.abs().ln(), Some((CycleSide::Minus, mu_s.signum())));
    let (wps, lam_p) = eigen(-mu_u.abs().ln(), Some((CycleSide::Plus, mu_u.signum())));
    let wm = AdjointEigenData { w: split_composite6(&wms, 1), lambda: lam_m, sign: mu_s.signum() };
    let wp = AdjointEigenData { w: split_composite6(&wps, 1), lambda: lam_p, sign: mu_u.signum() };
    let xm = CycleData { x: split_composite6(&veig, 0), period: t_saddle };
    let base = xm.base_point();
    let mut v0 = [veig.point(0)[3], veig.point(0)[4], veig.point(0)[5]];
    let eps = -0.001;
    if eps * v0[2] < 0.0 {
        for v in v0.iter_mut() {
            *v = -*v;
        }
    }
    let conn =
        seed_connection(&*sys, &alpha, &xm, &v0, eps, 503.168, Mesh::uniform(200, 4), 1e-11).unwrap();
    let mut comp = assemble_composite(&*sys, &alpha, &xm, &xm, &wm, &wp, &conn, 0.0);
    let u0 = comp.point(0).to_vec();
    let u1 = comp.point(comp.n_points() - 1).to_vec();
    let gaps = gap_values(&*sys, &alpha, &u0, &u1);
    comp.beta[layout.h11()] = gaps[0];
    comp.beta[layout.h12()] = gaps[1];
    comp.beta[layout.h21()] = gaps[2];
    comp.beta[layout.h22()] = gaps[3];

    let anchors =
        HomotopyAnchors { j_minus: 1, a_minus: base[1], j_plus: 0, a_plus: base[0], h: [0.0; 4] };
    let hspec =
        build_connection_homotopy_bvp(sys.clone(), anchors, ActiveGap::H11, wm.sign, wp.sign).unwrap();

    // assemble, factor, solve, measure linear residual
    let tables = CollocTables::new(comp.mesh.m);
    let refs = sample_refs(&NoRef, &comp.mesh, &tables);
    let active = hspec.free_params.clone();
    let closures = [ClosureRow::Pin { slot: 0, value: comp.beta[active[0]] }];
    let asm = assemble_system(&hspec, &comp, &active, &refs, 0, &closures, &tables).unwrap();
    println!("newton residual |R|_inf = {:.3e}", conorbit::linalg::norm_inf(&asm.residual));
    let lu = AbdLu::factor(&asm.abd).unwrap();
    let n = asm.abd.n();
    let delta = lu.solve(&asm.residual);
    let mut ax = vec![0.0; n];
    asm.abd.matvec(&delta, &mut ax);
    let mut err = 0.0f64;
    let mut where_ = 0usize;
    for i in 0..n {
        let e = (ax[i] - asm.residual[i]).abs();
        if e > err {
            err = e;
            where_ = i;
        }
    }
    println!(
        "linear solve: |A d - R|_inf = {:.3e} (rel {:.3e}) at row {} / {}",
        err,
        err / conorbit::linalg::norm_inf(&asm.residual),
        where_,
        n
    );
    // iterative refinement
    let mut d = delta.clone();
    for it in 0..3 {
        let mut r = vec![0.0; n];
        asm.abd.matvec(&d, &mut r);
        for i in 0..n {
            r[i] = asm.residual[i] - r[i];
        }
        let corr = lu.solve(&r);
        for i in 0..n {
            d[i] += corr[i];
        }
        let mut ax = vec![0.0; n];
        asm.abd.matvec(&d, &mut ax);
        let e = (0..n).map(|i| (ax[i] - asm.residual[i]).abs()).fold(0.0, f64::max);
        println!("after refinement {}: |A d - R|_inf = {:.3e}", it + 1, e);
    }
    println!("|delta|_inf = {:.3e}", conorbit::linalg::norm_inf(&delta));
}
