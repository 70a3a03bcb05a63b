// scratch probe for the food-chain stages; not part of the shipped pipeline
use conorbit::collocation::{newton_solve, CollocationSolution, Mesh, NewtonSettings, SolutionRef};
use conorbit::continuation::{
    continue_branch, continue_branch_with_tangent, continue_equilibrium, cycle_guess_from_hopf,
    detect_hopf, switch_at_branch_point, ContinuationOptions, PointLabel, StepControl,
    UserCondition,
};
use conorbit::defining::{
    build_adjoint_homotopy_bvp, build_cycle_bvp, build_eigenfunction_homotopy_bvp, CycleData,
    CycleSide, ParamLayout, PhaseCondition,
};
use conorbit::model::{FoodChain, FoodChainParams, FC_D1};
use std::sync::Arc;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let sys: Arc<dyn conorbit::model::OdeSystem> = Arc::new(FoodChain);
    let layout = ParamLayout::for_system(&*sys);
    let alpha = FoodChainParams::with_death_rates(0.25, 0.0125).to_vec();

    // 1. equilibrium + Hopf
    let eq = FoodChain::coexistence_equilibrium(&alpha).unwrap();
    let branch = continue_equilibrium(&*sys, &alpha, &eq, FC_D1, 0.7, 60).unwrap();
    let hopfs = detect_hopf(&*sys, &alpha, &branch);
    println!("[{:?}] hopf: {:?}", t0.elapsed(), hopfs.iter().map(|h| h.param_value).collect::<Vec<_>>());
    let hopf = &hopfs[0];

    // 2. cycle from Hopf
    let cycle_spec =
        build_cycle_bvp(sys.clone(), CycleSide::Minus, PhaseCondition::Integral, FC_D1).unwrap();
    let mesh = Mesh::uniform(40, 4);
    let mut eps0 = 0.1;
    let mut first_cycle: Option<CollocationSolution> = None;
    for _ in 0..5 {
        let mut guess = cycle_guess_from_hopf(hopf, eps0, mesh.clone(), layout.n_beta());
        guess.beta[..6].copy_from_slice(&alpha);
        guess.beta[FC_D1] = hopf.param_value - 0.001;
        guess.beta[layout.t_minus()] = 2.0 * std::f64::consts::PI / hopf.omega;
        let reference = guess.clone();
        match newton_solve(&cycle_spec, &guess, &SolutionRef { sol: &reference }, &NewtonSettings::default()) {
            Ok((sol, rep)) => {
                println!(
                    "[{:?}] cycle from hopf converged: eps0={eps0} iters={} T={:.6}",
                    t0.elapsed(),
                    rep.iterations,
                    sol.beta[layout.t_minus()]
                );
                first_cycle = Some(sol);
                break;
            }
            Err(e) => {
                println!("  eps0={eps0}: {e}");
                eps0 *= 0.5;
            }
        }
    }
    let first_cycle = first_cycle.expect("cycle from Hopf");

    // 3. continue the cycle family down in d1, through the fold, back to 0.25
    let opts = ContinuationOptions {
        step: StepControl { ds0: 0.05, ds_max: 2.0, ds_min: 1e-8, max_steps: 400, ..Default::default() },
        detect_folds: true,
        user_conditions: vec![UserCondition { param: FC_D1, target: 0.25, stop: false }],
        adapt_every: 1,
        ..Default::default()
    };
    let cyc_branch = continue_branch(&cycle_spec, &first_cycle, Some(&first_cycle), -1.0, &opts).unwrap();
    println!(
        "[{:?}] cycle branch: {} points, termination: {}",
        t0.elapsed(),
        cyc_branch.points.len(),
        cyc_branch.termination
    );
    for (i, p) in cyc_branch.points.iter().enumerate() {
        if p.label != PointLabel::Regular {
            println!(
                "  {} {} d1={:.7} T={:.5}",
                i,
                p.label.code(),
                p.sol.beta[FC_D1],
                p.sol.beta[layout.t_minus()]
            );
        }
    }
    let fold_idx = cyc_branch.points.iter().position(|p| p.label == PointLabel::Fold);
    println!("  fold of cycles at d1 = {:?} (paper 0.2080452)", fold_idx.map(|i| cyc_branch.points[i].sol.beta[FC_D1]));

    // saddle segment representative at d1 = 0.25 (UZ after the fold)
    let saddle = match fold_idx {
        Some(fi) => cyc_branch.points[fi..]
            .iter()
            .find(|p| p.label == PointLabel::User)
            .expect("saddle UZ point"),
        None => panic!("no fold found"),
    };
    let t_saddle = saddle.sol.beta[layout.t_minus()];
    println!(
        "[{:?}] saddle cycle at d1={:.6}: T = {:.7} (paper 24.28225), base = {:?}",
        t0.elapsed(),
        saddle.sol.beta[FC_D1],
        t_saddle,
        &saddle.sol.point(0)
    );

    // 4. oracle monodromy
    let cd = CycleData { x: saddle.sol.clone(), period: t_saddle };
    let mr = cd.monodromy(&*sys, &alpha, 1e-11).unwrap();
    println!("  multipliers: {:?}", mr.multipliers);
    let nt = mr.nontrivial();
    let mu_u = nt[0].re;
    let mu_s = nt[1].re;
    println!(
        "  ln|mu_u| = {:.7} (0.4399610), ln|mu_s| = {:.7} (-6.4146812)",
        mu_u.abs().ln(),
        mu_s.abs().ln()
    );

    // 5. eigenfunction homotopy: trivial family in mu, BP at mu_u, switch,
    //    continue to h = 1
    let eig_spec = build_eigenfunction_homotopy_bvp(sys.clone()).unwrap();
    let mut comp_beta = saddle.sol.beta.clone();
    comp_beta[layout.mu()] = mu_u - 0.35;
    comp_beta[layout.h_norm()] = 0.0;
    let trivial = CollocationSolution::from_fn(saddle.sol.mesh.clone(), 6, comp_beta, |tau, out| {
        cd.x.interpolate(tau, &mut out[..3]).unwrap();
        out[3..].fill(0.0);
    });
    let eig_opts = ContinuationOptions {
        step: StepControl { ds0: 0.05, ds_max: 0.2, max_steps: 60, ..Default::default() },
        detect_folds: false,
        detect_branch_points: true,
        adapt_every: 0,
        ..Default::default()
    };
    let triv_branch = continue_branch(&eig_spec, &trivial, Some(&trivial), 1.0, &eig_opts).unwrap();
    println!(
        "[{:?}] trivial eigen family: {} pts, {}",
        t0.elapsed(),
        triv_branch.points.len(),
        triv_branch.termination
    );
    let bp = triv_branch
        .points
        .iter()
        .find(|p| p.label == PointLabel::Branch)
        .expect("BP on trivial family");
    println!("  BP at mu = {:.7} (oracle mu_u = {:.7})", bp.sol.beta[layout.mu()], mu_u);

    let secondary = switch_at_branch_point(&eig_spec, bp, Some(&bp.sol), &eig_opts).unwrap();
    let h_stop = ContinuationOptions {
        step: StepControl { ds0: 0.05, ds_max: 0.5, max_steps: 120, ..Default::default() },
        detect_folds: false,
        user_conditions: vec![UserCondition { param: layout.h_norm(), target: 1.0, stop: true }],
        adapt_every: 0,
        ..Default::default()
    };
    let sec = continue_branch_with_tangent(&eig_spec, &bp.sol, secondary, Some(&bp.sol), &h_stop).unwrap();
    let vend = sec.points.last().unwrap();
    println!(
        "[{:?}] eigenfunction at h={:.6}: mu = {:.7}, v(0) = {:?} (paper (-1.5855e-2, 2.6935e-2, -0.99951))",
        t0.elapsed(),
        vend.sol.beta[layout.h_norm()],
        vend.sol.beta[layout.mu()],
        &vend.sol.point(0)[3..6]
    );
    // mu stays constant along the secondary family
    let mu_drift = sec
        .points
        .iter()
        .map(|p| (p.sol.beta[layout.mu()] - mu_u).abs())
        .fold(0.0f64, f64::max);
    println!("  max |mu - mu_u| along secondary family: {mu_drift:.3e}");

    // 6. adjoint homotopies
    for (side, lam_target, name) in [
        (CycleSide::Minus, -mu_s.abs().ln(), "lambda-"),
        (CycleSide::Plus, -mu_u.abs().ln(), "lambda+"),
    ] {
        let sgn = if side == CycleSide::Minus { mu_s.signum() } else { mu_u.signum() };
        let adj_spec = build_adjoint_homotopy_bvp(sys.clone(), side, sgn).unwrap();
        let lam_idx = layout.lambda_side(side);
        let t_idx = layout.t_side(side);
        let mut b = saddle.sol.beta.clone();
        b[lam_idx] = lam_target - 0.3;
        b[t_idx] = t_saddle;
        b[layout.h_norm()] = 0.0;
        let trivial = CollocationSolution::from_fn(saddle.sol.mesh.clone(), 6, b, |tau, out| {
            cd.x.interpolate(tau, &mut out[..3]).unwrap();
            out[3..].fill(0.0);
        });
        let triv = continue_branch(&adj_spec, &trivial, Some(&trivial), 1.0, &eig_opts).unwrap();
        let bp = triv.points.iter().find(|p| p.label == PointLabel::Branch);
        match bp {
            Some(bp) => {
                println!(
                    "[{:?}] {name} BP at {:.7} (target {:.7})",
                    t0.elapsed(),
                    bp.sol.beta[lam_idx],
                    lam_target
                );
                let sec_dir = switch_at_branch_point(&adj_spec, bp, Some(&bp.sol), &eig_opts).unwrap();
                let h_stop2 = ContinuationOptions {
                    user_conditions: vec![UserCondition {
                        param: layout.h_norm(),
                        target: 1.0,
                        stop: true,
                    }],
                    detect_folds: false,
                    adapt_every: 0,
                    step: StepControl { ds0: 0.05, ds_max: 0.5, max_steps: 120, ..Default::default() },
                    ..Default::default()
                };
                let sec =
                    continue_branch_with_tangent(&adj_spec, &bp.sol, sec_dir, Some(&bp.sol), &h_stop2)
                        .unwrap();
                let wend = sec.points.last().unwrap();
                println!(
                    "  {name} = {:.7}, h = {:.6}, w(0) = {:?}",
                    wend.sol.beta[lam_idx],
                    wend.sol.beta[layout.h_norm()],
                    &wend.sol.point(0)[3..6]
                );
            }
            None => println!("  {name}: NO BP FOUND ({} pts, {})", triv.points.len(), triv.termination),
        }
    }
    println!("total {:?}", t0.elapsed());
}
