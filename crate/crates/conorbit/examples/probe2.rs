// scratch probe, part 2: paper-phase eigendata, connection seeding and the
// four homotopy closure legs
use conorbit::collocation::{
    newton_solve, CollocationSolution, Mesh, NewtonSettings, SolutionRef,
};
use conorbit::continuation::{
    continue_branch, continue_branch_with_tangent, continue_equilibrium, cycle_guess_from_hopf,
    detect_hopf, switch_at_branch_point, ContinuationOptions, PointLabel, StepControl,
    UserCondition,
};
use conorbit::defining::{
    assemble_composite, build_adjoint_homotopy_bvp, build_connection_homotopy_bvp,
    build_cycle_bvp, build_eigenfunction_homotopy_bvp, count_end_excursions, nearest_phase,
    rotate_phase, seed_connection, ActiveGap, AdjointEigenData, ConnectionData, CycleData,
    CycleSide, HomotopyAnchors, ParamLayout, PhaseCondition,
};
use conorbit::model::{FoodChain, FoodChainParams, OdeSystem, FC_D1};
use std::sync::Arc;
use std::time::Instant;

fn eigen_homotopy(
    sys: &Arc<dyn OdeSystem>,
    layout: &ParamLayout,
    cycle: &CycleData,
    target: f64,
    adjoint: Option<(CycleSide, f64)>,
) -> (CollocationSolution, f64) {
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
    } else {
        b[layout.t_minus()] = cycle.period;
    }
    let trivial = CollocationSolution::from_fn(cycle.x.mesh.clone(), 6, b, |tau, out| {
        cycle.x.interpolate(tau, &mut out[..3]).unwrap();
        out[3..].fill(0.0);
    });
    let opts = ContinuationOptions {
        step: StepControl { ds0: 0.05, ds_max: 0.2, max_steps: 40, ..Default::default() },
        detect_folds: false,
        detect_branch_points: true,
        adapt_every: 0,
        ..Default::default()
    };
    let triv = continue_branch(&spec, &trivial, Some(&trivial), 1.0, &opts).unwrap();
    let bp = triv
        .points
        .iter()
        .find(|p| p.label == PointLabel::Branch)
        .unwrap_or_else(|| panic!("no BP near {target}: {}", triv.termination));
    let dir = switch_at_branch_point(&spec, bp, Some(&bp.sol), &opts).unwrap();
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
}

fn main() {
    let t0 = Instant::now();
    let sys: Arc<dyn OdeSystem> = Arc::new(FoodChain);
    let layout = ParamLayout::for_system(&*sys);
    let alpha = FoodChainParams::with_death_rates(0.25, 0.0125).to_vec();

    // stages 1-3 from probe 1, compressed
    let eq = FoodChain::coexistence_equilibrium(&alpha).unwrap();
    let branch = continue_equilibrium(&*sys, &alpha, &eq, FC_D1, 0.7, 60).unwrap();
    let hopf = &detect_hopf(&*sys, &alpha, &branch)[0];
    let cycle_spec =
        build_cycle_bvp(sys.clone(), CycleSide::Minus, PhaseCondition::Integral, FC_D1).unwrap();
    let mut guess = cycle_guess_from_hopf(hopf, 0.1, Mesh::uniform(40, 4), layout.n_beta());
    guess.beta[..6].copy_from_slice(&alpha);
    guess.beta[FC_D1] = hopf.param_value - 0.001;
    guess.beta[layout.t_minus()] = 2.0 * std::f64::consts::PI / hopf.omega;
    let reference = guess.clone();
    let (first_cycle, _) =
        newton_solve(&cycle_spec, &guess, &SolutionRef { sol: &reference }, &NewtonSettings::default())
            .unwrap();
    let opts = ContinuationOptions {
        step: StepControl { ds0: 0.05, ds_max: 2.0, ds_min: 1e-8, max_steps: 150, ..Default::default() },
        user_conditions: vec![UserCondition { param: FC_D1, target: 0.25, stop: false }],
        ..Default::default()
    };
    let cyc_branch = continue_branch(&cycle_spec, &first_cycle, Some(&first_cycle), -1.0, &opts).unwrap();
    let fold_idx = cyc_branch.points.iter().position(|p| p.label == PointLabel::Fold).unwrap();
    let saddle = cyc_branch.points[fold_idx..]
        .iter()
        .find(|p| p.label == PointLabel::User)
        .unwrap();
    let t_saddle = saddle.sol.beta[layout.t_minus()];
    println!("[{:?}] saddle T = {t_saddle:.7}", t0.elapsed());

    // re-phase to the paper's base point and re-converge
    let paper_base = [0.839783, 0.125284, 10.55288];
    let shift = nearest_phase(&saddle.sol, &paper_base);
    let rotated = rotate_phase(&saddle.sol, shift);
    let reference = rotated.clone();
    let (xsol, _) =
        newton_solve(&cycle_spec, &rotated, &SolutionRef { sol: &reference }, &NewtonSettings::default())
            .unwrap();
    let cycle = CycleData { x: xsol, period: t_saddle };
    println!(
        "[{:?}] re-phased base point = {:?} (paper {:?})",
        t0.elapsed(),
        cycle.base_point(),
        paper_base
    );

    // eigendata at the paper phase
    let mr = cycle.monodromy(&*sys, &alpha, 1e-11).unwrap();
    let nt = mr.nontrivial();
    let (mu_u, mu_s) = (nt[0].re, nt[1].re);
    let (veig, mu) = eigen_homotopy(&sys, &layout, &cycle, mu_u, None);
    let mut v0 = [veig.point(0)[3], veig.point(0)[4], veig.point(0)[5]];
    println!(
        "[{:?}] v-(0) = {v0:?} mu = {mu:.7} (paper (-1.5855e-2, 2.6935e-2, -0.99951))",
        t0.elapsed()
    );
    let (wmsol, lam_m) =
        eigen_homotopy(&sys, &layout, &cycle, -mu_s.abs().ln(), Some((CycleSide::Minus, mu_s.signum())));
    let (wpsol, lam_p) =
        eigen_homotopy(&sys, &layout, &cycle, -mu_u.abs().ln(), Some((CycleSide::Plus, mu_u.signum())));
    println!("[{:?}] lambda- = {lam_m:.7}, lambda+ = {lam_p:.7}", t0.elapsed());
    let wm = AdjointEigenData {
        w: conorbit::defining::split_composite6(&wmsol, 1),
        lambda: lam_m,
        sign: mu_s.signum(),
    };
    let wp = AdjointEigenData {
        w: conorbit::defining::split_composite6(&wpsol, 1),
        lambda: lam_p,
        sign: mu_u.signum(),
    };
    // the x-parts of the eigen solves may have drifted in phase; keep the
    // original cycle for both sides (homoclinic: same solution)
    let xm = CycleData { x: conorbit::defining::split_composite6(&veig, 0), period: t_saddle };
    let base = xm.base_point();
    println!("  eigen-stage base point: {base:?}");

    // seed the connection: paper sign convention (x3-component increases)
    let eps = -0.001;
    if eps * v0[2] < 0.0 {
        for v in v0.iter_mut() {
            *v = -*v;
        }
    }
    let t_seed = 600.0;
    let conn =
        conorbit::defining::seed_connection_auto(&*sys, &alpha, &xm, &v0, eps, t_seed, Mesh::uniform(200, 4), 1e-11)
            .unwrap();
    println!(
        "[{:?}] seed u(0) = {:?} (paper (0.839789, 0.125274, 10.55324)), span {}",
        t0.elapsed(),
        conn.u.point(0),
        conn.t_conn
    );
    // qualitative return check
    let dist = |p: &[f64]| -> f64 {
        let mut best = f64::INFINITY;
        for k in 0..xm.x.n_points() {
            let q = xm.x.point(k);
            let d = (0..3).map(|i| (p[i] - q[i]) * (p[i] - q[i])).sum::<f64>().sqrt();
            best = best.min(d);
        }
        best
    };
    let mut mid = [0.0; 3];
    let mut fin = [0.0; 3];
    conn.u.interpolate(0.5, &mut mid).unwrap();
    conn.u.interpolate(1.0, &mut fin).unwrap();
    println!("  dist(mid) = {:.4}, dist(end) = {:.4}", dist(&mid), dist(&fin));
    let exc = count_end_excursions(&*sys, &alpha, &conn.u, &xm, 0.5);
    println!("  end excursions of the raw seed: {exc}");

    // homotopy legs
    let comp0 = assemble_composite(&*sys, &alpha, &xm, &xm, &wm, &wp, &conn, 0.0);
    let anchors = HomotopyAnchors {
        j_minus: 1,
        a_minus: base[1],
        j_plus: 0,
        a_plus: base[0],
        h: [0.0; 4],
    };
    // initialize gap values so the seed is an exact solution of the gap rows
    let mut comp = comp0;
    {
        let u0 = comp.point(0).to_vec();
        let u1 = comp.point(comp.n_points() - 1).to_vec();
        let gaps = conorbit::defining::gap_values(&*sys, &alpha, &u0, &u1);
        comp.beta[layout.h11()] = gaps[0];
        comp.beta[layout.h12()] = gaps[1];
        comp.beta[layout.h21()] = gaps[2];
        comp.beta[layout.h22()] = gaps[3];
        println!("[{:?}] initial gaps: {:?}, eps2 = {:.4e}", t0.elapsed(), &gaps[..4], gaps[4]);
    }

    let mut current = comp;
    for gap in ActiveGap::all() {
        let hspec =
            build_connection_homotopy_bvp(sys.clone(), anchors, gap, wm.sign, wp.sign).unwrap();
        let gidx = gap.index(&layout);
        let h0 = current.beta[gidx];
        if h0.abs() < 1e-10 {
            println!("[{:?}] {} already closed", t0.elapsed(), gap.name());
            continue;
        }
        let lopts = ContinuationOptions {
            step: StepControl {
                ds0: 0.1,
                ds_max: 20.0,
                ds_min: 1e-10,
                max_steps: 500,
                ..Default::default()
            },
            detect_folds: false,
            user_conditions: vec![UserCondition { param: gidx, target: 0.0, stop: true }],
            adapt_every: 0,
            newton: NewtonSettings { residual_tol: 1e-9, ..Default::default() },
            state_weight: 0.02,
            ..Default::default()
        };
        let dir = -h0.signum();
        match continue_branch(&hspec, &current, None, dir, &lopts) {
            Ok(br) => {
                let end = br.points.last().unwrap();
                println!(
                    "[{:?}] leg {}: {} pts, {} -> h = {:.3e}, T = {:.4}",
                    t0.elapsed(),
                    gap.name(),
                    br.points.len(),
                    br.termination,
                    end.sol.beta[gidx],
                    end.sol.beta[layout.t_conn()]
                );
                for (i, p) in br.points.iter().enumerate() {
                    if i % 25 == 0 || i + 1 == br.points.len() {
                        println!(
                            "    {i}: h = {:+.4e}, T = {:.3}, eps2 = {:.3e}",
                            p.sol.beta[gidx],
                            p.sol.beta[layout.t_conn()],
                            {
                                let u0 = p.sol.point(0);
                                (u0[12] - u0[0]).powi(2) + (u0[13] - u0[1]).powi(2) + (u0[14] - u0[2]).powi(2)
                            }
                        );
                    }
                }
                current = end.sol.clone();
            }
            Err(e) => {
                println!("[{:?}] leg {} FAILED: {e}", t0.elapsed(), gap.name());
                return;
            }
        }
    }
    let u0 = current.point(0).to_vec();
    let u1 = current.point(current.n_points() - 1).to_vec();
    let gaps = conorbit::defining::gap_values(&*sys, &alpha, &u0, &u1);
    println!(
        "[{:?}] homotopy done: gaps = {:?}, eps2 = {:.6} (paper 0.069414), T = {:.5} (paper 454.04705)",
        t0.elapsed(),
        &gaps[..4],
        gaps[4],
        current.beta[layout.t_conn()]
    );
    let ublock = conorbit::defining::split_composite(&current, 4);
    let exc = count_end_excursions(&*sys, &alpha, &ublock, &xm, 0.5);
    println!("  end excursions after homotopy: {exc}");
}
