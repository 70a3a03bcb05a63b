// scratch probe: finite-difference verification of the composite Jacobians
use conorbit::collocation::{
    apply_update, assemble_system, eval_residual, sample_refs, ClosureRow, CollocationSolution,
    Mesh, NoRef, RefSource,
};
use conorbit::defining::{
    build_complete_bvp, build_connection_homotopy_bvp, ActiveGap, HomotopyAnchors, ParamLayout,
};
use conorbit::model::{FoodChain, FoodChainParams, OdeSystem};
use conorbit::quad::CollocTables;
use std::sync::Arc;

fn check(name: &str, spec: &conorbit::collocation::BvpSpec, sol: &CollocationSolution) {
    let tables = CollocTables::new(sol.mesh.m);
    let refs = sample_refs(&NoRef, &sol.mesh, &tables);
    let active = spec.free_params.clone();
    let closures = [ClosureRow::Pin { slot: 0, value: sol.beta[active[0]] }];
    let asm = assemble_system(spec, sol, &active, &refs, NoRef.dim(), &closures, &tables).unwrap();
    let dense = asm.abd.to_dense();
    let n = dense.nrows;
    let mut sol2 = sol.clone();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut worst_rc = (0usize, 0usize);
    for col in 0..n {
        let mut e = vec![0.0; n];
        e[col] = h;
        apply_update(&mut sol2, &active, &e, -1.0);
        let rp = eval_residual(spec, &sol2, &active, &refs, 0, &closures, &tables).unwrap();
        apply_update(&mut sol2, &active, &e, 2.0);
        let rm = eval_residual(spec, &sol2, &active, &refs, 0, &closures, &tables).unwrap();
        apply_update(&mut sol2, &active, &e, -1.0);
        for row in 0..n {
            let fd = (rp[row] - rm[row]) / (2.0 * h);
            let an = dense[(row, col)];
            let err = (fd - an).abs() / (1.0 + an.abs());
            if err > worst {
                worst = err;
                worst_rc = (row, col);
            }
        }
    }
    println!(
        "{name}: worst rel error {:.3e} at (row {}, col {}) of {n}x{n}",
        worst, worst_rc.0, worst_rc.1
    );
    if worst > 1e-4 {
        let (row, col) = worst_rc;
        let mut e = vec![0.0; n];
        e[col] = h;
        apply_update(&mut sol2, &active, &e, -1.0);
        let rp = eval_residual(spec, &sol2, &active, &refs, 0, &closures, &tables).unwrap();
        apply_update(&mut sol2, &active, &e, 2.0);
        let rm = eval_residual(spec, &sol2, &active, &refs, 0, &closures, &tables).unwrap();
        apply_update(&mut sol2, &active, &e, -1.0);
        println!(
            "  analytic {:.6e} vs fd {:.6e}",
            dense[(row, col)],
            (rp[row] - rm[row]) / (2.0 * h)
        );
        // identify the row: block rows first (N*m*nd), then BCs
        let nd = spec.n_dim;
        let m = sol.mesh.m;
        let nivl = sol.mesh.n_intervals();
        if row < nivl * m * nd {
            println!("  row is collocation: interval {}, point {}, comp {}", row / (m * nd), (row % (m * nd)) / nd, row % nd);
        } else {
            println!("  row is border row {}", row - nivl * m * nd);
        }
        let nmesh = (nivl * m + 1) * nd;
        if col < nmesh {
            println!("  col is value: point {}, comp {}", col / nd, col % nd);
        } else {
            println!("  col is active param slot {} (beta idx {})", col - nmesh, active[col - nmesh]);
        }
    }
}

fn main() {
    let sys: Arc<dyn OdeSystem> = Arc::new(FoodChain);
    let layout = ParamLayout::for_system(&*sys);
    let alpha = FoodChainParams::with_death_rates(0.25, 0.0125).to_vec();
    let mesh = Mesh::uniform(4, 3);

    let mut beta = vec![0.0; layout.n_beta()];
    beta[..6].copy_from_slice(&alpha);
    beta[layout.t_minus()] = 3.0;
    beta[layout.t_plus()] = 2.5;
    beta[layout.t_conn()] = 7.0;
    beta[layout.lambda_minus()] = 1.3;
    beta[layout.lambda_plus()] = -0.4;
    beta[layout.eps2()] = 0.02;
    beta[layout.h11()] = 0.01;
    beta[layout.h12()] = -0.02;
    beta[layout.h21()] = 0.05;
    beta[layout.h22()] = 0.001;

    // smooth nontrivial composite data
    let sol = CollocationSolution::from_fn(mesh, 15, beta, |tau, out| {
        let a = 2.0 * std::f64::consts::PI * tau;
        out[0] = 0.8 + 0.1 * a.cos();
        out[1] = 0.2 + 0.05 * a.sin();
        out[2] = 10.0 + 0.5 * a.cos();
        out[3] = 0.7 - 0.1 * a.sin();
        out[4] = 0.25 + 0.02 * a.cos();
        out[5] = 9.5 + 0.4 * a.sin();
        out[6] = 0.3 * a.cos();
        out[7] = -0.5 * a.sin();
        out[8] = 0.8;
        out[9] = 0.1 + 0.2 * a.sin();
        out[10] = 0.9 * a.cos();
        out[11] = -0.3;
        out[12] = 0.5 + 0.3 * tau;
        out[13] = 0.3 - 0.1 * tau;
        out[14] = 8.0 + tau;
    });

    let anchors = HomotopyAnchors { j_minus: 1, a_minus: 0.2, j_plus: 0, a_plus: 0.7, h: [0.0; 4] };
    let hspec = build_connection_homotopy_bvp(sys.clone(), anchors, ActiveGap::H11, 1.0, -1.0).unwrap();
    check("homotopy", &hspec, &sol);

    let cspec = build_complete_bvp(sys.clone(), 1.0, -1.0, conorbit::model::FC_D1).unwrap();
    check("complete", &cspec, &sol);
}
