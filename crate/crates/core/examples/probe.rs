use std::time::Instant;
use varmap::config::ExperimentConfig;
use varmap::observation::*;
use varmap::map_solver::*;
use varmap::init_est::Scenario;
use varmap::linalg::dist;

fn main() {
    let t0 = Instant::now();
    let cfg = ExperimentConfig {
        dim: 6000, h: 1e-6, sigma_z: 1e-6, k: 10, taylor_order: 6,
        hessian: Some(HessianMode::MatrixFreeGaussNewtonCg),
        ..Default::default()
    };
    let sys = cfg.build_system().unwrap();
    let setup = cfg.build_setup().unwrap();
    let integ = cfg.build_integrator(&sys);
    let u0 = cfg.truth();
    let rec = generate(&sys, &setup, &u0, 11, integ).unwrap();
    let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
    let mut opts = cfg.build_smooth_options(&sys);
    opts.scenario = Scenario::HalfBlocks;
    let x0 = initial_point(&problem, &opts).unwrap();
    let report = smooth(&problem, &opts).unwrap();
    let d = 6000f64;
    println!("d=6000: converged={} iters={} x0rmse={:.3e} maprmse={:.3e} total={:.1?}",
        report.trace.converged, report.trace.iterations(),
        dist(&x0, &u0)/d.sqrt(), dist(&report.u_map, &u0)/d.sqrt(), t0.elapsed());
    println!("steps: {:?}", report.trace.step_norms.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>());
    println!("objectives: {:?}", report.trace.objectives.iter().map(|x| format!("{x:.4e}")).collect::<Vec<_>>());
}
