//! Experiment drivers behind the CLI: synthetic-data simulation, single
//! smoothing/filtering runs, the RMSE sweeps, and the fast self-test suite.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::deriv_est;
use crate::dynamics::{BilinearSystem, Integrator};
use crate::error::{Error, Result};
use crate::gaussian_approx::{assemble_ak_bk, min_eigenvalue};
use crate::init_est::reconstruct_halfblocks;
use crate::linalg::{dist, dot, norm};
use crate::map_solver::{
    filter_stream, gradient, initial_point, smooth, EstimateReport, FilterOptions, FilterStep,
    GradientMode, SmoothingProblem,
};
use crate::observation::{generate, to_csv_string, ObservationRecord};

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

/// Run per-trial closures over a worker pool of `jobs` threads, preserving
/// trial order in the output.
fn run_trials<T, F>(trials: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if jobs <= 1 {
        (0..trials).map(f).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("thread pool");
        pool.install(|| (0..trials).into_par_iter().map(f).collect())
    }
}

/// Synthetic trajectory and observations; the truth CSV carries the residual
/// columns Y - H u(t) for diagnostics.
pub struct SimulateOutput {
    pub obs_csv: String,
    pub truth_csv: String,
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<SimulateOutput> {
    let sys = cfg.build_system()?;
    let setup = cfg.build_setup()?;
    let integ = cfg.build_integrator(&sys);
    let u0 = cfg.truth();
    let record = generate(&sys, &setup, &u0, cfg.seed, integ)?;
    let obs_csv = to_csv_string(&record, &setup)?;
    let truth = record.truth.as_ref().expect("generator keeps the truth");
    let mut t_csv = String::from("t");
    for i in 1..=cfg.dim {
        t_csv.push_str(&format!(",u_{i}"));
    }
    for i in 1..=setup.dim_obs() {
        t_csv.push_str(&format!(",r_{i}"));
    }
    t_csv.push('\n');
    for (j, state) in truth.iter().enumerate() {
        t_csv.push_str(&fmt(setup.time_of(j)));
        for v in state {
            t_csv.push(',');
            t_csv.push_str(&fmt(*v));
        }
        let hu = setup.op.apply(state);
        for (y, p) in record.y[j].iter().zip(&hu) {
            t_csv.push(',');
            t_csv.push_str(&fmt(y - p));
        }
        t_csv.push('\n');
    }
    Ok(SimulateOutput { obs_csv, truth_csv: t_csv })
}

/// One smoothing run on freshly generated data.
pub fn run_smooth(cfg: &ExperimentConfig) -> Result<EstimateReport> {
    let sys = cfg.build_system()?;
    let setup = cfg.build_setup()?;
    let integ = cfg.build_integrator(&sys);
    let u0 = cfg.truth();
    let record = generate(&sys, &setup, &u0, cfg.seed, integ)?;
    let problem = SmoothingProblem::new(&sys, setup, record, integ)?;
    let opts = cfg.build_smooth_options(&sys);
    smooth(&problem, &opts)
}

/// One filtering run; returns the per-index estimates and their CSV form.
pub fn run_filter(cfg: &ExperimentConfig) -> Result<(Vec<FilterStep>, String)> {
    let sys = cfg.build_system()?;
    let setup = cfg.build_setup()?;
    let integ = cfg.build_integrator(&sys);
    let u0 = cfg.truth();
    let record = generate(&sys, &setup, &u0, cfg.seed, integ)?;
    let window_k = cfg.window_k.unwrap_or(cfg.k / 2).max(1);
    let opts = FilterOptions {
        window_k,
        stride: cfg.stride,
        smooth: cfg.build_smooth_options(&sys),
    };
    let steps = filter_stream(&sys, &setup, &record.y, integ, &opts)?;
    let mut csv = String::from("i,t,status");
    for i in 1..=cfg.dim {
        csv.push_str(&format!(",x_{i}"));
    }
    csv.push('\n');
    for s in &steps {
        let status = match s.status {
            crate::map_solver::FilterStatus::Warmup => "warmup",
            crate::map_solver::FilterStatus::Refreshed => "refreshed",
            crate::map_solver::FilterStatus::Propagated => "propagated",
            crate::map_solver::FilterStatus::CarriedAfterFailure => "carried_after_failure",
        };
        csv.push_str(&format!("{},{},{}", s.index, fmt(s.time), status));
        for v in &s.estimate {
            csv.push(',');
            csv.push_str(&fmt(*v));
        }
        csv.push('\n');
    }
    Ok((steps, csv))
}

struct TrialOutcome {
    x0_sq: f64,
    map_sq: f64,
    ok: bool,
}

fn one_trial(
    sys: &BilinearSystem,
    cfg: &ExperimentConfig,
    k: usize,
    sigma_z: f64,
    h: f64,
    seed: u64,
) -> TrialOutcome {
    let run = || -> Result<(f64, f64)> {
        let op = cfg.build_operator()?;
        let setup = crate::observation::ObservationSetup::new(op, sigma_z, h, k)?;
        let mut integ = Integrator::default_for(sys, h);
        integ.i_max = cfg.taylor_order;
        if let Some(step) = cfg.taylor_step {
            integ.step = step;
        }
        let u0 = cfg.truth();
        let record = generate(sys, &setup, &u0, seed, integ)?;
        let problem = SmoothingProblem::new(sys, setup, record, integ)?;
        let mut opts = cfg.build_smooth_options(sys);
        opts.newton.delta_min = cfg
            .delta_min
            .unwrap_or(1e-10 * sys.radius());
        let x0 = initial_point(&problem, &opts)?;
        let report = smooth(&problem, &opts)?;
        if !report.trace.converged {
            return Err(Error::OptimizationFailure("Newton did not converge".into()));
        }
        let d = sys.dim() as f64;
        let x0_sq = dist(&x0, &u0).powi(2) / d;
        let map_sq = dist(&report.u_map, &u0).powi(2) / d;
        Ok((x0_sq, map_sq))
    };
    match run() {
        Ok((x0_sq, map_sq)) => TrialOutcome { x0_sq, map_sq, ok: true },
        Err(_) => TrialOutcome { x0_sq: f64::NAN, map_sq: f64::NAN, ok: false },
    }
}

/// Per-k sweep summary.
#[derive(Debug, Clone)]
pub struct RmseVsKRow {
    pub k: usize,
    pub rmse_x0: f64,
    pub rmse_map: f64,
    pub stderr_map: f64,
    pub fail_frac: f64,
}

/// RMSE of the initial estimator and the MAP as the observation count grows,
/// at fixed sigma_z and h.
pub fn rmse_vs_k(cfg: &ExperimentConfig) -> Result<(Vec<RmseVsKRow>, String)> {
    let sys = cfg.build_system()?;
    let mut rows = Vec::new();
    for &k in &cfg.k_list {
        let outcomes = run_trials(cfg.trials, cfg.jobs, |t| {
            one_trial(&sys, cfg, k, cfg.sigma_z, cfg.h, cfg.seed + t as u64)
        });
        rows.push(summarize_k(k, &outcomes));
    }
    let mut csv = String::from("k,rmse_x0,rmse_map,stderr_map,fail_frac\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.k,
            fmt(r.rmse_x0),
            fmt(r.rmse_map),
            fmt(r.stderr_map),
            fmt(r.fail_frac)
        ));
    }
    Ok((rows, csv))
}

fn summarize_k(k: usize, outcomes: &[TrialOutcome]) -> RmseVsKRow {
    let ok: Vec<&TrialOutcome> = outcomes.iter().filter(|o| o.ok).collect();
    let n = ok.len().max(1) as f64;
    let mse_x0 = ok.iter().map(|o| o.x0_sq).sum::<f64>() / n;
    let mse_map = ok.iter().map(|o| o.map_sq).sum::<f64>() / n;
    let rmse_map = mse_map.sqrt();
    let var_map = ok
        .iter()
        .map(|o| (o.map_sq - mse_map) * (o.map_sq - mse_map))
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    let stderr_map = if rmse_map > 0.0 {
        (var_map / n).sqrt() / (2.0 * rmse_map)
    } else {
        0.0
    };
    RmseVsKRow {
        k,
        rmse_x0: mse_x0.sqrt(),
        rmse_map,
        stderr_map,
        fail_frac: 1.0 - ok.len() as f64 / outcomes.len() as f64,
    }
}

/// One cell of the (sigma_z, h) sweep.
#[derive(Debug, Clone)]
pub struct NoiseCell {
    pub sigma_z: f64,
    pub h: f64,
    pub k: usize,
    pub rmse_map: f64,
    pub stderr_map: f64,
    pub fail_frac: f64,
}

#[derive(Debug, Clone)]
pub struct NoiseSweep {
    pub cells: Vec<NoiseCell>,
    /// fitted log-log slope of RMSE(MAP) against sigma_z sqrt(h)
    pub slope: f64,
    pub intercept: f64,
    pub csv: String,
}

/// RMSE of the MAP across a (sigma_z, h) grid at fixed horizon T = k h, with
/// the fitted log-log slope against sigma_z sqrt(h).
pub fn rmse_vs_noise(cfg: &ExperimentConfig) -> Result<NoiseSweep> {
    let sys = cfg.build_system()?;
    let horizon = cfg.k as f64 * cfg.h;
    let mut cells = Vec::new();
    for &sigma in &cfg.sigma_list {
        for &h in &cfg.h_list {
            let k = (horizon / h).round() as usize;
            if k < 2 * cfg.jmax_caps.iter().copied().max().unwrap_or(1) + 3 {
                return Err(Error::Configuration(format!(
                    "grid cell h = {h} leaves too few observations (k = {k})"
                )));
            }
            let outcomes = run_trials(cfg.trials, cfg.jobs, |t| {
                one_trial(&sys, cfg, k, sigma, h, cfg.seed + t as u64)
            });
            let row = summarize_k(k, &outcomes);
            cells.push(NoiseCell {
                sigma_z: sigma,
                h,
                k,
                rmse_map: row.rmse_map,
                stderr_map: row.stderr_map,
                fail_frac: row.fail_frac,
            });
        }
    }
    // least-squares slope in log-log coordinates, noiseless cells excluded
    let pts: Vec<(f64, f64)> = cells
        .iter()
        .filter(|c| c.sigma_z > 0.0 && c.rmse_map > 0.0 && c.fail_frac < 1.0)
        .map(|c| ((c.sigma_z * c.h.sqrt()).ln(), c.rmse_map.ln()))
        .collect();
    let (slope, intercept) = fit_line(&pts);
    let mut csv = String::from("sigma_z,h,k,rmse_map,stderr_map,fail_frac\n");
    for c in &cells {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt(c.sigma_z),
            fmt(c.h),
            c.k,
            fmt(c.rmse_map),
            fmt(c.stderr_map),
            fmt(c.fail_frac)
        ));
    }
    Ok(NoiseSweep { cells, slope, intercept, csv })
}

fn fit_line(pts: &[(f64, f64)]) -> (f64, f64) {
    if pts.len() < 2 {
        return (f64::NAN, f64::NAN);
    }
    let n = pts.len() as f64;
    let xm = pts.iter().map(|(x, _)| x).sum::<f64>() / n;
    let ym = pts.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|(x, _)| (x - xm) * (x - xm)).sum();
    let sxy: f64 = pts.iter().map(|(x, y)| (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    (slope, ym - slope * xm)
}

/// Outcome of one self-test module.
#[derive(Debug, Clone)]
pub struct SelftestModule {
    pub name: &'static str,
    pub passed: usize,
    pub failed: usize,
    pub failures: Vec<String>,
}

fn check(module: &mut SelftestModule, name: &str, ok: bool, detail: String) {
    if ok {
        module.passed += 1;
    } else {
        module.failed += 1;
        module.failures.push(format!("{name}: {detail}"));
    }
}

/// Fast invariant suites of every module; deterministic and well inside the
/// 60 s budget.
pub fn selftest() -> Vec<SelftestModule> {
    let mut out = Vec::new();
    let sys = BilinearSystem::lorenz96(12, 8.0).expect("lorenz96");
    let c = *sys.constants();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let rand_ball = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = norm(&v);
            if n > 1e-3 {
                let r = rng.gen_range(0.0..sys.radius());
                return v.iter().map(|x| x * r / n).collect();
            }
        }
    };

    // dynamics invariants
    {
        let mut m = SelftestModule { name: "dynamics", passed: 0, failed: 0, failures: Vec::new() };
        for _ in 0..50 {
            let v = rand_ball(&mut rng);
            let nv = norm(&v);
            let defect = sys.energy_defect(&v).abs();
            check(&mut m, "energy-conservation", defect <= 1e-12 * nv * nv * nv + 1e-300,
                format!("defect {defect:.3e}"));
        }
        for _ in 0..10 {
            let v = rand_ball(&mut rng);
            let t = rng.gen_range(0.0..0.5 / c.c_der);
            let lo = sys.taylor_step(&v, t, 8).expect("taylor");
            let hi = sys.taylor_step(&v, t, 16).expect("taylor");
            let bound = c.c0 * (c.c_der * t).powi(9);
            check(&mut m, "taylor-remainder", dist(&lo, &hi) <= bound * (1.0 + 1e-9) + 1e-14,
                format!("remainder {:.3e} bound {bound:.3e}", dist(&lo, &hi)));
        }
        let integ = Integrator { step: 1e-3, i_max: 12 };
        for _ in 0..10 {
            let v = rand_ball(&mut rng);
            let w = rand_ball(&mut rng);
            let t = 0.02;
            let fv = sys.flow(&v, t, integ).expect("flow");
            let fw = sys.flow(&w, t, integ).expect("flow");
            let (d0, dt) = (dist(&v, &w), dist(&fv, &fw));
            let ok = dt >= (-c.gronwall * t).exp() * d0 * (1.0 - 1e-9)
                && dt <= (c.gronwall * t).exp() * d0 * (1.0 + 1e-9);
            check(&mut m, "gronwall-sandwich", ok, format!("d0 {d0:.3e} dt {dt:.3e}"));
        }
        for _ in 0..10 {
            let v = rand_ball(&mut rng);
            let t = 1e-3;
            let back = sys.flow_backward(&v, t, 20).expect("backward");
            let fwd = sys.flow(&back, t, Integrator { step: 5e-4, i_max: 14 }).expect("flow");
            let trunc = c.c0 * (c.c_der * t).powi(21) / (1.0 - c.c_der * t);
            let tol = 2.0 * trunc + 1e-10 * (1.0 + norm(&v));
            check(&mut m, "backward-roundtrip", dist(&fwd, &v) <= tol,
                format!("gap {:.3e} tol {tol:.3e}", dist(&fwd, &v)));
        }
        for _ in 0..10 {
            let v = rand_ball(&mut rng);
            let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let z: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = 0.05;
            let jw = sys.tangent_flow(&v, &w, t, integ).expect("tangent");
            let jtz = sys.adjoint_flow(&v, &z, t, integ).expect("adjoint");
            let (lhs, rhs) = (dot(&jw, &z), dot(&w, &jtz));
            let rel = (lhs - rhs).abs() / lhs.abs().max(1e-300);
            check(&mut m, "transpose-identity", rel <= 1e-10, format!("rel {rel:.3e}"));
        }
        out.push(m);
    }

    // observation + solver invariants
    {
        let mut m = SelftestModule { name: "map_solver", passed: 0, failed: 0, failures: Vec::new() };
        let setup = crate::observation::ObservationSetup::new(
            crate::observation::scenario_half_blocks(12).expect("op"),
            1e-3,
            1e-2,
            10,
        )
        .expect("setup");
        let integ = Integrator::default_for(&sys, setup.h);
        let u0: Vec<f64> = (1..=12).map(|i| (12.0 + i as f64) / 24.0).collect();
        for seed in 0..5u64 {
            let rec = generate(&sys, &setup, &u0, seed, integ).expect("generate");
            let problem = SmoothingProblem::new(&sys, setup.clone(), rec, integ).expect("problem");
            let mut v = u0.clone();
            let mut r2 = ChaCha8Rng::seed_from_u64(seed + 100);
            for x in v.iter_mut() {
                *x += 0.05 * r2.gen_range(-1.0..1.0);
            }
            let ga = gradient(&problem, &v, GradientMode::Adjoint).expect("gradient").grad;
            let gf = gradient(&problem, &v, GradientMode::FiniteDifference)
                .expect("gradient")
                .grad;
            let rel = dist(&ga, &gf) / norm(&ga).max(1e-300);
            check(&mut m, "adjoint-vs-fd-gradient", rel <= 1e-5, format!("rel {rel:.3e}"));
        }
        out.push(m);
    }

    // derivative estimator invariants
    {
        let mut m = SelftestModule { name: "deriv_est", passed: 0, failed: 0, failures: Vec::new() };
        for (l, j_max, k_hat) in [(0usize, 2usize, 11usize), (1, 2, 12), (2, 3, 15)] {
            let h = 0.02;
            let coeff = deriv_est::coefficients(l, j_max, k_hat, h).expect("coefficients");
            check(&mut m, "polynomial-exactness", coeff.validate_exactness(h, 1e-9).is_ok(),
                format!("l={l} j={j_max} k={k_hat}"));
        }
        let ctx = deriv_est::EstimatorContext {
            h: 1e-2,
            sigma_z: 1e-2,
            dim_obs: 6,
            c0: c.c0,
            c_der: c.c_der,
            norm_h: 1.0,
        };
        for l in 0..=1usize {
            for cap in l.max(1)..=2usize {
                let k = 120;
                let sel = deriv_est::select_degree(l, cap, k, &ctx).expect("select");
                let brute = (l..=cap)
                    .map(|j| {
                        let kh = deriv_est::select_window(l, j, k, &ctx).expect("window");
                        let score = deriv_est::coefficients(l, j, kh, ctx.h).expect("coeff").c_m
                            * deriv_est::error_budget(l, j, kh, &ctx);
                        (j, kh, score)
                    })
                    .min_by(|a, b| a.2.partial_cmp(&b.2).expect("finite"))
                    .expect("non-empty");
                check(&mut m, "selection-vs-bruteforce", sel == (brute.0, brute.1),
                    format!("l={l} cap={cap}: {sel:?} vs {:?}", (brute.0, brute.1)));
                // window choice itself against exhaustive argmin
                for j in l..=cap {
                    let kh = deriv_est::select_window(l, j, k, &ctx).expect("window");
                    let best = (2 * j + 3..=k)
                        .min_by(|a, b| {
                            deriv_est::error_budget(l, j, *a, &ctx)
                                .partial_cmp(&deriv_est::error_budget(l, j, *b, &ctx))
                                .expect("finite")
                        })
                        .expect("non-empty");
                    check(&mut m, "window-vs-bruteforce", kh == best, format!("l={l} j={j}: {kh} vs {best}"));
                }
            }
        }
        out.push(m);
    }

    // initial estimator round trip
    {
        let mut m = SelftestModule { name: "init_est", passed: 0, failed: 0, failures: Vec::new() };
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let u: Vec<f64> = (0..12)
                .map(|_| {
                    let mag = r2.gen_range(0.1..1.5);
                    if r2.gen_bool(0.5) { mag } else { -mag }
                })
                .collect();
            let series = sys.derivative_series(&u, 1).expect("series");
            let op = crate::observation::scenario_half_blocks(12).expect("op");
            let d0 = op.apply(&series[0]);
            let d1 = op.apply(&series[1]);
            match reconstruct_halfblocks(&sys, &d0, &d1) {
                Ok(rec) => check(&mut m, "f-roundtrip", dist(&rec, &u) <= 1e-8,
                    format!("err {:.3e}", dist(&rec, &u))),
                Err(e) => check(&mut m, "f-roundtrip", false, format!("{e}")),
            }
        }
        out.push(m);
    }

    // Gaussian approximation: A_k positive definite at the small-noise point
    {
        let mut m = SelftestModule { name: "gaussian_approx", passed: 0, failed: 0, failures: Vec::new() };
        let setup = crate::observation::ObservationSetup::new(
            crate::observation::scenario_half_blocks(12).expect("op"),
            1e-3,
            1e-2,
            20,
        )
        .expect("setup");
        let integ = Integrator::default_for(&sys, setup.h);
        let u0: Vec<f64> = (1..=12).map(|i| (12.0 + i as f64) / 24.0).collect();
        for seed in 0..3u64 {
            let rec = generate(&sys, &setup, &u0, seed, integ).expect("generate");
            let problem = SmoothingProblem::new(&sys, setup.clone(), rec, integ).expect("problem");
            let (a_k, _) = assemble_ak_bk(&problem, &u0).expect("assemble");
            let lam = min_eigenvalue(&a_k);
            check(&mut m, "ak-positive-definite", lam > 0.0, format!("min eig {lam:.3e}"));
        }
        out.push(m);
    }

    out
}

/// Render the self-test summary; one line per module.
pub fn selftest_summary(modules: &[SelftestModule]) -> String {
    let mut s = String::new();
    for m in modules {
        s.push_str(&format!("{}: {} passed, {} failed\n", m.name, m.passed, m.failed));
        for f in &m.failures {
            s.push_str(&format!("  FAIL {f}\n"));
        }
    }
    let total_failed: usize = modules.iter().map(|m| m.failed).sum();
    s.push_str(&format!(
        "selftest: {}\n",
        if total_failed == 0 { "PASS" } else { "FAIL" }
    ));
    s
}

/// Simple helper for RMSE of an estimate list against a truth sequence.
pub fn rmse_vs_sequence(estimates: &[FilterStep], truth: &[Vec<f64>], skip: usize) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for s in estimates.iter().skip(skip) {
        let t = &truth[s.index];
        acc += dist(&s.estimate, t).powi(2);
        n += t.len();
    }
    (acc / n as f64).sqrt()
}

/// Used by tests needing a deterministic record without a config.
pub fn quick_record(
    sys: &BilinearSystem,
    setup: &crate::observation::ObservationSetup,
    u0: &[f64],
    seed: u64,
) -> Result<ObservationRecord> {
    let integ = Integrator::default_for(sys, setup.h);
    generate(sys, setup, u0, seed, integ)
}
