//! The negative log-posterior of the smoother, its gradient and Hessian in
//! dense and matrix-free modes, the Newton iteration, and the batch smoothing
//! and online filtering drivers.

use serde::Serialize;

use crate::deriv_est::{estimate_derivative, EstimatorContext};
use crate::dynamics::{BilinearSystem, Integrator};
use crate::error::{Error, Result};
use crate::init_est::{
    default_anchors, generic_least_squares_f, initial_estimate_multianchor,
    reconstruct_first3, reconstruct_halfblocks, ReconstructionPlan, Scenario,
};
use crate::linalg::{axpy, dist, dot, norm};
use crate::observation::{ObservationRecord, ObservationSetup};
use nalgebra::{DMatrix, DVector};

/// Prior on the initial state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prior {
    /// log q constant on the trapping ball; gradient and Hessian vanish in
    /// the interior.
    UniformBall,
}

/// One smoothing task: system, observation geometry, and a data window.
#[derive(Debug, Clone)]
pub struct SmoothingProblem<'a> {
    pub sys: &'a BilinearSystem,
    pub setup: ObservationSetup,
    pub record: ObservationRecord,
    pub prior: Prior,
    pub integ: Integrator,
}

impl<'a> SmoothingProblem<'a> {
    pub fn new(
        sys: &'a BilinearSystem,
        setup: ObservationSetup,
        record: ObservationRecord,
        integ: Integrator,
    ) -> Result<Self> {
        if record.rows() != setup.k + 1 {
            return Err(Error::Configuration(format!(
                "record has {} rows but setup expects k + 1 = {}",
                record.rows(),
                setup.k + 1
            )));
        }
        Ok(SmoothingProblem { sys, setup, record, prior: Prior::UniformBall, integ })
    }

    /// Data-term weight: sigma_z, with weight 1 substituted for noiseless
    /// problems (the argmin is invariant to this scale under a flat prior).
    pub fn sigma_eff(&self) -> f64 {
        if self.setup.sigma_z > 0.0 {
            self.setup.sigma_z
        } else {
            1.0
        }
    }

    pub fn estimator_context(&self) -> EstimatorContext {
        EstimatorContext {
            h: self.setup.h,
            sigma_z: self.setup.sigma_z,
            dim_obs: self.setup.dim_obs(),
            c0: self.sys.constants().c0,
            c_der: self.sys.constants().c_der,
            norm_h: self.setup.op.operator_norm(),
        }
    }
}

/// Forward trajectory with per-step derivative-series checkpoints; one sweep
/// is built per linearization point and shared by the gradient and every
/// Hessian product at that point.
struct Sweep {
    /// (derivative series at step start, dt) for every integrator step.
    steps: Vec<(Vec<Vec<f64>>, f64)>,
    /// number of steps taken before reaching observation time t_i.
    obs_step_end: Vec<usize>,
    /// state at each observation time.
    obs_states: Vec<Vec<f64>>,
}

fn build_sweep(problem: &SmoothingProblem, v: &[f64]) -> Result<Sweep> {
    problem.sys.check_in_ball(v)?;
    let integ = problem.integ;
    let h = problem.setup.h;
    let mut steps = Vec::new();
    let mut obs_step_end = vec![0];
    let mut obs_states = vec![v.to_vec()];
    let mut state = v.to_vec();
    let n_full = (h / integ.step).floor() as usize;
    let partial = h - (n_full as f64) * integ.step;
    for _ in 0..problem.setup.k {
        for _ in 0..n_full {
            let series = problem.sys.derivative_series_unchecked(&state, integ.i_max);
            state = BilinearSystem::taylor_eval(&series, integ.step);
            problem.sys.project_to_ball(&mut state);
            steps.push((series, integ.step));
        }
        if partial > 0.0 {
            let series = problem.sys.derivative_series_unchecked(&state, integ.i_max);
            state = BilinearSystem::taylor_eval(&series, partial);
            problem.sys.project_to_ball(&mut state);
            steps.push((series, partial));
        }
        obs_step_end.push(steps.len());
        obs_states.push(state.clone());
    }
    Ok(Sweep { steps, obs_step_end, obs_states })
}

fn residuals(problem: &SmoothingProblem, sweep: &Sweep) -> Vec<Vec<f64>> {
    sweep
        .obs_states
        .iter()
        .zip(&problem.record.y)
        .map(|(s, y)| {
            let hs = problem.setup.op.apply(s);
            hs.iter().zip(y).map(|(a, b)| a - b).collect()
        })
        .collect()
}

fn objective_from_residuals(problem: &SmoothingProblem, res: &[Vec<f64>]) -> f64 {
    let s2 = problem.sigma_eff() * problem.sigma_eff();
    res.iter().map(|r| dot(r, r)).sum::<f64>() / (2.0 * s2)
}

/// g^sm(v): data misfit over the window (the flat prior contributes only a
/// constant inside the ball).
pub fn objective(problem: &SmoothingProblem, v: &[f64]) -> Result<f64> {
    let sweep = build_sweep(problem, v)?;
    Ok(objective_from_residuals(problem, &residuals(problem, &sweep)))
}

/// Log-posterior up to the prior constant: -g^sm inside the ball, -inf outside.
pub fn log_posterior(problem: &SmoothingProblem, v: &[f64]) -> f64 {
    match objective(problem, v) {
        Ok(g) => -g,
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Adjoint accumulation of sum_i (J Psi_{t_i})' seeds_i through a sweep.
/// Seeds are full-dimension vectors (already H'-lifted).
fn adjoint_accumulate(problem: &SmoothingProblem, sweep: &Sweep, seeds: &[Vec<f64>]) -> Vec<f64> {
    let d = problem.sys.dim();
    let integ = problem.integ;
    let k = problem.setup.k;
    let mut z = vec![0.0; d];
    for i in (0..=k).rev() {
        axpy(1.0, &seeds[i], &mut z);
        if i > 0 {
            let lo = sweep.obs_step_end[i - 1];
            let hi = sweep.obs_step_end[i];
            for s in (lo..hi).rev() {
                let (series, dt) = &sweep.steps[s];
                z = problem.sys.taylor_adjoint_step(series, &z, *dt, integ.i_max);
            }
        }
    }
    z
}

/// sum_i (J Phi_{t_i}(v))' r_i with the residuals supplied (no noise scaling).
fn adjoint_pullback(problem: &SmoothingProblem, sweep: &Sweep, res: &[Vec<f64>]) -> Vec<f64> {
    let d = problem.sys.dim();
    let seeds: Vec<Vec<f64>> = res
        .iter()
        .map(|r| problem.setup.op.apply_transpose(r, d))
        .collect();
    adjoint_accumulate(problem, sweep, &seeds)
}

/// Forward tangent through a sweep, returning H J Psi_{t_i}(v) w at every
/// observation time.
fn tangent_push(problem: &SmoothingProblem, sweep: &Sweep, w: &[f64]) -> Vec<Vec<f64>> {
    let integ = problem.integ;
    let k = problem.setup.k;
    let mut out = Vec::with_capacity(k + 1);
    let mut tan = w.to_vec();
    out.push(problem.setup.op.apply(&tan));
    for i in 1..=k {
        let lo = sweep.obs_step_end[i - 1];
        let hi = sweep.obs_step_end[i];
        for s in lo..hi {
            let (series, dt) = &sweep.steps[s];
            tan = problem.sys.taylor_tangent_step(series, &tan, *dt, integ.i_max);
        }
        out.push(problem.setup.op.apply(&tan));
    }
    out
}

/// Gradient evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    Adjoint,
    FiniteDifference,
}

/// Gradient with a boundary-proximity flag.
pub struct GradientResult {
    pub grad: Vec<f64>,
    pub boundary_warning: bool,
}

/// grad g^sm(v) = (1/sigma^2) sum_i (J Phi_{t_i}(v))' (Phi_{t_i}(v) - Y_i).
pub fn gradient(problem: &SmoothingProblem, v: &[f64], mode: GradientMode) -> Result<GradientResult> {
    let boundary_warning = norm(v) > problem.sys.radius() - 1e-9;
    let grad = match mode {
        GradientMode::Adjoint => {
            let sweep = build_sweep(problem, v)?;
            let res = residuals(problem, &sweep);
            let mut g = adjoint_pullback(problem, &sweep, &res);
            let s2 = problem.sigma_eff() * problem.sigma_eff();
            for x in g.iter_mut() {
                *x /= s2;
            }
            g
        }
        GradientMode::FiniteDifference => {
            let eps = 1e-6 * norm(v).max(1.0);
            let mut g = vec![0.0; v.len()];
            let mut vp = v.to_vec();
            for a in 0..v.len() {
                let keep = vp[a];
                vp[a] = keep + eps;
                let fp = objective(problem, &vp)?;
                vp[a] = keep - eps;
                let fm = objective(problem, &vp)?;
                vp[a] = keep;
                g[a] = (fp - fm) / (2.0 * eps);
            }
            g
        }
    };
    Ok(GradientResult { grad, boundary_warning })
}

/// Hessian representation used by the Newton step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianMode {
    DenseFd,
    MatrixFreeGaussNewtonCg,
}

/// Dimension threshold of the automatic dense/matrix-free switch.
pub const DENSE_MODE_CAP: usize = 64;

pub fn auto_hessian_mode(dim: usize) -> HessianMode {
    if dim <= DENSE_MODE_CAP {
        HessianMode::DenseFd
    } else {
        HessianMode::MatrixFreeGaussNewtonCg
    }
}

/// Dense Hessian by central-differencing the adjoint gradient, symmetrized.
pub fn dense_hessian(problem: &SmoothingProblem, v: &[f64]) -> Result<DMatrix<f64>> {
    let d = v.len();
    let eps = 1e-5 * norm(v).max(1.0);
    let mut h = DMatrix::zeros(d, d);
    let mut vp = v.to_vec();
    for a in 0..d {
        let keep = vp[a];
        vp[a] = keep + eps;
        let gp = gradient(problem, &vp, GradientMode::Adjoint)?.grad;
        vp[a] = keep - eps;
        let gm = gradient(problem, &vp, GradientMode::Adjoint)?.grad;
        vp[a] = keep;
        for i in 0..d {
            h[(i, a)] = (gp[i] - gm[i]) / (2.0 * eps);
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Matrix-free Hessian application context: one linearization point, many
/// products.
pub struct HessianOperator<'p, 'a> {
    problem: &'p SmoothingProblem<'a>,
    v: Vec<f64>,
    sweep: Sweep,
    /// residuals at v, frozen for the curvature differencing
    frozen_res: Vec<Vec<f64>>,
    /// sum_i (J Phi)' r_i at v (unscaled), the base of the curvature difference
    base_pullback: Vec<f64>,
    fd_step: f64,
}

impl<'p, 'a> HessianOperator<'p, 'a> {
    pub fn new(problem: &'p SmoothingProblem<'a>, v: &[f64]) -> Result<Self> {
        let sweep = build_sweep(problem, v)?;
        let frozen_res = residuals(problem, &sweep);
        let base_pullback = adjoint_pullback(problem, &sweep, &frozen_res);
        Ok(HessianOperator {
            problem,
            v: v.to_vec(),
            sweep,
            frozen_res,
            base_pullback,
            fd_step: 1e-5,
        })
    }

    /// Gauss-Newton part (1/sigma^2) sum_i (J Phi)'(J Phi) w.
    pub fn gauss_newton_apply(&self, w: &[f64]) -> Vec<f64> {
        let pushed = tangent_push(self.problem, &self.sweep, w);
        let mut out = adjoint_pullback(self.problem, &self.sweep, &pushed);
        let s2 = self.problem.sigma_eff() * self.problem.sigma_eff();
        for x in out.iter_mut() {
            *x /= s2;
        }
        out
    }

    /// Curvature term sum_i J^2 Phi[., w, r_i] by one-sided differencing of
    /// the adjoint pull-back with frozen residuals.
    pub fn curvature_apply(&self, w: &[f64]) -> Result<Vec<f64>> {
        let wn = norm(w);
        if wn == 0.0 {
            return Ok(vec![0.0; w.len()]);
        }
        let mut eps = self.fd_step * norm(&self.v).max(1.0) / wn;
        let mut shifted: Vec<f64> = self.v.iter().zip(w).map(|(a, b)| a + eps * b).collect();
        if self.problem.sys.check_in_ball(&shifted).is_err() {
            eps = -eps;
            shifted = self.v.iter().zip(w).map(|(a, b)| a + eps * b).collect();
        }
        let sweep_s = build_sweep(self.problem, &shifted)?;
        let pull_s = adjoint_pullback(self.problem, &sweep_s, &self.frozen_res);
        let s2 = self.problem.sigma_eff() * self.problem.sigma_eff();
        Ok(pull_s
            .iter()
            .zip(&self.base_pullback)
            .map(|(a, b)| (a - b) / eps / s2)
            .collect())
    }

    pub fn apply(&self, w: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.gauss_newton_apply(w);
        let curv = self.curvature_apply(w)?;
        axpy(1.0, &curv, &mut out);
        Ok(out)
    }

    /// First-order estimate of the Gauss-Newton diagonal (Jacobi
    /// preconditioner): J Phi_{t_i} is approximated by H (I + t_i J_rhs(v)).
    pub fn jacobi_diagonal(&self) -> Vec<f64> {
        let d = self.problem.sys.dim();
        let diag = match self.problem.setup.op.observed_indices() {
            Some(obs) => {
                let jac = rhs_jacobian_triplets(self.problem.sys, &self.v);
                let mut observed = vec![false; d];
                for &o in obs {
                    observed[o] = true;
                }
                // per column a: sum_i sum_{o in O} ([o == a] + t_i J_oa)^2
                let mut sum_t = 0.0;
                let mut sum_t2 = 0.0;
                for i in 0..=self.problem.setup.k {
                    let t = self.problem.setup.time_of(i);
                    sum_t += t;
                    sum_t2 += t * t;
                }
                let n_obs_times = (self.problem.setup.k + 1) as f64;
                let mut diag = vec![0.0; d];
                for a in 0..d {
                    if observed[a] {
                        diag[a] += n_obs_times;
                    }
                }
                // cross and quadratic terms from the sparse Jacobian
                for &(row, col, val) in &jac {
                    if !observed[row] {
                        continue;
                    }
                    if row == col {
                        diag[col] += 2.0 * sum_t * val;
                    }
                    diag[col] += sum_t2 * val * val;
                }
                diag
            }
            // dense observation operators fall back to an unpreconditioned solve
            None => vec![1.0; d],
        };
        let s2 = self.problem.sigma_eff() * self.problem.sigma_eff();
        let max_d = diag.iter().cloned().fold(0.0, f64::max).max(1e-300);
        diag.iter()
            .map(|x| (x.max(1e-12 * max_d)) / s2)
            .collect()
    }
}

/// Sparse triplets (row, col, value) of the right-hand-side Jacobian
/// -A - B(., v) - B(v, .) at a point.
fn rhs_jacobian_triplets(sys: &BilinearSystem, v: &[f64]) -> Vec<(usize, usize, f64)> {
    let d = sys.dim();
    let mut trip = Vec::new();
    // -A part (diagonal or dense)
    match sys.linear_op() {
        crate::dynamics::LinearOp::Diagonal(diag) => {
            for (i, a) in diag.iter().enumerate() {
                if *a != 0.0 {
                    trip.push((i, i, -a));
                }
            }
        }
        crate::dynamics::LinearOp::Dense(m) => {
            for r in 0..d {
                for c in 0..d {
                    let x = m[(r, c)];
                    if x != 0.0 {
                        trip.push((r, c, -x));
                    }
                }
            }
        }
    }
    for t in sys.bilinear_terms() {
        // d/dv_left of -coeff v_left v_right and d/dv_right
        trip.push((t.out, t.left, -t.coeff * v[t.right]));
        trip.push((t.out, t.right, -t.coeff * v[t.left]));
    }
    trip
}

/// One operation of the standalone Hessian-vector interface.
pub fn hessian_apply(
    problem: &SmoothingProblem,
    v: &[f64],
    w: &[f64],
    mode: HessianMode,
) -> Result<Vec<f64>> {
    match mode {
        HessianMode::DenseFd => {
            let h = dense_hessian(problem, v)?;
            let wv = DVector::from_column_slice(w);
            Ok((h * wv).as_slice().to_vec())
        }
        HessianMode::MatrixFreeGaussNewtonCg => HessianOperator::new(problem, v)?.apply(w),
    }
}

/// Options for the Newton iteration.
#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub delta_min: f64,
    pub max_iters: usize,
    pub mode: HessianMode,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
}

impl NewtonOptions {
    /// Spec defaults: delta_min = 1e-10 R, 50 iterations, automatic mode,
    /// CG at 1e-10 relative with a 500-iteration cap.
    pub fn defaults(sys: &BilinearSystem) -> Self {
        NewtonOptions {
            delta_min: 1e-10 * sys.radius(),
            max_iters: 50,
            mode: auto_hessian_mode(sys.dim()),
            cg_tol: 1e-10,
            cg_max_iters: 500,
        }
    }
}

/// Record of one Newton run.
#[derive(Debug, Clone)]
pub struct NewtonTrace {
    pub iterates: Vec<Vec<f64>>,
    pub step_norms: Vec<f64>,
    pub objectives: Vec<f64>,
    pub hessian_mode: HessianMode,
    pub converged: bool,
    pub boundary_warning: bool,
    pub levenberg_activations: usize,
}

impl NewtonTrace {
    pub fn iterations(&self) -> usize {
        self.step_norms.len()
    }
}

/// Preconditioned conjugate gradients with the standard Newton-CG safeguard:
/// when a search direction exposes non-positive curvature, the accumulated
/// iterate (a guaranteed descent direction) is returned instead of failing.
fn pcg<F>(apply: F, inv_diag: &[f64], b: &[f64], tol: f64, max_iters: usize) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(inv_diag).map(|(a, m)| a * m).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for iter in 0..max_iters {
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            // truncated CG: fall back to the steepest-descent direction on
            // the very first iteration, otherwise keep the partial solve
            if iter == 0 {
                return Ok(z);
            }
            return Ok(x);
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        if norm(&r) <= tol * bnorm {
            return Ok(x);
        }
        z = r.iter().zip(inv_diag).map(|(a, m)| a * m).collect();
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok(x)
}

fn dense_newton_step(
    h: &DMatrix<f64>,
    grad: &[f64],
    lambda: f64,
) -> Option<Vec<f64>> {
    let d = grad.len();
    let mut hs = h.clone();
    if lambda > 0.0 {
        for i in 0..d {
            hs[(i, i)] += lambda;
        }
    }
    let chol = hs.cholesky()?;
    let g = DVector::from_column_slice(grad);
    Some(chol.solve(&g).as_slice().to_vec())
}

/// Newton iteration x_{i+1} = x_i - (grad^2 g)^{-1} grad g with projection to
/// the trapping ball, a Levenberg shift on indefinite curvature, and a
/// forced-descent retry.
pub fn newton_solve(
    problem: &SmoothingProblem,
    x0: &[f64],
    opts: &NewtonOptions,
) -> Result<(Vec<f64>, NewtonTrace)> {
    let mut x = x0.to_vec();
    problem.sys.project_to_ball(&mut x);
    let mut trace = NewtonTrace {
        iterates: vec![x.clone()],
        step_norms: Vec::new(),
        objectives: vec![objective(problem, &x)?],
        hessian_mode: opts.mode,
        converged: false,
        boundary_warning: false,
        levenberg_activations: 0,
    };
    for _ in 0..opts.max_iters {
        let g_val = *trace.objectives.last().expect("objective recorded");
        let grad_res = gradient(problem, &x, GradientMode::Adjoint)?;
        trace.boundary_warning |= grad_res.boundary_warning;
        let grad = grad_res.grad;

        // dense mode factors once; matrix-free builds one operator per iterate
        let dense_h = if opts.mode == HessianMode::DenseFd {
            Some(dense_hessian(problem, &x)?)
        } else {
            None
        };
        let matfree_op = if opts.mode == HessianMode::MatrixFreeGaussNewtonCg {
            Some(HessianOperator::new(problem, &x)?)
        } else {
            None
        };
        let lambda0 = match (&dense_h, &matfree_op) {
            (Some(h), _) => {
                1e-8 * (0..h.nrows()).map(|i| h[(i, i)].abs()).sum::<f64>() / h.nrows() as f64
            }
            // matrix-free shifts are applied per-coordinate on the Jacobi
            // diagonal, so the base multiplier is dimensionless
            (None, Some(_)) => 1e-8,
            _ => unreachable!(),
        };

        let jacobi = matfree_op.as_ref().map(|op| op.jacobi_diagonal());
        let solve_step = |lambda: f64| -> Result<Option<Vec<f64>>> {
            match (&dense_h, &matfree_op) {
                (Some(h), _) => Ok(dense_newton_step(h, &grad, lambda)),
                (None, Some(op)) => {
                    // Marquardt-style shift lambda * diag keeps the shift
                    // proportional across the widely spread curvature scales
                    let diag = jacobi.as_ref().expect("jacobi diagonal");
                    let inv_diag: Vec<f64> =
                        diag.iter().map(|d| 1.0 / (d * (1.0 + lambda))).collect();
                    let step = pcg(
                        |w| {
                            let mut hw = op.apply(w)?;
                            if lambda > 0.0 {
                                for (h, (wi, di)) in hw.iter_mut().zip(w.iter().zip(diag)) {
                                    *h += lambda * di * wi;
                                }
                            }
                            Ok(hw)
                        },
                        &inv_diag,
                        &grad,
                        opts.cg_tol,
                        opts.cg_max_iters,
                    )?;
                    Ok(Some(step))
                }
                _ => unreachable!(),
            }
        };

        // escalate the Levenberg shift until the factorization succeeds and
        // the step decreases the objective
        let mut lambda = 0.0;
        let mut accepted: Option<(Vec<f64>, f64)> = None;
        for attempt in 0..60 {
            if attempt > 0 {
                lambda = if lambda == 0.0 { lambda0.max(1e-300) } else { 2.0 * lambda };
                trace.levenberg_activations += 1;
            }
            let Some(step) = solve_step(lambda)? else { continue };
            let mut x_trial: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a - b).collect();
            problem.sys.project_to_ball(&mut x_trial);
            let g_trial = objective(problem, &x_trial)?;
            if g_trial <= g_val + 1e-12 * g_val.abs() {
                accepted = Some((x_trial, g_trial));
                break;
            }
        }
        let Some((x_new, g_new)) = accepted else {
            // no descending step found: report non-convergence
            return Ok((x, trace));
        };
        let step_norm = dist(&x_new, &x);
        trace.step_norms.push(step_norm);
        trace.objectives.push(g_new);
        trace.iterates.push(x_new.clone());
        x = x_new;
        if step_norm < opts.delta_min {
            trace.converged = true;
            break;
        }
    }
    Ok((x, trace))
}

/// Estimate report of one smoothing run.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub x0: Vec<f64>,
    pub u_map: Vec<f64>,
    pub u_filter: Vec<f64>,
    pub trace: NewtonTrace,
    pub rmse_vs_truth: Option<f64>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    x0: &'a [f64],
    u_map: &'a [f64],
    u_filter: &'a [f64],
    iterations: usize,
    step_norms: &'a [f64],
    objective: &'a [f64],
    converged: bool,
    rmse_vs_truth: Option<f64>,
}

impl EstimateReport {
    pub fn to_json(&self) -> Result<String> {
        let view = ReportJson {
            x0: &self.x0,
            u_map: &self.u_map,
            u_filter: &self.u_filter,
            iterations: self.trace.iterations(),
            step_norms: &self.trace.step_norms,
            objective: &self.trace.objectives,
            converged: self.trace.converged,
            rmse_vs_truth: self.rmse_vs_truth,
        };
        Ok(serde_json::to_string_pretty(&view)?)
    }
}

/// Options of the full smoothing pipeline.
#[derive(Debug, Clone)]
pub struct SmoothOptions {
    pub scenario: Scenario,
    /// J_max cap per derivative order; the last entry repeats for deeper orders.
    pub jmax_caps: Vec<usize>,
    pub newton: NewtonOptions,
    /// derivative depth of the generic scenario
    pub generic_depth: usize,
    pub lsf_starts: usize,
    pub backward_order: usize,
    /// multi-anchor fallback anchors; None picks {0, k/4, k/2} clipped
    pub anchors: Option<Vec<usize>>,
}

impl SmoothOptions {
    pub fn defaults(sys: &BilinearSystem, scenario: Scenario) -> Self {
        SmoothOptions {
            scenario,
            jmax_caps: vec![1, 1],
            newton: NewtonOptions::defaults(sys),
            generic_depth: 1,
            lsf_starts: 16,
            backward_order: 20,
            anchors: None,
        }
    }
}

fn derivative_depth(opts: &SmoothOptions, dim: usize) -> usize {
    match opts.scenario {
        Scenario::HalfBlocks => 1,
        Scenario::First3 => (dim - 3).div_ceil(3),
        Scenario::Generic => opts.generic_depth,
    }
}

/// Step 1 of the smoothing algorithm: derivative estimates, scenario
/// reconstruction, multi-anchor fallback on degeneracy, generic least-squares
/// fallback on initialization failure.
pub fn initial_point(problem: &SmoothingProblem, opts: &SmoothOptions) -> Result<Vec<f64>> {
    let ctx = problem.estimator_context();
    let d = problem.sys.dim();
    let depth = derivative_depth(opts, d);
    let cap_for = |l: usize| -> usize {
        (*opts
            .jmax_caps
            .get(l)
            .or(opts.jmax_caps.last())
            .unwrap_or(&1))
        .max(l)
    };
    let mut estimates = Vec::with_capacity(depth + 1);
    for l in 0..=depth {
        estimates.push(estimate_derivative(&problem.record.y, l, cap_for(l), &ctx)?.value);
    }
    let direct = match opts.scenario {
        Scenario::HalfBlocks => reconstruct_halfblocks(problem.sys, &estimates[0], &estimates[1]),
        Scenario::First3 => reconstruct_first3(problem.sys, &estimates),
        Scenario::Generic => generic_least_squares_f(
            problem.sys,
            &problem.setup.op,
            &estimates,
            None,
            opts.lsf_starts,
        ),
    };
    let x0 = match direct {
        Ok(x) => x,
        Err(Error::DegenerateInput(_)) => {
            let anchors = opts.anchors.clone().unwrap_or_else(|| {
                default_anchors(problem.setup.k, problem.setup.h, problem.sys.constants().c_der)
            });
            let plan = ReconstructionPlan::for_scenario(opts.scenario, d, anchors);
            let multi = initial_estimate_multianchor(
                problem.sys,
                &problem.setup,
                &problem.record,
                &plan,
                &ctx,
                &opts.jmax_caps,
                opts.backward_order,
                |c| log_posterior(problem, c),
            );
            match multi {
                Ok(res) => res.estimate,
                Err(Error::InitializationFailure(_)) | Err(Error::DegenerateInput(_)) => {
                    generic_least_squares_f(
                        problem.sys,
                        &problem.setup.op,
                        &estimates,
                        None,
                        opts.lsf_starts,
                    )?
                }
                Err(e) => return Err(e),
            }
        }
        Err(e) => return Err(e),
    };
    let mut x0 = x0;
    problem.sys.project_to_ball(&mut x0);
    Ok(x0)
}

/// Optimisation-based smoothing: initial estimate, Newton iteration, and the
/// push-forward filter estimate Psi_T of the MAP.
pub fn smooth(problem: &SmoothingProblem, opts: &SmoothOptions) -> Result<EstimateReport> {
    let x0 = initial_point(problem, opts)?;
    let (u_map, trace) = newton_solve(problem, &x0, &opts.newton)?;
    let u_filter = problem
        .sys
        .flow(&u_map, problem.setup.horizon(), problem.integ)?;
    let rmse_vs_truth = problem.record.truth.as_ref().map(|t| {
        dist(&u_map, &t[0]) / (problem.sys.dim() as f64).sqrt()
    });
    Ok(EstimateReport { x0, u_map, u_filter, trace, rmse_vs_truth })
}

/// Online estimate status per observation index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStatus {
    Warmup,
    Refreshed,
    Propagated,
    CarriedAfterFailure,
}

#[derive(Debug, Clone)]
pub struct FilterStep {
    pub index: usize,
    pub time: f64,
    pub estimate: Vec<f64>,
    pub status: FilterStatus,
}

/// Options of the streaming filter.
#[derive(Debug, Clone)]
pub struct FilterOptions {
    pub window_k: usize,
    /// refresh stride K: the window solve runs at every K-th index
    pub stride: usize,
    pub smooth: SmoothOptions,
}

/// Optimisation-based filtering: before the first full window emit zeros;
/// afterwards, every K steps re-solve the trailing window and push the MAP
/// forward by T; in between, propagate the last estimate by h.
pub fn filter_stream(
    sys: &BilinearSystem,
    setup: &ObservationSetup,
    observations: &[Vec<f64>],
    integ: Integrator,
    opts: &FilterOptions,
) -> Result<Vec<FilterStep>> {
    let k = opts.window_k;
    let stride = opts.stride.max(1);
    let d = sys.dim();
    let mut out = Vec::with_capacity(observations.len());
    let mut last: Option<Vec<f64>> = None;
    for i in 0..observations.len() {
        let time = setup.time_of(i);
        if i < k {
            out.push(FilterStep { index: i, time, estimate: vec![0.0; d], status: FilterStatus::Warmup });
            continue;
        }
        let refresh = (i - k) % stride == 0;
        if refresh {
            let window = observations[i - k..=i].to_vec();
            let wsetup = ObservationSetup::new(setup.op.clone(), setup.sigma_z, setup.h, k)?;
            let wrecord = ObservationRecord { y: window, seed: 0, truth: None };
            let attempt = SmoothingProblem::new(sys, wsetup, wrecord, integ)
                .and_then(|p| smooth(&p, &opts.smooth));
            match attempt {
                Ok(report) if report.trace.converged => {
                    last = Some(report.u_filter.clone());
                    out.push(FilterStep { index: i, time, estimate: report.u_filter, status: FilterStatus::Refreshed });
                    continue;
                }
                _ => {
                    let est = match &last {
                        Some(prev) => sys.flow(prev, setup.h, integ)?,
                        None => vec![0.0; d],
                    };
                    last = Some(est.clone());
                    out.push(FilterStep { index: i, time, estimate: est, status: FilterStatus::CarriedAfterFailure });
                    continue;
                }
            }
        }
        let est = match &last {
            Some(prev) => sys.flow(prev, setup.h, integ)?,
            None => vec![0.0; d],
        };
        last = Some(est.clone());
        out.push(FilterStep { index: i, time, estimate: est, status: FilterStatus::Propagated });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::{generate, scenario_half_blocks, ObsOperator};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn default_u0(d: usize) -> Vec<f64> {
        (1..=d).map(|i| (d as f64 + i as f64) / (2.0 * d as f64)).collect()
    }

    fn d12_problem(sigma: f64, k: usize, seed: u64) -> (BilinearSystem, ObservationSetup, ObservationRecord, Integrator) {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let op = scenario_half_blocks(12).unwrap();
        let setup = ObservationSetup::new(op, sigma, 1e-2, k).unwrap();
        let integ = Integrator::default_for(&sys, setup.h);
        let rec = generate(&sys, &setup, &default_u0(12), seed, integ).unwrap();
        (sys, setup, rec, integ)
    }

    fn static_problem(
        d: usize,
        sigma: f64,
        k: usize,
        seed: u64,
    ) -> (BilinearSystem, ObservationSetup, ObservationRecord, Integrator) {
        let sys = BilinearSystem::static_system(d, 10.0).unwrap();
        let setup = ObservationSetup::new(ObsOperator::identity(d), sigma, 0.1, k).unwrap();
        let integ = Integrator { step: 0.05, i_max: 4 };
        let u0: Vec<f64> = (0..d).map(|i| 0.3 * i as f64 - 0.5).collect();
        let rec = generate(&sys, &setup, &u0, seed, integ).unwrap();
        (sys, setup, rec, integ)
    }

    #[test]
    fn log_posterior_hand_computation_static() {
        // flow is the identity: two squared residuals, computed by hand
        let (sys, setup, rec, integ) = static_problem(4, 0.5, 1, 3);
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let v = vec![0.1, -0.2, 0.3, 0.4];
        let mut expect = 0.0;
        for row in &problem.record.y {
            for (a, b) in row.iter().zip(&v) {
                expect += (a - b) * (a - b);
            }
        }
        expect /= 2.0 * 0.5 * 0.5;
        let got = objective(&problem, &v).unwrap();
        assert_relative_eq!(got, expect, max_relative = 1e-12);
        assert_relative_eq!(log_posterior(&problem, &v), -expect, max_relative = 1e-12);
    }

    #[test]
    fn doubling_sigma_quarters_data_term() {
        let (sys, setup, rec, integ) = static_problem(4, 0.5, 3, 7);
        let mut setup2 = setup.clone();
        setup2.sigma_z = 1.0;
        let p1 = SmoothingProblem::new(&sys, setup, rec.clone(), integ).unwrap();
        let p2 = SmoothingProblem::new(&sys, setup2, rec, integ).unwrap();
        let v = vec![0.5, 0.5, -0.5, 0.0];
        assert_relative_eq!(
            objective(&p1, &v).unwrap(),
            4.0 * objective(&p2, &v).unwrap(),
            max_relative = 1e-13
        );
    }

    #[test]
    fn noiseless_truth_is_the_maximum() {
        let (sys, setup, rec, integ) = d12_problem(0.0, 10, 1);
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let u0 = default_u0(12);
        assert_eq!(objective(&problem, &u0).unwrap(), 0.0);
        let g = gradient(&problem, &u0, GradientMode::Adjoint).unwrap().grad;
        assert!(norm(&g) < 1e-10, "gradient at noiseless truth: {}", norm(&g));
    }

    #[test]
    fn outside_ball_is_minus_infinity() {
        let (sys, setup, rec, integ) = d12_problem(1e-3, 5, 1);
        let r = sys.radius();
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let v = vec![r; 12];
        assert_eq!(log_posterior(&problem, &v), f64::NEG_INFINITY);
    }

    #[test]
    fn gradient_modes_agree() {
        let (sys, setup, rec, integ) = d12_problem(1e-3, 8, 5);
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..3 {
            let v: Vec<f64> = default_u0(12)
                .iter()
                .map(|x| x + 0.1 * rng.gen_range(-1.0..1.0))
                .collect();
            let ga = gradient(&problem, &v, GradientMode::Adjoint).unwrap().grad;
            let gf = gradient(&problem, &v, GradientMode::FiniteDifference).unwrap().grad;
            let rel = dist(&ga, &gf) / norm(&ga).max(1e-300);
            assert!(rel < 1e-6, "adjoint vs FD relative gap {rel}");
        }
    }

    #[test]
    fn gradient_directional_derivative_oracle() {
        let (sys, setup, rec, integ) = d12_problem(1e-3, 8, 9);
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let v = default_u0(12);
        let g = gradient(&problem, &v, GradientMode::Adjoint).unwrap().grad;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for eps in [1e-4, 1e-5] {
            let vp: Vec<f64> = v.iter().zip(&w).map(|(a, b)| a + eps * b).collect();
            let vm: Vec<f64> = v.iter().zip(&w).map(|(a, b)| a - eps * b).collect();
            let fd = (objective(&problem, &vp).unwrap() - objective(&problem, &vm).unwrap()) / (2.0 * eps);
            let dd = dot(&g, &w);
            assert_relative_eq!(fd, dd, max_relative = 1e-5);
        }
    }

    #[test]
    fn dense_hessian_is_symmetric_and_static_constant() {
        let (sys, setup, rec, integ) = static_problem(3, 0.4, 4, 11);
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let h1 = dense_hessian(&problem, &[0.1, 0.2, -0.3]).unwrap();
        let h2 = dense_hessian(&problem, &[-0.5, 0.9, 0.4]).unwrap();
        // quadratic surrogate: Hessian constant in v, equal to (k+1)/sigma^2 I
        let scale = 5.0 / (0.4 * 0.4);
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(h1[(i, j)], h2[(i, j)], epsilon = 1e-6 * scale);
                let expect = if i == j { scale } else { 0.0 };
                assert_relative_eq!(h1[(i, j)], expect, epsilon = 1e-6 * scale);
            }
        }
    }

    #[test]
    fn hessian_symmetry_inner_product() {
        let (sys, setup, rec, integ) = d12_problem(1e-3, 6, 13);
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let v = default_u0(12);
        let h = dense_hessian(&problem, &v).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..5 {
            let w = DVector::from_fn(12, |_, _| rng.gen_range(-1.0..1.0));
            let z = DVector::from_fn(12, |_, _| rng.gen_range(-1.0..1.0));
            let hw = &h * &w;
            let hz = &h * &z;
            assert_relative_eq!(hw.dot(&z), w.dot(&hz), max_relative = 1e-8);
        }
    }

    #[test]
    fn matrix_free_matches_dense_at_noiseless_truth() {
        // residuals vanish, so the curvature term is zero in both modes
        let (sys, setup, rec, integ) = d12_problem(0.0, 6, 1);
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let v = default_u0(12);
        let h = dense_hessian(&problem, &v).unwrap();
        let op = HessianOperator::new(&problem, &v).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..4 {
            let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hw_mf = op.apply(&w).unwrap();
            let hw_d = (&h * DVector::from_column_slice(&w)).as_slice().to_vec();
            let rel = dist(&hw_mf, &hw_d) / norm(&hw_d).max(1e-300);
            assert!(rel < 1e-6, "dense vs matrix-free relative gap {rel}");
        }
    }

    #[test]
    fn newton_one_step_on_quadratic() {
        // static model: the objective is exactly quadratic, optimum = mean(Y)
        let (sys, setup, rec, integ) = static_problem(4, 0.3, 5, 17);
        let k = setup.k;
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let mut target = vec![0.0; 4];
        for row in &problem.record.y {
            axpy(1.0 / (k as f64 + 1.0), row, &mut target);
        }
        let opts = NewtonOptions::defaults(&sys);
        let (map, trace) = newton_solve(&problem, &[0.0; 4], &opts).unwrap();
        assert!(trace.converged);
        // the first iterate already sits at the optimum
        assert!(dist(&trace.iterates[1], &target) < 1e-10);
        assert!(dist(&map, &target) < 1e-10);
        assert!(trace.iterations() <= 2);
    }

    #[test]
    fn newton_paper_regime_converges_quickly() {
        let (sys, setup, rec, integ) = d12_problem(1e-3, 50, 42);
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let opts = SmoothOptions::defaults(&sys, Scenario::HalfBlocks);
        let report = smooth(&problem, &opts).unwrap();
        assert!(report.trace.converged, "no convergence in 50 iterations");
        assert!(
            report.trace.iterations() <= 10,
            "took {} iterations",
            report.trace.iterations()
        );
        // objective is monotone along the trace
        for w in report.trace.objectives.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs());
        }
        // MAP fits the data at least as well as the truth
        let g_map = objective(&problem, &report.u_map).unwrap();
        let g_truth = objective(&problem, &default_u0(12)).unwrap();
        assert!(g_map <= g_truth * (1.0 + 1e-9));
    }

    #[test]
    fn newton_step_norms_decay_quadratically() {
        let (sys, setup, rec, integ) = d12_problem(1e-3, 50, 7);
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let opts = SmoothOptions::defaults(&sys, Scenario::HalfBlocks);
        let report = smooth(&problem, &opts).unwrap();
        assert!(report.trace.converged);
        let map = &report.u_map;
        let errs: Vec<f64> = report.trace.iterates.iter().map(|x| dist(x, map)).collect();
        // over the tail of the iteration: err_{i+1} <= 100 err_i^2
        let n = errs.len();
        let mut checked = 0;
        for i in (1..n.saturating_sub(1)).rev().take(3) {
            if errs[i] > 1e-13 && errs[i] < 1e-2 {
                assert!(
                    errs[i + 1] <= 100.0 * errs[i] * errs[i] + 1e-14,
                    "err {} -> {} not quadratic",
                    errs[i],
                    errs[i + 1]
                );
                checked += 1;
            }
        }
        assert!(checked > 0, "no tail iterations in the measurable range");
    }

    #[test]
    fn smooth_noiseless_recovers_truth() {
        let (sys, setup, rec, integ) = d12_problem(0.0, 50, 1);
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let opts = SmoothOptions::defaults(&sys, Scenario::HalfBlocks);
        let report = smooth(&problem, &opts).unwrap();
        let u0 = default_u0(12);
        assert!(
            dist(&report.u_map, &u0) < 1e-8,
            "noiseless MAP error {}",
            dist(&report.u_map, &u0)
        );
        // u_filter is the pushed-forward MAP by construction
        let pushed = sys.flow(&report.u_map, problem.setup.horizon(), integ).unwrap();
        assert_eq!(report.u_filter, pushed);
    }

    #[test]
    fn dense_and_matrix_free_maps_agree() {
        let (sys, setup, rec, integ) = d12_problem(1e-3, 30, 3);
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let mut opts = SmoothOptions::defaults(&sys, Scenario::HalfBlocks);
        let dense = smooth(&problem, &opts).unwrap();
        opts.newton.mode = HessianMode::MatrixFreeGaussNewtonCg;
        let matfree = smooth(&problem, &opts).unwrap();
        assert!(dense.trace.converged && matfree.trace.converged);
        assert!(
            dist(&dense.u_map, &matfree.u_map) < 1e-6,
            "mode gap {}",
            dist(&dense.u_map, &matfree.u_map)
        );
    }

    #[test]
    fn report_json_has_contract_fields() {
        let (sys, setup, rec, integ) = d12_problem(1e-3, 10, 2);
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let opts = SmoothOptions::defaults(&sys, Scenario::HalfBlocks);
        let report = smooth(&problem, &opts).unwrap();
        let json = report.to_json().unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        for field in ["x0", "u_map", "u_filter", "iterations", "step_norms", "objective", "converged"] {
            assert!(value.get(field).is_some(), "missing field {field}");
        }
        assert_eq!(value["u_map"].as_array().unwrap().len(), 12);
    }

    #[test]
    fn filter_warmup_emits_zeros() {
        let (sys, setup, rec, integ) = d12_problem(0.0, 12, 1);
        let opts = FilterOptions {
            window_k: 8,
            stride: 1,
            smooth: SmoothOptions::defaults(&sys, Scenario::HalfBlocks),
        };
        let steps = filter_stream(&sys, &setup, &rec.y, integ, &opts).unwrap();
        assert_eq!(steps.len(), 13);
        for s in &steps[..8] {
            assert_eq!(s.status, FilterStatus::Warmup);
            assert!(s.estimate.iter().all(|x| *x == 0.0));
        }
        assert_eq!(steps[8].status, FilterStatus::Refreshed);
    }

    #[test]
    fn filter_tracks_noiseless_truth() {
        let (sys, setup, rec, integ) = d12_problem(0.0, 20, 1);
        let opts = FilterOptions {
            window_k: 10,
            stride: 1,
            smooth: SmoothOptions::defaults(&sys, Scenario::HalfBlocks),
        };
        let steps = filter_stream(&sys, &setup, &rec.y, integ, &opts).unwrap();
        let truth = rec.truth.as_ref().unwrap();
        for s in steps.iter().skip(10) {
            let err = dist(&s.estimate, &truth[s.index]);
            assert!(err < 1e-7, "index {}: err {}", s.index, err);
        }
    }

    #[test]
    fn filter_stride_consistency() {
        let (sys, setup, rec, integ) = d12_problem(1e-3, 24, 5);
        let smooth_opts = SmoothOptions::defaults(&sys, Scenario::HalfBlocks);
        let o1 = FilterOptions { window_k: 10, stride: 1, smooth: smooth_opts.clone() };
        let o5 = FilterOptions { window_k: 10, stride: 5, smooth: smooth_opts };
        let s1 = filter_stream(&sys, &setup, &rec.y, integ, &o1).unwrap();
        let s5 = filter_stream(&sys, &setup, &rec.y, integ, &o5).unwrap();
        for (a, b) in s1.iter().zip(&s5) {
            if b.status == FilterStatus::Refreshed {
                assert_eq!(a.estimate, b.estimate, "refresh step {} differs", a.index);
            }
        }
    }
}
