//! Initial points for Newton's method, built from derivative estimates: the
//! Lorenz 96' forward/backward reconstruction recursions, a generic
//! least-squares inversion of the derivative map, and the multi-anchor
//! variant that survives zero components in the initial state.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::deriv_est::{estimate_derivative, EstimatorContext};
use crate::dynamics::BilinearSystem;
use crate::error::{Error, Result};
use crate::linalg::{binomial_row, norm};
use crate::observation::{ObservationRecord, ObservationSetup, ObsOperator};

/// Divisors below this fraction of the trapping radius route to the
/// multi-anchor fallback instead of dividing.
pub const DIVISOR_FLOOR_FACTOR: f64 = 1e-6;

/// Default Taylor order of the multi-anchor backward pull-back.
pub const BACKWARD_ORDER: usize = 20;

/// Observation scenario driving the choice of reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    HalfBlocks,
    First3,
    Generic,
}

/// How the initial estimate is assembled: scenario, derivative depth, anchors.
#[derive(Debug, Clone)]
pub struct ReconstructionPlan {
    pub scenario: Scenario,
    pub j: usize,
    pub anchors: Vec<usize>,
}

impl ReconstructionPlan {
    pub fn for_scenario(scenario: Scenario, dim: usize, anchors: Vec<usize>) -> Self {
        let j = match scenario {
            Scenario::HalfBlocks => 1,
            Scenario::First3 => (dim - 3).div_ceil(3),
            Scenario::Generic => 1,
        };
        ReconstructionPlan { scenario, j, anchors }
    }
}

/// Default anchors {0, k/4, k/2}, clipped so every anchor time stays inside
/// the backward-flow horizon 0.9 / C_der.
pub fn default_anchors(k: usize, h: f64, c_der: f64) -> Vec<usize> {
    let horizon = if c_der > 0.0 { 0.9 / c_der } else { f64::INFINITY };
    let mut anchors = vec![0usize, k / 4, k / 2];
    anchors.retain(|&a| (a as f64) * h < horizon);
    anchors.dedup();
    if anchors.is_empty() {
        anchors.push(0);
    }
    anchors
}

fn divisor_floor(sys: &BilinearSystem) -> f64 {
    DIVISOR_FLOOR_FACTOR * sys.radius()
}

fn checked_div(num: f64, div: f64, floor: f64, what: &str) -> Result<f64> {
    if div.abs() <= floor {
        Err(Error::DegenerateInput(format!(
            "divisor {what} = {div:.3e} below floor {floor:.3e}"
        )))
    } else {
        Ok(num / div)
    }
}

/// Half-blocks reconstruction: fill the three unobserved coordinates of each
/// block from the observed ones and their first derivatives.
///
/// `obs0` and `obs1` are H D^0 u and H D^1 u in observed-coordinate order.
pub fn reconstruct_halfblocks(
    sys: &BilinearSystem,
    obs0: &[f64],
    obs1: &[f64],
) -> Result<Vec<f64>> {
    let d = sys.dim();
    if d % 6 != 0 {
        return Err(Error::InvalidDimension(format!(
            "half-blocks reconstruction needs d divisible by 6, got {d}"
        )));
    }
    if obs0.len() != d / 2 || obs1.len() != d / 2 {
        return Err(Error::InvalidDimension(
            "half-blocks reconstruction expects d/2 observed values and derivatives".into(),
        ));
    }
    let f = sys.forcing()[0];
    let floor = divisor_floor(sys);
    let mut u = vec![f64::NAN; d];
    // observed coordinate g = 6m + r (r < 3) sits at position 3m + r
    let pos = |g: usize| -> usize { 3 * (g / 6) + g % 6 };
    for g in (0..d).filter(|g| g % 6 < 3) {
        u[g] = obs0[pos(g)];
    }
    let du = |g: usize| -> f64 { obs1[pos(g)] };
    let md = |i: isize| -> usize { i.rem_euclid(d as isize) as usize };
    for m in 0..d / 6 {
        let b = 6 * m;
        // forward: u_{b+3} = (D u_{b+2} + u_{b+1} u_b + u_{b+2} - f) / u_{b+1}
        u[b + 3] = checked_div(
            du(b + 2) + u[b + 1] * u[b] + u[b + 2] - f,
            u[b + 1],
            floor,
            "u_{b+1}",
        )?;
        // backward: u_{b+5} = (f - D u_{b+7} - u_{b+7} + u_{b+6} u_{b+8}) / u_{b+6}
        let (g6, g7, g8) = (md(b as isize + 6), md(b as isize + 7), md(b as isize + 8));
        u[b + 5] = checked_div(
            f - du(g7) - u[g7] + u[g6] * u[g8],
            u[g6],
            floor,
            "u_{b+6}",
        )?;
        // backward, chained: u_{b+4} = (f - D u_{b+6} - u_{b+6} + u_{b+5} u_{b+7}) / u_{b+5}
        u[b + 4] = checked_div(
            f - du(g6) - u[g6] + u[b + 5] * u[g7],
            u[b + 5],
            floor,
            "u_{b+5}",
        )?;
    }
    Ok(u)
}

/// First-3 reconstruction: from derivatives of the first three coordinates up
/// to order j = ceil((d-3)/3), recover the full state by the forward recursion
/// (losing one order per coordinate) and the backward recursion (two
/// coordinates per round).
///
/// `derivs[l]` holds H D^l u (three values), for l = 0..=j.
pub fn reconstruct_first3(sys: &BilinearSystem, derivs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = sys.dim();
    let j = (d - 3).div_ceil(3);
    if derivs.len() < j + 1 {
        return Err(Error::InsufficientData(format!(
            "first-3 reconstruction at d = {d} needs {} derivative orders, got {}",
            j + 1,
            derivs.len()
        )));
    }
    let f = sys.forcing()[0];
    let floor = divisor_floor(sys);
    // table[c][m] = D^m u_c
    let mut table: Vec<Vec<Option<f64>>> = vec![vec![None; j + 2]; d];
    for c in 0..3 {
        for (l, row) in derivs.iter().enumerate().take(j + 1) {
            table[c][l] = Some(row[c]);
        }
    }
    let md = |i: isize| -> usize { i.rem_euclid(d as isize) as usize };
    let get = |table: &Vec<Vec<Option<f64>>>, c: usize, m: usize| -> Result<f64> {
        table[c][m].ok_or_else(|| {
            Error::Numerical(format!("recursion needs D^{m} u_{c} before it is available"))
        })
    };

    // forward: coordinate c = 3 .. j+2 to order j - (c - 2)
    for c in 3..=(j + 2).min(d - 1) {
        let top = j as isize - (c as isize - 2);
        if top < 0 {
            break;
        }
        let div = get(&table, c - 2, 0)?;
        for m in 0..=top as usize {
            if table[c][m].is_some() {
                continue;
            }
            let binom = binomial_row(m);
            let mut num = get(&table, c - 1, m + 1)? + get(&table, c - 1, m)?;
            if m == 0 {
                num -= f;
            }
            for l in 0..=m {
                num += binom[l] * get(&table, c - 2, l)? * get(&table, md(c as isize - 3), m - l)?;
            }
            for l in 0..m {
                num -= binom[l] * get(&table, c, l)? * get(&table, c - 2, m - l)?;
            }
            table[c][m] = Some(checked_div(num, div, floor, "forward divisor")?);
        }
    }

    // backward: round r recovers coordinates d-2r+1 and d-2r to order j - r
    for r in 1..=j {
        let top = j - r;
        for c_off in [2 * r - 1, 2 * r] {
            let c = d as isize - c_off as isize;
            if c < 3 {
                continue;
            }
            let c = c as usize;
            let div = get(&table, md(c as isize + 1), 0)?;
            for m in 0..=top {
                if table[c][m].is_some() {
                    continue;
                }
                let binom = binomial_row(m);
                let c1 = md(c as isize + 1);
                let c2 = md(c as isize + 2);
                let c3 = md(c as isize + 3);
                let mut num = -get(&table, c2, m + 1)? - get(&table, c2, m)?;
                if m == 0 {
                    num += f;
                }
                for l in 0..=m {
                    num += binom[l] * get(&table, c1, l)? * get(&table, c3, m - l)?;
                }
                for l in 0..m {
                    num -= binom[l] * get(&table, c, l)? * get(&table, c1, m - l)?;
                }
                table[c][m] = Some(checked_div(num, div, floor, "backward divisor")?);
            }
        }
    }

    let mut u = Vec::with_capacity(d);
    for (c, row) in table.iter().enumerate() {
        u.push(row[0].ok_or_else(|| {
            Error::Numerical(format!("coordinate {c} not reached by either recursion"))
        })?);
    }
    Ok(u)
}

/// Objective sum_i |H D^i v - x_i|^2 and its gradient via reverse accumulation
/// through the derivative recursion.
fn lsf_objective_gradient(
    sys: &BilinearSystem,
    hop: &ObsOperator,
    targets: &[Vec<f64>],
    v: &[f64],
) -> (f64, Vec<f64>) {
    let j = targets.len() - 1;
    let q = sys.derivative_series_unchecked(v, j);
    let mut obj = 0.0;
    let mut seeds: Vec<Vec<f64>> = Vec::with_capacity(j + 1);
    for (i, target) in targets.iter().enumerate() {
        let hq = hop.apply(&q[i]);
        let r: Vec<f64> = hq.iter().zip(target).map(|(a, b)| a - b).collect();
        obj += r.iter().map(|x| x * x).sum::<f64>();
        let htr = hop.apply_transpose(&r, sys.dim());
        seeds.push(htr.iter().map(|x| 2.0 * x).collect());
    }
    let grad = sys.series_adjoint(&q, seeds);
    (obj, grad)
}

/// BFGS with Armijo backtracking; good enough for the smooth least-squares
/// objective at desk-scale dimensions.
fn bfgs<F>(obj_grad: F, x0: &[f64], max_iters: usize, gtol: f64) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, g) = obj_grad(x.as_slice());
    let mut g = DVector::from_vec(g);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    for _ in 0..max_iters {
        if g.norm() <= gtol * (1.0 + fx.abs()) {
            break;
        }
        let p = -(&h_inv * &g);
        let slope = g.dot(&p);
        if slope >= 0.0 {
            // reset a corrupted approximation
            h_inv = DMatrix::identity(n, n);
            continue;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &x + alpha * &p;
            let (fc, gc) = obj_grad(cand.as_slice());
            if fc.is_finite() && fc <= fx + 1e-4 * alpha * slope {
                accepted = Some((cand, fc, DVector::from_vec(gc)));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else { break };
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // BFGS inverse update
            h_inv = &h_inv - rho * (&hy * s.transpose() + &s * hy.transpose())
                + rho * rho * (sy + yhy) * (&s * s.transpose());
        }
        if s.norm() < 1e-14 * (1.0 + x.norm()) {
            x = x_new;
            fx = f_new;
            break;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }
    (x.as_slice().to_vec(), fx)
}

/// Generic initial estimator: argmin over the trapping ball of
/// sum_i |H D^i v - x_i|^2 by multi-start BFGS. Returns the best local
/// minimizer found (projected onto the ball).
pub fn generic_least_squares_f(
    sys: &BilinearSystem,
    hop: &ObsOperator,
    targets: &[Vec<f64>],
    scenario_start: Option<&[f64]>,
    n_starts: usize,
) -> Result<Vec<f64>> {
    if targets.is_empty() {
        return Err(Error::InsufficientData("no derivative targets supplied".into()));
    }
    let d = sys.dim();
    let og = |v: &[f64]| lsf_objective_gradient(sys, hop, targets, v);
    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(s) = scenario_start {
        let mut s = s.to_vec();
        sys.project_to_ball(&mut s);
        starts.push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    while starts.len() < n_starts.max(1) {
        let dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = norm(&dir);
        if n < 1e-9 {
            continue;
        }
        let r = sys.radius() / 2.0;
        starts.push(dir.iter().map(|x| r * x / n).collect());
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for start in &starts {
        let (x, _) = bfgs(og, start, 200, 1e-12);
        let mut x = x;
        sys.project_to_ball(&mut x);
        let (fx, _) = og(&x);
        if fx.is_finite() {
            match &best {
                Some((fb, _)) if *fb <= fx => {}
                _ => best = Some((fx, x)),
            }
        }
    }
    best.map(|(_, x)| x)
        .ok_or_else(|| Error::OptimizationFailure("every start produced a non-finite objective".into()))
}

/// Objective value of the generic estimator at a point (for descent checks).
pub fn lsf_objective(sys: &BilinearSystem, hop: &ObsOperator, targets: &[Vec<f64>], v: &[f64]) -> f64 {
    lsf_objective_gradient(sys, hop, targets, v).0
}

/// Outcome of the multi-anchor estimator.
#[derive(Debug, Clone)]
pub struct MultiAnchorResult {
    pub estimate: Vec<f64>,
    pub anchor_used: usize,
    /// (anchor, score) of every candidate that survived reconstruction.
    pub candidates: Vec<(usize, f64)>,
}

/// Anchor-r reconstruction: estimate the derivatives of u(t_{i_r}) from the
/// shifted window, reconstruct, pull back by the backward flow.
fn anchor_candidate(
    sys: &BilinearSystem,
    setup: &ObservationSetup,
    record: &ObservationRecord,
    plan: &ReconstructionPlan,
    ctx: &EstimatorContext,
    caps: &[usize],
    backward_order: usize,
    anchor: usize,
) -> Result<Vec<f64>> {
    if anchor >= record.rows() {
        return Err(Error::InsufficientData(format!("anchor {anchor} beyond record")));
    }
    let window = &record.y[anchor..];
    let cap_for = |l: usize| -> usize { *caps.get(l).or(caps.last()).unwrap_or(&l.max(1)) };
    let mut estimates = Vec::with_capacity(plan.j + 1);
    for l in 0..=plan.j {
        let est = estimate_derivative(window, l, cap_for(l).max(l), ctx)?;
        estimates.push(est.value);
    }
    let mut state = match plan.scenario {
        Scenario::HalfBlocks => reconstruct_halfblocks(sys, &estimates[0], &estimates[1])?,
        Scenario::First3 => reconstruct_first3(sys, &estimates)?,
        Scenario::Generic => generic_least_squares_f(sys, &setup.op, &estimates, None, 16)?,
    };
    sys.project_to_ball(&mut state);
    let t_back = setup.time_of(anchor);
    let mut pulled = if t_back > 0.0 {
        sys.flow_backward(&state, t_back, backward_order)?
    } else {
        state
    };
    sys.project_to_ball(&mut pulled);
    Ok(pulled)
}

/// Zero-component-robust initial estimator: try every anchor, score the
/// surviving candidates with the supplied smoothing log-density, return the
/// argmax.
pub fn initial_estimate_multianchor<S>(
    sys: &BilinearSystem,
    setup: &ObservationSetup,
    record: &ObservationRecord,
    plan: &ReconstructionPlan,
    ctx: &EstimatorContext,
    caps: &[usize],
    backward_order: usize,
    score: S,
) -> Result<MultiAnchorResult>
where
    S: Fn(&[f64]) -> f64,
{
    let horizon = 0.9 * sys.constants().step_limit();
    let mut candidates = Vec::new();
    let mut failures = Vec::new();
    for &anchor in &plan.anchors {
        if setup.time_of(anchor) >= horizon {
            failures.push(format!("anchor {anchor}: beyond backward horizon"));
            continue;
        }
        match anchor_candidate(sys, setup, record, plan, ctx, caps, backward_order, anchor) {
            Ok(c) => {
                let s = score(&c);
                candidates.push((anchor, s, c));
            }
            Err(e) => failures.push(format!("anchor {anchor}: {e}")),
        }
    }
    let best = candidates
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i);
    match best {
        Some(i) => {
            let (anchor, _, estimate) = candidates[i].clone();
            Ok(MultiAnchorResult {
                estimate,
                anchor_used: anchor,
                candidates: candidates.iter().map(|(a, s, _)| (*a, *s)).collect(),
            })
        }
        None => Err(Error::InitializationFailure(format!(
            "every anchor failed: {}",
            failures.join("; ")
        ))),
    }
}
