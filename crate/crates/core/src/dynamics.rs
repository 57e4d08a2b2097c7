//! Bilinear ODE systems du/dt = -Au - B(u,u) + f: state derivatives, Taylor
//! stepping with certified error bounds, tangent (Jacobian) propagation and
//! backward flow.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{axpy, binomial_row, norm};

/// Relative slack on the trapping-ball membership test, so that points sitting
/// numerically on the boundary (or finite-difference probes next to it) are
/// still accepted.
const BALL_SLACK: f64 = 1e-9;

/// Largest Taylor order for which the binomial table stays exact in f64.
pub const MAX_TAYLOR_ORDER: usize = 30;

/// Default Taylor truncation order.
pub const DEFAULT_TAYLOR_ORDER: usize = 12;

/// One sparse entry of the bilinear form: B(u, v)[out] += coeff * u[left] * v[right].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTerm {
    pub left: usize,
    pub right: usize,
    pub out: usize,
    pub coeff: f64,
}

/// Linear operator A, stored diagonally when possible.
#[derive(Debug, Clone)]
pub enum LinearOp {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

impl LinearOp {
    pub fn identity(dim: usize) -> Self {
        LinearOp::Diagonal(vec![1.0; dim])
    }

    pub fn zero(dim: usize) -> Self {
        LinearOp::Diagonal(vec![0.0; dim])
    }

    fn dim(&self) -> usize {
        match self {
            LinearOp::Diagonal(d) => d.len(),
            LinearOp::Dense(m) => m.nrows(),
        }
    }

    fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        match self {
            LinearOp::Diagonal(d) => {
                for i in 0..d.len() {
                    out[i] = d[i] * v[i];
                }
            }
            LinearOp::Dense(m) => {
                for (i, row) in m.row_iter().enumerate() {
                    out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
                }
            }
        }
    }

    fn apply_transpose_into(&self, v: &[f64], out: &mut [f64]) {
        match self {
            LinearOp::Diagonal(d) => {
                for i in 0..d.len() {
                    out[i] = d[i] * v[i];
                }
            }
            LinearOp::Dense(m) => {
                for (j, col) in m.column_iter().enumerate() {
                    out[j] = col.iter().zip(v).map(|(a, b)| a * b).sum();
                }
            }
        }
    }

    /// Operator (spectral) norm.
    pub fn operator_norm(&self) -> f64 {
        match self {
            LinearOp::Diagonal(d) => d.iter().fold(0.0, |acc, x| acc.max(x.abs())),
            LinearOp::Dense(m) => m
                .clone()
                .svd(false, false)
                .singular_values
                .iter()
                .fold(0.0, |acc: f64, x| acc.max(*x)),
        }
    }
}

/// Constants derived from (|A|, |B|, |f|, R): growth rates of the state
/// derivatives and of the flow Jacobians.
#[derive(Debug, Clone, Copy)]
pub struct SystemConstants {
    /// C0 = R + |f|/|A|; scale of the derivative bounds |D^i v| <= C0 C_der^i i!.
    pub c0: f64,
    /// C_der = |A| + |B| R + |B| |f| / |A|; reciprocal of the Taylor convergence radius.
    pub c_der: f64,
    /// G = |A| + 2 |B| R; exponential divergence rate of nearby trajectories.
    pub gronwall: f64,
    /// sup |dv/dt| over the trapping ball.
    pub v_max: f64,
    /// sup of the right-hand-side Jacobian norm over the trapping ball.
    pub a_max: f64,
}

impl SystemConstants {
    fn from_norms(norm_a: f64, norm_b: f64, norm_f: f64, radius: f64) -> Result<Self> {
        // |f|/|A| ratio; 0/0 is taken as 0 so that force-free systems are allowed.
        let f_over_a = if norm_f == 0.0 {
            0.0
        } else if norm_a > 0.0 {
            norm_f / norm_a
        } else {
            return Err(Error::Configuration(
                "derivative constants need |A| > 0 when the forcing is nonzero".into(),
            ));
        };
        Ok(SystemConstants {
            c0: radius + f_over_a,
            c_der: norm_a + norm_b * radius + norm_b * f_over_a,
            gronwall: norm_a + 2.0 * norm_b * radius,
            v_max: norm_a * radius + norm_b * radius * radius + norm_f,
            a_max: norm_a + 2.0 * norm_b * radius,
        })
    }

    /// C_J^(k) = 2^k (C_der + |B|): growth rate of the k-th Jacobian of the
    /// derivative recursion. Computed on demand.
    pub fn c_j(&self, k: usize, norm_b: f64) -> f64 {
        (2.0f64).powi(k as i32) * (self.c_der + norm_b)
    }

    /// Radius of convergence of the Taylor series, 1/C_der (infinite for
    /// linear force-free systems).
    pub fn step_limit(&self) -> f64 {
        if self.c_der > 0.0 {
            1.0 / self.c_der
        } else {
            f64::INFINITY
        }
    }
}

/// Taylor integrator settings: truncation order and step size.
#[derive(Debug, Clone, Copy)]
pub struct Integrator {
    pub step: f64,
    pub i_max: usize,
}

impl Integrator {
    /// Module default: order 12, step min(h, 0.25/C_der).
    pub fn default_for(sys: &BilinearSystem, h: f64) -> Self {
        let cap = 0.25 * sys.constants().step_limit();
        Integrator {
            step: h.min(cap),
            i_max: DEFAULT_TAYLOR_ORDER,
        }
    }
}

/// The triple (A, B, f) with trapping radius R.
///
/// Immutable after construction; all operations are pure functions of their
/// inputs, so a system can be shared freely across threads.
#[derive(Debug, Clone)]
pub struct BilinearSystem {
    dim: usize,
    a: LinearOp,
    b_terms: Vec<BilinearTerm>,
    forcing: Vec<f64>,
    radius: f64,
    norm_b: f64,
    constants: SystemConstants,
}

impl BilinearSystem {
    /// Build a system from its parts. `norm_b` must be an upper bound on the
    /// operator norm of the bilinear form; it feeds the derivative-growth
    /// constants, so a loose bound only loosens the certified error bounds.
    pub fn new(
        a: LinearOp,
        b_terms: Vec<BilinearTerm>,
        forcing: Vec<f64>,
        radius: f64,
        norm_b: f64,
    ) -> Result<Self> {
        let dim = forcing.len();
        if dim == 0 {
            return Err(Error::InvalidDimension("dimension must be positive".into()));
        }
        if a.dim() != dim {
            return Err(Error::InvalidDimension(format!(
                "A has dimension {} but f has dimension {}",
                a.dim(),
                dim
            )));
        }
        if radius <= 0.0 {
            return Err(Error::Configuration("trapping radius must be positive".into()));
        }
        for term in &b_terms {
            if term.left >= dim || term.right >= dim || term.out >= dim {
                return Err(Error::InvalidDimension(format!(
                    "bilinear entry ({}, {}, {}) out of range for d = {}",
                    term.left, term.right, term.out, dim
                )));
            }
        }
        let norm_f = norm(&forcing);
        let constants = SystemConstants::from_norms(a.operator_norm(), norm_b, norm_f, radius)?;
        Ok(BilinearSystem {
            dim,
            a,
            b_terms,
            forcing,
            radius,
            norm_b,
            constants,
        })
    }

    /// The Lorenz 96' system du_i/dt = -u_{i-1}u_{i-2} + u_{i-1}u_{i+1} - u_i + f
    /// (indices mod d), written in bilinear form with A = I and a symmetrized
    /// sparse B. The trapping radius is R = |f 1| = f sqrt(d).
    pub fn lorenz96(dim: usize, forcing: f64) -> Result<Self> {
        if dim < 4 {
            return Err(Error::InvalidDimension(format!(
                "Lorenz 96 needs d >= 4, got {dim}"
            )));
        }
        let mut terms = Vec::with_capacity(4 * dim);
        for i in 0..dim {
            let im1 = (i + dim - 1) % dim;
            let im2 = (i + dim - 2) % dim;
            let ip1 = (i + 1) % dim;
            // B(u,u)_i = u_{i-1} u_{i-2} - u_{i-1} u_{i+1}, split symmetrically
            // so that B(u,v) = B(v,u).
            terms.push(BilinearTerm { left: im1, right: im2, out: i, coeff: 0.5 });
            terms.push(BilinearTerm { left: im2, right: im1, out: i, coeff: 0.5 });
            terms.push(BilinearTerm { left: im1, right: ip1, out: i, coeff: -0.5 });
            terms.push(BilinearTerm { left: ip1, right: im1, out: i, coeff: -0.5 });
        }
        let f_vec = vec![forcing; dim];
        let radius = forcing.abs() * (dim as f64).sqrt();
        // |B| = 2 for even d (sharp); an upper bound otherwise.
        BilinearSystem::new(LinearOp::identity(dim), terms, f_vec, radius, 2.0)
    }

    /// A 2-dimensional energy-conserving bilinear system,
    /// du1/dt = -u1 - u1 u2 + f1, du2/dt = -u2 + u1^2 + f2,
    /// used as a desk-scale stand-in where the full Lorenz 96' model is
    /// too large for an exact posterior oracle.
    pub fn toy_bilinear2(f1: f64, f2: f64) -> Result<Self> {
        // B(u,u) = (u1 u2, -u1^2): <B(u,u), u> = u1^2 u2 - u1^2 u2 = 0.
        let terms = vec![
            BilinearTerm { left: 0, right: 1, out: 0, coeff: 0.5 },
            BilinearTerm { left: 1, right: 0, out: 0, coeff: 0.5 },
            BilinearTerm { left: 0, right: 0, out: 1, coeff: -1.0 },
        ];
        let f_vec = vec![f1, f2];
        let radius = norm(&f_vec);
        // |B(u,v)|^2 <= 1/4 (|u1 v2| + |u2 v1|)^2 + (u1 v1)^2 <= 5/4 on unit vectors.
        BilinearSystem::new(LinearOp::identity(2), terms, f_vec, radius, 1.25f64.sqrt())
    }

    /// A trivial static system (A = 0, B = 0, f = 0) whose flow is the identity.
    pub fn static_system(dim: usize, radius: f64) -> Result<Self> {
        BilinearSystem::new(LinearOp::zero(dim), Vec::new(), vec![0.0; dim], radius, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn constants(&self) -> &SystemConstants {
        &self.constants
    }

    pub fn norm_b(&self) -> f64 {
        self.norm_b
    }

    pub fn forcing(&self) -> &[f64] {
        &self.forcing
    }

    pub fn linear_op(&self) -> &LinearOp {
        &self.a
    }

    pub fn bilinear_terms(&self) -> &[BilinearTerm] {
        &self.b_terms
    }

    pub fn check_in_ball(&self, v: &[f64]) -> Result<()> {
        let n = norm(v);
        if n > self.radius * (1.0 + BALL_SLACK) {
            Err(Error::OutOfBall { norm: n, radius: self.radius })
        } else {
            Ok(())
        }
    }

    /// Projection P_{B_R}: identity inside the ball, radial projection outside.
    pub fn project_to_ball(&self, v: &mut [f64]) {
        let n = norm(v);
        if n > self.radius {
            let s = self.radius / n;
            for x in v.iter_mut() {
                *x *= s;
            }
        }
    }

    /// B(u, v) accumulated into `out` (not cleared).
    fn accumulate_b(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        for t in &self.b_terms {
            out[t.out] += t.coeff * u[t.left] * v[t.right];
        }
    }

    /// out += factor * B(u, v); fused form used by the recursion hot loops.
    fn accumulate_b_scaled(&self, u: &[f64], v: &[f64], factor: f64, out: &mut [f64]) {
        for t in &self.b_terms {
            out[t.out] += factor * t.coeff * u[t.left] * v[t.right];
        }
    }

    /// out += factor * (adjoint w.r.t. the left argument of B(., q)) z.
    fn accumulate_b_adj_left_scaled(&self, z: &[f64], q: &[f64], factor: f64, out: &mut [f64]) {
        for t in &self.b_terms {
            out[t.left] += factor * t.coeff * z[t.out] * q[t.right];
        }
    }

    /// out += factor * (adjoint w.r.t. the right argument of B(q, .)) z.
    fn accumulate_b_adj_right_scaled(&self, z: &[f64], q: &[f64], factor: f64, out: &mut [f64]) {
        for t in &self.b_terms {
            out[t.right] += factor * t.coeff * z[t.out] * q[t.left];
        }
    }

    /// B(u, v) as a fresh vector.
    pub fn apply_b(&self, u: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.accumulate_b(u, v, &mut out);
        out
    }

    /// Right-hand side D v = -Av - B(v,v) + f.
    pub fn rhs(&self, v: &[f64]) -> Vec<f64> {
        let mut av = vec![0.0; self.dim];
        self.a.apply_into(v, &mut av);
        let mut out: Vec<f64> = self.forcing.clone();
        for i in 0..self.dim {
            out[i] -= av[i];
        }
        let mut bvv = vec![0.0; self.dim];
        self.accumulate_b(v, v, &mut bvv);
        for i in 0..self.dim {
            out[i] -= bvv[i];
        }
        out
    }

    /// Energy defect <B(v,v), v>; identically zero for energy-conserving forms.
    pub fn energy_defect(&self, v: &[f64]) -> f64 {
        let b = self.apply_b(v, v);
        b.iter().zip(v).map(|(x, y)| x * y).sum()
    }

    /// <Dv, v>: non-positive on the shell |v| in [R, R + delta] under the
    /// trapping-ball condition.
    pub fn dissipation_at(&self, v: &[f64]) -> f64 {
        let d = self.rhs(v);
        d.iter().zip(v).map(|(x, y)| x * y).sum()
    }

    /// State derivatives D^0 v, ..., D^{i_max} v by the binomial recursion
    /// D^i v = -A D^{i-1} v - sum_j C(i-1, j) B(D^j v, D^{i-1-j} v).
    pub fn derivative_series(&self, v: &[f64], i_max: usize) -> Result<Vec<Vec<f64>>> {
        self.check_in_ball(v)?;
        if i_max > MAX_TAYLOR_ORDER {
            return Err(Error::Configuration(format!(
                "derivative order {i_max} exceeds the exact-binomial guard ({MAX_TAYLOR_ORDER})"
            )));
        }
        Ok(self.derivative_series_unchecked(v, i_max))
    }

    pub(crate) fn derivative_series_unchecked(&self, v: &[f64], i_max: usize) -> Vec<Vec<f64>> {
        let mut series = Vec::with_capacity(i_max + 1);
        series.push(v.to_vec());
        if i_max == 0 {
            return series;
        }
        series.push(self.rhs(v));
        let mut av = vec![0.0; self.dim];
        for i in 2..=i_max {
            let binom = binomial_row(i - 1);
            self.a.apply_into(&series[i - 1], &mut av);
            let mut next = vec![0.0; self.dim];
            for x in 0..self.dim {
                next[x] = -av[x];
            }
            for j in 0..i {
                self.accumulate_b_scaled(&series[j], &series[i - 1 - j], -binom[j], &mut next);
            }
            series.push(next);
        }
        series
    }

    /// Directional derivatives T^i = d/de D^i(v + e w) |_{e=0}, given the base
    /// series `q` = derivative_series(v, i_max).
    pub(crate) fn tangent_series(&self, q: &[Vec<f64>], w: &[f64], i_max: usize) -> Vec<Vec<f64>> {
        let mut tan = Vec::with_capacity(i_max + 1);
        tan.push(w.to_vec());
        let mut aw = vec![0.0; self.dim];
        for i in 1..=i_max {
            let binom = binomial_row(i - 1);
            self.a.apply_into(&tan[i - 1], &mut aw);
            let mut next = vec![0.0; self.dim];
            for x in 0..self.dim {
                next[x] = -aw[x];
            }
            for j in 0..i {
                self.accumulate_b_scaled(&tan[j], &q[i - 1 - j], -binom[j], &mut next);
                self.accumulate_b_scaled(&q[j], &tan[i - 1 - j], -binom[j], &mut next);
            }
            tan.push(next);
        }
        tan
    }

    /// Evaluate sum_{i <= i_max} t^i / i! * series[i].
    pub(crate) fn taylor_eval(series: &[Vec<f64>], t: f64) -> Vec<f64> {
        let mut out = series[0].clone();
        let mut coeff = 1.0;
        for (i, term) in series.iter().enumerate().skip(1) {
            coeff *= t / (i as f64);
            axpy(coeff, term, &mut out);
        }
        out
    }

    /// Tangent of one Taylor step: J(step) w, given base derivatives `q`.
    pub(crate) fn taylor_tangent_step(
        &self,
        q: &[Vec<f64>],
        w: &[f64],
        t: f64,
        i_max: usize,
    ) -> Vec<f64> {
        let tan = self.tangent_series(q, w, i_max);
        Self::taylor_eval(&tan, t)
    }

    /// Transpose of the tangent step: (J step)' z, by reverse accumulation
    /// through the tangent recursion.
    pub(crate) fn taylor_adjoint_step(
        &self,
        q: &[Vec<f64>],
        z: &[f64],
        t: f64,
        i_max: usize,
    ) -> Vec<f64> {
        // Seed the cotangents of T^i with the Taylor weights t^i / i!.
        let mut seeds: Vec<Vec<f64>> = Vec::with_capacity(i_max + 1);
        let mut coeff = 1.0;
        for i in 0..=i_max {
            if i > 0 {
                coeff *= t / (i as f64);
            }
            seeds.push(z.iter().map(|x| coeff * x).collect());
        }
        self.series_adjoint(q, seeds)
    }

    /// Reverse accumulation through the derivative recursion: given cotangent
    /// seeds for each order D^i, returns sum_i (J_v D^i v)' seed_i.
    pub(crate) fn series_adjoint(&self, q: &[Vec<f64>], seeds: Vec<Vec<f64>>) -> Vec<f64> {
        let mut bar = seeds;
        let i_max = bar.len() - 1;
        let mut atz = vec![0.0; self.dim];
        for i in (1..=i_max).rev() {
            let binom = binomial_row(i - 1);
            self.a.apply_transpose_into(&bar[i], &mut atz);
            // split borrow: bar[i] is read, lower entries are written
            let (lower, upper) = bar.split_at_mut(i);
            let bi = &upper[0];
            axpy(-1.0, &atz, &mut lower[i - 1]);
            for j in 0..i {
                self.accumulate_b_adj_left_scaled(bi, &q[i - 1 - j], -binom[j], &mut lower[j]);
                self.accumulate_b_adj_right_scaled(bi, &q[j], -binom[j], &mut lower[i - 1 - j]);
            }
        }
        bar.swap_remove(0)
    }

    /// One truncated Taylor step: sum_{i <= i_max} t^i/i! D^i v, valid for
    /// t < 1/C_der with remainder at most C0 (C_der t)^{i_max + 1}.
    pub fn taylor_step(&self, v: &[f64], t: f64, i_max: usize) -> Result<Vec<f64>> {
        let limit = self.constants.step_limit();
        if t >= limit {
            return Err(Error::StepTooLarge { t, limit });
        }
        if t < 0.0 {
            return Err(Error::Configuration("taylor_step needs t >= 0".into()));
        }
        let series = self.derivative_series(v, i_max)?;
        Ok(Self::taylor_eval(&series, t))
    }

    fn check_integrator(&self, integ: Integrator) -> Result<()> {
        let limit = self.constants.step_limit();
        if integ.step <= 0.0 || integ.step >= limit {
            return Err(Error::StepTooLarge { t: integ.step, limit });
        }
        if integ.i_max > MAX_TAYLOR_ORDER {
            return Err(Error::Configuration(format!(
                "Taylor order {} exceeds the exact-binomial guard ({MAX_TAYLOR_ORDER})",
                integ.i_max
            )));
        }
        Ok(())
    }

    /// Flow Psi_t(v): composition of Taylor steps of size `integ.step`, each
    /// followed by the projection onto the trapping ball, plus a final partial
    /// step of size t mod step.
    pub fn flow(&self, v: &[f64], t: f64, integ: Integrator) -> Result<Vec<f64>> {
        self.check_in_ball(v)?;
        self.check_integrator(integ)?;
        if t < 0.0 {
            return Err(Error::Configuration("flow needs t >= 0; use flow_backward".into()));
        }
        let n_full = (t / integ.step).floor() as usize;
        let partial = t - (n_full as f64) * integ.step;
        let mut state = v.to_vec();
        for _ in 0..n_full {
            let series = self.derivative_series_unchecked(&state, integ.i_max);
            state = Self::taylor_eval(&series, integ.step);
            self.project_to_ball(&mut state);
        }
        if partial > 0.0 {
            let series = self.derivative_series_unchecked(&state, integ.i_max);
            state = Self::taylor_eval(&series, partial);
            self.project_to_ball(&mut state);
        }
        Ok(state)
    }

    /// Backward flow Psi_{-t}(v) by the alternating Taylor series, valid for
    /// t < 0.9/C_der (safety margin inside the radius of convergence).
    pub fn flow_backward(&self, v: &[f64], t: f64, i_max: usize) -> Result<Vec<f64>> {
        self.check_in_ball(v)?;
        let limit = 0.9 * self.constants.step_limit();
        if t >= limit {
            return Err(Error::NotInvertibleThisFar { t, limit });
        }
        if t < 0.0 {
            return Err(Error::Configuration("flow_backward needs t >= 0".into()));
        }
        let series = self.derivative_series(v, i_max)?;
        Ok(Self::taylor_eval(&series, -t))
    }

    /// Tangent flow J Psi_t(v) w, co-integrating the linearized equation with
    /// the same Taylor stepping as `flow`.
    pub fn tangent_flow(&self, v: &[f64], w: &[f64], t: f64, integ: Integrator) -> Result<Vec<f64>> {
        self.check_in_ball(v)?;
        self.check_integrator(integ)?;
        let n_full = (t / integ.step).floor() as usize;
        let partial = t - (n_full as f64) * integ.step;
        let mut state = v.to_vec();
        let mut tangent = w.to_vec();
        let push = |state: &mut Vec<f64>, tangent: &mut Vec<f64>, dt: f64| {
            let series = self.derivative_series_unchecked(state, integ.i_max);
            *tangent = self.taylor_tangent_step(&series, tangent, dt, integ.i_max);
            *state = Self::taylor_eval(&series, dt);
            self.project_to_ball(state);
        };
        for _ in 0..n_full {
            push(&mut state, &mut tangent, integ.step);
        }
        if partial > 0.0 {
            push(&mut state, &mut tangent, partial);
        }
        Ok(tangent)
    }

    /// Advance a (state, tangent) pair by time t: the state is integrated in
    /// place and the propagated tangent returned. Used when a Jacobian is
    /// assembled column-by-column across several observation times.
    pub fn tangent_flow_step_pair(
        &self,
        state: &mut Vec<f64>,
        w: &[f64],
        t: f64,
        integ: Integrator,
    ) -> Result<Vec<f64>> {
        self.check_integrator(integ)?;
        let n_full = (t / integ.step).floor() as usize;
        let partial = t - (n_full as f64) * integ.step;
        let mut tan = w.to_vec();
        let advance = |state: &mut Vec<f64>, tan: &mut Vec<f64>, dt: f64| {
            let series = self.derivative_series_unchecked(state, integ.i_max);
            *tan = self.taylor_tangent_step(&series, tan, dt, integ.i_max);
            *state = Self::taylor_eval(&series, dt);
            self.project_to_ball(state);
        };
        for _ in 0..n_full {
            advance(state, &mut tan, integ.step);
        }
        if partial > 0.0 {
            advance(state, &mut tan, partial);
        }
        Ok(tan)
    }

    /// Adjoint flow (J Psi_t(v))' z by reverse accumulation through the stored
    /// per-step states.
    pub fn adjoint_flow(&self, v: &[f64], z: &[f64], t: f64, integ: Integrator) -> Result<Vec<f64>> {
        self.check_in_ball(v)?;
        self.check_integrator(integ)?;
        let n_full = (t / integ.step).floor() as usize;
        let partial = t - (n_full as f64) * integ.step;
        // Forward pass: checkpoint the state at the start of every step.
        let mut checkpoints: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n_full + 1);
        let mut state = v.to_vec();
        for _ in 0..n_full {
            checkpoints.push((state.clone(), integ.step));
            let series = self.derivative_series_unchecked(&state, integ.i_max);
            state = Self::taylor_eval(&series, integ.step);
            self.project_to_ball(&mut state);
        }
        if partial > 0.0 {
            checkpoints.push((state.clone(), partial));
        }
        // Reverse pass.
        let mut cot = z.to_vec();
        for (base, dt) in checkpoints.iter().rev() {
            let series = self.derivative_series_unchecked(base, integ.i_max);
            cot = self.taylor_adjoint_step(&series, &cot, *dt, integ.i_max);
        }
        Ok(cot)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dist;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_in_ball(sys: &BilinearSystem, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let d = sys.dim();
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = norm(&v);
            if n > 1e-3 {
                let target = rng.gen_range(0.0..sys.radius());
                return v.iter().map(|x| x * target / n).collect();
            }
        }
    }

    #[test]
    fn lorenz96_radius_matches_f_sqrt_d() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        assert_relative_eq!(sys.radius(), 8.0 * 12f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(sys.radius(), 27.712812921102035, max_relative = 1e-12);
        assert_relative_eq!(sys.constants().c0, 16.0 * 12f64.sqrt(), max_relative = 1e-14);
        assert!(sys.constants().c_der <= 1.0 + 32.0 * 12f64.sqrt() + 1e-12);
    }

    #[test]
    fn lorenz96_rejects_small_dimension() {
        assert!(matches!(
            BilinearSystem::lorenz96(3, 8.0),
            Err(Error::InvalidDimension(_))
        ));
    }

    #[test]
    fn lorenz96_rhs_at_zero_is_forcing() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let d = sys.rhs(&vec![0.0; 12]);
        for x in d {
            assert_relative_eq!(x, 8.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn lorenz96_constant_state_is_fixed_point() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let d = sys.rhs(&vec![8.0; 12]);
        for x in d {
            assert!(x.abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_series_at_zero_matches_hand_computation() {
        // D^1 = (8,...,8) and D^2 = -(8,...,8): B vanishes when one argument is 0.
        let sys = BilinearSystem::lorenz96(5, 8.0).unwrap();
        let series = sys.derivative_series(&vec![0.0; 5], 2).unwrap();
        for i in 0..5 {
            assert_relative_eq!(series[1][i], 8.0, max_relative = 1e-15);
            assert_relative_eq!(series[2][i], -8.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn derivative_series_order_zero_returns_state() {
        let sys = BilinearSystem::lorenz96(5, 8.0).unwrap();
        let v = vec![1.0, 2.0, 3.0, -1.0, 0.5];
        let series = sys.derivative_series(&v, 0).unwrap();
        assert_eq!(series.len(), 1);
        assert_eq!(series[0], v);
    }

    #[test]
    fn derivative_series_respects_lemma_bound() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let c = *sys.constants();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let v = random_in_ball(&sys, &mut rng);
            let series = sys.derivative_series(&v, 8).unwrap();
            let mut factorial = 1.0;
            for (i, d) in series.iter().enumerate() {
                if i > 0 {
                    factorial *= i as f64;
                }
                let bound = c.c0 * c.c_der.powi(i as i32) * factorial;
                assert!(
                    norm(d) <= bound * (1.0 + 1e-12),
                    "order {i}: |D^i v| = {} > bound {}",
                    norm(d),
                    bound
                );
            }
        }
    }

    #[test]
    fn derivative_series_rejects_points_outside_ball() {
        let sys = BilinearSystem::lorenz96(5, 8.0).unwrap();
        let v = vec![sys.radius(); 5];
        assert!(matches!(
            sys.derivative_series(&v, 3),
            Err(Error::OutOfBall { .. })
        ));
    }

    #[test]
    fn derivative_series_rejects_order_above_guard() {
        let sys = BilinearSystem::lorenz96(5, 8.0).unwrap();
        assert!(sys.derivative_series(&vec![0.0; 5], 31).is_err());
    }

    #[test]
    fn taylor_step_at_zero_time_is_identity() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_in_ball(&sys, &mut rng);
        let out = sys.taylor_step(&v, 0.0, 12).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn taylor_step_fixed_point_stays() {
        let sys = BilinearSystem::lorenz96(5, 8.0).unwrap();
        let v = vec![8.0; 5];
        let out = sys.taylor_step(&v, 1e-3, 12).unwrap();
        for i in 0..5 {
            assert_relative_eq!(out[i], 8.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn taylor_step_two_orders_agree() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let v = random_in_ball(&sys, &mut rng);
            let a = sys.taylor_step(&v, 1e-3, 12).unwrap();
            let b = sys.taylor_step(&v, 1e-3, 20).unwrap();
            assert!(dist(&a, &b) < 1e-12, "order-12 vs order-20 gap {}", dist(&a, &b));
        }
    }

    #[test]
    fn taylor_step_rejects_large_t() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let t = 1.1 / sys.constants().c_der;
        assert!(matches!(
            sys.taylor_step(&vec![0.0; 12], t, 12),
            Err(Error::StepTooLarge { .. })
        ));
    }

    #[test]
    fn taylor_remainder_within_lemma_bound() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let c = *sys.constants();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let v = random_in_ball(&sys, &mut rng);
            let t = rng.gen_range(0.0..0.5 / c.c_der);
            for i_max in [4usize, 8, 12] {
                let low = sys.taylor_step(&v, t, i_max).unwrap();
                let high = sys.taylor_step(&v, t, i_max + 8).unwrap();
                let bound = c.c0 * (c.c_der * t).powi(i_max as i32 + 1);
                assert!(
                    dist(&low, &high) <= bound * (1.0 + 1e-9) + 1e-14,
                    "remainder {} above bound {}",
                    dist(&low, &high),
                    bound
                );
            }
        }
    }

    #[test]
    fn flow_zero_time_is_identity() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let integ = Integrator::default_for(&sys, 1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_in_ball(&sys, &mut rng);
        let out = sys.flow(&v, 0.0, integ).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn flow_richardson_self_consistency() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = random_in_ball(&sys, &mut rng);
        let coarse = sys
            .flow(&v, 0.1, Integrator { step: 1e-3, i_max: 10 })
            .unwrap();
        let fine = sys
            .flow(&v, 0.1, Integrator { step: 5e-4, i_max: 14 })
            .unwrap();
        assert!(dist(&coarse, &fine) < 1e-9, "gap {}", dist(&coarse, &fine));
    }

    #[test]
    fn flow_semigroup_property() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let integ = Integrator { step: 1e-3, i_max: 12 };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let v = random_in_ball(&sys, &mut rng);
        let direct = sys.flow(&v, 0.1, integ).unwrap();
        let half = sys.flow(&v, 0.05, integ).unwrap();
        let composed = sys.flow(&half, 0.05, integ).unwrap();
        assert!(dist(&direct, &composed) < 1e-8);
    }

    #[test]
    fn flow_absorbs_boundary_starts() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let integ = Integrator::default_for(&sys, 1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let dir: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = norm(&dir);
            let mut v: Vec<f64> = dir.iter().map(|x| 1.5 * sys.radius() * x / n).collect();
            sys.project_to_ball(&mut v);
            // sample t in (0, 5] by repeated quarter-unit hops
            for _ in 0..20 {
                v = sys.flow(&v, 0.25, integ).unwrap();
                assert!(norm(&v) <= sys.radius() + 1e-9);
            }
        }
    }

    #[test]
    fn flow_backward_zero_time_and_fixed_point() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let v = vec![8.0; 12];
        assert_eq!(sys.flow_backward(&v, 0.0, 20).unwrap(), v);
        let back = sys.flow_backward(&v, 1e-3, 20).unwrap();
        for x in &back {
            assert_relative_eq!(*x, 8.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn flow_backward_inverts_flow() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let integ = Integrator { step: 5e-4, i_max: 14 };
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let c = *sys.constants();
        let t = 1e-3;
        for _ in 0..10 {
            let v = random_in_ball(&sys, &mut rng);
            let back = sys.flow_backward(&v, t, 20).unwrap();
            let fwd = sys.flow(&back, t, integ).unwrap();
            // truncation bound of the alternating series, plus a roundoff floor
            let trunc = c.c0 * (c.c_der * t).powi(21) / (1.0 - c.c_der * t);
            let tol = 2.0 * trunc + 1e-10 * (1.0 + norm(&v));
            assert!(dist(&fwd, &v) <= tol, "roundtrip gap {} > {}", dist(&fwd, &v), tol);
        }
    }

    #[test]
    fn flow_backward_rejects_horizon() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let t = 0.95 / sys.constants().c_der;
        assert!(matches!(
            sys.flow_backward(&vec![0.0; 12], t, 20),
            Err(Error::NotInvertibleThisFar { .. })
        ));
    }

    #[test]
    fn tangent_flow_zero_time_is_identity() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let integ = Integrator::default_for(&sys, 1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let v = random_in_ball(&sys, &mut rng);
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = sys.tangent_flow(&v, &w, 0.0, integ).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn tangent_flow_matches_central_differences() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let integ = Integrator { step: 1e-3, i_max: 12 };
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let t = 0.05;
        let eps = 1e-6;
        for _ in 0..5 {
            let v: Vec<f64> = random_in_ball(&sys, &mut rng)
                .iter()
                .map(|x| 0.5 * x)
                .collect();
            let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let tangent = sys.tangent_flow(&v, &w, t, integ).unwrap();
            let vp: Vec<f64> = v.iter().zip(&w).map(|(x, y)| x + eps * y).collect();
            let vm: Vec<f64> = v.iter().zip(&w).map(|(x, y)| x - eps * y).collect();
            let fp = sys.flow(&vp, t, integ).unwrap();
            let fm = sys.flow(&vm, t, integ).unwrap();
            let fd: Vec<f64> = fp
                .iter()
                .zip(&fm)
                .map(|(a, b)| (a - b) / (2.0 * eps))
                .collect();
            let g = sys.constants().gronwall;
            let wnorm = norm(&w);
            let tol = 10.0 * eps * (2.0 * g * t).exp() * wnorm * wnorm;
            assert!(dist(&tangent, &fd) <= tol, "fd gap {} > {}", dist(&tangent, &fd), tol);
        }
    }

    #[test]
    fn tangent_flow_gronwall_sandwich() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let integ = Integrator { step: 1e-3, i_max: 12 };
        let g = sys.constants().gronwall;
        let t = 0.02;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let v = random_in_ball(&sys, &mut rng);
            let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let jw = sys.tangent_flow(&v, &w, t, integ).unwrap();
            let lo = (-g * t).exp() * norm(&w);
            let hi = (g * t).exp() * norm(&w);
            let n = norm(&jw);
            assert!(n >= lo * (1.0 - 1e-9) && n <= hi * (1.0 + 1e-9));
        }
    }

    #[test]
    fn flow_difference_lipschitz_sandwich() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let integ = Integrator { step: 1e-3, i_max: 12 };
        let g = sys.constants().gronwall;
        let t = 0.02;
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..20 {
            let v = random_in_ball(&sys, &mut rng);
            let w = random_in_ball(&sys, &mut rng);
            let fv = sys.flow(&v, t, integ).unwrap();
            let fw = sys.flow(&w, t, integ).unwrap();
            let d0 = dist(&v, &w);
            let dt = dist(&fv, &fw);
            assert!(dt >= (-g * t).exp() * d0 * (1.0 - 1e-9));
            assert!(dt <= (g * t).exp() * d0 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn adjoint_flow_transpose_identity() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let integ = Integrator { step: 1e-3, i_max: 12 };
        let t = 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..10 {
            let v = random_in_ball(&sys, &mut rng);
            let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let z: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let jw = sys.tangent_flow(&v, &w, t, integ).unwrap();
            let jtz = sys.adjoint_flow(&v, &z, t, integ).unwrap();
            let lhs = crate::linalg::dot(&jw, &z);
            let rhs = crate::linalg::dot(&w, &jtz);
            assert_relative_eq!(lhs, rhs, max_relative = 1e-10);
        }
    }

    #[test]
    fn adjoint_flow_trivial_cases() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let integ = Integrator { step: 1e-3, i_max: 12 };
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let v = random_in_ball(&sys, &mut rng);
        let z: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(sys.adjoint_flow(&v, &z, 0.0, integ).unwrap(), z);
        let zero = vec![0.0; 12];
        let out = sys.adjoint_flow(&v, &zero, 0.05, integ).unwrap();
        assert!(norm(&out) == 0.0);
    }

    #[test]
    fn energy_conserving_nonlinearity() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..100 {
            let v = random_in_ball(&sys, &mut rng);
            let n = norm(&v);
            assert!(sys.energy_defect(&v).abs() <= 1e-12 * n * n * n + 1e-300);
        }
    }

    #[test]
    fn trapping_shell_dissipates() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let delta = 0.5;
        for _ in 0..100 {
            let dir: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = norm(&dir);
            let r = rng.gen_range(sys.radius()..sys.radius() + delta);
            let v: Vec<f64> = dir.iter().map(|x| r * x / n).collect();
            assert!(sys.dissipation_at(&v) <= 1e-9);
        }
    }

    #[test]
    fn toy_system_is_energy_conserving() {
        let sys = BilinearSystem::toy_bilinear2(1.5, 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        for _ in 0..50 {
            let v = random_in_ball(&sys, &mut rng);
            let n = norm(&v);
            assert!(sys.energy_defect(&v).abs() <= 1e-13 * (1.0 + n * n * n));
        }
    }

    #[test]
    fn static_system_flow_is_identity() {
        let sys = BilinearSystem::static_system(3, 5.0).unwrap();
        let integ = Integrator { step: 0.1, i_max: 4 };
        let v = vec![1.0, -2.0, 0.5];
        let out = sys.flow(&v, 1.0, integ).unwrap();
        assert_eq!(out, v);
    }
}
