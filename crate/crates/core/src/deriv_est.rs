//! Polynomial least-squares estimation of the observed state derivatives
//! H D^l u from a noisy observation window, with the data-driven window and
//! degree selection driving it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Conditioning guard on the fitted polynomial degree.
pub const MAX_DEGREE: usize = 12;

/// Scalar inputs of the error-budget function g.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorContext {
    pub h: f64,
    pub sigma_z: f64,
    pub dim_obs: usize,
    /// C0 constant of the system.
    pub c0: f64,
    /// C_der constant of the system.
    pub c_der: f64,
    /// Operator norm of H.
    pub norm_h: f64,
}

/// Window coefficients c applied to Y_0..Y_{k_hat}: the estimator of the l-th
/// derivative at time 0 of any polynomial trajectory of degree <= j_max.
#[derive(Debug, Clone)]
pub struct DerivCoefficients {
    pub l: usize,
    pub j_max: usize,
    pub k_hat: usize,
    pub c: Vec<f64>,
    /// C_M = sqrt(k_hat [ (M M')^{-1} ]_{l+1,l+1}).
    pub c_m: f64,
}

impl DerivCoefficients {
    /// Exactness: sum_i c_i (i h)^m must equal m! [m = l] for all m <= j_max.
    pub fn validate_exactness(&self, h: f64, tol: f64) -> Result<()> {
        for m in 0..=self.j_max {
            let mut acc = 0.0;
            for (i, ci) in self.c.iter().enumerate() {
                acc += ci * (i as f64 * h).powi(m as i32);
            }
            let expect = if m == self.l { factorial(self.l) } else { 0.0 };
            let scale = factorial(self.l).max(1.0) / (self.k_hat as f64 * h).powi(self.l as i32);
            if (acc - expect).abs() > tol * scale.max(1.0) {
                return Err(Error::Numerical(format!(
                    "coefficient table fails exactness at m = {m}: got {acc:.6e}, want {expect:.6e}"
                )));
            }
        }
        Ok(())
    }

    pub fn apply(&self, window: &[Vec<f64>]) -> Vec<f64> {
        let d_o = window[0].len();
        let mut out = vec![0.0; d_o];
        for (ci, row) in self.c.iter().zip(window) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += ci * v;
            }
        }
        out
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

/// Gram matrix M M' of the scaled Vandermonde rows v^(j) = {(i/k_hat)^j}.
fn gram(j_max: usize, k_hat: usize) -> DMatrix<f64> {
    let mut powers = vec![1.0; k_hat + 1];
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(2 * j_max + 1);
    // moments s_p = sum_i (i/k_hat)^p for p = 0..2 j_max
    let mut moments = vec![0.0; 2 * j_max + 1];
    for p in 0..=2 * j_max {
        if p > 0 {
            for (i, v) in powers.iter_mut().enumerate() {
                *v *= i as f64 / k_hat as f64;
            }
        }
        moments[p] = powers.iter().sum();
        rows.push(powers.clone());
    }
    DMatrix::from_fn(j_max + 1, j_max + 1, |a, b| moments[a + b])
}

/// Solve (M M') x = e_l by a symmetric (Cholesky) factorization.
fn gram_solve(j_max: usize, k_hat: usize, l: usize) -> Result<DVector<f64>> {
    let g = gram(j_max, k_hat);
    let chol = g
        .cholesky()
        .ok_or_else(|| Error::Numerical("normal-equation Gram matrix is not positive definite".into()))?;
    let mut e = DVector::zeros(j_max + 1);
    e[l] = 1.0;
    Ok(chol.solve(&e))
}

/// Coefficients c = (l! / (k_hat h)^l) M' (M M')^{-1} e_l.
pub fn coefficients(l: usize, j_max: usize, k_hat: usize, h: f64) -> Result<DerivCoefficients> {
    if j_max < l {
        return Err(Error::Configuration(format!(
            "polynomial degree j_max = {j_max} must be at least the derivative order l = {l}"
        )));
    }
    if j_max > MAX_DEGREE {
        return Err(Error::Numerical(format!(
            "degree {j_max} refused: normal equations are too ill-conditioned above {MAX_DEGREE}"
        )));
    }
    if k_hat < j_max {
        return Err(Error::Configuration(format!(
            "window k_hat = {k_hat} shorter than degree {j_max}"
        )));
    }
    let sol = gram_solve(j_max, k_hat, l)?;
    let scale = factorial(l) / (k_hat as f64 * h).powi(l as i32);
    let mut c = vec![0.0; k_hat + 1];
    let mut power = vec![1.0; k_hat + 1];
    for j in 0..=j_max {
        if j > 0 {
            for (i, v) in power.iter_mut().enumerate() {
                *v *= i as f64 / k_hat as f64;
            }
        }
        for i in 0..=k_hat {
            c[i] += power[i] * sol[j];
        }
    }
    for v in c.iter_mut() {
        *v *= scale;
    }
    let c_m = (k_hat as f64 * sol[l]).sqrt();
    Ok(DerivCoefficients { l, j_max, k_hat, c, c_m })
}

/// The error budget g(l, j_max, k_hat): deterministic bias term plus the
/// noise term, evaluated exactly as written.
pub fn error_budget(l: usize, j_max: usize, k_hat: usize, ctx: &EstimatorContext) -> f64 {
    let kh = k_hat as f64 * ctx.h;
    let bias = ctx.c0 * ctx.norm_h * ctx.c_der.powi(j_max as i32 + 1)
        / (j_max as f64 + 1.5).sqrt()
        * kh.powi((j_max + 1 - l) as i32);
    let d_o = ctx.dim_obs as f64;
    let noise = kh.powf(-(l as f64) - 0.5)
        * ctx.sigma_z
        * ctx.h.sqrt()
        * (2.0 * d_o * (d_o + 1.0).ln()).sqrt();
    bias + noise
}

/// Continuous minimizer of g in k_hat (the single interior stationary point),
/// zero when the noise term is absent.
pub fn window_min(l: usize, j_max: usize, ctx: &EstimatorContext) -> f64 {
    if ctx.sigma_z == 0.0 {
        return 0.0;
    }
    let d_o = ctx.dim_obs as f64;
    let num = ctx.sigma_z
        * ctx.h.sqrt()
        * (2.0 * d_o * (d_o + 1.0).ln() * (j_max as f64 + 1.5)).sqrt()
        * (l as f64 + 0.5);
    let den = (j_max + 1 - l) as f64 * ctx.c0 * ctx.norm_h * ctx.c_der.powi(j_max as i32 + 1);
    (num / den).powf(1.0 / (j_max as f64 + 1.5)) / ctx.h
}

/// Clamp-and-round rule for the window: below range takes the smallest legal
/// window 2 j_max + 3, above range takes k, and interior values take the
/// better of floor/ceil under g (ties to the smaller window).
pub fn select_window(l: usize, j_max: usize, k: usize, ctx: &EstimatorContext) -> Result<usize> {
    let lo = 2 * j_max + 3;
    if k < lo {
        return Err(Error::InsufficientData(format!(
            "window selection needs k >= 2 j_max + 3 = {lo}, got k = {k}"
        )));
    }
    let k_min = window_min(l, j_max, ctx);
    if k_min <= lo as f64 {
        return Ok(lo);
    }
    if k_min >= k as f64 {
        return Ok(k);
    }
    let fl = (k_min.floor() as usize).max(lo);
    let ce = (k_min.ceil() as usize).min(k);
    let g_fl = error_budget(l, j_max, fl, ctx);
    let g_ce = error_budget(l, j_max, ce, ctx);
    Ok(if g_fl <= g_ce { fl } else { ce })
}

/// Degree selection: argmin over j_max in [l, cap] of C_M * g at the optimal
/// window, smallest minimizer on ties. Returns (j_max, k_hat).
pub fn select_degree(l: usize, cap: usize, k: usize, ctx: &EstimatorContext) -> Result<(usize, usize)> {
    if cap < l || k < 3 || cap > (k - 3) / 2 {
        return Err(Error::Configuration(format!(
            "degree cap must satisfy l <= cap <= (k-3)/2; got l = {l}, cap = {cap}, k = {k}"
        )));
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for j_max in l..=cap {
        let k_hat = select_window(l, j_max, k, ctx)?;
        let coeff = coefficients(l, j_max, k_hat, ctx.h)?;
        let score = coeff.c_m * error_budget(l, j_max, k_hat, ctx);
        match best {
            Some((s, _, _)) if score >= s => {}
            _ => best = Some((score, j_max, k_hat)),
        }
    }
    let (_, j, kh) = best.expect("candidate range is non-empty");
    Ok((j, kh))
}

/// A finished derivative estimate.
#[derive(Debug, Clone)]
pub struct DerivEstimate {
    pub l: usize,
    pub value: Vec<f64>,
    pub k_hat_used: usize,
    pub j_max_used: usize,
}

/// Full pipeline for one derivative order: select degree and window, build the
/// coefficients, apply them to the head of the observation window.
pub fn estimate_derivative(
    window: &[Vec<f64>],
    l: usize,
    cap: usize,
    ctx: &EstimatorContext,
) -> Result<DerivEstimate> {
    if window.is_empty() {
        return Err(Error::InsufficientData("empty observation window".into()));
    }
    let k = window.len() - 1;
    let (j_max, k_hat) = select_degree(l, cap, k, ctx)?;
    let coeff = coefficients(l, j_max, k_hat, ctx.h)?;
    let value = coeff.apply(&window[..=k_hat]);
    Ok(DerivEstimate { l, value, k_hat_used: k_hat, j_max_used: j_max })
}

/// Large-window limit of the C_M constant: the (l+1, l+1) entry of the inverse
/// Hilbert matrix K_{i,j} = 1/(i+j-1) of size j_max+1, returned together with
/// its square root (the value C_M actually converges to).
pub fn hilbert_limit(l: usize, j_max: usize) -> Result<(f64, f64)> {
    if j_max < l {
        return Err(Error::Configuration("hilbert_limit needs j_max >= l".into()));
    }
    if j_max > MAX_DEGREE {
        return Err(Error::Numerical(format!(
            "Hilbert inversion refused above degree {MAX_DEGREE}"
        )));
    }
    // Closed-form inverse-Hilbert diagonal entry; avoids inverting the
    // notoriously ill-conditioned matrix numerically.
    let n = j_max + 1;
    let a = l + 1;
    let entry = (2 * a - 1) as f64
        * binom_f64(n + a - 1, n - a)
        * binom_f64(n + a - 1, n - a)
        * binom_f64(2 * a - 2, a - 1).powi(2);
    Ok((entry, entry.sqrt()))
}

fn binom_f64(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}
