//! Desk-scale brute-force Bayesian reference: exact grid posteriors at d <= 4,
//! total-variation and Wasserstein distances to the Gaussian approximations,
//! and Monte-Carlo MSE comparisons of the posterior mean and the MAP.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{BilinearSystem, Integrator};
use crate::error::{Error, Result};
use crate::gaussian_approx::GaussianApprox;
use crate::init_est::Scenario;
use crate::map_solver::{
    dense_hessian, log_posterior, smooth, SmoothOptions, SmoothingProblem,
};
use crate::observation::{generate, ObservationSetup};

/// Grid resolution and coverage (in posterior standard deviations).
#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    /// nodes per axis; must be odd for the Simpson weights
    pub points_per_dim: usize,
    pub half_width_stds: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { points_per_dim: 81, half_width_stds: 8.0 }
    }
}

/// Tabulated normalized posterior with quadrature weights.
#[derive(Debug, Clone)]
pub struct GridPosterior {
    pub axes: Vec<Vec<f64>>,
    /// per-axis Simpson weights (cell width folded in)
    pub axis_weights: Vec<Vec<f64>>,
    /// normalized density, row-major with the last axis fastest
    pub density: Vec<f64>,
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub argmax: Vec<f64>,
    /// mass observed on the outermost shell (diagnostic)
    pub boundary_mass: f64,
}

fn simpson_weights(n: usize, cell: f64) -> Vec<f64> {
    assert!(n >= 3 && n % 2 == 1, "Simpson rule needs an odd node count >= 3");
    let mut w = vec![0.0; n];
    w[0] = 1.0;
    w[n - 1] = 1.0;
    for (i, wi) in w.iter_mut().enumerate().skip(1).take(n - 2) {
        *wi = if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    for wi in w.iter_mut() {
        *wi *= cell / 3.0;
    }
    w
}

fn for_each_node<F: FnMut(usize, &[usize])>(dims: &[usize], mut f: F) {
    let d = dims.len();
    let total: usize = dims.iter().product();
    let mut idx = vec![0usize; d];
    for flat in 0..total {
        let mut rem = flat;
        for a in (0..d).rev() {
            idx[a] = rem % dims[a];
            rem /= dims[a];
        }
        f(flat, &idx);
    }
}

impl GridPosterior {
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    fn node_weight(&self, idx: &[usize]) -> f64 {
        idx.iter()
            .zip(&self.axis_weights)
            .map(|(&i, w)| w[i])
            .product()
    }

    fn node_point(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().zip(&self.axes).map(|(&i, ax)| ax[i]).collect()
    }
}

/// Tabulate, normalize and summarize the smoothing posterior on a product
/// grid centered at a converged MAP, extending `half_width_stds` Laplace
/// standard deviations in every direction.
pub fn grid_posterior(
    problem: &SmoothingProblem,
    map: &[f64],
    spec: GridSpec,
) -> Result<GridPosterior> {
    let d = problem.sys.dim();
    if d > 4 {
        return Err(Error::Configuration(format!(
            "grid posterior supports d <= 4, got {d}"
        )));
    }
    let n = spec.points_per_dim;
    if n < 3 || n % 2 == 0 {
        return Err(Error::Configuration("points_per_dim must be odd and >= 3".into()));
    }
    // Laplace covariance (grad^2 g)^{-1}; g already carries the 1/sigma^2 weight
    let hess = dense_hessian(problem, map)?;
    let cov = hess
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Laplace Hessian for grid sizing".into()))?
        .inverse();
    let mut axes = Vec::with_capacity(d);
    let mut axis_weights = Vec::with_capacity(d);
    for a in 0..d {
        let std = cov[(a, a)].max(0.0).sqrt().max(1e-300);
        let half = spec.half_width_stds * std;
        let cell = 2.0 * half / (n as f64 - 1.0);
        let ax: Vec<f64> = (0..n)
            .map(|i| map[a] - half + cell * i as f64)
            .collect();
        axes.push(ax);
        axis_weights.push(simpson_weights(n, cell));
    }
    let dims = vec![n; d];
    let total: usize = dims.iter().product();
    let mut log_density = vec![f64::NEG_INFINITY; total];
    let mut point = vec![0.0; d];
    {
        let mut idx_buf = vec![0usize; d];
        for flat in 0..total {
            let mut rem = flat;
            for a in (0..d).rev() {
                idx_buf[a] = rem % n;
                rem /= n;
            }
            for a in 0..d {
                point[a] = axes[a][idx_buf[a]];
            }
            log_density[flat] = log_posterior(problem, &point);
        }
    }
    let max_log = log_density.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max_log.is_finite() {
        return Err(Error::Numerical("posterior vanished on the whole grid".into()));
    }
    // normalize under the product Simpson rule
    let mut density: Vec<f64> = log_density.iter().map(|l| (l - max_log).exp()).collect();
    let mut mass = 0.0;
    let mut boundary_mass = 0.0;
    let mut argmax_flat = 0usize;
    let mut best = f64::NEG_INFINITY;
    for_each_node(&dims, |flat, idx| {
        let w: f64 = idx
            .iter()
            .zip(&axis_weights)
            .map(|(&i, wv)| wv[i])
            .product();
        let m = w * density[flat];
        mass += m;
        if idx.iter().any(|&i| i == 0 || i == n - 1) {
            boundary_mass += m;
        }
        if density[flat] > best {
            best = density[flat];
            argmax_flat = flat;
        }
    });
    if mass <= 0.0 {
        return Err(Error::Numerical("grid mass is zero".into()));
    }
    let boundary_frac = boundary_mass / mass;
    if boundary_frac > 1e-6 {
        return Err(Error::GridTooSmall { boundary_mass: boundary_frac });
    }
    for v in density.iter_mut() {
        *v /= mass;
    }
    // moments
    let mut mean = vec![0.0; d];
    for_each_node(&dims, |flat, idx| {
        let w: f64 = idx
            .iter()
            .zip(&axis_weights)
            .map(|(&i, wv)| wv[i])
            .product();
        for a in 0..d {
            mean[a] += w * density[flat] * axes[a][idx[a]];
        }
    });
    let mut covariance = DMatrix::<f64>::zeros(d, d);
    for_each_node(&dims, |flat, idx| {
        let w: f64 = idx
            .iter()
            .zip(&axis_weights)
            .map(|(&i, wv)| wv[i])
            .product();
        for a in 0..d {
            for b in 0..d {
                covariance[(a, b)] +=
                    w * density[flat] * (axes[a][idx[a]] - mean[a]) * (axes[b][idx[b]] - mean[b]);
            }
        }
    });
    let mut argmax_idx = vec![0usize; d];
    let mut rem = argmax_flat;
    for a in (0..d).rev() {
        argmax_idx[a] = rem % n;
        rem /= n;
    }
    let argmax: Vec<f64> = (0..d).map(|a| axes[a][argmax_idx[a]]).collect();
    Ok(GridPosterior {
        axes,
        axis_weights,
        density,
        mean,
        covariance,
        argmax,
        boundary_mass: boundary_frac,
    })
}

/// Total variation distance between a tabulated posterior and a Gaussian
/// approximation: half the quadrature of |p - q| over the grid, plus the
/// Gaussian mass falling outside the grid box.
pub fn tv_distance(p: &GridPosterior, q: &GaussianApprox) -> f64 {
    let dims: Vec<usize> = p.axes.iter().map(|a| a.len()).collect();
    let mut l1 = 0.0;
    let mut q_mass_inside = 0.0;
    for_each_node(&dims, |flat, idx| {
        let w = p.node_weight(idx);
        let point = p.node_point(idx);
        let qd = q.density(&point);
        l1 += w * (p.density[flat] - qd).abs();
        q_mass_inside += w * qd;
    });
    0.5 * (l1 + (1.0 - q_mass_inside).max(0.0))
}

/// Monte-Carlo upper bound on the 1-Wasserstein distance via the maximal
/// coupling: mass min(p, q) is transported for free, the residuals are coupled
/// independently. Reported as an upper bound, not the exact W1.
pub fn w1_distance_mc(
    p: &GridPosterior,
    q: &GaussianApprox,
    n_samples: usize,
    seed: u64,
) -> f64 {
    let dims: Vec<usize> = p.axes.iter().map(|a| a.len()).collect();
    let mut gamma = 0.0;
    let mut p_res: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut q_res: Vec<(f64, Vec<f64>)> = Vec::new();
    for_each_node(&dims, |flat, idx| {
        let w = p.node_weight(idx);
        let point = p.node_point(idx);
        let pd = p.density[flat];
        let qd = q.density(&point);
        let m = pd.min(qd);
        gamma += w * m;
        if pd > m {
            p_res.push((w * (pd - m), point.clone()));
        }
        if qd > m {
            q_res.push((w * (qd - m), point));
        }
    });
    let p_tot: f64 = p_res.iter().map(|(w, _)| *w).sum();
    let q_tot: f64 = q_res.iter().map(|(w, _)| *w).sum();
    if p_tot <= 0.0 || q_tot <= 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |res: &[(f64, Vec<f64>)], tot: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let target = rng.gen_range(0.0..tot);
        let mut acc = 0.0;
        for (w, pt) in res {
            acc += w;
            if acc >= target {
                return pt.clone();
            }
        }
        res.last().expect("non-empty residual").1.clone()
    };
    let mut acc = 0.0;
    for _ in 0..n_samples {
        let x1 = draw(&p_res, p_tot, &mut rng);
        let x2 = draw(&q_res, q_tot, &mut rng);
        let dist: f64 = x1
            .iter()
            .zip(&x2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        acc += dist;
    }
    (1.0 - gamma).max(0.0) * acc / n_samples as f64
}

/// Importance-sampled posterior mean with the Laplace Gaussian as proposal;
/// cross-check estimator for d = 3, 4 where full grids get heavy. Returns the
/// mean and the effective sample size.
pub fn importance_mean(
    problem: &SmoothingProblem,
    proposal: &GaussianApprox,
    n_samples: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let d = problem.sys.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(n_samples);
    let mut points = Vec::with_capacity(n_samples);
    let mut max_lw = f64::NEG_INFINITY;
    for _ in 0..n_samples {
        let x = proposal.sample(&mut rng);
        let lw = log_posterior(problem, &x) - proposal.log_density(&x);
        if lw > max_lw {
            max_lw = lw;
        }
        weights.push(lw);
        points.push(x);
    }
    if !max_lw.is_finite() {
        return Err(Error::Numerical("all importance weights vanished".into()));
    }
    let mut wsum = 0.0;
    let mut w2sum = 0.0;
    let mut mean = vec![0.0; d];
    for (lw, x) in weights.iter().zip(&points) {
        let w = (lw - max_lw).exp();
        wsum += w;
        w2sum += w * w;
        for a in 0..d {
            mean[a] += w * x[a];
        }
    }
    for m in mean.iter_mut() {
        *m /= wsum;
    }
    Ok((mean, wsum * wsum / w2sum))
}

/// Monte-Carlo comparison of the posterior-mean and MAP mean square errors
/// over an ensemble of observation draws at a fixed truth.
#[derive(Debug, Clone)]
pub struct MseReport {
    pub mse_mean: f64,
    pub mse_map: f64,
    /// MSE(MAP) / MSE(mean)
    pub ratio: f64,
    pub se_ratio: f64,
    /// paired standard error of mean(e_mean - e_map)
    pub se_diff: f64,
    pub n_trials: usize,
    pub failures: usize,
}

/// Run `n_trials` seeded trials: generate observations, solve for the MAP via
/// the standard pipeline, tabulate the grid posterior around it, and compare
/// squared errors against the fixed truth.
#[allow(clippy::too_many_arguments)]
pub fn mse_ratio(
    sys: &BilinearSystem,
    setup: &ObservationSetup,
    u0: &[f64],
    integ: Integrator,
    opts: &SmoothOptions,
    spec: GridSpec,
    n_trials: usize,
    base_seed: u64,
) -> Result<MseReport> {
    if n_trials < 2 {
        return Err(Error::Configuration("mse_ratio needs at least 2 trials".into()));
    }
    let mut e_mean = Vec::with_capacity(n_trials);
    let mut e_map = Vec::with_capacity(n_trials);
    let mut failures = 0usize;
    for t in 0..n_trials {
        let seed = base_seed + t as u64;
        let run = || -> Result<(f64, f64)> {
            let rec = generate(sys, setup, u0, seed, integ)?;
            let problem = SmoothingProblem::new(sys, setup.clone(), rec, integ)?;
            let report = smooth(&problem, opts)?;
            if !report.trace.converged {
                return Err(Error::OptimizationFailure("Newton did not converge".into()));
            }
            let grid = grid_posterior(&problem, &report.u_map, spec)?;
            let se = |x: &[f64]| -> f64 {
                x.iter().zip(u0).map(|(a, b)| (a - b) * (a - b)).sum()
            };
            Ok((se(&grid.mean), se(&report.u_map)))
        };
        match run() {
            Ok((em, ep)) => {
                e_mean.push(em);
                e_map.push(ep);
            }
            Err(_) => failures += 1,
        }
    }
    let n = e_mean.len();
    if n < 2 {
        return Err(Error::OptimizationFailure(format!(
            "only {n} of {n_trials} trials completed"
        )));
    }
    let nf = n as f64;
    let mse_mean = e_mean.iter().sum::<f64>() / nf;
    let mse_map = e_map.iter().sum::<f64>() / nf;
    let ratio = mse_map / mse_mean;
    // delta-method standard error of the ratio from the paired samples
    let var = |xs: &[f64], m: f64| xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (nf - 1.0);
    let cov_mm = e_map
        .iter()
        .zip(&e_mean)
        .map(|(a, b)| (a - mse_map) * (b - mse_mean))
        .sum::<f64>()
        / (nf - 1.0);
    let v_map = var(&e_map, mse_map);
    let v_mean = var(&e_mean, mse_mean);
    let se_ratio = (ratio * ratio
        * (v_map / (mse_map * mse_map) + v_mean / (mse_mean * mse_mean)
            - 2.0 * cov_mm / (mse_map * mse_mean))
        / nf)
        .max(0.0)
        .sqrt();
    let diffs: Vec<f64> = e_mean.iter().zip(&e_map).map(|(a, b)| a - b).collect();
    let d_mean = diffs.iter().sum::<f64>() / nf;
    let se_diff = (var(&diffs, d_mean) / nf).sqrt();
    Ok(MseReport { mse_mean, mse_map, ratio, se_ratio, se_diff, n_trials, failures })
}

/// The standard d=2 toy problem used by the oracle validations.
pub fn toy2_setup(sigma_z: f64, h: f64, k: usize) -> Result<(BilinearSystem, ObservationSetup, Vec<f64>)> {
    let sys = BilinearSystem::toy_bilinear2(1.5, 0.8)?;
    let setup = ObservationSetup::new(
        crate::observation::ObsOperator::identity(2),
        sigma_z,
        h,
        k,
    )?;
    let u0 = vec![0.55, -0.35];
    Ok((sys, setup, u0))
}

/// Smoothing options the toy pipeline uses: fully observed, depth-0 generic
/// initializer (the projected level-0 derivative estimate).
pub fn toy2_smooth_options(sys: &BilinearSystem) -> SmoothOptions {
    let mut opts = SmoothOptions::defaults(sys, Scenario::Generic);
    opts.generic_depth = 0;
    opts.jmax_caps = vec![1];
    opts.lsf_starts = 4;
    opts
}
