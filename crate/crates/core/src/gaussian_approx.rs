//! Gaussian approximations of the smoother and the filter: the matrix A_k and
//! vector B_k built from observed-flow Jacobians, the theory center
//! u^G = u - A_k^{-1} B_k, the Laplace variant centered at the MAP, and the
//! push-forward filter Gaussian.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::map_solver::{dense_hessian, SmoothingProblem};

/// Largest dimension at which the dense Gaussian objects are materialized.
pub const DENSE_CAP: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproxKind {
    /// center u^G, precision scale A_k (needs the truth; test-harness use)
    SmootherTheory,
    /// center at the MAP, precision scale sigma^2 grad^2 g^sm(MAP)
    SmootherLaplace,
    /// smoother Gaussian pushed through Psi_T
    FilterPushforward,
}

/// A Gaussian with density proportional to
/// exp(-(v - center)' P (v - center) / (2 sigma_z^2)).
#[derive(Debug, Clone)]
pub struct GaussianApprox {
    pub center: Vec<f64>,
    pub precision_scale: DMatrix<f64>,
    pub sigma_z: f64,
    pub kind: ApproxKind,
    /// set when A_k failed the positive-definiteness check and the
    /// standard-normal convention was substituted
    pub fallback_standard_normal: bool,
}

impl GaussianApprox {
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    fn sigma_eff(&self) -> f64 {
        if self.sigma_z > 0.0 {
            self.sigma_z
        } else {
            1.0
        }
    }

    /// Normalized density at a point.
    pub fn density(&self, v: &[f64]) -> f64 {
        self.log_density(v).exp()
    }

    pub fn log_density(&self, v: &[f64]) -> f64 {
        let d = self.dim();
        let s = self.sigma_eff();
        let diff = DVector::from_fn(d, |i, _| v[i] - self.center[i]);
        let quad = (&self.precision_scale * &diff).dot(&diff);
        let chol = self
            .precision_scale
            .clone()
            .cholesky()
            .expect("precision scale is positive definite");
        let log_det: f64 = (0..d).map(|i| chol.l()[(i, i)].ln()).sum::<f64>() * 2.0;
        -0.5 * quad / (s * s) + 0.5 * log_det
            - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
            - d as f64 * s.ln()
    }

    /// Draw one sample: center + sigma L^{-T} z with P = L L'.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let chol = self
            .precision_scale
            .clone()
            .cholesky()
            .expect("precision scale is positive definite");
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let lt = chol.l().transpose();
        let x = lt
            .solve_upper_triangular(&z)
            .expect("triangular factor is non-singular");
        (0..d)
            .map(|i| self.center[i] + self.sigma_eff() * x[i])
            .collect()
    }

    /// Covariance sigma^2 P^{-1}.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let chol = self
            .precision_scale
            .clone()
            .cholesky()
            .expect("precision scale is positive definite");
        let s = self.sigma_eff();
        chol.inverse() * (s * s) * DMatrix::identity(d, d)
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct View<'a> {
            center: &'a [f64],
            precision: Vec<Vec<f64>>,
            kind: ApproxKind,
            sigma_z: f64,
            fallback_standard_normal: bool,
        }
        let d = self.dim();
        let precision = (0..d)
            .map(|i| (0..d).map(|j| self.precision_scale[(i, j)]).collect())
            .collect();
        Ok(serde_json::to_string_pretty(&View {
            center: &self.center,
            precision,
            kind: self.kind,
            sigma_z: self.sigma_z,
            fallback_standard_normal: self.fallback_standard_normal,
        })?)
    }
}

fn check_dense_cap(dim: usize) -> Result<()> {
    if dim > DENSE_CAP {
        Err(Error::MatrixFreeUnsupported { dim, cap: DENSE_CAP })
    } else {
        Ok(())
    }
}

/// Observed-flow Jacobians at every observation time, columns via the tangent
/// flow.
fn observed_jacobians(problem: &SmoothingProblem, v: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    let d = problem.sys.dim();
    let d_o = problem.setup.dim_obs();
    let k = problem.setup.k;
    let mut mats = vec![DMatrix::zeros(d_o, d); k + 1];
    for a in 0..d {
        let mut e = vec![0.0; d];
        e[a] = 1.0;
        // one tangent sweep per basis vector, recording at every obs time
        let mut tan = e;
        let mut state = v.to_vec();
        let col0 = problem.setup.op.apply(&tan);
        for (r, x) in col0.iter().enumerate() {
            mats[0][(r, a)] = *x;
        }
        for i in 1..=k {
            tan = problem
                .sys
                .tangent_flow_step_pair(&mut state, &tan, problem.setup.h, problem.integ)?;
            let col = problem.setup.op.apply(&tan);
            for (r, x) in col.iter().enumerate() {
                mats[i][(r, a)] = *x;
            }
        }
    }
    Ok(mats)
}

/// A_k = sum_i (J Phi)' (J Phi) + J^2 Phi[.,., Z_i],
/// B_k = sum_i (J Phi)' Z_i, with residuals Z_i = Y_i - Phi_{t_i}(u_ref).
pub fn assemble_ak_bk(
    problem: &SmoothingProblem,
    u_ref: &[f64],
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d = problem.sys.dim();
    check_dense_cap(d)?;
    problem.sys.check_in_ball(u_ref)?;
    let jacs = observed_jacobians(problem, u_ref)?;
    // Residuals Z_i = Phi_{t_i}(u_ref) - Y_i. With this orientation the
    // quadratic model (v-u)' A_k (v-u) + 2 <v-u, B_k> matches the expansion
    // of the data misfit, so u^G = u - A_k^{-1} B_k is the model's minimizer
    // (the conjugate linear case reproduces the exact posterior mean).
    let mut state = u_ref.to_vec();
    let mut resid: Vec<DVector<f64>> = Vec::with_capacity(problem.setup.k + 1);
    for i in 0..=problem.setup.k {
        if i > 0 {
            state = problem.sys.flow(&state, problem.setup.h, problem.integ)?;
        }
        let hs = problem.setup.op.apply(&state);
        resid.push(DVector::from_fn(problem.setup.dim_obs(), |r, _| {
            hs[r] - problem.record.y[i][r]
        }));
    }
    let mut a_k = DMatrix::<f64>::zeros(d, d);
    let mut b_k = DVector::<f64>::zeros(d);
    for (j, z) in jacs.iter().zip(&resid) {
        a_k += j.transpose() * j;
        b_k += j.transpose() * z;
    }
    // J^2 Phi[.,., Z] columns by differencing the Jacobian-transpose products
    // against the frozen residuals
    let eps = 1e-5 * norm(u_ref).max(1.0);
    let base: DVector<f64> = {
        let mut acc = DVector::zeros(d);
        for (j, z) in jacs.iter().zip(&resid) {
            acc += j.transpose() * z;
        }
        acc
    };
    let mut curv = DMatrix::<f64>::zeros(d, d);
    for b in 0..d {
        let mut shifted = u_ref.to_vec();
        shifted[b] += eps;
        let mut e = eps;
        if problem.sys.check_in_ball(&shifted).is_err() {
            shifted[b] -= 2.0 * eps;
            e = -eps;
        }
        let jacs_s = observed_jacobians(problem, &shifted)?;
        let mut acc = DVector::zeros(d);
        for (j, z) in jacs_s.iter().zip(&resid) {
            acc += j.transpose() * z;
        }
        let col = (acc - &base) / e;
        for i in 0..d {
            curv[(i, b)] = col[i];
        }
    }
    // the exact contraction is symmetric; symmetrize the differenced estimate
    let curv = (&curv + curv.transpose()) * 0.5;
    // A_k carries + J^2 Phi[.,., Z_i] with Z the residual as defined above
    a_k += curv;
    let a_k = (&a_k + a_k.transpose()) * 0.5;
    Ok((a_k, b_k))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Theory-kind smoother Gaussian: center u^G = u0 - A_k^{-1} B_k, precision
/// scale A_k, built at the stored truth. Falls back to the standard normal
/// (flagged) when A_k is not positive definite.
pub fn smoother_theory(problem: &SmoothingProblem) -> Result<GaussianApprox> {
    let truth = problem
        .record
        .truth
        .as_ref()
        .ok_or_else(|| Error::Configuration("theory Gaussian needs the stored truth".into()))?;
    let u0 = truth[0].clone();
    let (a_k, b_k) = assemble_ak_bk(problem, &u0)?;
    let d = problem.sys.dim();
    match a_k.clone().cholesky() {
        Some(chol) => {
            let shift = chol.solve(&b_k);
            let center: Vec<f64> = (0..d).map(|i| u0[i] - shift[i]).collect();
            Ok(GaussianApprox {
                center,
                precision_scale: a_k,
                sigma_z: problem.setup.sigma_z,
                kind: ApproxKind::SmootherTheory,
                fallback_standard_normal: false,
            })
        }
        None => Ok(standard_normal_fallback(problem, ApproxKind::SmootherTheory)),
    }
}

fn standard_normal_fallback(problem: &SmoothingProblem, kind: ApproxKind) -> GaussianApprox {
    let d = problem.sys.dim();
    let s = if problem.setup.sigma_z > 0.0 { problem.setup.sigma_z } else { 1.0 };
    GaussianApprox {
        center: vec![0.0; d],
        precision_scale: DMatrix::identity(d, d) * (s * s),
        sigma_z: problem.setup.sigma_z,
        kind,
        fallback_standard_normal: true,
    }
}

/// Laplace smoother Gaussian: center at the converged MAP, precision scale
/// sigma^2 times the Hessian of g^sm there.
pub fn smoother_laplace(problem: &SmoothingProblem, map: &[f64]) -> Result<GaussianApprox> {
    check_dense_cap(problem.sys.dim())?;
    let h = dense_hessian(problem, map)?;
    let s = problem.sigma_eff();
    let p = h * (s * s);
    let p = (&p + p.transpose()) * 0.5;
    if p.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite(
            "Laplace Hessian at the supplied point".into(),
        ));
    }
    Ok(GaussianApprox {
        center: map.to_vec(),
        precision_scale: p,
        sigma_z: problem.setup.sigma_z,
        kind: ApproxKind::SmootherLaplace,
        fallback_standard_normal: false,
    })
}

/// Filter Gaussian: the smoother Gaussian pushed through Psi_T, with center
/// Psi_T(u^G) and precision ((J Psi_T)^{-1})' P (J Psi_T)^{-1}.
pub fn filter_gaussian(
    sm: &GaussianApprox,
    problem: &SmoothingProblem,
) -> Result<GaussianApprox> {
    let d = sm.dim();
    check_dense_cap(d)?;
    if sm.fallback_standard_normal {
        return Ok(GaussianApprox { kind: ApproxKind::FilterPushforward, ..sm.clone() });
    }
    let t = problem.setup.horizon();
    let center = problem.sys.flow(&sm.center, t, problem.integ)?;
    // J Psi_T column-by-column
    let mut jac = DMatrix::<f64>::zeros(d, d);
    for a in 0..d {
        let mut e = vec![0.0; d];
        e[a] = 1.0;
        let col = problem.sys.tangent_flow(&sm.center, &e, t, problem.integ)?;
        for i in 0..d {
            jac[(i, a)] = col[i];
        }
    }
    let lu = jac.clone().lu();
    let det = lu.determinant();
    if det.abs() < 1e-300 {
        return Err(Error::Numerical("flow Jacobian is numerically singular".into()));
    }
    let jac_inv = lu
        .try_inverse()
        .ok_or_else(|| Error::Numerical("flow Jacobian inversion failed".into()))?;
    let p = jac_inv.transpose() * &sm.precision_scale * &jac_inv;
    let p = (&p + p.transpose()) * 0.5;
    Ok(GaussianApprox {
        center,
        precision_scale: p,
        sigma_z: sm.sigma_z,
        kind: ApproxKind::FilterPushforward,
        fallback_standard_normal: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{BilinearSystem, Integrator};
    use crate::linalg::dist;
    use crate::map_solver::{newton_solve, NewtonOptions};
    use crate::observation::{generate, scenario_half_blocks, ObservationSetup, ObsOperator};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_u0(d: usize) -> Vec<f64> {
        (1..=d).map(|i| (d as f64 + i as f64) / (2.0 * d as f64)).collect()
    }

    fn static_problem(
        d: usize,
        sigma: f64,
        k: usize,
        seed: u64,
    ) -> (BilinearSystem, ObservationSetup, crate::observation::ObservationRecord, Integrator) {
        let sys = BilinearSystem::static_system(d, 10.0).unwrap();
        let setup = ObservationSetup::new(ObsOperator::identity(d), sigma, 0.1, k).unwrap();
        let integ = Integrator { step: 0.05, i_max: 4 };
        let u0: Vec<f64> = (0..d).map(|i| 0.2 * i as f64 - 0.3).collect();
        let rec = generate(&sys, &setup, &u0, seed, integ).unwrap();
        (sys, setup, rec, integ)
    }

    #[test]
    fn static_model_ak_bk_closed_form() {
        // Phi_t = identity: A_k = (k+1) I, B_k = sum Z_i
        let (sys, setup, rec, integ) = static_problem(3, 0.2, 4, 9);
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let u0: Vec<f64> = (0..3).map(|i| 0.2 * i as f64 - 0.3).collect();
        let (a_k, b_k) = assemble_ak_bk(&problem, &u0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 5.0 } else { 0.0 };
                assert_relative_eq!(a_k[(i, j)], expect, epsilon = 1e-8);
            }
        }
        // B_k = sum_i Z_i with Z_i = Phi(u) - Y_i
        let truth = problem.record.truth.as_ref().unwrap();
        let mut z_sum = vec![0.0; 3];
        for (row, t) in problem.record.y.iter().zip(truth) {
            for i in 0..3 {
                z_sum[i] += t[i] - row[i];
            }
        }
        for i in 0..3 {
            assert_relative_eq!(b_k[i], z_sum[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn noiseless_reference_kills_both_z_terms() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let setup = ObservationSetup::new(scenario_half_blocks(12).unwrap(), 0.0, 1e-2, 8).unwrap();
        let integ = Integrator::default_for(&sys, setup.h);
        let rec = generate(&sys, &setup, &default_u0(12), 1, integ).unwrap();
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let (a_k, b_k) = assemble_ak_bk(&problem, &default_u0(12)).unwrap();
        assert!(b_k.norm() < 1e-12);
        // A_k equals the pure Gauss-Newton matrix: compare against dense
        // Hessian times sigma_eff^2 ( = 1 here), which also has no curvature
        let h = dense_hessian(&problem, &default_u0(12)).unwrap();
        let gap = (&a_k - &h).norm() / h.norm();
        assert!(gap < 1e-5, "A_k vs Gauss-Newton gap {gap}");
        // the smoother center equals the truth
        let g = smoother_theory(&problem).unwrap();
        assert!(dist(&g.center, &default_u0(12)) < 1e-10);
        assert!(!g.fallback_standard_normal);
    }

    #[test]
    fn static_model_conjugate_center() {
        // u^G = u0 - (sum Z_i) / (k+1): the exact posterior mean shift
        let (sys, setup, rec, integ) = static_problem(3, 0.2, 4, 21);
        let k = setup.k;
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let truth = problem.record.truth.as_ref().unwrap()[0].clone();
        let g = smoother_theory(&problem).unwrap();
        // u^G = u0 - (sum Z_i)/(k+1) with Z_i = Phi(u) - Y_i: the posterior mean
        let mut z_sum = vec![0.0; 3];
        for (row, t) in problem.record.y.iter().zip(problem.record.truth.as_ref().unwrap()) {
            for i in 0..3 {
                z_sum[i] += t[i] - row[i];
            }
        }
        for i in 0..3 {
            let expect = truth[i] - z_sum[i] / (k as f64 + 1.0);
            assert_relative_eq!(g.center[i], expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn ak_positive_definite_in_small_noise_regime() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        for seed in 0..20 {
            let setup =
                ObservationSetup::new(scenario_half_blocks(12).unwrap(), 1e-3, 1e-2, 30).unwrap();
            let integ = Integrator::default_for(&sys, setup.h);
            let rec = generate(&sys, &setup, &default_u0(12), seed, integ).unwrap();
            let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
            let (a_k, _) = assemble_ak_bk(&problem, &default_u0(12)).unwrap();
            let lam = min_eigenvalue(&a_k);
            assert!(lam > 0.0, "seed {seed}: min eigenvalue {lam}");
        }
    }

    #[test]
    fn laplace_center_close_to_theory_center_small_noise() {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let mut gaps = Vec::new();
        for seed in 0..10 {
            let setup =
                ObservationSetup::new(scenario_half_blocks(12).unwrap(), 1e-4, 1e-2, 20).unwrap();
            let integ = Integrator::default_for(&sys, setup.h);
            let rec = generate(&sys, &setup, &default_u0(12), seed, integ).unwrap();
            let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
            let theory = smoother_theory(&problem).unwrap();
            let (map, trace) =
                newton_solve(&problem, &default_u0(12), &NewtonOptions::defaults(&sys)).unwrap();
            assert!(trace.converged);
            let laplace = smoother_laplace(&problem, &map).unwrap();
            gaps.push(dist(&theory.center, &laplace.center));
        }
        let max_gap = gaps.iter().cloned().fold(0.0, f64::max);
        assert!(max_gap < 1e-6, "theory vs Laplace center gap {max_gap}");
    }

    #[test]
    fn filter_pushforward_trivial_cases() {
        // T = 0 keeps the smoother Gaussian; the static model keeps it for all T
        let (sys, setup, rec, integ) = static_problem(3, 0.2, 4, 33);
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let sm = smoother_theory(&problem).unwrap();
        let fi = filter_gaussian(&sm, &problem).unwrap();
        assert!(dist(&fi.center, &sm.center) < 1e-12);
        let gap = (&fi.precision_scale - &sm.precision_scale).norm();
        assert!(gap < 1e-10);
        assert_eq!(fi.kind, ApproxKind::FilterPushforward);
    }

    #[test]
    fn filter_pushforward_matches_monte_carlo() {
        // sampled pushforward of smoother draws has the filter covariance
        let sys = BilinearSystem::lorenz96(4, 2.0).unwrap();
        let setup = ObservationSetup::new(ObsOperator::identity(4), 1e-4, 1e-2, 10).unwrap();
        let integ = Integrator::default_for(&sys, setup.h);
        let u0 = vec![0.6, 0.7, 0.8, 0.9];
        let rec = generate(&sys, &setup, &u0, 5, integ).unwrap();
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let sm = smoother_theory(&problem).unwrap();
        let fi = filter_gaussian(&sm, &problem).unwrap();
        let t = problem.setup.horizon();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 20000;
        let mut mean = vec![0.0; 4];
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let v = sm.sample(&mut rng);
            let pushed = sys.flow(&v, t, integ).unwrap();
            for i in 0..4 {
                mean[i] += pushed[i] / n as f64;
            }
            samples.push(pushed);
        }
        let mut cov = DMatrix::<f64>::zeros(4, 4);
        for s in &samples {
            for i in 0..4 {
                for j in 0..4 {
                    cov[(i, j)] += (s[i] - mean[i]) * (s[j] - mean[j]) / (n as f64 - 1.0);
                }
            }
        }
        let expect = fi.covariance();
        let gap = (&cov - &expect).norm() / expect.norm();
        assert!(gap < 0.05, "Monte-Carlo pushforward covariance gap {gap}");
    }

    #[test]
    fn conjugate_linear_model_is_exact() {
        // B = 0: the theory Gaussian equals the exact posterior
        let (sys, setup, rec, integ) = static_problem(3, 0.3, 6, 41);
        let k = setup.k;
        let sigma = setup.sigma_z;
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let g = smoother_theory(&problem).unwrap();
        // exact posterior: N(mean(Y), sigma^2/(k+1) I)
        let mut ybar = vec![0.0; 3];
        for row in &problem.record.y {
            for i in 0..3 {
                ybar[i] += row[i] / (k as f64 + 1.0);
            }
        }
        assert!(dist(&g.center, &ybar) < 1e-10);
        let cov = g.covariance();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { sigma * sigma / (k as f64 + 1.0) } else { 0.0 };
                assert_relative_eq!(cov[(i, j)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dense_cap_is_enforced() {
        let sys = BilinearSystem::lorenz96(300, 8.0).unwrap();
        let setup = ObservationSetup::new(scenario_half_blocks(300).unwrap(), 1e-3, 1e-3, 5).unwrap();
        let integ = Integrator::default_for(&sys, setup.h);
        let u0 = default_u0(300);
        let rec = generate(&sys, &setup, &u0, 1, integ).unwrap();
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        assert!(matches!(
            assemble_ak_bk(&problem, &u0),
            Err(Error::MatrixFreeUnsupported { .. })
        ));
    }

    #[test]
    fn gaussian_json_contract() {
        let (sys, setup, rec, integ) = static_problem(3, 0.2, 4, 50);
        let problem = SmoothingProblem::new(&sys, setup, rec, integ).unwrap();
        let g = smoother_theory(&problem).unwrap();
        let json = g.to_json().unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        for field in ["center", "precision", "kind", "sigma_z", "fallback_standard_normal"] {
            assert!(value.get(field).is_some(), "missing {field}");
        }
        assert_eq!(value["kind"], "smoother_theory");
    }
}
