//! Observation operators H, synthetic data generation Y_j = H Psi_{t_j}(u) + Z_j,
//! and the observed flow Phi_t = H Psi_t with its tangent/adjoint products.

use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dynamics::{BilinearSystem, Integrator};
use crate::error::{Error, Result};
use crate::linalg::norm;

/// Linear observation operator, stored as a row-index selection in the two
/// standard scenarios or as a dense matrix otherwise.
#[derive(Debug, Clone)]
pub enum ObsOperator {
    Selection(Vec<usize>),
    Dense(DMatrix<f64>),
}

impl ObsOperator {
    pub fn identity(dim: usize) -> Self {
        ObsOperator::Selection((0..dim).collect())
    }

    pub fn dim_obs(&self) -> usize {
        match self {
            ObsOperator::Selection(idx) => idx.len(),
            ObsOperator::Dense(m) => m.nrows(),
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            ObsOperator::Selection(idx) => idx.iter().map(|&i| v[i]).collect(),
            ObsOperator::Dense(m) => (0..m.nrows())
                .map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
                .collect(),
        }
    }

    /// H' y as a vector in R^d.
    pub fn apply_transpose(&self, y: &[f64], dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        match self {
            ObsOperator::Selection(idx) => {
                for (r, &i) in idx.iter().enumerate() {
                    out[i] += y[r];
                }
            }
            ObsOperator::Dense(m) => {
                for (r, row) in m.row_iter().enumerate() {
                    for (j, a) in row.iter().enumerate() {
                        out[j] += a * y[r];
                    }
                }
            }
        }
        out
    }

    /// Operator norm (1 for selections with unit rows).
    pub fn operator_norm(&self) -> f64 {
        match self {
            ObsOperator::Selection(_) => 1.0,
            ObsOperator::Dense(m) => m
                .clone()
                .svd(false, false)
                .singular_values
                .iter()
                .fold(0.0, |acc: f64, x| acc.max(*x)),
        }
    }

    pub fn observed_indices(&self) -> Option<&[usize]> {
        match self {
            ObsOperator::Selection(idx) => Some(idx),
            ObsOperator::Dense(_) => None,
        }
    }
}

/// Half-blocks scenario: each observed batch of 3 coordinates is followed by
/// an unobserved batch of 3, so d_o = d/2.
pub fn scenario_half_blocks(dim: usize) -> Result<ObsOperator> {
    if dim % 6 != 0 {
        return Err(Error::InvalidDimension(format!(
            "half-blocks scenario needs d divisible by 6, got {dim}"
        )));
    }
    let mut idx = Vec::with_capacity(dim / 2);
    for block in 0..dim / 6 {
        for j in 0..3 {
            idx.push(6 * block + j);
        }
    }
    Ok(ObsOperator::Selection(idx))
}

/// First-3 scenario: only the first three coordinates are observed.
pub fn scenario_first3(dim: usize) -> Result<ObsOperator> {
    if dim < 4 {
        return Err(Error::InvalidDimension(format!(
            "first-3 scenario needs d >= 4, got {dim}"
        )));
    }
    Ok(ObsOperator::Selection(vec![0, 1, 2]))
}

/// Observation geometry: operator H, noise level, step h and interval count k.
#[derive(Debug, Clone)]
pub struct ObservationSetup {
    pub op: ObsOperator,
    pub sigma_z: f64,
    pub h: f64,
    pub k: usize,
}

impl ObservationSetup {
    pub fn new(op: ObsOperator, sigma_z: f64, h: f64, k: usize) -> Result<Self> {
        if sigma_z < 0.0 {
            return Err(Error::Configuration("sigma_z must be non-negative".into()));
        }
        if h <= 0.0 {
            return Err(Error::Configuration("observation step h must be positive".into()));
        }
        Ok(ObservationSetup { op, sigma_z, h, k })
    }

    pub fn dim_obs(&self) -> usize {
        self.op.dim_obs()
    }

    /// Observation horizon T = k h.
    pub fn horizon(&self) -> f64 {
        self.k as f64 * self.h
    }

    /// Observation time t_j = j h (computed directly, not by accumulation).
    pub fn time_of(&self, j: usize) -> f64 {
        j as f64 * self.h
    }
}

/// A simulated (or ingested) observation sequence Y_{0:k}.
#[derive(Debug, Clone)]
pub struct ObservationRecord {
    /// k+1 rows of d_o observed values.
    pub y: Vec<Vec<f64>>,
    pub seed: u64,
    /// Truth samples u(t_j), kept by the synthetic generator for diagnostics.
    pub truth: Option<Vec<Vec<f64>>>,
}

impl ObservationRecord {
    pub fn rows(&self) -> usize {
        self.y.len()
    }
}

/// Generate observations from a true initial state. Deterministic in `seed`:
/// the noise stream comes from a seeded ChaCha8 counter-based generator, so
/// distinct seeds give independent, reproducible records.
pub fn generate(
    sys: &BilinearSystem,
    setup: &ObservationSetup,
    u0: &[f64],
    seed: u64,
    integ: Integrator,
) -> Result<ObservationRecord> {
    sys.check_in_ball(u0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_o = setup.dim_obs();
    let mut y = Vec::with_capacity(setup.k + 1);
    let mut truth = Vec::with_capacity(setup.k + 1);
    let mut state = u0.to_vec();
    for j in 0..=setup.k {
        if j > 0 {
            state = sys.flow(&state, setup.h, integ)?;
        }
        let mut row = setup.op.apply(&state);
        if setup.sigma_z > 0.0 {
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += setup.sigma_z * z;
            }
        } else {
            // keep the noise stream position identical to the noisy case
            for _ in 0..d_o {
                let _: f64 = StandardNormal.sample(&mut rng);
            }
        }
        y.push(row);
        truth.push(state.clone());
    }
    Ok(ObservationRecord { y, seed, truth: Some(truth) })
}

/// Observed flow Phi_t(v) = H Psi_t(v).
pub fn observed_flow(
    sys: &BilinearSystem,
    setup: &ObservationSetup,
    v: &[f64],
    t: f64,
    integ: Integrator,
) -> Result<Vec<f64>> {
    Ok(setup.op.apply(&sys.flow(v, t, integ)?))
}

/// Tangent of the observed flow: H J Psi_t(v) w.
pub fn observed_tangent(
    sys: &BilinearSystem,
    setup: &ObservationSetup,
    v: &[f64],
    w: &[f64],
    t: f64,
    integ: Integrator,
) -> Result<Vec<f64>> {
    Ok(setup.op.apply(&sys.tangent_flow(v, w, t, integ)?))
}

/// Adjoint of the observed flow: (J Psi_t(v))' H' z.
pub fn observed_adjoint(
    sys: &BilinearSystem,
    setup: &ObservationSetup,
    v: &[f64],
    z: &[f64],
    t: f64,
    integ: Integrator,
) -> Result<Vec<f64>> {
    let htz = setup.op.apply_transpose(z, sys.dim());
    sys.adjoint_flow(v, &htz, t, integ)
}

/// Write a record as CSV: header `t,y_1,...,y_{d_o}`, one row per observation,
/// 17 significant digits.
pub fn write_csv<W: Write>(record: &ObservationRecord, setup: &ObservationSetup, out: &mut W) -> Result<()> {
    write!(out, "t")?;
    for j in 1..=setup.dim_obs() {
        write!(out, ",y_{j}")?;
    }
    writeln!(out)?;
    for (j, row) in record.y.iter().enumerate() {
        write!(out, "{:.16e}", setup.time_of(j))?;
        for v in row {
            write!(out, ",{v:.16e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn to_csv_string(record: &ObservationRecord, setup: &ObservationSetup) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(record, setup, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is ascii"))
}

/// Residual diagnostics: Y_j - H u(t_j) for a record that kept its truth.
pub fn residuals_vs_truth(record: &ObservationRecord, setup: &ObservationSetup) -> Option<Vec<Vec<f64>>> {
    let truth = record.truth.as_ref()?;
    Some(
        record
            .y
            .iter()
            .zip(truth)
            .map(|(y, u)| {
                let hu = setup.op.apply(u);
                y.iter().zip(&hu).map(|(a, b)| a - b).collect()
            })
            .collect(),
    )
}

/// Largest residual norm of a noiseless record; should sit at integration
/// tolerance.
pub fn max_residual_norm(record: &ObservationRecord, setup: &ObservationSetup) -> Option<f64> {
    residuals_vs_truth(record, setup)
        .map(|rs| rs.iter().map(|r| norm(r)).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn d12_setup(sigma: f64, k: usize) -> (BilinearSystem, ObservationSetup) {
        let sys = BilinearSystem::lorenz96(12, 8.0).unwrap();
        let op = scenario_half_blocks(12).unwrap();
        let setup = ObservationSetup::new(op, sigma, 1e-2, k).unwrap();
        (sys, setup)
    }

    fn default_u0(d: usize) -> Vec<f64> {
        (1..=d).map(|i| (d as f64 + i as f64) / (2.0 * d as f64)).collect()
    }

    #[test]
    fn half_blocks_indices() {
        let op = scenario_half_blocks(12).unwrap();
        assert_eq!(op.observed_indices().unwrap(), &[0, 1, 2, 6, 7, 8]);
        assert_eq!(op.dim_obs(), 6);
        let op6 = scenario_half_blocks(6).unwrap();
        assert_eq!(op6.observed_indices().unwrap(), &[0, 1, 2]);
        assert!(scenario_half_blocks(10).is_err());
    }

    #[test]
    fn half_blocks_selects_expected_components() {
        let op = scenario_half_blocks(12).unwrap();
        let u: Vec<f64> = (1..=12).map(|i| i as f64).collect();
        assert_eq!(op.apply(&u), vec![1.0, 2.0, 3.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn first3_indices() {
        let op = scenario_first3(60).unwrap();
        assert_eq!(op.observed_indices().unwrap(), &[0, 1, 2]);
        assert_eq!(scenario_first3(4).unwrap().dim_obs(), 3);
        assert!(scenario_first3(3).is_err());
        let u: Vec<f64> = (5..=12).map(|i| i as f64).collect();
        assert_eq!(scenario_first3(8).unwrap().apply(&u), vec![5.0, 6.0, 7.0]);
    }

    #[test]
    fn noiseless_record_matches_truth() {
        let (sys, setup) = d12_setup(0.0, 20);
        let integ = Integrator::default_for(&sys, setup.h);
        let rec = generate(&sys, &setup, &default_u0(12), 42, integ).unwrap();
        assert_eq!(rec.rows(), 21);
        assert!(max_residual_norm(&rec, &setup).unwrap() == 0.0);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let (sys, setup) = d12_setup(1e-3, 10);
        let integ = Integrator::default_for(&sys, setup.h);
        let a = generate(&sys, &setup, &default_u0(12), 7, integ).unwrap();
        let b = generate(&sys, &setup, &default_u0(12), 7, integ).unwrap();
        assert_eq!(a.y, b.y);
        let c = generate(&sys, &setup, &default_u0(12), 8, integ).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn noise_variance_matches_sigma() {
        // sample variance of Y_0 - H u0 over many seeds within 5% of sigma^2
        let (sys, setup) = d12_setup(1e-3, 0);
        let integ = Integrator::default_for(&sys, setup.h);
        let u0 = default_u0(12);
        let hu0 = setup.op.apply(&u0);
        let mut sum_sq = 0.0;
        let mut n = 0usize;
        for seed in 0..20000u64 {
            let rec = generate(&sys, &setup, &u0, seed, integ).unwrap();
            for (a, b) in rec.y[0].iter().zip(&hu0) {
                sum_sq += (a - b) * (a - b);
                n += 1;
            }
        }
        let var = sum_sq / n as f64;
        let target = setup.sigma_z * setup.sigma_z;
        assert!(
            (var - target).abs() <= 0.05 * target,
            "sample variance {var:.3e} vs sigma^2 {target:.3e}"
        );
    }

    #[test]
    fn observed_flow_trivial_cases() {
        let (sys, setup) = d12_setup(1e-3, 5);
        let integ = Integrator::default_for(&sys, setup.h);
        let u0 = default_u0(12);
        let at_zero = observed_flow(&sys, &setup, &u0, 0.0, integ).unwrap();
        assert_eq!(at_zero, setup.op.apply(&u0));

        // identity H reduces the observed flow to the flow
        let id_setup = ObservationSetup::new(ObsOperator::identity(12), 0.0, 1e-2, 5).unwrap();
        let a = observed_flow(&sys, &id_setup, &u0, 0.05, integ).unwrap();
        let b = sys.flow(&u0, 0.05, integ).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn observed_tangent_adjoint_transpose_identity() {
        use crate::linalg::dot;
        use rand::prelude::*;
        let (sys, setup) = d12_setup(1e-3, 5);
        let integ = Integrator { step: 1e-3, i_max: 12 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let u0 = default_u0(12);
        for _ in 0..5 {
            let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let tw = observed_tangent(&sys, &setup, &u0, &w, 0.05, integ).unwrap();
            let az = observed_adjoint(&sys, &setup, &u0, &z, 0.05, integ).unwrap();
            assert_relative_eq!(dot(&tw, &z), dot(&w, &az), max_relative = 1e-10);
        }
    }

    #[test]
    fn csv_format_is_stable() {
        let (sys, setup) = d12_setup(0.0, 2);
        let integ = Integrator::default_for(&sys, setup.h);
        let rec = generate(&sys, &setup, &default_u0(12), 1, integ).unwrap();
        let text = to_csv_string(&rec, &setup).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,y_1,y_2,y_3,y_4,y_5,y_6");
        let first = lines.next().unwrap();
        assert!(first.starts_with("0.0000000000000000e0,"));
        assert_eq!(text.lines().count(), 4);
        // byte determinism
        let again = to_csv_string(&rec, &setup).unwrap();
        assert_eq!(text, again);
    }

    #[test]
    fn observation_times_are_bit_exact_multiples() {
        let (_, setup) = d12_setup(0.0, 1000);
        for j in [0usize, 1, 7, 999] {
            assert_eq!(setup.time_of(j), j as f64 * 1e-2);
        }
    }
}
