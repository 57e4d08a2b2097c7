//! Experiment configuration: a declarative `key = value` text file plus
//! command-line overrides (flags win).

use std::collections::BTreeMap;
use std::path::Path;

use crate::dynamics::{BilinearSystem, Integrator, DEFAULT_TAYLOR_ORDER};
use crate::error::{Error, Result};
use crate::init_est::Scenario;
use crate::map_solver::{auto_hessian_mode, HessianMode, NewtonOptions, SmoothOptions};
use crate::observation::{scenario_first3, scenario_half_blocks, ObsOperator, ObservationSetup};

/// Experiment-level parameters; every module precondition is re-validated at
/// parse time.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub forcing: f64,
    pub h: f64,
    pub sigma_z: f64,
    pub k: usize,
    pub scenario: Scenario,
    pub seed: u64,
    pub trials: usize,
    pub jmax_caps: Vec<usize>,
    pub delta_min: Option<f64>,
    pub taylor_order: usize,
    pub taylor_step: Option<f64>,
    pub hessian: Option<HessianMode>,
    pub stride: usize,
    pub jobs: usize,
    pub out: Option<String>,
    pub max_iters: usize,
    /// truth override; the default is u_i = (d + i) / (2d), i = 1..d
    pub u0: Option<Vec<f64>>,
    /// sweep lists for the experiment subcommands
    pub k_list: Vec<usize>,
    pub sigma_list: Vec<f64>,
    pub h_list: Vec<f64>,
    /// filter window length (defaults to k)
    pub window_k: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dim: 12,
            forcing: 8.0,
            h: 1e-2,
            sigma_z: 1e-3,
            k: 50,
            scenario: Scenario::HalfBlocks,
            seed: 1,
            trials: 20,
            jmax_caps: vec![1, 1],
            delta_min: None,
            taylor_order: DEFAULT_TAYLOR_ORDER,
            taylor_step: None,
            hessian: None,
            stride: 1,
            jobs: 1,
            out: None,
            max_iters: 50,
            u0: None,
            k_list: vec![10, 20, 40, 60, 80, 100],
            sigma_list: vec![1e-5, 1e-4, 1e-3],
            h_list: vec![1e-3, 2e-3],
            window_k: None,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::Configuration(format!("bad element {s:?} in {key}")))
        })
        .collect()
}

impl ExperimentConfig {
    /// Parse a `key = value` file; unknown keys are rejected.
    pub fn from_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Configuration(format!(
                    "line {}: expected key = value, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(Error::Configuration(format!("duplicate key {key}")));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Configuration(format!("bad value {value:?} for {what}"));
        match key {
            "d" | "dim" => self.dim = value.parse().map_err(|_| bad("d"))?,
            "f" | "forcing" => self.forcing = value.parse().map_err(|_| bad("f"))?,
            "h" => self.h = value.parse().map_err(|_| bad("h"))?,
            "sigma_z" => self.sigma_z = value.parse().map_err(|_| bad("sigma_z"))?,
            "k" => self.k = value.parse().map_err(|_| bad("k"))?,
            "scenario" => {
                self.scenario = match value {
                    "halfblocks" | "half_blocks" => Scenario::HalfBlocks,
                    "first3" => Scenario::First3,
                    "generic" => Scenario::Generic,
                    _ => return Err(bad("scenario (halfblocks | first3 | generic)")),
                }
            }
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "trials" => self.trials = value.parse().map_err(|_| bad("trials"))?,
            "jmax_caps" => self.jmax_caps = parse_list(value, "jmax_caps")?,
            "delta_min" => self.delta_min = Some(value.parse().map_err(|_| bad("delta_min"))?),
            "taylor_order" => self.taylor_order = value.parse().map_err(|_| bad("taylor_order"))?,
            "taylor_step" => self.taylor_step = Some(value.parse().map_err(|_| bad("taylor_step"))?),
            "hessian" => {
                self.hessian = Some(match value {
                    "dense" => HessianMode::DenseFd,
                    "matfree" => HessianMode::MatrixFreeGaussNewtonCg,
                    "auto" => return Ok(()),
                    _ => return Err(bad("hessian (dense | matfree | auto)")),
                })
            }
            "stride" => self.stride = value.parse().map_err(|_| bad("stride"))?,
            "jobs" => self.jobs = value.parse().map_err(|_| bad("jobs"))?,
            "out" => self.out = Some(value.to_string()),
            "max_iters" => self.max_iters = value.parse().map_err(|_| bad("max_iters"))?,
            "u0" => self.u0 = Some(parse_list(value, "u0")?),
            "k_list" => self.k_list = parse_list(value, "k_list")?,
            "sigma_list" => self.sigma_list = parse_list(value, "sigma_list")?,
            "h_list" => self.h_list = parse_list(value, "h_list")?,
            "window_k" => self.window_k = Some(value.parse().map_err(|_| bad("window_k"))?),
            _ => return Err(Error::Configuration(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 {
            return Err(Error::InvalidDimension("d must be at least 4".into()));
        }
        if self.scenario == Scenario::HalfBlocks && self.dim % 6 != 0 {
            return Err(Error::InvalidDimension(
                "the half-blocks scenario needs d divisible by 6".into(),
            ));
        }
        if self.h <= 0.0 || self.sigma_z < 0.0 {
            return Err(Error::Configuration("h must be positive, sigma_z non-negative".into()));
        }
        if self.trials == 0 {
            return Err(Error::Configuration("trials must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Configuration("stride must be positive".into()));
        }
        if let Some(u0) = &self.u0 {
            if u0.len() != self.dim {
                return Err(Error::Configuration(format!(
                    "u0 has {} components but d = {}",
                    u0.len(),
                    self.dim
                )));
            }
        }
        if self.taylor_order == 0 || self.taylor_order > crate::dynamics::MAX_TAYLOR_ORDER {
            return Err(Error::Configuration(format!(
                "taylor_order must lie in 1..={}",
                crate::dynamics::MAX_TAYLOR_ORDER
            )));
        }
        Ok(())
    }

    /// Default truth u_i = (d + i) / (2d).
    pub fn truth(&self) -> Vec<f64> {
        match &self.u0 {
            Some(u) => u.clone(),
            None => {
                let d = self.dim as f64;
                (1..=self.dim).map(|i| (d + i as f64) / (2.0 * d)).collect()
            }
        }
    }

    pub fn build_system(&self) -> Result<BilinearSystem> {
        BilinearSystem::lorenz96(self.dim, self.forcing)
    }

    pub fn build_operator(&self) -> Result<ObsOperator> {
        match self.scenario {
            Scenario::HalfBlocks => scenario_half_blocks(self.dim),
            Scenario::First3 => scenario_first3(self.dim),
            Scenario::Generic => Ok(ObsOperator::identity(self.dim)),
        }
    }

    pub fn build_setup(&self) -> Result<ObservationSetup> {
        ObservationSetup::new(self.build_operator()?, self.sigma_z, self.h, self.k)
    }

    pub fn build_integrator(&self, sys: &BilinearSystem) -> Integrator {
        let mut integ = Integrator::default_for(sys, self.h);
        integ.i_max = self.taylor_order;
        if let Some(step) = self.taylor_step {
            integ.step = step;
        }
        integ
    }

    pub fn build_smooth_options(&self, sys: &BilinearSystem) -> SmoothOptions {
        let mut newton = NewtonOptions::defaults(sys);
        newton.mode = self.hessian.unwrap_or_else(|| auto_hessian_mode(self.dim));
        newton.max_iters = self.max_iters;
        if let Some(dm) = self.delta_min {
            newton.delta_min = dm;
        }
        let mut opts = SmoothOptions::defaults(sys, self.scenario);
        opts.newton = newton;
        opts.jmax_caps = self.jmax_caps.clone();
        opts
    }
}
