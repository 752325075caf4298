//! Run configuration. One TOML file drives every subcommand; unknown keys are
//! rejected and `schema_version` must match [`SCHEMA_VERSION`].

use std::path::{Path, PathBuf};

use semicomp_core::glmm::GlmmConfig;
use semicomp_core::mcmc::{McmcConfig, Priors, ProposalScales};
use semicomp_core::metrics::{DeathRoute, MetricsConfig};
use semicomp_core::model::{Clock, TransitionParams};
use semicomp_core::profiling::{LossSpec, ProfileConfig, Scheme};
use semicomp_core::quadrature::LegendreScheme;
use semicomp_core::simulate::{CovariateSpec, GroupSize, SimConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    Schema(u32),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    /// Read patients from a CSV file. Mutually exclusive with `simulate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimSection>,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub profile: ProfileSection,
    #[serde(default)]
    pub glmm: GlmmSection,
    #[serde(default)]
    pub sensitivity: SensitivitySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Relative paths resolve against the config file's directory.
    pub input: PathBuf,
}

/// Simulation settings; the seed comes from the root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub hospitals: usize,
    pub patients_per_hospital: GroupSize,
    pub covariates: Vec<CovariateSpec>,
    pub transitions: [TransitionParams<f64>; 3],
    pub sigma_v: [[f64; 3]; 3],
    pub theta: f64,
    #[serde(default)]
    pub gamma_one: bool,
    #[serde(default)]
    pub clock: Clock,
    pub censor_time: f64,
}

impl SimSection {
    pub fn to_config(&self, seed: u64) -> SimConfig {
        SimConfig {
            hospitals: self.hospitals,
            patients_per_hospital: self.patients_per_hospital,
            covariates: self.covariates.clone(),
            transitions: self.transitions.clone(),
            sigma_v: self.sigma_v,
            theta: self.theta,
            gamma_one: self.gamma_one,
            clock: self.clock,
            censor_time: self.censor_time,
            seed,
        }
    }
}

impl Default for SimSection {
    fn default() -> Self {
        let c = SimConfig::default();
        Self {
            hospitals: c.hospitals,
            patients_per_hospital: c.patients_per_hospital,
            covariates: c.covariates,
            transitions: c.transitions,
            sigma_v: c.sigma_v,
            theta: c.theta,
            gamma_one: c.gamma_one,
            clock: c.clock,
            censor_time: c.censor_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub n_iter: u64,
    pub burnin: u64,
    pub thin: u64,
    /// Independent chains; their retained draws are pooled in chain order.
    pub chains: u64,
    pub priors: Priors,
    pub scales: ProposalScales,
    pub clock: Clock,
    pub gamma_one: bool,
    pub adapt: bool,
}

impl Default for FitSection {
    fn default() -> Self {
        let c = McmcConfig::default();
        Self {
            n_iter: c.n_iter,
            burnin: c.burnin,
            thin: c.thin,
            chains: 1,
            priors: c.priors,
            scales: c.scales,
            clock: c.clock,
            gamma_one: c.gamma_one,
            adapt: c.adapt,
        }
    }
}

impl FitSection {
    pub fn chain_config(&self, seed: u64, chain: u64) -> McmcConfig {
        McmcConfig {
            n_iter: self.n_iter,
            burnin: self.burnin,
            thin: self.thin,
            seed,
            chain,
            priors: self.priors,
            scales: self.scales,
            clock: self.clock,
            gamma_one: self.gamma_one,
            adapt: self.adapt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Horizons in days, strictly increasing.
    pub grid: Vec<f64>,
    /// Legendre nodes per panel and Hermite nodes per dimension.
    pub nodes: usize,
    pub panels: usize,
    pub grading: u32,
    pub death_route: DeathRoute,
    pub gamma_one: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        let c = MetricsConfig::default();
        Self {
            grid: vec![30.0, 60.0, 90.0],
            nodes: c.hermite_nodes,
            panels: c.legendre.panels,
            grading: c.legendre.grading,
            death_route: c.death_route,
            gamma_one: c.gamma_one,
        }
    }
}

impl MetricsSection {
    pub fn with_nodes(&self, k: usize) -> MetricsConfig {
        MetricsConfig {
            legendre: LegendreScheme::new(k, self.panels, self.grading),
            hermite_nodes: k,
            death_route: self.death_route,
            gamma_one: self.gamma_one,
        }
    }

    pub fn config(&self) -> MetricsConfig {
        self.with_nodes(self.nodes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    /// Horizon to classify at; must be a grid time. Defaults to the last one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    pub gamma_frac: f64,
    pub penalty: f64,
    /// Quadrant loss `weights[truth - 1][chosen - 1]`.
    pub weights: [[f64; 4]; 4],
    /// Freeze hospitals whose marginal probability is within `epsilon` of 1.
    pub reduce: bool,
    pub epsilon: f64,
    pub random_starts: usize,
    pub exhaustive_when_small: bool,
}

impl Default for ProfileSection {
    fn default() -> Self {
        let LossSpec::Quadrant { weights } = LossSpec::unit_quadrant() else {
            unreachable!()
        };
        Self {
            horizon: None,
            gamma_frac: 0.1,
            penalty: 1.0,
            weights,
            reduce: true,
            epsilon: 0.01,
            random_starts: 4,
            exhaustive_when_small: false,
        }
    }
}

impl ProfileSection {
    pub fn topk(&self) -> ProfileConfig {
        self.with(
            Scheme::Topk {
                gamma_frac: self.gamma_frac,
            },
            LossSpec::Topk {
                penalty: self.penalty,
            },
        )
    }

    pub fn quadrant(&self) -> ProfileConfig {
        self.with(
            Scheme::Quadrant,
            LossSpec::Quadrant {
                weights: self.weights,
            },
        )
    }

    fn with(&self, scheme: Scheme, loss: LossSpec) -> ProfileConfig {
        ProfileConfig {
            scheme,
            loss,
            epsilon: self.reduce.then_some(self.epsilon),
            random_starts: self.random_starts,
            exhaustive_when_small: self.exhaustive_when_small,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlmmSection {
    /// Outcome window in days. Defaults to the profiling horizon.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<f64>,
    pub n_iter: u64,
    pub burnin: u64,
    pub thin: u64,
    pub beta_var: f64,
    pub nu: f64,
    pub psi: f64,
    pub beta_scale: f64,
    pub v_scale: f64,
    pub adapt: bool,
    pub hermite_nodes: usize,
}

impl Default for GlmmSection {
    fn default() -> Self {
        let c = GlmmConfig::default();
        Self {
            window: None,
            n_iter: c.n_iter,
            burnin: c.burnin,
            thin: c.thin,
            beta_var: c.beta_var,
            nu: c.nu,
            psi: c.psi,
            beta_scale: c.beta_scale,
            v_scale: c.v_scale,
            adapt: c.adapt,
            hermite_nodes: 15,
        }
    }
}

impl GlmmSection {
    pub fn chain_config(&self, seed: u64, chain: u64) -> GlmmConfig {
        GlmmConfig {
            n_iter: self.n_iter,
            burnin: self.burnin,
            thin: self.thin,
            seed,
            chain,
            beta_var: self.beta_var,
            nu: self.nu,
            psi: self.psi,
            beta_scale: self.beta_scale,
            v_scale: self.v_scale,
            adapt: self.adapt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivitySection {
    /// Node counts compared against the largest one.
    pub nodes: Vec<usize>,
    /// Horizons; defaults to the metrics grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
}

impl Default for SensitivitySection {
    fn default() -> Self {
        Self {
            nodes: vec![3, 5, 10, 15],
            grid: None,
        }
    }
}

impl RunConfig {
    /// Toy configuration: a small simulated study with short chains.
    pub fn example() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 20240601,
            data: None,
            simulate: Some(SimSection {
                hospitals: 12,
                patients_per_hospital: GroupSize::Fixed(25),
                ..SimSection::default()
            }),
            fit: FitSection {
                n_iter: 4000,
                burnin: 2000,
                thin: 20,
                ..FitSection::default()
            },
            metrics: MetricsSection::default(),
            profile: ProfileSection::default(),
            glmm: GlmmSection {
                n_iter: 4000,
                burnin: 2000,
                thin: 20,
                ..GlmmSection::default()
            },
            sensitivity: SensitivitySection {
                nodes: vec![3, 5],
                grid: Some(vec![90.0]),
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config and resolves a relative data path against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text)?;
        if let (Some(data), Some(dir)) = (config.data.as_mut(), path.parent()) {
            if data.input.is_relative() {
                data.input = dir.join(&data.input);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Checks cross-field rules that serde cannot express. Section contents
    /// are validated again by the stages that use them.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema(self.schema_version));
        }
        if self.data.is_some() && self.simulate.is_some() {
            return fail("[data] and [simulate] are mutually exclusive".into());
        }
        if self.fit.chains == 0 {
            return fail("fit.chains must be at least 1".into());
        }
        let grid = &self.metrics.grid;
        if grid.is_empty()
            || grid.iter().any(|t| !(*t > 0.0 && t.is_finite()))
            || grid.windows(2).any(|w| w[0] >= w[1])
        {
            return fail("metrics.grid must be positive, finite and strictly increasing".into());
        }
        if let Some(h) = self.profile.horizon {
            if !grid.contains(&h) {
                return fail(format!("profile.horizon {h} is not a metrics.grid time"));
            }
        }
        if self.metrics.nodes == 0 || self.sensitivity.nodes.contains(&0) {
            return fail("node counts must be positive".into());
        }
        if self.sensitivity.nodes.len() < 2 {
            return fail("sensitivity.nodes needs at least two entries".into());
        }
        if !(self.profile.epsilon > 0.0 && self.profile.epsilon < 1.0) {
            return fail(format!("profile.epsilon must lie in (0, 1), got {}", self.profile.epsilon));
        }
        Ok(())
    }

    /// Profiling horizon: the configured one or the last grid time.
    pub fn horizon(&self) -> f64 {
        self.profile
            .horizon
            .unwrap_or(*self.metrics.grid.last().expect("validated grid"))
    }
}
