//! Run configuration: a JSON document with explicit units at the boundary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use offset_bf::channel::{self, FadingConfig, GeometryConfig, Scenario};
use offset_bf::montecarlo::{SweepConfig, DEFAULT_POWER_LIMIT};
use offset_bf::pipeline::{Algorithm, DesignParams};
use offset_bf::stats::{self, OffsetRule};
use offset_bf::VarianceMode;

/// Why a configuration or scenario could not be used.
#[derive(Debug)]
pub enum InputError {
    /// Unreadable file or malformed JSON.
    Parse(String),
    Invalid(String),
    /// User selection kept nobody.
    NoUsers,
}

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InputError::Parse(m) | InputError::Invalid(m) => f.write_str(m),
            InputError::NoUsers => f.write_str("user selection removed every user"),
        }
    }
}

fn read(path: &Path) -> Result<String, InputError> {
    std::fs::read_to_string(path).map_err(|e| InputError::Parse(format!("cannot read {}: {e}", path.display())))
}

/// Generator parameters for a random drop. Noise is in dBm (`noise_dbm`),
/// SINR targets in dB (`gamma_db`); both are converted to linear internally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub n_antennas: usize,
    pub cell_radius_km: f64,
    pub path_loss_exponent: f64,
    pub shadowing_std_db: f64,
    pub noise_dbm: f64,
    pub reference_distance_m: f64,
    pub sigma_e: Vec<f64>,
    pub gamma_db: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let g = GeometryConfig::default();
        let f = FadingConfig::default();
        Self {
            n_users: g.n_users,
            n_antennas: g.n_antennas,
            cell_radius_km: g.cell_radius_km,
            path_loss_exponent: f.path_loss_exponent,
            shadowing_std_db: f.shadowing_std_db,
            noise_dbm: f.noise_dbm,
            reference_distance_m: f.reference_distance_m,
            sigma_e: f.sigma_e,
            gamma_db: f.gamma_db,
        }
    }
}

impl GeneratorConfig {
    pub fn geometry(&self) -> GeometryConfig {
        GeometryConfig { n_users: self.n_users, n_antennas: self.n_antennas, cell_radius_km: self.cell_radius_km }
    }

    pub fn fading(&self, delta: f64) -> FadingConfig {
        FadingConfig {
            path_loss_exponent: self.path_loss_exponent,
            shadowing_std_db: self.shadowing_std_db,
            noise_dbm: self.noise_dbm,
            reference_distance_m: self.reference_distance_m,
            sigma_e: self.sigma_e.clone(),
            gamma_db: self.gamma_db,
            delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Scenario document to load. Exclusive with `generator`.
    pub scenario_file: Option<PathBuf>,
    pub generator: Option<GeneratorConfig>,
    pub algorithm: Algorithm,
    /// Algorithms compared by `sweep`.
    pub algorithms: Vec<Algorithm>,
    /// Common offset. Exclusive with `delta`.
    pub r: Option<f64>,
    /// Outage tolerance converted to an offset by `offset_rule`.
    pub delta: Option<f64>,
    pub offset_rule: OffsetRule,
    /// Total power budget in Watts (noise-normalized).
    pub pt: f64,
    pub r_min: f64,
    pub r_cap: f64,
    pub variance_mode: Option<VarianceMode>,
    pub alg1_refinements: usize,
    pub refine_perturbation: bool,
    pub seed: u64,
    pub trials: usize,
    pub realizations: usize,
    pub r_grid: Vec<f64>,
    pub power_limit: f64,
    /// Reference power of the user-selection rule; `null` keeps every user.
    pub selection_power: Option<f64>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = DesignParams::default();
        Self {
            scenario_file: None,
            generator: None,
            algorithm: Algorithm::Alg1,
            algorithms: vec![Algorithm::Alg1],
            r: None,
            delta: None,
            offset_rule: OffsetRule::Gaussian,
            pt: p.pt,
            r_min: p.r_min,
            r_cap: p.r_cap,
            variance_mode: None,
            alg1_refinements: 0,
            refine_perturbation: false,
            seed: 0,
            trials: 10_000,
            realizations: 100,
            r_grid: vec![1.0, 2.0, 3.0],
            power_limit: DEFAULT_POWER_LIMIT,
            selection_power: Some(DEFAULT_POWER_LIMIT),
            out: None,
        }
    }
}

impl RunConfig {
    /// Reads a config, or the config embedded in an earlier report.
    pub fn load(path: &Path) -> Result<Self, InputError> {
        let text = read(path)?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| InputError::Parse(format!("{}: {e}", path.display())))?;
        let value = match value {
            serde_json::Value::Object(mut map) if map.contains_key("config") && map.contains_key("report_kind") => {
                map.remove("config").expect("checked")
            }
            other => other,
        };
        serde_json::from_value(value).map_err(|e| InputError::Parse(format!("{}: {e}", path.display())))
    }

    /// Fills in defaults and checks exclusivity, so that the returned config
    /// reproduces the run on its own.
    pub fn resolve(mut self) -> Result<Self, String> {
        match (&self.scenario_file, &self.generator) {
            (Some(_), Some(_)) => return Err("give either scenario_file or generator, not both".into()),
            (None, None) => self.generator = Some(GeneratorConfig::default()),
            _ => {}
        }
        match (self.r, self.delta) {
            (r, Some(d)) => {
                let from_delta = stats::r_from_delta(d, self.offset_rule).map_err(|e| e.to_string())?;
                // A resolved config carries both; they must agree.
                if r.is_some_and(|r| r != from_delta) {
                    return Err("give either r or delta, not both".into());
                }
                self.r = Some(from_delta);
            }
            (None, None) => self.r = Some(DesignParams::default().r),
            (Some(_), None) => {}
        }
        if self.algorithms.is_empty() {
            return Err("algorithms must not be empty".into());
        }
        if self.trials == 0 {
            return Err("trials must be at least 1".into());
        }
        if !(self.pt > 0.0) {
            return Err(format!("pt must be positive, got {}", self.pt));
        }
        Ok(self)
    }

    pub fn offset(&self) -> f64 {
        self.r.expect("resolved config has r")
    }

    pub fn params(&self) -> DesignParams {
        DesignParams {
            r: self.offset(),
            pt: self.pt,
            r_min: self.r_min,
            r_cap: self.r_cap,
            variance_mode: self.variance_mode,
            alg1_refinements: self.alg1_refinements,
            refine_perturbation: self.refine_perturbation,
            ..DesignParams::default()
        }
    }

    fn fading_delta(&self) -> f64 {
        self.delta.unwrap_or(FadingConfig::default().delta)
    }

    /// The scenario of a single-design run, after user selection. Also
    /// returns the original indices of the kept users.
    pub fn scenario(&self) -> Result<(Scenario, Vec<usize>), InputError> {
        let scenario = match (&self.scenario_file, &self.generator) {
            (Some(path), _) => Scenario::from_json(&read(path)?).map_err(|e| match e {
                offset_bf::Error::Parse(_) => InputError::Parse(format!("{}: {e}", path.display())),
                other => InputError::Invalid(format!("{}: {other}", path.display())),
            })?,
            (None, Some(g)) => channel::generate_scenario(&g.geometry(), &g.fading(self.fading_delta()), self.seed)
                .map_err(|e| InputError::Invalid(e.to_string()))?,
            (None, None) => unreachable!("resolved config has a scenario source"),
        };
        let keep = match self.selection_power {
            Some(p) => channel::user_selection(&scenario, p),
            None => (0..scenario.n_users()).collect(),
        };
        if keep.is_empty() {
            return Err(InputError::NoUsers);
        }
        let sub = scenario.subset(&keep).map_err(|e| InputError::Invalid(e.to_string()))?;
        Ok((sub, keep))
    }

    pub fn sweep_config(&self) -> Result<SweepConfig, String> {
        let Some(g) = &self.generator else {
            return Err("sweep draws its own realizations and needs a generator, not a scenario_file".into());
        };
        Ok(SweepConfig {
            algorithms: self.algorithms.clone(),
            r_grid: self.r_grid.clone(),
            n_realizations: self.realizations,
            n_trials: self.trials,
            base_seed: self.seed,
            geometry: g.geometry(),
            fading: g.fading(self.fading_delta()),
            params: self.params(),
            power_limit: self.power_limit,
            selection_power: self.selection_power,
        })
    }
}
