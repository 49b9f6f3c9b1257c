//! Monte-Carlo validation: outage estimates over error draws and
//! power-vs-outage sweeps over channel realizations.
//!
//! Trials draw `e_k` around fixed estimates, so the true channel of a trial is
//! `h_est + e`. Trial `t` is seeded with `derive_seed(base_seed, t)`, which
//! makes estimates independent of scheduling and of the trial count prefix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{derive_seed, generate_scenario, user_selection, FadingConfig, GeometryConfig, Scenario};
use crate::error::{Error, Result};
use crate::linalg::{self, CVector};
use crate::pipeline::{self, Algorithm, DesignParams};
use crate::powerload::Design;
use crate::stats::BeamformerSet;

/// Trials per rayon work item.
const CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    /// `SINR_k < γ_k` under this trial's error draw.
    pub outage: Vec<bool>,
    pub slack: Vec<f64>,
    pub total_power: f64,
    pub algorithm: Option<Algorithm>,
    pub r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageEstimate {
    pub per_user: Vec<f64>,
    /// Binomial standard errors `√(p(1−p)/n)`.
    pub stderr: Vec<f64>,
    /// Mean over users.
    pub average: f64,
    pub average_stderr: f64,
    pub n_trials: usize,
}

/// Slack values within this fraction of the received-power scale count as
/// met: designs that meet a target with equality must not flip on rounding.
pub const SLACK_TOL: f64 = 1e-10;

/// `f_k = β_k|hᴴu_k|²/γ_k − Σ_{j≠k} β_j|hᴴu_j|² − σ²` at the true channel `h`,
/// and the scale `σ² + Σ` of the absolute terms.
fn slack_at(h: &CVector, bf: &BeamformerSet, k: usize, gamma_k: f64, noise: f64) -> (f64, f64) {
    let mut f = -noise;
    let mut scale = noise;
    for (j, (u, &b)) in bf.directions().iter().zip(bf.powers()).enumerate() {
        let g = b * linalg::inner(h, u).norm_sqr();
        if j == k {
            f += g / gamma_k;
            scale += g / gamma_k;
        } else {
            f -= g;
            scale += g;
        }
    }
    (f, scale)
}

/// One Monte-Carlo trial. Errors of all users come from one stream seeded by `seed`.
pub fn run_trial(bf: &BeamformerSet, scenario: &Scenario, seed: u64) -> TrialResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (slack, outage) = scenario
        .users()
        .iter()
        .enumerate()
        .map(|(k, user)| {
            let h = &user.h_est + user.uncertainty.sample(&mut rng);
            let (f, scale) = slack_at(&h, bf, k, user.sinr_target, user.noise_power);
            (f, f < -SLACK_TOL * scale)
        })
        .unzip();
    TrialResult {
        outage,
        slack,
        total_power: bf.total_power(),
        algorithm: None,
        r: None,
    }
}

/// Per-user outage frequencies over `n_trials` error draws.
pub fn estimate_outage(bf: &BeamformerSet, scenario: &Scenario, n_trials: usize, base_seed: u64) -> Result<OutageEstimate> {
    if n_trials == 0 {
        return Err(Error::InvalidArgument("n_trials must be at least 1".into()));
    }
    if bf.len() != scenario.n_users() {
        return Err(Error::InvalidArgument("beamformer count differs from user count".into()));
    }
    let k = scenario.n_users();
    let n_chunks = n_trials.div_ceil(CHUNK);
    // Integer counts make the reduction order-independent.
    let counts = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut counts = vec![0u64; k];
            for t in c * CHUNK..((c + 1) * CHUNK).min(n_trials) {
                let trial = run_trial(bf, scenario, derive_seed(base_seed, t as u64));
                for (n, o) in counts.iter_mut().zip(trial.outage) {
                    *n += u64::from(o);
                }
            }
            counts
        })
        .reduce(|| vec![0u64; k], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    let n = n_trials as f64;
    let per_user: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let stderr: Vec<f64> = per_user.iter().map(|p| (p * (1.0 - p) / n).sqrt()).collect();
    let kf = k as f64;
    Ok(OutageEstimate {
        average: per_user.iter().sum::<f64>() / kf,
        // Users' errors are independent, so the variances add.
        average_stderr: stderr.iter().map(|s| s * s).sum::<f64>().sqrt() / kf,
        per_user,
        stderr,
        n_trials,
    })
}

pub const DEFAULT_POWER_LIMIT: f64 = 100.0;

/// A design is viable when it exists and spends strictly less than `power_limit`.
pub fn viability_check(design: &Result<Design>, power_limit: f64) -> bool {
    match design {
        Ok(d) => d.beamformers.total_power() < power_limit,
        Err(_) => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub algorithms: Vec<Algorithm>,
    pub r_grid: Vec<f64>,
    pub n_realizations: usize,
    pub n_trials: usize,
    pub base_seed: u64,
    pub geometry: GeometryConfig,
    pub fading: FadingConfig,
    pub params: DesignParams,
    pub power_limit: f64,
    /// Reference power of the user-selection rule; `None` keeps every user.
    pub selection_power: Option<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            algorithms: vec![Algorithm::Alg1],
            r_grid: vec![1.0, 2.0, 3.0],
            n_realizations: 100,
            n_trials: 10_000,
            base_seed: 0,
            geometry: GeometryConfig::default(),
            fading: FadingConfig::default(),
            params: DesignParams::default(),
            power_limit: DEFAULT_POWER_LIMIT,
            selection_power: Some(DEFAULT_POWER_LIMIT),
        }
    }
}

/// One row of a sweep table. The means are `None` when no realization was
/// viable for every algorithm at this `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub algorithm: Algorithm,
    pub r: f64,
    pub mean_power: Option<f64>,
    pub mean_outage: Option<f64>,
    pub stderr_outage: Option<f64>,
    pub n_viable: usize,
}

impl SweepPoint {
    pub const CSV_HEADER: [&'static str; 6] = ["algorithm", "r", "mean_power_W", "mean_outage", "stderr_outage", "n_viable"];

    pub fn csv_row(&self) -> [String; 6] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.algorithm.to_string(),
            self.r.to_string(),
            opt(self.mean_power),
            opt(self.mean_outage),
            opt(self.stderr_outage),
            self.n_viable.to_string(),
        ]
    }
}

/// The scenario of realization `index`, after user selection. `None` when no
/// user survives selection.
pub fn realization(cfg: &SweepConfig, index: usize) -> Result<Option<Scenario>> {
    let scenario = generate_scenario(&cfg.geometry, &cfg.fading, derive_seed(cfg.base_seed, index as u64))?;
    match cfg.selection_power {
        None => Ok(Some(scenario)),
        Some(p) => {
            let keep = user_selection(&scenario, p);
            if keep.is_empty() {
                Ok(None)
            } else {
                scenario.subset(&keep).map(Some)
            }
        }
    }
}

/// Power-vs-outage sweep. For each `r`, every algorithm designs on the same
/// realizations; only realizations where all algorithms are viable enter the
/// means. All algorithms see the same error draws of a realization.
pub fn sweep(cfg: &SweepConfig) -> Result<Vec<SweepPoint>> {
    if cfg.algorithms.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one algorithm".into()));
    }
    if cfg.n_trials == 0 {
        return Err(Error::InvalidConfig("n_trials must be at least 1".into()));
    }
    let scenarios: Vec<Option<Scenario>> = (0..cfg.n_realizations)
        .into_par_iter()
        .map(|i| realization(cfg, i))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(cfg.r_grid.len() * cfg.algorithms.len());
    for &r in &cfg.r_grid {
        let params = DesignParams { r, ..cfg.params };
        // Per realization: (power, average outage) for each algorithm, or None.
        let results: Vec<Option<Vec<(f64, f64)>>> = scenarios
            .par_iter()
            .enumerate()
            .map(|(i, sc)| -> Result<Option<Vec<(f64, f64)>>> {
                let Some(sc) = sc else { return Ok(None) };
                let designs: Vec<Result<Design>> = cfg.algorithms.iter().map(|&a| pipeline::design(a, sc, &params)).collect();
                if !designs.iter().all(|d| viability_check(d, cfg.power_limit)) {
                    return Ok(None);
                }
                let mc_seed = derive_seed(derive_seed(cfg.base_seed, i as u64), u64::MAX);
                designs
                    .into_iter()
                    .map(|d| {
                        let d = d.expect("viable");
                        let est = estimate_outage(&d.beamformers, sc, cfg.n_trials, mc_seed)?;
                        Ok((d.beamformers.total_power(), est.average))
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(Some)
            })
            .collect::<Result<_>>()?;

        let viable: Vec<&Vec<(f64, f64)>> = results.iter().flatten().collect();
        let n = viable.len();
        for (a_idx, &algorithm) in cfg.algorithms.iter().enumerate() {
            if n == 0 {
                rows.push(SweepPoint { algorithm, r, mean_power: None, mean_outage: None, stderr_outage: None, n_viable: 0 });
                continue;
            }
            let nf = n as f64;
            // Fixed index order keeps the float sums reproducible.
            let mean_power = viable.iter().map(|v| v[a_idx].0).sum::<f64>() / nf;
            let mean_outage = viable.iter().map(|v| v[a_idx].1).sum::<f64>() / nf;
            let stderr_outage = if n > 1 {
                let var = viable.iter().map(|v| (v[a_idx].1 - mean_outage).powi(2)).sum::<f64>() / (nf - 1.0);
                (var / nf).sqrt()
            } else {
                0.0
            };
            rows.push(SweepPoint {
                algorithm,
                r,
                mean_power: Some(mean_power),
                mean_outage: Some(mean_outage),
                stderr_outage: Some(stderr_outage),
                n_viable: n,
            });
        }
    }
    Ok(rows)
}
