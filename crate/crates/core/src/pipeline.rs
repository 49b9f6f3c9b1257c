//! End-to-end design pipelines selected by algorithm id.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channel::Scenario;
use crate::directions::{self, Alg1Options, FixedPointOptions};
use crate::error::{Error, Result};
use crate::linalg::{self, CVector};
use crate::powerload::{self, Alg2Options, CouplingMatrix, Design, DesignReport, VarianceMode};
use crate::stats::BeamformerSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Zero-forcing directions, robust loading.
    Zf,
    Mrt,
    Rzf,
    /// Iterative closed-form robust design.
    Alg1,
    /// Constant-offset directions, robust loading.
    ConstOffset,
    /// Constant-offset directions, maximum common offset under the budget.
    #[serde(rename = "maxr")]
    MaxR,
    #[serde(rename = "maxr_reschedule")]
    MaxRReschedule,
    /// Rescheduling plus the offset cap.
    #[serde(rename = "maxr_powersave")]
    MaxRPowersave,
    /// Max-r followed by the average-outage perturbation.
    AvgOutage,
}

impl Algorithm {
    pub const ALL: [Algorithm; 9] = [
        Algorithm::Zf,
        Algorithm::Mrt,
        Algorithm::Rzf,
        Algorithm::Alg1,
        Algorithm::ConstOffset,
        Algorithm::MaxR,
        Algorithm::MaxRReschedule,
        Algorithm::MaxRPowersave,
        Algorithm::AvgOutage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Zf => "zf",
            Algorithm::Mrt => "mrt",
            Algorithm::Rzf => "rzf",
            Algorithm::Alg1 => "alg1",
            Algorithm::ConstOffset => "const_offset",
            Algorithm::MaxR => "maxr",
            Algorithm::MaxRReschedule => "maxr_reschedule",
            Algorithm::MaxRPowersave => "maxr_powersave",
            Algorithm::AvgOutage => "avg_outage",
        }
    }

    /// Whether the design spends a fixed budget instead of meeting a given offset.
    pub fn is_budgeted(self) -> bool {
        matches!(self, Algorithm::MaxR | Algorithm::MaxRReschedule | Algorithm::MaxRPowersave | Algorithm::AvgOutage)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown algorithm '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignParams {
    /// Common offset for the offset-driven algorithms.
    pub r: f64,
    /// Total power budget for the budgeted algorithms (Watts, noise-normalized).
    pub pt: f64,
    /// Rescheduling threshold.
    pub r_min: f64,
    /// Offset cap of the power-saving variant.
    pub r_cap: f64,
    /// Diagonal loading of RZF; defaults to `K/P_t`.
    pub rzf_loading: Option<f64>,
    pub variance_mode: Option<VarianceMode>,
    pub alg1_refinements: usize,
    pub refine_perturbation: bool,
    pub alg2: Alg2Options,
    pub fixed_point: FixedPointOptions,
}

impl Default for DesignParams {
    fn default() -> Self {
        Self {
            r: 2.0,
            pt: 1.0,
            r_min: 2.0,
            r_cap: 5.0,
            rzf_loading: None,
            variance_mode: None,
            alg1_refinements: 0,
            refine_perturbation: false,
            alg2: Alg2Options::default(),
            fixed_point: FixedPointOptions::default(),
        }
    }
}

pub fn design(algorithm: Algorithm, scenario: &Scenario, params: &DesignParams) -> Result<Design> {
    let h = scenario.h_est();
    let gamma = scenario.sinr_targets();
    let sigma_e = scenario.sigma_e()?;
    let noise = scenario.noise_powers();
    let k = h.len();
    let mode = params.variance_mode.unwrap_or_else(|| VarianceMode::default_for(scenario.n_antennas()));
    let offsets = vec![params.r; k];

    let load = |dirs: Vec<CVector>| -> Result<Design> {
        let cm = powerload::coupling_matrix(&h, &dirs, &gamma, &sigma_e)?;
        let report = powerload::alg2_power_load(&cm, &noise, &offsets, mode, params.alg2)?;
        finish(dirs, report)
    };

    match algorithm {
        Algorithm::Zf => load(directions::zf_directions(&h)?),
        Algorithm::Mrt => load(directions::mrt_directions(&h)?),
        Algorithm::Rzf => {
            let loading = params.rzf_loading.unwrap_or(k as f64 / params.pt);
            load(directions::rzf_directions(&h, loading)?)
        }
        Algorithm::ConstOffset => load(directions::constant_offset_design_directions(&h, &gamma)?),
        Algorithm::Alg1 => {
            let opts = Alg1Options {
                refinements: params.alg1_refinements,
                fixed_point: params.fixed_point,
                variance_mode: Some(mode),
                alg2: params.alg2,
            };
            directions::alg1_design(scenario, &offsets, opts)
        }
        Algorithm::MaxRReschedule | Algorithm::MaxRPowersave => {
            let (kept, dirs, cm) = schedulable_geometry(&h, &gamma, &sigma_e)?;
            let sub_noise: Vec<f64> = kept.iter().map(|&i| noise[i]).collect();
            let inner = if algorithm == Algorithm::MaxRReschedule {
                powerload::reschedule(&cm, &sub_noise, params.pt, params.r_min, mode, params.alg2)?
            } else {
                powerload::reschedule_with_cap(&cm, &sub_noise, params.pt, params.r_min, params.r_cap, mode, params.alg2)?
            };
            let inner_dropped: Vec<usize> = inner.report.rescheduled.iter().map(|&i| kept[i]).collect();
            let mut report = inner.report.expand(&kept, k, &noise);
            report.rescheduled.extend(inner_dropped);
            report.rescheduled.sort_unstable();
            // Users removed for geometry carry zero power; any unit direction will do.
            let mut all_dirs: Vec<CVector> = h.iter().map(|v| linalg::normalized(v).unwrap_or_else(|| v.clone())).collect();
            for (pos, &i) in kept.iter().enumerate() {
                all_dirs[i] = dirs[pos].clone();
            }
            finish(all_dirs, report)
        }
        Algorithm::MaxR | Algorithm::AvgOutage => {
            let dirs = directions::constant_offset_design_directions(&h, &gamma)?;
            let cm = powerload::coupling_matrix(&h, &dirs, &gamma, &sigma_e)?;
            let report = match algorithm {
                Algorithm::MaxR => powerload::max_r_power_load(&cm, &noise, params.pt, mode, params.alg2)?.report,
                _ => {
                    let out = powerload::max_r_power_load(&cm, &noise, params.pt, mode, params.alg2)?;
                    if out.report.unbounded_offset {
                        out.report
                    } else {
                        let sf: Vec<f64> = out.report.achieved_stats.iter().map(|s| s.sigma).collect();
                        let fit = powerload::default_cdf_fit();
                        powerload::average_outage_perturbation(&cm, &out.report.powers, &sf, &noise, out.r, fit, mode, params.refine_perturbation)?.report
                    }
                }
            };
            finish(dirs, report)
        }
    }
}

/// Constant-offset directions and coupling for the largest user set found by
/// greedy removal: while the directions or the coupling matrix cannot be
/// formed (near-identical channels), drop the weaker user of the most
/// correlated pair. Returns the kept indices in increasing order.
fn schedulable_geometry(h: &[CVector], gamma: &[f64], sigma_e: &[f64]) -> Result<(Vec<usize>, Vec<CVector>, CouplingMatrix)> {
    let mut kept: Vec<usize> = (0..h.len()).collect();
    loop {
        let hs: Vec<CVector> = kept.iter().map(|&i| h[i].clone()).collect();
        let gs: Vec<f64> = kept.iter().map(|&i| gamma[i]).collect();
        let ss: Vec<f64> = kept.iter().map(|&i| sigma_e[i]).collect();
        let attempt = directions::constant_offset_design_directions(&hs, &gs)
            .and_then(|dirs| powerload::coupling_matrix(&hs, &dirs, &gs, &ss).map(|cm| (dirs, cm)));
        match attempt {
            Ok((dirs, cm)) => return Ok((kept, dirs, cm)),
            Err(e @ (Error::Convergence { .. } | Error::DegenerateChannels(_) | Error::DegenerateGeometry(_))) => {
                if kept.len() == 1 {
                    return Err(e);
                }
                let mut worst = (0, 1, f64::NEG_INFINITY);
                for a in 0..hs.len() {
                    for b in a + 1..hs.len() {
                        let corr = linalg::inner(&hs[a], &hs[b]).norm() / (hs[a].norm() * hs[b].norm());
                        if corr > worst.2 {
                            worst = (a, b, corr);
                        }
                    }
                }
                let (a, b, _) = worst;
                let drop = if hs[a].norm_squared() < hs[b].norm_squared() { a } else { b };
                kept.remove(drop);
            }
            Err(e) => return Err(e),
        }
    }
}

fn finish(dirs: Vec<CVector>, report: DesignReport) -> Result<Design> {
    if let Some(k) = report.powers.iter().position(|&b| b < 0.0) {
        return Err(Error::InfeasibleLoading { users: vec![k], powers: report.powers });
    }
    let beamformers = BeamformerSet::new(dirs, report.powers.clone())?;
    Ok(Design { beamformers, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_scenario, FadingConfig, GeometryConfig};

    #[test]
    fn ids_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.as_str().parse::<Algorithm>().unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.as_str()));
        }
        assert!("sdp".parse::<Algorithm>().is_err());
    }

    #[test]
    fn every_algorithm_designs_a_strong_scenario() {
        let fading = FadingConfig { shadowing_std_db: 0.0, ..FadingConfig::default() };
        let geometry = GeometryConfig { cell_radius_km: 0.3, ..GeometryConfig::default() };
        let scenario = generate_scenario(&geometry, &fading, 11).unwrap();
        let params = DesignParams { pt: 50.0, ..DesignParams::default() };
        for a in Algorithm::ALL {
            let d = match design(a, &scenario, &params) {
                // MRT leaves interference in place; at r = 2 it may have no loading.
                Err(Error::InfeasibleLoading { .. } | Error::Convergence { .. }) if a == Algorithm::Mrt => continue,
                other => other.unwrap_or_else(|e| panic!("{a}: {e}")),
            };
            assert_eq!(d.beamformers.len(), 3);
            assert!(d.report.total_power > 0.0, "{a}");
            if a.is_budgeted() && a != Algorithm::MaxRPowersave {
                assert!((d.report.total_power - 50.0).abs() < 1e-9, "{a}");
            }
        }
    }

    #[test]
    fn identical_users_are_rescheduled() {
        use crate::channel::{UncertaintyModel, UserChannel};
        use crate::linalg::c;
        let a = CVector::from_vec(vec![c(3.0, 0.0), c(1.0, 1.0), c(0.0, -2.0)]);
        let b = CVector::from_vec(vec![c(0.5, 0.0), c(-2.0, 0.5), c(1.0, 3.0)]);
        let user = |h: &CVector| UserChannel::new(h.clone(), h.clone(), UncertaintyModel::iid(3, 0.05).unwrap(), 1.0, 4.0, 0.05).unwrap();
        let scenario = Scenario::new(vec![user(&a), user(&a), user(&b)], 0).unwrap();
        let params = DesignParams { pt: 50.0, ..DesignParams::default() };
        assert!(design(Algorithm::MaxR, &scenario, &params).is_err());
        for alg in [Algorithm::MaxRReschedule, Algorithm::MaxRPowersave] {
            let d = design(alg, &scenario, &params).unwrap();
            assert_eq!(d.report.rescheduled, vec![1], "{alg}");
            assert_eq!(d.report.powers[1], 0.0);
            assert!(d.report.total_power <= 50.0 + 1e-9);
        }
    }
}
