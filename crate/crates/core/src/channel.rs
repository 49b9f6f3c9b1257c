//! Multi-user MISO scenarios: large-scale fading plus i.i.d. Rayleigh small-scale
//! fading, and the additive Gaussian channel-estimation error model
//! `h = h_est + e`, `e ~ CN(m, C)`.
//!
//! Channels are expressed relative to the receiver noise: a generated user's
//! channel is scaled by `1/σ_noise` and its `noise_power` is 1. The error
//! standard deviation `sigma_e` is in the same normalized units.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, c, CMatrix, CVector};

/// Circular complex Gaussian error model `CN(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyModel {
    mean: CVector,
    cov: CMatrix,
    cov_sqrt: CMatrix,
    iid_std: Option<f64>,
}

impl UncertaintyModel {
    /// Zero-mean, covariance `std²·I`.
    pub fn iid(n_antennas: usize, std: f64) -> Result<Self> {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(Error::InvalidModel(format!("sigma_e must be nonnegative, got {std}")));
        }
        let eye = CMatrix::identity(n_antennas, n_antennas);
        Ok(Self {
            mean: CVector::zeros(n_antennas),
            cov: eye.scale(std * std),
            cov_sqrt: eye.scale(std),
            iid_std: Some(std),
        })
    }

    /// General model. The covariance must be Hermitian within 1e-12 with
    /// eigenvalues no smaller than -1e-12.
    pub fn general(mean: CVector, cov: CMatrix) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return Err(Error::InvalidModel(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        let cov_sqrt = linalg::hermitian_psd_sqrt(&cov)?;
        Ok(Self { mean, cov, cov_sqrt, iid_std: None })
    }

    pub fn mean(&self) -> &CVector {
        &self.mean
    }

    pub fn cov(&self) -> &CMatrix {
        &self.cov
    }

    pub fn cov_sqrt(&self) -> &CMatrix {
        &self.cov_sqrt
    }

    pub fn is_iid(&self) -> bool {
        self.iid_std.is_some()
    }

    /// `σ_e` for the i.i.d. model, `None` otherwise.
    pub fn iid_std(&self) -> Option<f64> {
        self.iid_std
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `m + C^{1/2} ĝ` with `ĝ ~ CN(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CVector {
        let g = standard_complex_gaussian(self.dim(), rng);
        match self.iid_std {
            Some(s) => g * c(s, 0.0),
            None => &self.mean + &self.cov_sqrt * g,
        }
    }
}

/// Vector of i.i.d. `CN(0, 1)` entries (real and imaginary parts each of variance 1/2).
pub fn standard_complex_gaussian<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CVector {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    CVector::from_fn(n, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        c(re * s, im * s)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserChannel {
    pub h_true: CVector,
    pub h_est: CVector,
    pub uncertainty: UncertaintyModel,
    pub noise_power: f64,
    pub sinr_target: f64,
    pub outage_tolerance: f64,
    channel_norm_sq: f64,
}

impl UserChannel {
    pub fn new(
        h_true: CVector,
        h_est: CVector,
        uncertainty: UncertaintyModel,
        noise_power: f64,
        sinr_target: f64,
        outage_tolerance: f64,
    ) -> Result<Self> {
        if h_true.len() != h_est.len() || uncertainty.dim() != h_est.len() {
            return Err(Error::InvalidConfig("channel dimensions disagree".into()));
        }
        if !(sinr_target > 0.0) {
            return Err(Error::InvalidConfig(format!("SINR target must be > 0, got {sinr_target}")));
        }
        if !(noise_power > 0.0) {
            return Err(Error::InvalidConfig(format!("noise power must be > 0, got {noise_power}")));
        }
        if !(outage_tolerance > 0.0 && outage_tolerance < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "outage tolerance must lie in (0,1), got {outage_tolerance}"
            )));
        }
        let channel_norm_sq = h_est.norm_squared();
        Ok(Self { h_true, h_est, uncertainty, noise_power, sinr_target, outage_tolerance, channel_norm_sq })
    }

    /// `α_k = ‖h_est‖²`
    pub fn channel_norm_sq(&self) -> f64 {
        self.channel_norm_sq
    }

    /// `σ_e` when the error model is i.i.d.
    pub fn sigma_e(&self) -> Option<f64> {
        self.uncertainty.iid_std()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    users: Vec<UserChannel>,
    n_antennas: usize,
    pub rng_seed: u64,
}

impl Scenario {
    pub fn new(users: Vec<UserChannel>, rng_seed: u64) -> Result<Self> {
        let n_antennas = users
            .first()
            .map(|u| u.h_est.len())
            .ok_or_else(|| Error::InvalidConfig("a scenario needs at least one user".into()))?;
        if n_antennas == 0 {
            return Err(Error::InvalidConfig("need at least one antenna".into()));
        }
        if users.iter().any(|u| u.h_est.len() != n_antennas) {
            return Err(Error::InvalidConfig("users disagree on the antenna count".into()));
        }
        Ok(Self { users, n_antennas, rng_seed })
    }

    pub fn users(&self) -> &[UserChannel] {
        &self.users
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_antennas(&self) -> usize {
        self.n_antennas
    }

    pub fn h_est(&self) -> Vec<CVector> {
        self.users.iter().map(|u| u.h_est.clone()).collect()
    }

    pub fn sinr_targets(&self) -> Vec<f64> {
        self.users.iter().map(|u| u.sinr_target).collect()
    }

    pub fn noise_powers(&self) -> Vec<f64> {
        self.users.iter().map(|u| u.noise_power).collect()
    }

    /// Per-user `σ_e`; fails if any user has a non-i.i.d. error model.
    pub fn sigma_e(&self) -> Result<Vec<f64>> {
        self.users
            .iter()
            .enumerate()
            .map(|(k, u)| {
                u.sigma_e().ok_or_else(|| {
                    Error::InvalidModel(format!("user {k} has a non-i.i.d. error model"))
                })
            })
            .collect()
    }

    /// Scenario restricted to `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let users = indices
            .iter()
            .map(|&i| {
                self.users
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("user index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Scenario::new(users, self.rng_seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ScenarioDoc::from(self)).expect("scenario serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ScenarioDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    pub n_users: usize,
    pub n_antennas: usize,
    pub cell_radius_km: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { n_users: 3, n_antennas: 4, cell_radius_km: 3.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FadingConfig {
    pub path_loss_exponent: f64,
    pub shadowing_std_db: f64,
    pub noise_dbm: f64,
    /// Distance at which the path loss is 0 dB.
    pub reference_distance_m: f64,
    /// One value for every user, or one per user.
    pub sigma_e: Vec<f64>,
    pub gamma_db: f64,
    pub delta: f64,
}

impl Default for FadingConfig {
    fn default() -> Self {
        Self {
            path_loss_exponent: 3.52,
            shadowing_std_db: 8.0,
            noise_dbm: -90.0,
            reference_distance_m: 1.0,
            sigma_e: vec![0.1],
            gamma_db: 6.0,
            delta: 0.05,
        }
    }
}

impl FadingConfig {
    fn sigma_e_for(&self, k: usize) -> f64 {
        if self.sigma_e.len() == 1 {
            self.sigma_e[0]
        } else {
            self.sigma_e[k]
        }
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

/// Large-scale gain in dB at `distance_m`: `-10·n·log10(d/d_ref) + shadow`.
pub fn large_scale_gain_db(distance_m: f64, fading: &FadingConfig, shadow_db: f64) -> f64 {
    -10.0 * fading.path_loss_exponent * (distance_m / fading.reference_distance_m).log10() + shadow_db
}

/// Drops `K` users uniformly in the disc and draws their channels.
pub fn generate_scenario(geometry: &GeometryConfig, fading: &FadingConfig, seed: u64) -> Result<Scenario> {
    let k = geometry.n_users;
    let n = geometry.n_antennas;
    if k < 1 {
        return Err(Error::InvalidConfig("need at least one user".into()));
    }
    if n < 1 {
        return Err(Error::InvalidConfig("need at least one antenna".into()));
    }
    if !(geometry.cell_radius_km > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "cell radius must be positive, got {}",
            geometry.cell_radius_km
        )));
    }
    if !(fading.reference_distance_m > 0.0) {
        return Err(Error::InvalidConfig("reference distance must be positive".into()));
    }
    if fading.sigma_e.len() != 1 && fading.sigma_e.len() != k {
        return Err(Error::InvalidConfig(format!(
            "sigma_e needs 1 or {k} entries, got {}",
            fading.sigma_e.len()
        )));
    }
    if !(fading.shadowing_std_db >= 0.0) {
        return Err(Error::InvalidConfig("shadowing std must be nonnegative".into()));
    }
    let noise_w = dbm_to_watts(fading.noise_dbm);
    let gamma = db_to_linear(fading.gamma_db);
    // Positions, small-scale fading and errors use separate streams, so a
    // drop keeps its geometry (and leading antenna entries) when N_t changes.
    let mut geo_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let mut users = Vec::with_capacity(k);
    for idx in 0..k {
        let radius_m = geometry.cell_radius_km * 1e3 * geo_rng.random::<f64>().sqrt();
        let shadow_db = fading.shadowing_std_db * geo_rng.sample::<f64, _>(StandardNormal);
        let gain = db_to_linear(large_scale_gain_db(radius_m, fading, shadow_db)) / noise_w;
        let mut fade_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1 + 2 * idx as u64));
        let g = standard_complex_gaussian(n, &mut fade_rng);
        let h_true = g * c(gain.sqrt(), 0.0);
        let model = UncertaintyModel::iid(n, fading.sigma_e_for(idx))?;
        let mut err_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 + 2 * idx as u64));
        let e = model.sample(&mut err_rng);
        let h_est = &h_true - e;
        users.push(UserChannel::new(h_true, h_est, model, 1.0, gamma, fading.delta)?);
    }
    Scenario::new(users, seed)
}

/// One draw of `e_k` for `user`, deterministic in `seed`.
pub fn draw_error(user: &UserChannel, seed: u64) -> CVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    user.uncertainty.sample(&mut rng)
}

/// Users kept by the channel-strength rule `P_ref·‖h_est‖²/σ² ≥ γ`.
pub fn user_selection(scenario: &Scenario, power_reference: f64) -> Vec<usize> {
    scenario
        .users()
        .iter()
        .enumerate()
        .filter(|(_, u)| power_reference * u.channel_norm_sq() / u.noise_power >= u.sinr_target)
        .map(|(k, _)| k)
        .collect()
}

/// Order-independent per-item seed derived from a base seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(base.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(mix(index.wrapping_add(0x632b_e59b_d9b4_e019))))
}

// JSON document form

type Pair = [f64; 2];

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioDoc {
    n_antennas: usize,
    #[serde(default)]
    rng_seed: u64,
    users: Vec<UserDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct UserDoc {
    h_true: Vec<Pair>,
    h_est: Vec<Pair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_e: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error_mean: Option<Vec<Pair>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error_cov: Option<Vec<Vec<Pair>>>,
    noise_power: f64,
    gamma: f64,
    delta: f64,
}

fn to_pairs(v: &CVector) -> Vec<Pair> {
    v.iter().map(|z| [z.re, z.im]).collect()
}

fn from_pairs(p: &[Pair]) -> CVector {
    CVector::from_iterator(p.len(), p.iter().map(|&[re, im]| c(re, im)))
}

impl From<&Scenario> for ScenarioDoc {
    fn from(s: &Scenario) -> Self {
        let users = s
            .users
            .iter()
            .map(|u| {
                let (sigma_e, error_mean, error_cov) = match u.uncertainty.iid_std() {
                    Some(std) => (Some(std), None, None),
                    None => {
                        let cov = u.uncertainty.cov();
                        let rows = (0..cov.nrows())
                            .map(|i| (0..cov.ncols()).map(|j| [cov[(i, j)].re, cov[(i, j)].im]).collect())
                            .collect();
                        (None, Some(to_pairs(u.uncertainty.mean())), Some(rows))
                    }
                };
                UserDoc {
                    h_true: to_pairs(&u.h_true),
                    h_est: to_pairs(&u.h_est),
                    sigma_e,
                    error_mean,
                    error_cov,
                    noise_power: u.noise_power,
                    gamma: u.sinr_target,
                    delta: u.outage_tolerance,
                }
            })
            .collect();
        ScenarioDoc { n_antennas: s.n_antennas, rng_seed: s.rng_seed, users }
    }
}

impl TryFrom<ScenarioDoc> for Scenario {
    type Error = Error;

    fn try_from(doc: ScenarioDoc) -> Result<Self> {
        let n = doc.n_antennas;
        let mut users = Vec::with_capacity(doc.users.len());
        for (k, u) in doc.users.into_iter().enumerate() {
            if u.h_true.len() != n || u.h_est.len() != n {
                return Err(Error::InvalidConfig(format!(
                    "user {k}: channel length differs from n_antennas = {n}"
                )));
            }
            let model = match (u.sigma_e, u.error_cov) {
                (_, Some(rows)) => {
                    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                        return Err(Error::InvalidModel(format!("user {k}: error_cov must be {n}x{n}")));
                    }
                    let cov = CMatrix::from_fn(n, n, |i, j| c(rows[i][j][0], rows[i][j][1]));
                    let mean = u.error_mean.as_deref().map(from_pairs).unwrap_or_else(|| CVector::zeros(n));
                    UncertaintyModel::general(mean, cov)?
                }
                (Some(std), None) => UncertaintyModel::iid(n, std)?,
                (None, None) => {
                    return Err(Error::InvalidModel(format!("user {k}: needs sigma_e or error_cov")));
                }
            };
            users.push(UserChannel::new(
                from_pairs(&u.h_true),
                from_pairs(&u.h_est),
                model,
                u.noise_power,
                u.gamma,
                u.delta,
            )?);
        }
        Scenario::new(users, doc.rng_seed)
    }
}
