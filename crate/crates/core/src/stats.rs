//! Statistics of the SINR slack variable
//!
//! `f_k(e) = h_eᴴQ_k h_e + 2Re(eᴴQ_k h_e) + eᴴQ_k e − σ_k²`,
//! `Q_k = β_k u_k u_kᴴ/γ_k − Σ_{j≠k} β_j u_j u_jᴴ`,
//!
//! whose sign is the sign of `SINR_k − γ_k` for the realized channel
//! `h = h_e + e`. The offset rule replaces the outage constraint with
//! `μ_f ≥ r σ_f`.

use libm::erfc;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::channel::UserChannel;
use crate::error::{Error, Result};
use crate::linalg::{self, c, CMatrix, CVector, ZERO};

/// Unit-norm directions with nonnegative powers; `w_k = √β_k u_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerSet {
    directions: Vec<CVector>,
    powers: Vec<f64>,
}

impl BeamformerSet {
    pub fn new(directions: Vec<CVector>, powers: Vec<f64>) -> Result<Self> {
        if directions.len() != powers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} directions but {} powers",
                directions.len(),
                powers.len()
            )));
        }
        if let Some(k) = directions.iter().position(|u| (u.norm() - 1.0).abs() > 1e-9) {
            return Err(Error::InvalidArgument(format!("direction {k} is not unit norm")));
        }
        if let Some(k) = powers.iter().position(|&b| !(b >= 0.0)) {
            return Err(Error::InvalidArgument(format!("power {k} is negative or NaN")));
        }
        Ok(Self { directions, powers })
    }

    /// Builds the set from beamformers `w_k`; a zero beamformer keeps a
    /// placeholder direction `e_1` with zero power.
    pub fn from_weights(weights: &[CVector]) -> Self {
        let mut directions = Vec::with_capacity(weights.len());
        let mut powers = Vec::with_capacity(weights.len());
        for w in weights {
            let p = w.norm_squared();
            let u = linalg::normalized(w).unwrap_or_else(|| {
                let mut e = CVector::zeros(w.len());
                e[0] = c(1.0, 0.0);
                e
            });
            directions.push(u);
            powers.push(p);
        }
        Self { directions, powers }
    }

    pub fn directions(&self) -> &[CVector] {
        &self.directions
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    pub fn len(&self) -> usize {
        self.powers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.powers.is_empty()
    }

    pub fn total_power(&self) -> f64 {
        self.powers.iter().sum()
    }

    pub fn weight(&self, k: usize) -> CVector {
        &self.directions[k] * c(self.powers[k].sqrt(), 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetStats {
    pub mu: f64,
    pub sigma: f64,
}

impl OffsetStats {
    /// `μ_f / σ_f`, the offset actually achieved (±∞ when σ_f = 0).
    pub fn achieved_offset(&self) -> f64 {
        if self.sigma > 0.0 {
            self.mu / self.sigma
        } else if self.mu >= 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Coefficient of `β_j u_j u_jᴴ` in `Q_k`.
#[inline]
fn q_coeff(j: usize, k: usize, gamma_k: f64) -> f64 {
    if j == k {
        1.0 / gamma_k
    } else {
        -1.0
    }
}

pub fn q_matrix(beamformers: &BeamformerSet, k: usize, gamma_k: f64) -> CMatrix {
    let n = beamformers.directions[0].len();
    let mut q = CMatrix::zeros(n, n);
    for (j, (u, &beta)) in beamformers.directions.iter().zip(&beamformers.powers).enumerate() {
        let s = q_coeff(j, k, gamma_k) * beta;
        q.ger(c(s, 0.0), u, &u.conjugate(), c(1.0, 0.0));
    }
    q
}

/// `xᴴ M y` without temporaries.
pub fn bilinear(x: &CVector, m: &CMatrix, y: &CVector) -> Complex64 {
    let n = x.len();
    let mut acc = ZERO;
    for i in 0..n {
        let mut row = ZERO;
        for j in 0..n {
            row += m[(i, j)] * y[j];
        }
        acc += x[i].conj() * row;
    }
    acc
}

/// `f_k(e)`; nonnegative iff `SINR_k(h_e + e) ≥ γ_k`.
pub fn slack_value(q: &CMatrix, h_e: &CVector, e: &CVector, noise_power: f64) -> f64 {
    bilinear(h_e, q, h_e).re + 2.0 * bilinear(e, q, h_e).re + bilinear(e, q, e).re - noise_power
}

/// SINR of user `k` over channel `h`.
pub fn sinr(h: &CVector, beamformers: &BeamformerSet, k: usize, noise_power: f64) -> f64 {
    let mut signal = 0.0;
    let mut interference = 0.0;
    for (j, (u, &beta)) in beamformers.directions.iter().zip(&beamformers.powers).enumerate() {
        let g = linalg::inner(h, u).norm_sqr() * beta;
        if j == k {
            signal = g;
        } else {
            interference += g;
        }
    }
    signal / (interference + noise_power)
}

/// Mean and standard deviation of `f_k` under `e ~ CN(m, C)`:
///
/// `μ_f = (h_e+m)ᴴQ(h_e+m) − σ² + tr(QC)`,
/// `σ_f² = 2(h_e+m)ᴴ Q C Q (h_e+m) + tr((C^{1/2} Q C^{1/2})²)`.
///
/// `tr(QC) = w_kᴴCw_k/γ_k − Σ_{j≠k} w_jᴴCw_j`. With `C = σ_e²I` these reduce to the
/// i.i.d. expressions.
pub fn offset_stats_general(beamformers: &BeamformerSet, k: usize, user: &UserChannel) -> Result<OffsetStats> {
    let n = user.h_est.len();
    if beamformers.directions.iter().any(|u| u.len() != n) {
        return Err(Error::InvalidArgument("beamformer and channel dimensions disagree".into()));
    }
    let model = &user.uncertainty;
    let q = q_matrix(beamformers, k, user.sinr_target);
    let shifted = &user.h_est + model.mean();

    let mut tr_qc = 0.0;
    for (j, (u, &beta)) in beamformers.directions.iter().zip(&beamformers.powers).enumerate() {
        tr_qc += q_coeff(j, k, user.sinr_target) * beta * bilinear(u, model.cov(), u).re;
    }
    let mu = bilinear(&shifted, &q, &shifted).re - user.noise_power + tr_qc;

    let a = model.cov_sqrt() * (&q * &shifted);
    let b = model.cov_sqrt() * &q * model.cov_sqrt();
    let var = 2.0 * a.norm_squared() + b.norm_squared();
    Ok(OffsetStats { mu, sigma: var.max(0.0).sqrt() })
}

/// i.i.d. error `CN(0, σ_e²I)`:
/// `μ_f = h_eᴴQh_e − σ² + σ_e²(β_k/γ_k − Σ_{j≠k}β_j)`,
/// `σ_f² = 2σ_e² h_eᴴQ²h_e + σ_e⁴ tr(Q²)`.
pub fn offset_stats_iid(
    beamformers: &BeamformerSet,
    k: usize,
    h_e: &CVector,
    gamma_k: f64,
    noise_power: f64,
    sigma_e: f64,
) -> OffsetStats {
    let q = q_matrix(beamformers, k, gamma_k);
    let power_term: f64 = beamformers
        .powers
        .iter()
        .enumerate()
        .map(|(j, &b)| q_coeff(j, k, gamma_k) * b)
        .sum();
    let s2 = sigma_e * sigma_e;
    let mu = bilinear(h_e, &q, h_e).re - noise_power + s2 * power_term;
    let qh = &q * h_e;
    let var = 2.0 * s2 * qh.norm_squared() + s2 * s2 * q.norm_squared();
    OffsetStats { mu, sigma: var.max(0.0).sqrt() }
}

/// Fixed directions `u_j` and powers `β`. The mean is linear in `β`; the
/// variance is evaluated through `Q h_e = Σ_j c_j β_j (u_jᴴh_e) u_j` and
/// `tr(Q²) = Σ_{ij} c_i c_j β_i β_j |u_iᴴu_j|²` without forming `Q`.
pub fn offset_stats_fixed_directions(
    h_e: &CVector,
    directions: &[CVector],
    k: usize,
    gamma_k: f64,
    noise_power: f64,
    sigma_e: f64,
    powers: &[f64],
) -> OffsetStats {
    let s2 = sigma_e * sigma_e;
    let coeff: Vec<f64> = (0..directions.len()).map(|j| q_coeff(j, k, gamma_k) * powers[j]).collect();
    let proj: Vec<Complex64> = directions.iter().map(|u| linalg::inner(u, h_e)).collect();

    let mu = coeff.iter().zip(&proj).map(|(a, p)| a * p.norm_sqr()).sum::<f64>() - noise_power
        + s2 * coeff.iter().sum::<f64>();

    let mut qh = CVector::zeros(h_e.len());
    for (j, u) in directions.iter().enumerate() {
        qh.axpy(proj[j] * coeff[j], u, c(1.0, 0.0));
    }
    let mut tr_q2 = 0.0;
    for i in 0..directions.len() {
        for j in 0..directions.len() {
            tr_q2 += coeff[i] * coeff[j] * linalg::inner(&directions[i], &directions[j]).norm_sqr();
        }
    }
    let var = 2.0 * s2 * qh.norm_squared() + s2 * s2 * tr_q2;
    OffsetStats { mu, sigma: var.max(0.0).sqrt() }
}

/// Variance with the direction cross terms `u_jᴴu_k` (j≠k) dropped. `gains[j]`
/// is `|h_e_kᴴu_j|²`. Cost is O(K).
pub fn offset_var_simplified(powers: &[f64], k: usize, gamma_k: f64, sigma_e: f64, gains: &[f64]) -> f64 {
    let s2 = sigma_e * sigma_e;
    let mut linear = 0.0;
    let mut quartic = 0.0;
    for (j, (&beta, &g)) in powers.iter().zip(gains).enumerate() {
        let b2 = if j == k { beta * beta / (gamma_k * gamma_k) } else { beta * beta };
        linear += g * b2;
        quartic += b2;
    }
    2.0 * s2 * linear + s2 * s2 * quartic
}

/// How an outage tolerance δ maps to an offset coefficient r.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OffsetRule {
    /// `r = √(1/δ − 1)`: a safe bound for any distribution.
    Cantelli,
    /// `Q(r) = δ`: exact if `f_k` were Gaussian.
    #[default]
    Gaussian,
}

pub fn r_from_delta(delta: f64, rule: OffsetRule) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("outage tolerance must lie in (0,1), got {delta}")));
    }
    Ok(match rule {
        OffsetRule::Cantelli => (1.0 / delta - 1.0).sqrt(),
        OffsetRule::Gaussian => standard_normal().inverse_cdf(1.0 - delta),
    })
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid standard normal")
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Gaussian tail `Q(x) = ½ erfc(x/√2)`.
pub fn gaussian_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Gaussian-approximation outage `Q(μ_f/σ_f)`.
pub fn predicted_outage(stats: &OffsetStats) -> f64 {
    if stats.sigma > 0.0 {
        gaussian_tail(stats.mu / stats.sigma)
    } else if stats.mu >= 0.0 {
        0.0
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::UncertaintyModel;
    use crate::linalg::real_vector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn e(n: usize, i: usize) -> CVector {
        let mut v = CVector::zeros(n);
        v[i] = c(1.0, 0.0);
        v
    }

    fn random_set(k: usize, n: usize, seed: u64) -> BeamformerSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dirs = (0..k)
            .map(|_| linalg::normalized(&crate::channel::standard_complex_gaussian(n, &mut rng)).unwrap())
            .collect();
        let powers = (0..k).map(|j| 0.5 + j as f64).collect();
        BeamformerSet::new(dirs, powers).unwrap()
    }

    #[test]
    fn q_single_user() {
        let bf = BeamformerSet::new(vec![e(2, 0)], vec![1.0]).unwrap();
        let q = q_matrix(&bf, 0, 1.0);
        let expect = CMatrix::from_diagonal(&real_vector(&[1.0, 0.0]));
        assert!((q - expect).norm() < 1e-15);
    }

    #[test]
    fn q_two_users() {
        let bf = BeamformerSet::new(vec![e(2, 0), e(2, 1)], vec![1.0, 1.0]).unwrap();
        let q = q_matrix(&bf, 0, 2.0);
        let expect = CMatrix::from_diagonal(&real_vector(&[0.5, -1.0]));
        assert!((q - expect).norm() < 1e-15);
    }

    #[test]
    fn q_matches_elementwise_rank_one_sum() {
        let bf = random_set(3, 4, 11);
        let gamma = 2.5;
        for k in 0..3 {
            let q = q_matrix(&bf, k, gamma);
            for a in 0..4 {
                for b in 0..4 {
                    let mut want = ZERO;
                    for j in 0..3 {
                        let s = if j == k { bf.powers[j] / gamma } else { -bf.powers[j] };
                        want += bf.directions[j][a] * bf.directions[j][b].conj() * s;
                    }
                    assert!((q[(a, b)] - want).norm() < 1e-12);
                }
            }
            assert!(linalg::hermitian_deviation(&q) < 1e-15);
        }
    }

    #[test]
    fn slack_hand_values() {
        let q = CMatrix::from_diagonal(&real_vector(&[1.0, -1.0]));
        let h = e(2, 0);
        assert!((slack_value(&q, &h, &e(2, 1), 0.0) - 0.0).abs() < 1e-15);
        assert!((slack_value(&q, &h, &CVector::zeros(2), 0.3) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn slack_sign_matches_sinr() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..200 {
            let bf = random_set(3, 4, 100 + trial);
            let h_e = crate::channel::standard_complex_gaussian(4, &mut rng) * c(2.0, 0.0);
            let err = crate::channel::standard_complex_gaussian(4, &mut rng) * c(0.5, 0.0);
            let gamma = 0.3;
            let noise = 0.2;
            for k in 0..3 {
                let q = q_matrix(&bf, k, gamma);
                let f = slack_value(&q, &h_e, &err, noise);
                let s = sinr(&(&h_e + &err), &bf, k, noise);
                if (s - gamma).abs() > 1e-9 {
                    assert_eq!(f >= 0.0, s >= gamma, "trial {trial} user {k}");
                }
            }
        }
    }

    fn iid_user(h: CVector, gamma: f64, noise: f64, sigma_e: f64) -> UserChannel {
        let n = h.len();
        UserChannel::new(h.clone(), h, UncertaintyModel::iid(n, sigma_e).unwrap(), noise, gamma, 0.1).unwrap()
    }

    #[test]
    fn degenerate_uncertainty() {
        let bf = random_set(3, 4, 5);
        let h = real_vector(&[1.0, 0.5, -0.2, 0.3]);
        let user = UserChannel::new(
            h.clone(),
            h.clone(),
            UncertaintyModel::general(CVector::zeros(4), CMatrix::zeros(4, 4)).unwrap(),
            0.4,
            2.0,
            0.1,
        )
        .unwrap();
        let s = offset_stats_general(&bf, 1, &user).unwrap();
        let q = q_matrix(&bf, 1, 2.0);
        assert!((s.mu - (bilinear(&h, &q, &h).re - 0.4)).abs() < 1e-14);
        assert_eq!(s.sigma, 0.0);
    }

    #[test]
    fn iid_hand_values() {
        // Q = diag(1, -1) realized by u1=e1, u2=e2, β=(1,1), γ_1=1.
        let bf = BeamformerSet::new(vec![e(2, 0), e(2, 1)], vec![1.0, 1.0]).unwrap();
        let h = e(2, 0);
        let s = offset_stats_iid(&bf, 0, &h, 1.0, 0.1, 0.0);
        assert!((s.mu - 0.9).abs() < 1e-15);
        assert_eq!(s.sigma, 0.0);
        let s = offset_stats_iid(&bf, 0, &h, 1.0, 0.1, 0.1);
        assert!((s.sigma * s.sigma - 0.0202).abs() < 1e-15);
    }

    #[test]
    fn fixed_direction_hand_values() {
        let h = e(3, 0);
        let s = offset_stats_fixed_directions(&h, std::slice::from_ref(&h), 0, 1.0, 0.3, 0.1, &[0.0]);
        assert!((s.mu + 0.3).abs() < 1e-15 && s.sigma == 0.0);
        let s = offset_stats_fixed_directions(&h, std::slice::from_ref(&h), 0, 1.0, 0.3, 0.1, &[1.0]);
        assert!((s.sigma * s.sigma - 0.0201).abs() < 1e-15);
    }

    #[test]
    fn specialization_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..20 {
            let bf = random_set(3, 4, seed);
            let h = crate::channel::standard_complex_gaussian(4, &mut rng) * c(3.0, 0.0);
            let user = iid_user(h.clone(), 1.7, 0.6, 0.13);
            let cov = CMatrix::identity(4, 4).scale(0.13 * 0.13);
            let general_user = UserChannel::new(
                h.clone(),
                h.clone(),
                UncertaintyModel::general(CVector::zeros(4), cov).unwrap(),
                0.6,
                1.7,
                0.1,
            )
            .unwrap();
            for k in 0..3 {
                let g = offset_stats_general(&bf, k, &general_user).unwrap();
                let i = offset_stats_iid(&bf, k, &user.h_est, 1.7, 0.6, 0.13);
                let f = offset_stats_fixed_directions(&h, bf.directions(), k, 1.7, 0.6, 0.13, bf.powers());
                let scale = 1.0 + i.mu.abs();
                assert!((g.mu - i.mu).abs() < 1e-12 * scale);
                assert!((g.sigma - i.sigma).abs() < 1e-12 * (1.0 + i.sigma));
                assert!((f.mu - i.mu).abs() < 1e-12 * scale);
                assert!((f.sigma - i.sigma).abs() < 1e-12 * (1.0 + i.sigma));
            }
        }
    }

    #[test]
    fn simplified_variance_exact_for_orthogonal_directions() {
        let dirs: Vec<CVector> = (0..3).map(|j| e(4, j)).collect();
        let h = CVector::from_vec(vec![c(1.0, 0.5), c(-0.3, 0.2), c(0.7, 0.0), c(0.1, -0.4)]);
        let powers = [0.8, 1.3, 0.4];
        for k in 0..3 {
            let gains: Vec<f64> = dirs.iter().map(|u| linalg::inner(&h, u).norm_sqr()).collect();
            let exact = offset_stats_fixed_directions(&h, &dirs, k, 2.0, 1.0, 0.1, &powers);
            let approx = offset_var_simplified(&powers, k, 2.0, 0.1, &gains);
            assert!((approx - exact.sigma.powi(2)).abs() < 1e-12);
            assert_eq!(offset_var_simplified(&[0.0; 3], k, 2.0, 0.1, &gains), 0.0);
        }
    }

    #[test]
    fn scale_covariance_in_power() {
        let bf = random_set(3, 4, 8);
        let h = real_vector(&[1.0, 2.0, -1.0, 0.5]);
        let scaled = BeamformerSet::new(bf.directions.clone(), bf.powers.iter().map(|b| b * 3.0).collect()).unwrap();
        for k in 0..3 {
            let a = offset_stats_iid(&bf, k, &h, 2.0, 0.7, 0.1);
            let b = offset_stats_iid(&scaled, k, &h, 2.0, 0.7, 0.1);
            assert!(((b.mu + 0.7) - 3.0 * (a.mu + 0.7)).abs() < 1e-12);
            assert!((b.sigma - 3.0 * a.sigma).abs() < 1e-12);
        }
    }

    #[test]
    fn offset_rules() {
        assert!((r_from_delta(0.1, OffsetRule::Cantelli).unwrap() - 3.0).abs() < 1e-14);
        assert!(r_from_delta(0.5, OffsetRule::Gaussian).unwrap().abs() < 1e-12);
        // Bisection on the erfc tail, independent of the quantile routine.
        let (mut lo, mut hi) = (0.0f64, 10.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gaussian_tail(mid) > 0.02275 { lo = mid } else { hi = mid }
        }
        let r = r_from_delta(0.02275, OffsetRule::Gaussian).unwrap();
        assert!((r - lo).abs() < 1e-8);
        assert!((r - 2.0).abs() < 1e-3);
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(r_from_delta(bad, OffsetRule::Gaussian), Err(Error::InvalidArgument(_))));
            assert!(r_from_delta(bad, OffsetRule::Cantelli).is_err());
        }
    }

    #[test]
    fn predicted_outage_values() {
        assert!((predicted_outage(&OffsetStats { mu: 0.0, sigma: 1.0 }) - 0.5).abs() < 1e-15);
        assert!((predicted_outage(&OffsetStats { mu: 2.0, sigma: 1.0 }) - 0.022750131948179).abs() < 1e-12);
        assert_eq!(predicted_outage(&OffsetStats { mu: 1.0, sigma: 0.0 }), 0.0);
        assert_eq!(predicted_outage(&OffsetStats { mu: -1.0, sigma: 0.0 }), 1.0);
        // Deep tail stays accurate.
        let t = gaussian_tail(8.0);
        assert!((t - 6.220960574271785e-16).abs() < 1e-25);
    }

    #[test]
    fn beamformer_set_validation() {
        assert!(BeamformerSet::new(vec![real_vector(&[2.0, 0.0])], vec![1.0]).is_err());
        assert!(BeamformerSet::new(vec![e(2, 0)], vec![-1.0]).is_err());
        let bf = BeamformerSet::from_weights(&[real_vector(&[0.0, 2.0]), CVector::zeros(2)]);
        assert!((bf.powers()[0] - 4.0).abs() < 1e-15);
        assert_eq!(bf.powers()[1], 0.0);
        assert!((bf.weight(0) - real_vector(&[0.0, 2.0])).norm() < 1e-15);
    }
}
