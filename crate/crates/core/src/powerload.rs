//! Robust power loading for fixed beamforming directions.
//!
//! With the directions fixed, the offset constraints `μ_f = r ⊙ σ_f` read
//! `Aβ = σ² + σ_f ⊙ r` where
//!
//! ```text
//! A_ii = |h_iᴴu_i|²/γ_i + σ_e_i²/γ_i,      A_ij = −|h_iᴴu_j|² − σ_e_i²  (i ≠ j).
//! ```
//!
//! Because `σ_f` depends on `β`, the loading is found by the fixed-point
//! iteration `β ← A⁻¹σ² + A⁻¹(σ_f(β) ⊙ r)`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CVector};
use crate::stats::{self, BeamformerSet, OffsetStats};

/// How `σ_f` is evaluated inside the loading iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMode {
    /// Full fixed-direction variance including direction cross terms.
    Exact,
    /// Cross terms `u_jᴴu_k` dropped; O(K) per user from cached gains.
    Simplified,
}

impl VarianceMode {
    pub fn default_for(n_antennas: usize) -> Self {
        if n_antennas <= 16 {
            VarianceMode::Exact
        } else {
            VarianceMode::Simplified
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    a: DMatrix<f64>,
    a_inv: DMatrix<f64>,
    /// `h_iᴴu_j`
    cross: DMatrix<Complex64>,
    /// `u_iᴴu_j`
    gram: DMatrix<Complex64>,
    gamma: Vec<f64>,
    sigma_e: Vec<f64>,
}

/// Reciprocal condition number below which `A` counts as singular.
const SINGULAR_RCOND: f64 = 1e-13;

pub fn coupling_matrix(h: &[CVector], directions: &[CVector], gamma: &[f64], sigma_e: &[f64]) -> Result<CouplingMatrix> {
    let k = h.len();
    if k == 0 || directions.len() != k || gamma.len() != k || sigma_e.len() != k {
        return Err(Error::InvalidArgument("per-user inputs have inconsistent lengths".into()));
    }
    if let Some(j) = directions.iter().position(|u| (u.norm() - 1.0).abs() > 1e-9) {
        return Err(Error::InvalidArgument(format!("direction {j} is not unit norm")));
    }
    let cross = DMatrix::from_fn(k, k, |i, j| linalg::inner(&h[i], &directions[j]));
    let gram = DMatrix::from_fn(k, k, |i, j| linalg::inner(&directions[i], &directions[j]));
    CouplingMatrix::from_parts(cross, gram, gamma.to_vec(), sigma_e.to_vec())
}

impl CouplingMatrix {
    fn from_parts(cross: DMatrix<Complex64>, gram: DMatrix<Complex64>, gamma: Vec<f64>, sigma_e: Vec<f64>) -> Result<Self> {
        let k = gamma.len();
        let a = DMatrix::from_fn(k, k, |i, j| {
            let s2 = sigma_e[i] * sigma_e[i];
            let g = cross[(i, j)].norm_sqr();
            if i == j {
                (g + s2) / gamma[i]
            } else {
                -g - s2
            }
        });
        let a_inv = linalg::checked_inverse(&a, SINGULAR_RCOND)
            .ok_or_else(|| Error::DegenerateGeometry("coupling matrix is singular (near-identical users?)".into()))?;
        Ok(Self { a, a_inv, cross, gram, gamma, sigma_e })
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn a_inv(&self) -> &DMatrix<f64> {
        &self.a_inv
    }

    /// `|h_iᴴu_j|²`
    pub fn gain(&self, i: usize, j: usize) -> f64 {
        self.cross[(i, j)].norm_sqr()
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn sigma_e(&self) -> &[f64] {
        &self.sigma_e
    }

    /// Coupling matrix of the sub-problem on `keep` (same directions).
    pub fn restrict(&self, keep: &[usize]) -> Result<Self> {
        let m = keep.len();
        if m == 0 || keep.iter().any(|&i| i >= self.len()) {
            return Err(Error::InvalidArgument("invalid user subset".into()));
        }
        let cross = DMatrix::from_fn(m, m, |i, j| self.cross[(keep[i], keep[j])]);
        let gram = DMatrix::from_fn(m, m, |i, j| self.gram[(keep[i], keep[j])]);
        let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self::from_parts(cross, gram, pick(&self.gamma), pick(&self.sigma_e))
    }

    /// `μ_f = Aβ − σ²`.
    pub fn means(&self, beta: &[f64], noise: &[f64]) -> Vec<f64> {
        let ab = &self.a * DVector::from_column_slice(beta);
        ab.iter().zip(noise).map(|(x, s)| x - s).collect()
    }

    fn coeff(&self, k: usize, j: usize, beta: &[f64]) -> f64 {
        if j == k {
            beta[j] / self.gamma[k]
        } else {
            -beta[j]
        }
    }

    /// `σ_f²` of user `k` with all cross terms, from the cached inner products.
    pub fn variance_exact(&self, k: usize, beta: &[f64]) -> f64 {
        let s2 = self.sigma_e[k] * self.sigma_e[k];
        if s2 == 0.0 {
            return 0.0;
        }
        let n = self.len();
        // Q_k h_k = Σ_j a_j (u_jᴴh_k) u_j
        let coef: Vec<Complex64> = (0..n).map(|j| self.cross[(k, j)].conj() * self.coeff(k, j, beta)).collect();
        let mut qh2 = 0.0;
        let mut tr = 0.0;
        for i in 0..n {
            for j in 0..n {
                let g = self.gram[(i, j)];
                qh2 += (coef[i].conj() * coef[j] * g).re;
                tr += self.coeff(k, i, beta) * self.coeff(k, j, beta) * g.norm_sqr();
            }
        }
        2.0 * s2 * qh2.max(0.0) + s2 * s2 * tr
    }

    pub fn variance_simplified(&self, k: usize, beta: &[f64]) -> f64 {
        let gains: Vec<f64> = (0..self.len()).map(|j| self.gain(k, j)).collect();
        stats::offset_var_simplified(beta, k, self.gamma[k], self.sigma_e[k], &gains)
    }

    /// `M_k` with `σ_f_k² = βᵀ M_k β`; `σ_f_k²` is a quadratic form in the powers.
    pub fn variance_form(&self, k: usize, mode: VarianceMode) -> DMatrix<f64> {
        let n = self.len();
        let s2 = self.sigma_e[k] * self.sigma_e[k];
        let c = |j: usize| if j == k { 1.0 / self.gamma[k] } else { -1.0 };
        match mode {
            VarianceMode::Exact => DMatrix::from_fn(n, n, |i, j| {
                let g = self.gram[(i, j)];
                let pp = self.cross[(k, i)] * self.cross[(k, j)].conj();
                c(i) * c(j) * (2.0 * s2 * (pp * g).re + s2 * s2 * g.norm_sqr())
            }),
            VarianceMode::Simplified => DMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    c(i) * c(i) * (2.0 * s2 * self.gain(k, i) + s2 * s2)
                } else {
                    0.0
                }
            }),
        }
    }

    /// `σ_f(β)` and its Jacobian `∂σ_f/∂β` (rows with `σ_f_k = 0` are zero).
    pub fn sigma_f_jacobian(&self, beta: &[f64], mode: VarianceMode) -> (Vec<f64>, DMatrix<f64>) {
        let n = self.len();
        let b = DVector::from_column_slice(beta);
        let sf = self.sigma_f(beta, mode);
        let mut jac = DMatrix::zeros(n, n);
        for k in 0..n {
            if sf[k] > 0.0 {
                let mb = self.variance_form(k, mode) * &b;
                for i in 0..n {
                    jac[(k, i)] = mb[i] / sf[k];
                }
            }
        }
        (sf, jac)
    }

    pub fn sigma_f(&self, beta: &[f64], mode: VarianceMode) -> Vec<f64> {
        (0..self.len())
            .map(|k| match mode {
                VarianceMode::Exact => self.variance_exact(k, beta),
                VarianceMode::Simplified => self.variance_simplified(k, beta),
            })
            .map(|v| v.max(0.0).sqrt())
            .collect()
    }

    pub fn stats(&self, beta: &[f64], noise: &[f64], mode: VarianceMode) -> Vec<OffsetStats> {
        self.means(beta, noise)
            .into_iter()
            .zip(self.sigma_f(beta, mode))
            .map(|(mu, sigma)| OffsetStats { mu, sigma })
            .collect()
    }

    /// Spectral radius of `A⁻¹`; the loading iteration contracts when this
    /// (scaled by the offsets and the variance slope) stays below one.
    pub fn inverse_spectral_radius(&self) -> f64 {
        linalg::spectral_radius(&self.a_inv)
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        (&self.a_inv * DVector::from_column_slice(rhs)).iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alg2Options {
    /// Maximum relative change of `β` between iterates.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for Alg2Options {
    fn default() -> Self {
        Self { tol: 1e-6, max_iters: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    pub powers: Vec<f64>,
    pub offsets: Vec<f64>,
    pub achieved_stats: Vec<OffsetStats>,
    pub predicted_outage: Vec<f64>,
    pub total_power: f64,
    /// Users dropped by rescheduling; they are counted as in outage.
    pub rescheduled: Vec<usize>,
    pub iterations_used: usize,
    /// The offset is not limited by the budget (zero error variance).
    #[serde(default)]
    pub unbounded_offset: bool,
}

impl DesignReport {
    fn build(cm: &CouplingMatrix, noise: &[f64], powers: Vec<f64>, offsets: Vec<f64>, mode: VarianceMode, iterations_used: usize) -> Self {
        let achieved_stats = cm.stats(&powers, noise, mode);
        let predicted_outage = achieved_stats.iter().map(stats::predicted_outage).collect();
        let total_power = powers.iter().sum();
        Self { powers, offsets, achieved_stats, predicted_outage, total_power, rescheduled: vec![], iterations_used, unbounded_offset: false }
    }

    pub fn n_users(&self) -> usize {
        self.powers.len()
    }

    pub fn served(&self) -> Vec<usize> {
        (0..self.n_users()).filter(|k| !self.rescheduled.contains(k)).collect()
    }

    /// Spreads a report over a sub-problem back onto `n` users; users not in
    /// `kept` get zero power and are marked as rescheduled.
    pub(crate) fn expand(self, kept: &[usize], n: usize, noise: &[f64]) -> Self {
        let mut powers = vec![0.0; n];
        let mut offsets = vec![0.0; n];
        let mut achieved_stats: Vec<OffsetStats> = noise.iter().map(|&s| OffsetStats { mu: -s, sigma: 0.0 }).collect();
        let mut predicted_outage = vec![1.0; n];
        for (pos, &k) in kept.iter().enumerate() {
            powers[k] = self.powers[pos];
            offsets[k] = self.offsets[pos];
            achieved_stats[k] = self.achieved_stats[pos];
            predicted_outage[k] = self.predicted_outage[pos];
        }
        let rescheduled = (0..n).filter(|k| !kept.contains(k)).collect();
        Self {
            total_power: powers.iter().sum(),
            powers,
            offsets,
            achieved_stats,
            predicted_outage,
            rescheduled,
            iterations_used: self.iterations_used,
            unbounded_offset: self.unbounded_offset,
        }
    }

    /// One CSV row per user: index, beta, r, mu_f, sigma_f, predicted_outage, dropped.
    pub fn csv_rows(&self) -> Vec<[String; 7]> {
        (0..self.n_users())
            .map(|k| {
                [
                    k.to_string(),
                    self.powers[k].to_string(),
                    self.offsets[k].to_string(),
                    self.achieved_stats[k].mu.to_string(),
                    self.achieved_stats[k].sigma.to_string(),
                    self.predicted_outage[k].to_string(),
                    u8::from(self.rescheduled.contains(&k)).to_string(),
                ]
            })
            .collect()
    }

    pub const CSV_HEADER: [&'static str; 7] = ["index", "beta", "r", "mu_f", "sigma_f", "predicted_outage", "dropped"];
}

/// Directions plus loading, ready to transmit.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub beamformers: BeamformerSet,
    pub report: DesignReport,
}

fn max_rel_change(next: &[f64], prev: &[f64]) -> f64 {
    next.iter()
        .zip(prev)
        .map(|(&a, &b)| {
            let d = (a - b).abs();
            if d == 0.0 {
                0.0
            } else {
                d / a.abs().max(b.abs())
            }
        })
        .fold(0.0, f64::max)
}

fn check_lengths(cm: &CouplingMatrix, noise: &[f64], other: usize) -> Result<()> {
    if noise.len() != cm.len() || other != cm.len() {
        return Err(Error::InvalidArgument("per-user inputs have inconsistent lengths".into()));
    }
    Ok(())
}

/// Users with no estimation error have `σ_f ≡ 0`; everyone else starts at 1.
fn initial_sigma_f(cm: &CouplingMatrix) -> Vec<f64> {
    cm.sigma_e.iter().map(|&s| if s == 0.0 { 0.0 } else { 1.0 }).collect()
}

/// Newton steps after the plain iteration has run out of iterations.
const NEWTON_MAX_STEPS: usize = 30;
/// Relative equation residual targeted by the final Newton polish.
const POLISH_RESIDUAL: f64 = 1e-13;
const POLISH_MAX_STEPS: usize = 3;

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Residual of `Aβ = σ² + r ⊙ σ_f(β)`, relative to the size of each row.
fn offset_residual(cm: &CouplingMatrix, noise: &[f64], r: &[f64], beta: &[f64], mode: VarianceMode) -> f64 {
    let ab = &cm.a * DVector::from_column_slice(beta);
    let sf = cm.sigma_f(beta, mode);
    (0..cm.len())
        .map(|k| (ab[k] - noise[k] - r[k] * sf[k]).abs() / (ab[k].abs() + noise[k].abs()).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// One Newton step on `Aβ − σ² − r ⊙ σ_f(β) = 0`.
fn alg2_newton_step(cm: &CouplingMatrix, noise: &[f64], r: &[f64], beta: &[f64], mode: VarianceMode) -> Option<Vec<f64>> {
    let (sf, jac) = cm.sigma_f_jacobian(beta, mode);
    let ab = &cm.a * DVector::from_column_slice(beta);
    let f = DVector::from_fn(cm.len(), |k, _| ab[k] - noise[k] - r[k] * sf[k]);
    let mut j = cm.a.clone();
    for k in 0..cm.len() {
        for i in 0..cm.len() {
            j[(k, i)] -= r[k] * jac[(k, i)];
        }
    }
    let step = j.lu().solve(&f)?;
    let next: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, d)| b - d).collect();
    all_finite(&next).then_some(next)
}

/// Alg. 2: iterate `β = A⁻¹(σ² + σ_f ⊙ r)` with `σ_f` refreshed from `β`.
///
/// Each iteration is one linear solve plus one variance update; the loop stops
/// once the next solve would move `β` by less than `opts.tol` (relative), and
/// that next `β` is returned. If the plain iteration has not converged after
/// `opts.max_iters`, Newton steps on the same equations take over. The result
/// is polished by Newton so that `μ_f = r ⊙ σ_f` holds to rounding.
pub fn alg2_power_load(cm: &CouplingMatrix, noise: &[f64], r: &[f64], mode: VarianceMode, opts: Alg2Options) -> Result<DesignReport> {
    check_lengths(cm, noise, r.len())?;
    let rhs = |sf: &[f64]| -> Vec<f64> { noise.iter().zip(sf).zip(r).map(|((s, f), r)| s + f * r).collect() };
    let mut beta = cm.solve(&rhs(&initial_sigma_f(cm)));
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=opts.max_iters {
        iterations = it;
        let next = cm.solve(&rhs(&cm.sigma_f(&beta, mode)));
        if !all_finite(&next) {
            break;
        }
        let change = max_rel_change(&next, &beta);
        beta = next;
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged && all_finite(&beta) {
        for _ in 0..NEWTON_MAX_STEPS {
            let Some(next) = alg2_newton_step(cm, noise, r, &beta, mode) else { break };
            iterations += 1;
            let change = max_rel_change(&next, &beta);
            beta = next;
            if change < opts.tol {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::Convergence { stage: "alg2_power_load", iterations, last: beta });
    }
    for _ in 0..POLISH_MAX_STEPS {
        if offset_residual(cm, noise, r, &beta, mode) < POLISH_RESIDUAL {
            break;
        }
        match alg2_newton_step(cm, noise, r, &beta, mode) {
            Some(next) => beta = next,
            None => break,
        }
    }
    let negative: Vec<usize> = (0..beta.len()).filter(|&k| beta[k] < 0.0).collect();
    if !negative.is_empty() {
        return Err(Error::InfeasibleLoading { users: negative, powers: beta });
    }
    Ok(DesignReport::build(cm, noise, beta, r.to_vec(), mode, iterations))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxROutcome {
    /// Common offset; `+∞` when no user has estimation error.
    pub r: f64,
    pub report: DesignReport,
}

/// One Newton step on `Aβ − σ² − rσ_f(β) = 0`, `1ᵀβ = P_t` in the unknowns `(β, r)`.
fn max_r_newton_step(cm: &CouplingMatrix, noise: &[f64], pt: f64, beta: &[f64], r: f64, mode: VarianceMode) -> Option<(f64, Vec<f64>)> {
    let n = cm.len();
    let (sf, jac) = cm.sigma_f_jacobian(beta, mode);
    let ab = &cm.a * DVector::from_column_slice(beta);
    let f = DVector::from_fn(n + 1, |k, _| if k < n { ab[k] - noise[k] - r * sf[k] } else { beta.iter().sum::<f64>() - pt });
    let j = DMatrix::from_fn(n + 1, n + 1, |k, i| match (k < n, i < n) {
        (true, true) => cm.a[(k, i)] - r * jac[(k, i)],
        (true, false) => -sf[k],
        (false, true) => 1.0,
        (false, false) => 0.0,
    });
    let step = j.lu().solve(&f)?;
    let next: Vec<f64> = (0..n).map(|i| beta[i] - step[i]).collect();
    let r_next = r - step[n];
    (all_finite(&next) && r_next.is_finite()).then_some((r_next, next))
}

/// Maximizes a common offset `r` under `Σβ ≤ P_t`. The budget is tight, so
/// each iteration sets `r = (P_t − 1ᵀA⁻¹σ²)/(1ᵀA⁻¹σ_f)` and
/// `β = A⁻¹σ² + r A⁻¹σ_f`, then refreshes `σ_f`. The alternation slows down
/// as `r` grows; past `opts.max_iters` Newton steps on the joint system finish it.
pub fn max_r_power_load(cm: &CouplingMatrix, noise: &[f64], pt: f64, mode: VarianceMode, opts: Alg2Options) -> Result<MaxROutcome> {
    check_lengths(cm, noise, cm.len())?;
    if !(pt > 0.0) {
        return Err(Error::InvalidArgument(format!("power budget must be positive, got {pt}")));
    }
    let base = cm.solve(noise);
    let base_sum: f64 = base.iter().sum();
    let step = |sf: &[f64]| -> Option<(f64, Vec<f64>)> {
        let y = cm.solve(sf);
        let denom: f64 = y.iter().sum();
        if !(denom > 0.0) {
            return None;
        }
        let r = (pt - base_sum) / denom;
        Some((r, base.iter().zip(&y).map(|(b, y)| b + r * y).collect()))
    };

    let Some((mut r, mut beta)) = step(&initial_sigma_f(cm)) else {
        return unbounded_or_degenerate(cm, noise, base, mode);
    };
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=opts.max_iters {
        iterations = it;
        let Some((r_next, next)) = step(&cm.sigma_f(&beta, mode)) else {
            return unbounded_or_degenerate(cm, noise, base, mode);
        };
        if !r_next.is_finite() || !all_finite(&next) {
            break;
        }
        let change = max_rel_change(&next, &beta).max((r_next - r).abs() / r_next.abs().max(1.0));
        beta = next;
        r = r_next;
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged && all_finite(&beta) && r.is_finite() {
        for _ in 0..NEWTON_MAX_STEPS {
            let Some((r_next, next)) = max_r_newton_step(cm, noise, pt, &beta, r, mode) else { break };
            iterations += 1;
            let change = max_rel_change(&next, &beta).max((r_next - r).abs() / r_next.abs().max(1.0));
            beta = next;
            r = r_next;
            if change < opts.tol {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::Convergence { stage: "max_r_power_load", iterations, last: beta });
    }
    for _ in 0..POLISH_MAX_STEPS {
        if offset_residual(cm, noise, &vec![r; cm.len()], &beta, mode) < POLISH_RESIDUAL {
            break;
        }
        match max_r_newton_step(cm, noise, pt, &beta, r, mode) {
            Some((r_next, next)) => (r, beta) = (r_next, next),
            None => break,
        }
    }
    let negative: Vec<usize> = (0..beta.len()).filter(|&k| beta[k] < 0.0).collect();
    if !negative.is_empty() {
        return Err(Error::InfeasibleLoading { users: negative, powers: beta });
    }
    let offsets = vec![r; cm.len()];
    Ok(MaxROutcome { r, report: DesignReport::build(cm, noise, beta, offsets, mode, iterations) })
}

/// `1ᵀA⁻¹σ_f` vanished. With every `σ_f ≡ 0` any offset is reachable once the
/// means are met, so the QoS loading `A⁻¹σ²` is returned with an unbounded flag.
fn unbounded_or_degenerate(cm: &CouplingMatrix, noise: &[f64], base: Vec<f64>, mode: VarianceMode) -> Result<MaxROutcome> {
    if cm.sigma_e.iter().any(|&s| s != 0.0) {
        return Err(Error::DegenerateGeometry("1ᵀA⁻¹σ_f is not positive; the common offset is undefined".into()));
    }
    if let Some(k) = base.iter().position(|&b| b < 0.0) {
        return Err(Error::InfeasibleLoading { users: vec![k], powers: base });
    }
    let mut report = DesignReport::build(cm, noise, base, vec![f64::INFINITY; cm.len()], mode, 1);
    report.unbounded_offset = true;
    Ok(MaxROutcome { r: f64::INFINITY, report })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rescheduled {
    pub retained: Vec<usize>,
    /// Dropped users in drop order.
    pub dropped: Vec<usize>,
    pub r: f64,
    /// Report over all original users.
    pub report: DesignReport,
}

/// Drops users, largest entry of `A⁻¹σ²` first, until the max-r offset
/// reaches `r_min` or a single user remains.
pub fn reschedule(cm: &CouplingMatrix, noise: &[f64], pt: f64, r_min: f64, mode: VarianceMode, opts: Alg2Options) -> Result<Rescheduled> {
    check_lengths(cm, noise, cm.len())?;
    let n = cm.len();
    let mut retained: Vec<usize> = (0..n).collect();
    let mut dropped = Vec::new();
    loop {
        let sub = cm.restrict(&retained);
        let sub_noise: Vec<f64> = retained.iter().map(|&i| noise[i]).collect();
        let outcome = sub.as_ref().ok().map(|s| max_r_power_load(s, &sub_noise, pt, mode, opts));
        if let Some(Ok(out)) = &outcome {
            if out.r >= r_min || retained.len() == 1 {
                let out = out.clone();
                return Ok(Rescheduled {
                    r: out.r,
                    report: out.report.expand(&retained, n, noise),
                    retained,
                    dropped,
                });
            }
        }
        if retained.len() == 1 {
            // A single user always has a positive 1x1 coupling matrix, so this
            // only triggers on non-finite inputs.
            return Err(match outcome {
                Some(Err(e)) => e,
                _ => Error::DegenerateGeometry("single remaining user cannot be loaded".into()),
            });
        }
        let worst = match &sub {
            Ok(s) => argmax(&s.solve(&sub_noise)),
            // Singular A: drop the user with the weakest effective signal.
            Err(_) => {
                let diag: Vec<f64> = retained.iter().map(|&i| -cm.a[(i, i)]).collect();
                argmax(&diag)
            }
        };
        dropped.push(retained.remove(worst));
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0)
}

/// Max-r loading with the offset capped at `r_cap`: above the cap the
/// loading is re-solved with `r = r_cap`, which spends less than `P_t`.
pub fn power_saving_cap(cm: &CouplingMatrix, noise: &[f64], pt: f64, r_cap: f64, mode: VarianceMode, opts: Alg2Options) -> Result<DesignReport> {
    if !(r_cap > 0.0) {
        return Err(Error::InvalidArgument(format!("offset cap must be positive, got {r_cap}")));
    }
    let out = max_r_power_load(cm, noise, pt, mode, opts)?;
    if out.r > r_cap {
        alg2_power_load(cm, noise, &vec![r_cap; cm.len()], mode, opts)
    } else {
        Ok(out.report)
    }
}

/// Rescheduling followed by the power-saving cap on the retained users.
pub fn reschedule_with_cap(
    cm: &CouplingMatrix,
    noise: &[f64],
    pt: f64,
    r_min: f64,
    r_cap: f64,
    mode: VarianceMode,
    opts: Alg2Options,
) -> Result<Rescheduled> {
    let mut out = reschedule(cm, noise, pt, r_min, mode, opts)?;
    if out.r > r_cap {
        let sub = cm.restrict(&out.retained)?;
        let sub_noise: Vec<f64> = out.retained.iter().map(|&i| noise[i]).collect();
        let capped = alg2_power_load(&sub, &sub_noise, &vec![r_cap; sub.len()], mode, opts)?;
        let dropped = out.report.rescheduled.clone();
        out.report = capped.expand(&out.retained, cm.len(), noise);
        out.report.rescheduled = dropped;
    }
    Ok(out)
}

/// `a0 r² + a1 r + a2`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFit {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
}

impl QuadraticFit {
    pub fn eval(&self, r: f64) -> f64 {
        (self.a0 * r + self.a1) * r + self.a2
    }
}

/// Least-squares quadratic through `(xs, ys)`.
pub fn fit_quadratic(xs: &[f64], ys: &[f64]) -> Result<QuadraticFit> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::InvalidArgument("need at least three points".into()));
    }
    let v = DMatrix::from_fn(xs.len(), 3, |i, j| xs[i].powi(2 - j as i32));
    let y = DVector::from_column_slice(ys);
    let coef = v
        .svd(true, true)
        .solve(&y, 1e-14)
        .map_err(|e| Error::InvalidArgument(format!("least-squares fit failed: {e}")))?;
    Ok(QuadraticFit { a0: coef[0], a1: coef[1], a2: coef[2] })
}

/// Least-squares quadratic approximation of the standard normal CDF on a
/// uniform grid of `n_grid` points over `[r_lo, r_hi]`.
pub fn fit_normal_cdf_quadratic(r_lo: f64, r_hi: f64, n_grid: usize) -> Result<QuadraticFit> {
    if !(r_lo < r_hi) || n_grid < 3 {
        return Err(Error::InvalidArgument("need r_lo < r_hi and at least three grid points".into()));
    }
    let xs: Vec<f64> = (0..n_grid).map(|i| r_lo + (r_hi - r_lo) * i as f64 / (n_grid - 1) as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| stats::normal_cdf(x)).collect();
    fit_quadratic(&xs, &ys)
}

/// Default fit used by the average-outage design: 201 points over [1, 3].
pub fn default_cdf_fit() -> QuadraticFit {
    fit_normal_cdf_quadratic(1.0, 3.0, 201).expect("valid fixed grid")
}

/// Relative spread of `b` treated as exact symmetry.
const SYMMETRY_TOL: f64 = 1e-12;

/// Halvings tried before the step is abandoned.
const MAX_HALVINGS: usize = 30;

/// Scales the model step down until the true mean `Q(r_k)` does not exceed
/// `Q(r*)`. Outside the fitted range the quadratic model can overshoot.
/// Scaling keeps `bᵀδ = 0`, so power is still conserved.
fn damped(r_star: f64, mut delta: Vec<f64>) -> Vec<f64> {
    let base = stats::gaussian_tail(r_star) * delta.len() as f64;
    for _ in 0..MAX_HALVINGS {
        let after: f64 = delta.iter().map(|d| stats::gaussian_tail(r_star + d)).sum();
        if after <= base {
            return delta;
        }
        delta.iter_mut().for_each(|d| *d *= 0.5);
    }
    vec![0.0; delta.len()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta_r: Vec<f64>,
    pub zeta: f64,
    pub offsets: Vec<f64>,
    pub report: DesignReport,
}

/// Perturbs a common offset `r*` per user to raise `Σ_k g(r_k)` (quadratic
/// model `g` of the normal CDF) while keeping `1ᵀA⁻¹(σ_f ⊙ δ_r) = 0`, so the
/// total power is unchanged. `σ_f` is held at its `(β*, r*)` value and `β`
/// is updated once, as `β* + A⁻¹(σ_f ⊙ δ_r)`; `refine` instead re-runs
/// Alg. 2 at the new offsets. The step is halved while it would raise the
/// mean Gaussian tail above the uniform one.
#[allow(clippy::too_many_arguments)]
pub fn average_outage_perturbation(
    cm: &CouplingMatrix,
    beta_star: &[f64],
    sigma_f: &[f64],
    noise: &[f64],
    r_star: f64,
    quad: QuadraticFit,
    mode: VarianceMode,
    refine: bool,
) -> Result<Perturbation> {
    check_lengths(cm, noise, sigma_f.len())?;
    check_lengths(cm, noise, beta_star.len())?;
    if quad.a0 == 0.0 {
        return Err(Error::InvalidArgument("quadratic coefficient a0 must be nonzero".into()));
    }
    let n = cm.len();
    let ones_ainv: Vec<f64> = (0..n).map(|j| cm.a_inv.column(j).sum()).collect();
    let b: Vec<f64> = ones_ainv.iter().zip(sigma_f).map(|(x, s)| x * s).collect();
    let s1: f64 = b.iter().sum();
    let s2: f64 = b.iter().map(|x| x * x).sum();
    let slope = 2.0 * quad.a0 * r_star + quad.a1;
    let b_max = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let b_min = b.iter().copied().fold(f64::INFINITY, f64::min);
    // Spread at rounding level means symmetric users: the optimum is δ_r = 0.
    let symmetric = b_max - b_min <= SYMMETRY_TOL * b_max.abs().max(b_min.abs());
    let (zeta, delta_r) = if s2 == 0.0 || symmetric {
        (if s2 == 0.0 { 0.0 } else { -slope * s1 / s2 }, vec![0.0; n])
    } else {
        let zeta = -slope * s1 / s2;
        // δ_k = (−slope − ζ b_k)/(2a0), written as Σ_j b_j(b_j − b_k) so that
        // identical b_k give exactly zero.
        let delta = (0..n)
            .map(|k| {
                let num: f64 = b.iter().map(|&bj| bj * (bj - b[k])).sum();
                -slope / (2.0 * quad.a0) * num / s2
            })
            .collect();
        (zeta, damped(r_star, delta))
    };
    let offsets: Vec<f64> = delta_r.iter().map(|d| r_star + d).collect();
    let report = if refine {
        alg2_power_load(cm, noise, &offsets, mode, Alg2Options::default())?
    } else {
        let shift: Vec<f64> = (0..n).map(|k| sigma_f[k] * delta_r[k]).collect();
        let beta: Vec<f64> = beta_star.iter().zip(cm.solve(&shift)).map(|(b, d)| b + d).collect();
        DesignReport::build(cm, noise, beta, offsets.clone(), mode, 1)
    };
    Ok(Perturbation { delta_r, zeta, offsets, report })
}
