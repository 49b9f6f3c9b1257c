//! Beamforming directions.
//!
//! Besides the classical ZF/MRT/RZF directions this module implements the
//! closed-form robust design: given dual variables `ν_k` for the offset
//! constraints, each direction is the principal eigenvector of
//!
//! ```text
//! B_k = (ν_k/γ_k) h_k h_kᴴ − Σ_{j≠k} ν_j h_j h_jᴴ + (ν_kσ_k²/γ_k − σ_k² Σ_{j≠k} ν_j) I
//!       − ρ_k (ν_k/γ_k) He(ψ_k h_kᴴ) + ρ_k Σ_{j≠k} ν_j He(ψ_j h_jᴴ),     ρ_k = r√2 σ_k,
//! ```
//!
//! where `ψ_j` is the unit direction of the variance proxy `Q_j h_j` and
//! `He(X) = (X + Xᴴ)/2`. The duals solve `ν_k⁻¹ = h_kᴴ M_k⁻¹ h_k (1 + 1/γ_k)` with
//! `M_k = I + ν_k(1 + 1/γ_k) h_k h_kᴴ − B_k`. With `σ_k = 0` everything reduces
//! to the perfect-CSI (constant-offset) design.

use nalgebra::SymmetricEigen;

use crate::channel::Scenario;
use crate::error::{Error, Result};
use crate::linalg::{self, c, CMatrix, CVector};
use crate::powerload::{self, Alg2Options, Design, VarianceMode};
use crate::stats::{self, BeamformerSet};

fn channel_matrix(h: &[CVector]) -> Result<CMatrix> {
    let n = h.first().map(|v| v.len()).ok_or_else(|| Error::InvalidArgument("no channels".into()))?;
    if h.iter().any(|v| v.len() != n) {
        return Err(Error::InvalidArgument("channels have different lengths".into()));
    }
    Ok(CMatrix::from_columns(h))
}

fn normalize_columns(x: &CMatrix, h: &[CVector]) -> Result<Vec<CVector>> {
    (0..x.ncols())
        .map(|k| {
            let col = x.column(k).into_owned();
            let u = linalg::normalized(&col)
                .ok_or_else(|| Error::DegenerateChannels(format!("direction {k} vanished")))?;
            Ok(linalg::phase_align(&u, &h[k]))
        })
        .collect()
}

/// Zero-forcing: columns of `G(GᴴG)⁻¹` with `G = [h_1 … h_K]`, normalized.
pub fn zf_directions(h: &[CVector]) -> Result<Vec<CVector>> {
    let g = channel_matrix(h)?;
    let (n, k) = g.shape();
    if k > n {
        return Err(Error::DegenerateChannels(format!("{k} users exceed {n} antennas")));
    }
    let gram = g.adjoint() * &g;
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let max = eig.iter().cloned().fold(0.0, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(Error::DegenerateChannels("estimated channel matrix is rank deficient".into()));
    }
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::DegenerateChannels("channel Gram matrix is singular".into()))?;
    normalize_columns(&(g * inv), h)
}

pub fn mrt_directions(h: &[CVector]) -> Result<Vec<CVector>> {
    h.iter()
        .enumerate()
        .map(|(k, v)| linalg::normalized(v).ok_or_else(|| Error::InvalidArgument(format!("channel {k} is zero"))))
        .collect()
}

/// Regularized ZF, `(Σ_j h_j h_jᴴ + λI)⁻¹ h_k` normalized. Evaluated as
/// `G(GᴴG + λI)⁻¹`, which is the same matrix but only K×K.
pub fn rzf_directions(h: &[CVector], loading: f64) -> Result<Vec<CVector>> {
    if !(loading > 0.0) || !loading.is_finite() {
        return Err(Error::InvalidArgument(format!("RZF loading must be positive, got {loading}")));
    }
    let g = channel_matrix(h)?;
    let k = g.ncols();
    let reg = g.adjoint() * &g + CMatrix::identity(k, k) * c(loading, 0.0);
    let inv = reg
        .try_inverse()
        .ok_or_else(|| Error::DegenerateChannels("regularized Gram matrix is singular".into()))?;
    normalize_columns(&(g * inv), h)
}

/// Dual variables of the offset constraints together with the directions
/// of the variance-proxy multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub nu: Vec<f64>,
    /// Unit direction of `ψ_k = ν_k d_k/‖d_k‖`.
    pub psi_directions: Vec<CVector>,
    /// `r√2σ_k ψ̂_k`: the proxy `d_k` per unit of `‖Q_k h_k‖`.
    pub proxies: Vec<CVector>,
    pub sweeps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_sweeps: 500 }
    }
}

/// The eigen-equation matrix `B_k` in factored form: a diagonal shift,
/// rank-one terms `a_j h_j h_jᴴ` and Hermitian rank-two terms `b_j He(ψ_j h_jᴴ)`.
struct KktOperator<'a> {
    h: &'a [CVector],
    psi: Option<&'a [CVector]>,
    diag: f64,
    rank_one: Vec<f64>,
    rank_two: Vec<f64>,
}

impl<'a> KktOperator<'a> {
    fn new(
        k: usize,
        nu: &[f64],
        h: &'a [CVector],
        gamma: &[f64],
        sigma_e: &[f64],
        r: f64,
        psi: Option<&'a [CVector]>,
    ) -> Self {
        let s = sigma_e[k];
        let others: f64 = nu.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, v)| v).sum();
        let diag = nu[k] * s * s / gamma[k] - s * s * others;
        let rank_one = (0..h.len()).map(|j| if j == k { nu[k] / gamma[k] } else { -nu[j] }).collect();
        let rho = r * std::f64::consts::SQRT_2 * s;
        let rank_two = match psi {
            Some(_) if rho != 0.0 => {
                (0..h.len()).map(|j| if j == k { -rho * nu[k] / gamma[k] } else { rho * nu[j] }).collect()
            }
            _ => vec![0.0; h.len()],
        };
        Self { h, psi, diag, rank_one, rank_two }
    }

    fn apply(&self, x: &CVector) -> CVector {
        let mut y = x * c(self.diag, 0.0);
        for (j, hj) in self.h.iter().enumerate() {
            let hx = linalg::inner(hj, x);
            y.axpy(hx * self.rank_one[j], hj, c(1.0, 0.0));
            if self.rank_two[j] != 0.0 {
                let pj = &self.psi.expect("rank-two terms need psi")[j];
                let px = linalg::inner(pj, x);
                let half = 0.5 * self.rank_two[j];
                y.axpy(hx * half, pj, c(1.0, 0.0));
                y.axpy(px * half, hj, c(1.0, 0.0));
            }
        }
        y
    }

    fn dense(&self) -> CMatrix {
        let n = self.h[0].len();
        let mut m = CMatrix::identity(n, n) * c(self.diag, 0.0);
        for (j, hj) in self.h.iter().enumerate() {
            m += linalg::outer(hj, hj) * c(self.rank_one[j], 0.0);
            if self.rank_two[j] != 0.0 {
                let pj = &self.psi.expect("rank-two terms need psi")[j];
                m += linalg::hermitian_outer(pj, hj) * c(self.rank_two[j], 0.0);
            }
        }
        m
    }

    /// Shift making `B + shift·I` positive semidefinite.
    fn psd_shift(&self) -> f64 {
        let mut lower = self.diag;
        for (j, hj) in self.h.iter().enumerate() {
            let a = hj.norm_squared();
            lower += (self.rank_one[j] * a).min(0.0);
            lower -= self.rank_two[j].abs() * hj.norm();
        }
        (-lower).max(0.0)
    }

    fn spectral_bound(&self) -> f64 {
        let mut bound = self.diag.abs();
        for (j, hj) in self.h.iter().enumerate() {
            bound += self.rank_one[j].abs() * hj.norm_squared() + self.rank_two[j].abs() * hj.norm();
        }
        bound
    }
}

/// `B_k` as a dense matrix.
pub fn kkt_matrix(
    k: usize,
    nu: &[f64],
    h: &[CVector],
    gamma: &[f64],
    sigma_e: &[f64],
    r: f64,
    psi: &[CVector],
) -> CMatrix {
    KktOperator::new(k, nu, h, gamma, sigma_e, r, Some(psi)).dense()
}

/// `M_k = I + ν_k(1 + 1/γ_k) h_k h_kᴴ − B_k`.
fn dual_matrix(op: &KktOperator<'_>, k: usize, nu_k: f64, gamma_k: f64) -> CMatrix {
    let n = op.h[0].len();
    let hk = &op.h[k];
    CMatrix::identity(n, n) + linalg::outer(hk, hk) * c(nu_k * (1.0 + 1.0 / gamma_k), 0.0) - op.dense()
}

/// Right-hand side `1/(h_kᴴ M_k⁻¹ h_k (1 + 1/γ_k))` of the dual fixed point,
/// i.e. the value the update assigns to `ν_k`.
fn nu_update(op: &KktOperator<'_>, k: usize, nu_k: f64, gamma_k: f64) -> Option<f64> {
    let m = dual_matrix(op, k, nu_k, gamma_k);
    let x = linalg::solve_complex(&m, &op.h[k])?;
    let q = linalg::inner(&op.h[k], &x).re * (1.0 + 1.0 / gamma_k);
    let nu = 1.0 / q;
    (q > 0.0 && nu.is_finite()).then_some(nu)
}

fn check_inputs(h: &[CVector], gamma: &[f64], sigma_e: &[f64]) -> Result<()> {
    if h.is_empty() || gamma.len() != h.len() || sigma_e.len() != h.len() {
        return Err(Error::InvalidArgument("per-user inputs have inconsistent lengths".into()));
    }
    if let Some(k) = h.iter().position(|v| v.norm_squared() == 0.0) {
        return Err(Error::InvalidArgument(format!("channel {k} is zero")));
    }
    if gamma.iter().any(|&g| !(g > 0.0)) {
        return Err(Error::InvalidArgument("SINR targets must be positive".into()));
    }
    Ok(())
}

/// Warm start `ν_k = γ_k/α_k`.
pub fn nu_massive_approx(h: &[CVector], gamma: &[f64]) -> Result<Vec<f64>> {
    if gamma.len() != h.len() {
        return Err(Error::InvalidArgument("per-user inputs have inconsistent lengths".into()));
    }
    h.iter()
        .zip(gamma)
        .enumerate()
        .map(|(k, (v, &g))| {
            let alpha = v.norm_squared();
            if alpha > 0.0 {
                Ok(g / alpha)
            } else {
                Err(Error::InvalidArgument(format!("channel {k} is zero")))
            }
        })
        .collect()
}

/// Gauss-Seidel solution of the robust dual fixed point with a common offset
/// `r`. `psi_directions` are the proxy directions; Alg. 1 uses the ZF directions.
pub fn solve_nu(
    h: &[CVector],
    gamma: &[f64],
    sigma_e: &[f64],
    r: f64,
    psi_directions: &[CVector],
    opts: FixedPointOptions,
) -> Result<DualState> {
    check_inputs(h, gamma, sigma_e)?;
    if !(r >= 0.0) {
        return Err(Error::InvalidArgument(format!("offset must be nonnegative, got {r}")));
    }
    if psi_directions.len() != h.len() {
        return Err(Error::InvalidArgument("need one proxy direction per user".into()));
    }
    let psi: Vec<CVector> = psi_directions
        .iter()
        .enumerate()
        .map(|(k, p)| {
            linalg::normalized(p)
                .map(|u| linalg::phase_align(&u, &h[k]))
                .ok_or_else(|| Error::InvalidArgument(format!("proxy direction {k} is zero")))
        })
        .collect::<Result<_>>()?;

    let mut nu = nu_massive_approx(h, gamma)?;
    for sweep in 1..=opts.max_sweeps {
        let mut change: f64 = 0.0;
        for k in 0..h.len() {
            let op = KktOperator::new(k, &nu, h, gamma, sigma_e, r, Some(&psi));
            let next = nu_update(&op, k, nu[k], gamma[k])
                .ok_or_else(|| Error::Convergence { stage: "solve_nu", iterations: sweep, last: nu.clone() })?;
            change = change.max((next - nu[k]).abs() / next);
            nu[k] = next;
        }
        if change < opts.tol {
            let proxies = psi
                .iter()
                .zip(sigma_e)
                .map(|(p, &s)| p * c(r * std::f64::consts::SQRT_2 * s, 0.0))
                .collect();
            return Ok(DualState { nu, psi_directions: psi, proxies, sweeps: sweep });
        }
    }
    Err(Error::Convergence { stage: "solve_nu", iterations: opts.max_sweeps, last: nu })
}

/// Largest relative residual `|ν_k⁻¹ − h_kᴴM_k⁻¹h_k(1 + 1/γ_k)| / ν_k⁻¹` of the
/// robust fixed point at `nu`.
pub fn nu_residual(h: &[CVector], gamma: &[f64], sigma_e: &[f64], r: f64, psi: &[CVector], nu: &[f64]) -> f64 {
    (0..h.len())
        .map(|k| {
            let op = KktOperator::new(k, nu, h, gamma, sigma_e, r, Some(psi));
            match nu_update(&op, k, nu[k], gamma[k]) {
                Some(v) => (1.0 / v - 1.0 / nu[k]).abs() * nu[k],
                None => f64::INFINITY,
            }
        })
        .fold(0.0, f64::max)
}

/// Principal eigenvector through the subspace spanned by the channels (and
/// proxies). Off that subspace the operator is `diag·I`, so when the reduced
/// top eigenvalue exceeds `diag` it is the top eigenvalue of the full operator.
fn reduced_principal(op: &KktOperator<'_>) -> Option<CVector> {
    let n = op.h[0].len();
    let mut cols: Vec<CVector> = op.h.to_vec();
    if op.rank_two.iter().any(|&t| t != 0.0) {
        cols.extend(op.psi?.iter().cloned());
    }
    if cols.len() >= n {
        return None;
    }
    let q = CMatrix::from_columns(&cols).qr().q();
    let aq = CMatrix::from_columns(&(0..q.ncols()).map(|j| op.apply(&q.column(j).into_owned())).collect::<Vec<_>>());
    let (lambda, v) = linalg::principal_eigenpair_dense(&(q.adjoint() * aq));
    (lambda > op.diag).then(|| q * v)
}

fn principal_direction(op: &KktOperator<'_>, k: usize) -> Result<CVector> {
    if let Some(u) = reduced_principal(op).as_ref().and_then(linalg::normalized) {
        return Ok(linalg::phase_align(&u, &op.h[k]));
    }
    let shift = op.psd_shift();
    let tol = 1e-12 * (1.0 + op.spectral_bound());
    let u = match linalg::power_iteration(|x| op.apply(x), &op.h[k], shift, tol, 5_000) {
        Some((_, u)) => u,
        // Stagnation (tiny spectral gap): fall back to a dense decomposition.
        None => {
            let (_, u) = linalg::principal_eigenpair_dense(&op.dense());
            u
        }
    };
    let u = linalg::normalized(&u).ok_or_else(|| Error::Convergence {
        stage: "directions",
        iterations: 5_000,
        last: vec![],
    })?;
    Ok(linalg::phase_align(&u, &op.h[k]))
}

/// Principal eigenvectors of the robust eigen equations, phase-aligned so
/// that `h_kᴴu_k ≥ 0`.
pub fn directions_from_nu(
    dual: &DualState,
    h: &[CVector],
    gamma: &[f64],
    sigma_e: &[f64],
    r: f64,
) -> Result<Vec<CVector>> {
    check_inputs(h, gamma, sigma_e)?;
    (0..h.len())
        .map(|k| {
            let op = KktOperator::new(k, &dual.nu, h, gamma, sigma_e, r, Some(&dual.psi_directions));
            principal_direction(&op, k)
        })
        .collect()
}

/// Perfect-CSI dual fixed point `ν_k⁻¹ = h_kᴴ(I + Σ_j ν_j h_j h_jᴴ)⁻¹h_k(1 + 1/γ_k)`,
/// by Gauss-Seidel sweeps. The quadratic forms come from the `K×K` Gram matrix
/// `G = HᴴH` through `Hᴴ(I + HDHᴴ)⁻¹H = G(I + DG)⁻¹`.
pub fn solve_nu_constant_offset(h: &[CVector], gamma: &[f64], opts: FixedPointOptions) -> Result<Vec<f64>> {
    check_inputs(h, gamma, &vec![0.0; h.len()])?;
    let k_users = h.len();
    let gram = CMatrix::from_fn(k_users, k_users, |i, j| linalg::inner(&h[i], &h[j]));
    let mut nu = nu_massive_approx(h, gamma)?;
    let fail = |sweep: usize, last: Vec<f64>| Error::Convergence { stage: "solve_nu_constant_offset", iterations: sweep, last };
    for sweep in 1..=opts.max_sweeps {
        let mut change: f64 = 0.0;
        for k in 0..k_users {
            // k-th diagonal entry of G(I + DG)⁻¹ = ((I + GD)⁻¹G)_kk.
            let mut m = CMatrix::identity(k_users, k_users);
            for j in 0..k_users {
                for i in 0..k_users {
                    m[(i, j)] += gram[(i, j)] * c(nu[j], 0.0);
                }
            }
            let col = gram.column(k).into_owned();
            let x = linalg::solve_complex(&m, &col).ok_or_else(|| fail(sweep, nu.clone()))?;
            let quad = x[k].re;
            let next = 1.0 / (quad * (1.0 + 1.0 / gamma[k]));
            if !(quad > 0.0) || !next.is_finite() {
                return Err(fail(sweep, nu));
            }
            change = change.max((next - nu[k]).abs() / next);
            nu[k] = next;
        }
        if change < opts.tol {
            return Ok(nu);
        }
    }
    Err(fail(opts.max_sweeps, nu))
}

/// Largest relative residual of the perfect-CSI dual fixed point.
pub fn nu_constant_offset_residual(h: &[CVector], gamma: &[f64], nu: &[f64]) -> f64 {
    let n = h[0].len();
    let mut m = CMatrix::identity(n, n);
    for (hj, &v) in h.iter().zip(nu) {
        m += linalg::outer(hj, hj) * c(v, 0.0);
    }
    (0..h.len())
        .map(|k| {
            let x = linalg::solve_complex(&m, &h[k]).expect("I + PSD is invertible");
            let rhs = linalg::inner(&h[k], &x).re * (1.0 + 1.0 / gamma[k]);
            (rhs - 1.0 / nu[k]).abs() * nu[k]
        })
        .fold(0.0, f64::max)
}

/// Principal eigenvectors of `(ν_k/γ_k)h_kh_kᴴ − Σ_{j≠k} ν_j h_jh_jᴴ`.
pub fn directions_constant_offset(nu: &[f64], h: &[CVector], gamma: &[f64]) -> Result<Vec<CVector>> {
    let zeros = vec![0.0; h.len()];
    check_inputs(h, gamma, &zeros)?;
    if nu.len() != h.len() {
        return Err(Error::InvalidArgument("need one dual variable per user".into()));
    }
    (0..h.len())
        .map(|k| principal_direction(&KktOperator::new(k, nu, h, gamma, &zeros, 0.0, None), k))
        .collect()
}

/// Constant-offset directions computed end to end.
pub fn constant_offset_design_directions(h: &[CVector], gamma: &[f64]) -> Result<Vec<CVector>> {
    let nu = solve_nu_constant_offset(h, gamma, FixedPointOptions::default())?;
    directions_constant_offset(&nu, h, gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Alg1Options {
    /// Extra passes that re-estimate the proxy directions from the loaded
    /// beamformers and redo steps 2-4. Zero gives the one-shot algorithm.
    pub refinements: usize,
    pub fixed_point: FixedPointOptions,
    pub variance_mode: Option<VarianceMode>,
    pub alg2: Alg2Options,
}


/// Iterative closed-form design: ZF proxies → duals → eigen-directions →
/// robust power loading with offsets `r` (one entry per user; the dual step uses their mean).
pub fn alg1_design(scenario: &Scenario, r: &[f64], opts: Alg1Options) -> Result<Design> {
    let h = scenario.h_est();
    let gamma = scenario.sinr_targets();
    let sigma_e = scenario.sigma_e()?;
    let noise = scenario.noise_powers();
    if r.len() != h.len() {
        return Err(Error::InvalidArgument("need one offset per user".into()));
    }
    let r_common = r.iter().sum::<f64>() / r.len() as f64;
    let mode = opts.variance_mode.unwrap_or_else(|| VarianceMode::default_for(scenario.n_antennas()));

    let mut psi = zf_directions(&h)?;
    let mut pass = 0;
    loop {
        let dual = solve_nu(&h, &gamma, &sigma_e, r_common, &psi, opts.fixed_point)?;
        let dirs = directions_from_nu(&dual, &h, &gamma, &sigma_e, r_common)?;
        let cm = powerload::coupling_matrix(&h, &dirs, &gamma, &sigma_e)?;
        let report = powerload::alg2_power_load(&cm, &noise, r, mode, opts.alg2)?;
        let beamformers = BeamformerSet::new(dirs, report.powers.clone())?;
        if pass == opts.refinements {
            return Ok(Design { beamformers, report });
        }
        pass += 1;
        psi = (0..h.len())
            .map(|k| {
                let qh = stats::q_matrix(&beamformers, k, gamma[k]) * &h[k];
                linalg::normalized(&qh).unwrap_or_else(|| psi[k].clone())
            })
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::standard_complex_gaussian;
    use crate::linalg::real_vector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_channels(k: usize, n: usize, seed: u64, scale: f64) -> Vec<CVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k).map(|_| standard_complex_gaussian(n, &mut rng) * c(scale, 0.0)).collect()
    }

    /// Mutually orthogonal channels with norms² `alphas`, rotated by a random unitary.
    fn orthogonal_channels(alphas: &[f64], n: usize, seed: u64) -> Vec<CVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = CMatrix::from_fn(n, n, |_, _| {
            let z = standard_complex_gaussian(1, &mut rng);
            z[0]
        });
        let q = a.qr().q();
        alphas.iter().enumerate().map(|(k, &al)| q.column(k).into_owned() * c(al.sqrt(), 0.0)).collect()
    }

    #[test]
    fn zf_orthogonal_is_mrt() {
        let h = orthogonal_channels(&[1.0, 4.0, 0.5], 4, 1);
        let zf = zf_directions(&h).unwrap();
        for (k, u) in zf.iter().enumerate() {
            let mrt = linalg::normalized(&h[k]).unwrap();
            assert!((u - mrt).norm() < 1e-12);
        }
    }

    #[test]
    fn zf_two_by_two_by_hand() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let h = vec![real_vector(&[1.0, 0.0]), real_vector(&[s, s])];
        let zf = zf_directions(&h).unwrap();
        assert!((&zf[0] - real_vector(&[s, -s])).norm() < 1e-12);
        assert!((&zf[1] - real_vector(&[0.0, 1.0])).norm() < 1e-12);
    }

    #[test]
    fn zf_nulls_interference() {
        for seed in 0..10 {
            let h = random_channels(3, 5, seed, 1.0);
            let zf = zf_directions(&h).unwrap();
            for k in 0..3 {
                assert!((zf[k].norm() - 1.0).abs() < 1e-12);
                for j in 0..3 {
                    if j != k {
                        assert!(linalg::inner(&h[j], &zf[k]).norm() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn zf_rejects_rank_deficiency() {
        let h = vec![real_vector(&[1.0, 2.0, 0.0]), real_vector(&[2.0, 4.0, 0.0])];
        assert!(matches!(zf_directions(&h), Err(Error::DegenerateChannels(_))));
        let h = random_channels(4, 3, 0, 1.0);
        assert!(matches!(zf_directions(&h), Err(Error::DegenerateChannels(_))));
    }

    #[test]
    fn rzf_limits() {
        let h = random_channels(3, 4, 9, 1.0);
        let norm2: f64 = h.iter().map(|v| v.norm_squared()).sum();
        let big = rzf_directions(&h, 1e6 * norm2).unwrap();
        let mrt = mrt_directions(&h).unwrap();
        for k in 0..3 {
            assert!(linalg::inner(&big[k], &mrt[k]).norm() > 1.0 - 1e-6);
        }
        let small = rzf_directions(&h, 1e-12).unwrap();
        let zf = zf_directions(&h).unwrap();
        for k in 0..3 {
            assert!((&small[k] - &zf[k]).norm() < 1e-6);
        }
        assert!(rzf_directions(&h, 0.0).is_err());
        let unit = vec![real_vector(&[0.6, 0.8])];
        assert!((&mrt_directions(&unit).unwrap()[0] - &unit[0]).norm() < 1e-15);
    }

    #[test]
    fn constant_offset_orthogonal_closed_form() {
        let alphas = [2.0, 0.7, 5.0];
        let gamma = [4.0, 2.0, 1.5];
        let h = orthogonal_channels(&alphas, 4, 3);
        let nu = solve_nu_constant_offset(&h, &gamma, FixedPointOptions::default()).unwrap();
        for k in 0..3 {
            assert!((nu[k] - gamma[k] / alphas[k]).abs() < 1e-8 * nu[k]);
        }
        let approx = nu_massive_approx(&h, &gamma).unwrap();
        for k in 0..3 {
            assert!((approx[k] - nu[k]).abs() < 1e-8 * nu[k]);
        }
        let dirs = directions_constant_offset(&nu, &h, &gamma).unwrap();
        for k in 0..3 {
            let mrt = linalg::normalized(&h[k]).unwrap();
            assert!((1.0 - linalg::inner(&mrt, &dirs[k]).norm()).abs() < 1e-8);
        }
    }

    #[test]
    fn single_user_nu() {
        let h = vec![real_vector(&[1.0, 1.0, 0.0])];
        let nu = solve_nu_constant_offset(&h, &[3.0], FixedPointOptions::default()).unwrap();
        assert!((nu[0] - 1.5).abs() < 1e-10);
        assert_eq!(nu_massive_approx(&[real_vector(&[1.0, 1.0])], &[4.0]).unwrap(), vec![2.0]);
        assert!(nu_massive_approx(&[CVector::zeros(2)], &[4.0]).is_err());
    }

    #[test]
    fn constant_offset_random_residuals() {
        for seed in 0..10 {
            let h = random_channels(3, 4, seed, 2.0);
            let gamma = [4.0, 4.0, 4.0];
            let nu = solve_nu_constant_offset(&h, &gamma, FixedPointOptions::default()).unwrap();
            assert!(nu_constant_offset_residual(&h, &gamma, &nu) < 1e-10);
            let dirs = directions_constant_offset(&nu, &h, &gamma).unwrap();
            for k in 0..3 {
                let op = KktOperator::new(k, &nu, &h, &gamma, &[0.0; 3], 0.0, None);
                let b = op.dense();
                let (lmax, _) = linalg::principal_eigenpair_dense(&b);
                let res = (&b * &dirs[k] - &dirs[k] * c(lmax, 0.0)).norm();
                assert!(res < 1e-8, "residual {res}");
                assert!(linalg::inner(&h[k], &dirs[k]).im.abs() < 1e-12);
                assert!(linalg::inner(&h[k], &dirs[k]).re >= 0.0);
            }
        }
    }

    #[test]
    fn constant_offset_tilts_away_from_interferer() {
        let h = vec![real_vector(&[1.0, 0.1, 0.0]), real_vector(&[1.0, -0.1, 0.05])];
        let gamma = [2.0, 2.0];
        let dirs = constant_offset_design_directions(&h, &gamma).unwrap();
        let mrt = mrt_directions(&h).unwrap();
        assert!(linalg::inner(&h[1], &dirs[0]).norm() < linalg::inner(&h[1], &mrt[0]).norm());
        assert!(linalg::inner(&h[0], &dirs[1]).norm() < linalg::inner(&h[0], &mrt[1]).norm());
    }

    #[test]
    fn robust_reduces_to_perfect_csi() {
        let h = random_channels(3, 4, 5, 2.0);
        let gamma = [4.0, 2.0, 3.0];
        let zf = zf_directions(&h).unwrap();
        let reference = solve_nu_constant_offset(&h, &gamma, FixedPointOptions::default()).unwrap();
        for (sigma, r) in [(0.0, 2.0), (0.0, 0.0), (0.1, 0.0)] {
            if sigma != 0.0 {
                continue;
            }
            let dual = solve_nu(&h, &gamma, &[sigma; 3], r, &zf, FixedPointOptions::default()).unwrap();
            for k in 0..3 {
                assert!((dual.nu[k] - reference[k]).abs() < 1e-10 * reference[k]);
            }
        }
        let h = orthogonal_channels(&[1.0, 1.0, 1.0], 4, 2);
        let dual = solve_nu(&h, &gamma, &[0.0; 3], 2.0, &zf_directions(&h).unwrap(), FixedPointOptions::default()).unwrap();
        for k in 0..3 {
            assert!((dual.nu[k] - gamma[k]).abs() < 1e-9 * gamma[k]);
        }
        let dirs = directions_from_nu(&dual, &h, &gamma, &[0.0; 3], 2.0).unwrap();
        for k in 0..3 {
            assert!((1.0 - linalg::inner(&h[k], &dirs[k]).re).abs() < 1e-9);
        }
    }

    /// Independent build of `M_k` straight from the fixed-point expression.
    fn explicit_m(k: usize, nu: &[f64], h: &[CVector], gamma: &[f64], s: f64, r: f64, psi: &[CVector]) -> CMatrix {
        let n = h[0].len();
        let rho = r * std::f64::consts::SQRT_2 * s;
        let mut m = CMatrix::identity(n, n) * c(1.0 - nu[k] * s * s / gamma[k], 0.0);
        for j in 0..h.len() {
            m += &h[j] * h[j].adjoint() * c(nu[j], 0.0);
            let he = (&psi[j] * h[j].adjoint() + &h[j] * psi[j].adjoint()) * c(0.5, 0.0);
            if j == k {
                m += he * c(rho * nu[k] / gamma[k], 0.0);
            } else {
                m += CMatrix::identity(n, n) * c(nu[j] * s * s, 0.0);
                m -= he * c(rho * nu[j], 0.0);
            }
        }
        m
    }

    #[test]
    fn robust_fixed_point_self_consistency() {
        for seed in 0..10 {
            let h = random_channels(3, 4, 40 + seed, 3.0);
            let gamma = [4.0; 3];
            let sigma = [0.1; 3];
            let zf = zf_directions(&h).unwrap();
            let dual = solve_nu(&h, &gamma, &sigma, 2.0, &zf, FixedPointOptions::default()).unwrap();
            for k in 0..3 {
                let m = explicit_m(k, &dual.nu, &h, &gamma, 0.1, 2.0, &dual.psi_directions);
                let x = m.lu().solve(&h[k]).unwrap();
                let rhs = linalg::inner(&h[k], &x).re * (1.0 + 1.0 / gamma[k]);
                assert!((rhs - 1.0 / dual.nu[k]).abs() * dual.nu[k] < 1e-8);
            }
            assert!(nu_residual(&h, &gamma, &sigma, 2.0, &dual.psi_directions, &dual.nu) < 1e-8);
            for p in &dual.psi_directions {
                assert!((p.norm() - 1.0).abs() < 1e-9);
            }
            let dirs = directions_from_nu(&dual, &h, &gamma, &sigma, 2.0).unwrap();
            for k in 0..3 {
                let b = kkt_matrix(k, &dual.nu, &h, &gamma, &sigma, 2.0, &dual.psi_directions);
                let (lmax, _) = linalg::principal_eigenpair_dense(&b);
                assert!((&b * &dirs[k] - &dirs[k] * c(lmax, 0.0)).norm() < 1e-8);
                assert!(linalg::inner(&h[k], &dirs[k]).im.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn robust_directions_continuous_in_sigma() {
        let h = random_channels(3, 4, 77, 3.0);
        let gamma = [4.0; 3];
        let zf = zf_directions(&h).unwrap();
        let co = constant_offset_design_directions(&h, &gamma).unwrap();
        let dual = solve_nu(&h, &gamma, &[1e-4; 3], 2.0, &zf, FixedPointOptions::default()).unwrap();
        let dirs = directions_from_nu(&dual, &h, &gamma, &[1e-4; 3], 2.0).unwrap();
        for k in 0..3 {
            assert!(linalg::inner(&co[k], &dirs[k]).norm() > 1.0 - 1e-4);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let h = random_channels(3, 4, 12, 2.0);
        let gamma = [4.0, 2.0, 3.0];
        let perm = [2, 0, 1];
        let hp: Vec<CVector> = perm.iter().map(|&i| h[i].clone()).collect();
        let gp: Vec<f64> = perm.iter().map(|&i| gamma[i]).collect();
        let zf = zf_directions(&h).unwrap();
        let zfp = zf_directions(&hp).unwrap();
        let a = solve_nu(&h, &gamma, &[0.1; 3], 2.0, &zf, FixedPointOptions::default()).unwrap();
        let b = solve_nu(&hp, &gp, &[0.1; 3], 2.0, &zfp, FixedPointOptions::default()).unwrap();
        let da = directions_from_nu(&a, &h, &gamma, &[0.1; 3], 2.0).unwrap();
        let db = directions_from_nu(&b, &hp, &gp, &[0.1; 3], 2.0).unwrap();
        for (pos, &i) in perm.iter().enumerate() {
            assert!((a.nu[i] - b.nu[pos]).abs() < 1e-9 * a.nu[i]);
            assert!((&da[i] - &db[pos]).norm() < 1e-8);
        }
    }

    #[test]
    fn massive_approx_close_for_many_antennas() {
        // Mean deviation over random draws; single entries can exceed it
        // since the approximation error scales like (K−1)γ/N_t.
        let mut devs = Vec::new();
        for seed in 0..20 {
            let h = random_channels(4, 64, 300 + seed, 1.0);
            let gamma = [4.0; 4];
            let exact = solve_nu_constant_offset(&h, &gamma, FixedPointOptions::default()).unwrap();
            let approx = nu_massive_approx(&h, &gamma).unwrap();
            devs.extend((0..4).map(|k| (approx[k] - exact[k]).abs() / exact[k]));
        }
        let mean = devs.iter().sum::<f64>() / devs.len() as f64;
        assert!(mean < 0.05, "mean relative deviation {mean}");
    }
}
