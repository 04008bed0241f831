//! Interpolant schedule and the algebraic identities tying drift, score and
//! conditional means together.
//!
//! The interpolant is `z_t = alpha_t z_1 + beta_t z_0` with `z_0 ~ N(0, I)`.
//! Given the drift `b(t, z) = E[dz_t/dt | z_t = z]`, everything else needed by
//! the samplers follows in closed form:
//!
//! ```text
//! score        s(t, z)      = (alpha b - alpha' z) / (beta gamma)
//! denoiser     E[z1 | z_t]  = (beta b - beta' z) / gamma
//! noise mean   E[z0 | z_t]  = -beta s
//! gamma_t  = alpha' beta - alpha beta'
//! lambda_t = beta gamma / alpha
//! ```

use crate::error::{DaisiError, Result};

/// Score evaluation is refused for `t >= 1 - SCORE_SINGULARITY_MARGIN`.
pub const SCORE_SINGULARITY_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    /// `alpha_t = t`, `beta_t = 1 - t`.
    #[default]
    Linear,
}

/// All schedule coefficients at one time point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    pub alpha: f64,
    pub beta: f64,
    pub dalpha: f64,
    pub dbeta: f64,
    pub gamma: f64,
    /// `beta gamma / alpha`; `None` at `t = 0` where it diverges.
    pub lambda: Option<f64>,
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DaisiError::TimeOutOfRange { t });
    }
    Ok(())
}

impl Schedule {
    pub fn alpha(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => t,
        }
    }

    pub fn beta(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0 - t,
        }
    }

    pub fn dalpha(self, _t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0,
        }
    }

    pub fn dbeta(self, _t: f64) -> f64 {
        match self {
            Schedule::Linear => -1.0,
        }
    }

    pub fn gamma(self, t: f64) -> f64 {
        self.dalpha(t) * self.beta(t) - self.alpha(t) * self.dbeta(t)
    }

    pub fn coeffs(self, t: f64) -> Result<Coeffs> {
        check_time(t)?;
        let alpha = self.alpha(t);
        let beta = self.beta(t);
        let gamma = self.gamma(t);
        Ok(Coeffs {
            alpha,
            beta,
            dalpha: self.dalpha(t),
            dbeta: self.dbeta(t),
            gamma,
            lambda: (alpha > 0.0).then(|| beta * gamma / alpha),
        })
    }

    /// `lambda_t`, the factor that turns a likelihood score into a drift correction.
    pub fn lambda(self, t: f64) -> Result<f64> {
        self.coeffs(t)?.lambda.ok_or(DaisiError::SingularSchedule {
            t,
            what: "lambda_t diverges at t = 0",
        })
    }

    /// `(1 - t) / beta_t`. Multiplying a score by `eps (1 - t)` cancels its
    /// `1 / beta_t` singularity; this is the factor left over.
    pub(crate) fn eps_score_factor(self, _t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0,
        }
    }
}

/// Six coefficients `(alpha, beta, dalpha, dbeta, gamma, lambda)` at `t`.
///
/// Requesting the full tuple at `t = 0` fails because `lambda` is singular
/// there; use [`Schedule::coeffs`] to get the rest.
pub fn schedule_coeffs(schedule: Schedule, t: f64) -> Result<(f64, f64, f64, f64, f64, f64)> {
    let c = schedule.coeffs(t)?;
    let lambda = c.lambda.ok_or(DaisiError::SingularSchedule {
        t,
        what: "lambda_t diverges at t = 0",
    })?;
    Ok((c.alpha, c.beta, c.dalpha, c.dbeta, c.gamma, lambda))
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(DaisiError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// Score of the interpolant marginal from its drift.
pub fn score_from_drift(b: &[f64], z: &[f64], t: f64, schedule: Schedule) -> Result<Vec<f64>> {
    check_same_len(b, z)?;
    let c = schedule.coeffs(t)?;
    if t >= 1.0 - SCORE_SINGULARITY_MARGIN {
        return Err(DaisiError::SingularSchedule {
            t,
            what: "score diverges as t -> 1",
        });
    }
    let denom = c.beta * c.gamma;
    Ok(b.iter()
        .zip(z)
        .map(|(&bi, &zi)| (c.alpha * bi - c.dalpha * zi) / denom)
        .collect())
}

/// `E[z_1 | z_t = z]` from the drift. Exact (`= z`) at `t = 1`.
pub fn denoiser_mean_from_drift(b: &[f64], z: &[f64], t: f64, schedule: Schedule) -> Result<Vec<f64>> {
    check_same_len(b, z)?;
    let c = schedule.coeffs(t)?;
    if t == 1.0 {
        return Ok(z.to_vec());
    }
    Ok(b.iter()
        .zip(z)
        .map(|(&bi, &zi)| (c.beta * bi - c.dbeta * zi) / c.gamma)
        .collect())
}

/// `E[z_0 | z_t = z] = -beta_t s(t, z)`, written without dividing by `beta_t`.
pub fn noise_mean_from_drift(b: &[f64], z: &[f64], t: f64, schedule: Schedule) -> Result<Vec<f64>> {
    check_same_len(b, z)?;
    let c = schedule.coeffs(t)?;
    Ok(b.iter()
        .zip(z)
        .map(|(&bi, &zi)| -(c.alpha * bi - c.dalpha * zi) / c.gamma)
        .collect())
}

/// Per-experiment normalisation: latent `w = (x - mu) / sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mu: Vec<f64>,
    pub sigma: f64,
}

impl NormStats {
    pub fn new(mu: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(DaisiError::InvalidParameter(format!(
                "normalisation sigma must be positive and finite, got {sigma}"
            )));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(DaisiError::InvalidParameter("non-finite normalisation mean".into()));
        }
        Ok(NormStats { mu, sigma })
    }

    pub fn identity(dim: usize) -> Self {
        NormStats {
            mu: vec![0.0; dim],
            sigma: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn to_latent(&self, x: &[f64], w: &mut [f64]) {
        for ((wi, &xi), &mi) in w.iter_mut().zip(x).zip(&self.mu) {
            *wi = (xi - mi) / self.sigma;
        }
    }

    pub fn from_latent(&self, w: &[f64], x: &mut [f64]) {
        for ((xi, &wi), &mi) in x.iter_mut().zip(w).zip(&self.mu) {
            *xi = mi + self.sigma * wi;
        }
    }
}

/// Data-space drift from a drift learned on normalised data:
/// `b_Z(t, z) = sigma b_W(t, (z - mu) / sigma)`.
///
/// `b_w` must already be evaluated at the normalised point.
pub fn rescale_drift(b_w: &[f64], stats: &NormStats) -> Vec<f64> {
    b_w.iter().map(|&b| stats.sigma * b).collect()
}

/// Data-space score from a data-space drift of a normalised model,
/// `s_Z = (alpha b_Z - alpha' (z - mu)) / (sigma^2 beta gamma)`.
pub fn scaled_score_from_drift(
    b_z: &[f64],
    z: &[f64],
    t: f64,
    schedule: Schedule,
    stats: &NormStats,
) -> Result<Vec<f64>> {
    check_same_len(b_z, z)?;
    check_same_len(&stats.mu, z)?;
    let c = schedule.coeffs(t)?;
    if t >= 1.0 - SCORE_SINGULARITY_MARGIN {
        return Err(DaisiError::SingularSchedule {
            t,
            what: "score diverges as t -> 1",
        });
    }
    let denom = stats.sigma * stats.sigma * c.beta * c.gamma;
    Ok(b_z
        .iter()
        .zip(z)
        .zip(&stats.mu)
        .map(|((&b, &zi), &m)| (c.alpha * b - c.dalpha * (zi - m)) / denom)
        .collect())
}

/// Data-space `E[z_1 | z_t]` from a data-space drift of a normalised model.
pub fn scaled_denoiser_mean_from_drift(
    b_z: &[f64],
    z: &[f64],
    t: f64,
    schedule: Schedule,
    stats: &NormStats,
) -> Result<Vec<f64>> {
    check_same_len(b_z, z)?;
    check_same_len(&stats.mu, z)?;
    let c = schedule.coeffs(t)?;
    Ok(b_z
        .iter()
        .zip(z)
        .zip(&stats.mu)
        .map(|((&b, &zi), &m)| m + (c.beta * b - c.dbeta * (zi - m)) / c.gamma)
        .collect())
}

/// Diffusion strength profile `eps_t = eps (1 - t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsSchedule {
    pub eps: f64,
}

impl EpsSchedule {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(DaisiError::InvalidParameter(format!(
                "eps must be a finite non-negative number, got {eps}"
            )));
        }
        Ok(EpsSchedule { eps })
    }

    pub fn at(&self, t: f64) -> f64 {
        self.eps * (1.0 - t)
    }

    pub fn is_zero(&self) -> bool {
        self.eps == 0.0
    }

    /// `eps_t * s(t, z)` written in cancelled form so it stays finite up to `t = 1`.
    pub fn weighted_score(&self, t: f64, b: f64, z: f64, schedule: Schedule) -> f64 {
        let alpha = schedule.alpha(t);
        let dalpha = schedule.dalpha(t);
        self.eps * schedule.eps_score_factor(t) * (alpha * b - dalpha * z) / schedule.gamma(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_coefficients_midpoint() {
        let c = schedule_coeffs(Schedule::Linear, 0.5).unwrap();
        assert_eq!(c, (0.5, 0.5, 1.0, -1.0, 1.0, 1.0));
    }

    #[test]
    fn linear_coefficients_endpoint() {
        let c = schedule_coeffs(Schedule::Linear, 1.0).unwrap();
        assert_eq!(c, (1.0, 0.0, 1.0, -1.0, 1.0, 0.0));
    }

    #[test]
    fn lambda_quarter() {
        assert_eq!(Schedule::Linear.lambda(0.25).unwrap(), 3.0);
    }

    #[test]
    fn endpoint_conditions() {
        let s = Schedule::Linear;
        assert_eq!(s.alpha(0.0), 0.0);
        assert_eq!(s.alpha(1.0), 1.0);
        assert_eq!(s.beta(0.0), 1.0);
        assert_eq!(s.beta(1.0), 0.0);
    }

    #[test]
    fn lambda_singular_at_zero() {
        assert!(matches!(
            schedule_coeffs(Schedule::Linear, 0.0),
            Err(DaisiError::SingularSchedule { .. })
        ));
        assert!(Schedule::Linear.coeffs(0.0).unwrap().lambda.is_none());
        // lambda grows without bound towards t = 0
        assert!(Schedule::Linear.lambda(1e-9).unwrap() > 1e8);
    }

    #[test]
    fn out_of_range_time() {
        assert!(matches!(
            Schedule::Linear.coeffs(1.5),
            Err(DaisiError::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            Schedule::Linear.coeffs(-0.1),
            Err(DaisiError::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn score_of_b_equal_z_is_minus_z() {
        let z = [1.5, -2.0];
        let s = score_from_drift(&z, &z, 0.5, Schedule::Linear).unwrap();
        assert_eq!(s, vec![-1.5, 2.0]);
    }

    #[test]
    fn gaussian_score_via_drift() {
        // Standard normal target: b = z (2t - 1) / (t^2 + (1 - t)^2).
        let t: f64 = 0.3;
        let z = 1.0;
        let v = t * t + (1.0 - t) * (1.0 - t);
        let b = z * (2.0 * t - 1.0) / v;
        let s = score_from_drift(&[b], &[z], t, Schedule::Linear).unwrap()[0];
        assert!((s - (-1.0 / 0.58)).abs() < 1e-12);
        assert!((s + 1.724_137_931).abs() < 1e-8);
    }

    #[test]
    fn score_guard_near_one() {
        let r = score_from_drift(&[0.0], &[0.0], 1.0 - 0.5e-4, Schedule::Linear);
        assert!(matches!(r, Err(DaisiError::SingularSchedule { .. })));
        assert!(score_from_drift(&[0.0], &[0.0], 1.0 - 2e-4, Schedule::Linear).is_ok());
    }

    #[test]
    fn denoiser_endpoint_and_zero_drift() {
        let z = [0.7, -3.0];
        assert_eq!(
            denoiser_mean_from_drift(&[9.0, 9.0], &z, 1.0, Schedule::Linear).unwrap(),
            z.to_vec()
        );
        assert_eq!(
            denoiser_mean_from_drift(&[0.0], &[2.0], 0.5, Schedule::Linear).unwrap(),
            vec![2.0]
        );
    }

    #[test]
    fn rescale_identity_stats() {
        let b = [0.3, -1.2, 4.0];
        assert_eq!(rescale_drift(&b, &NormStats::identity(3)), b.to_vec());
    }

    #[test]
    fn rescaled_gaussian_drift_vanishes_at_mean() {
        // Normalised N(0, 1) drift at w = 0 is zero for every t, so the rescaled
        // N(m, s^2) drift at z = m is zero too.
        let stats = NormStats::new(vec![3.0], 2.0).unwrap();
        let t: f64 = 0.5;
        let mut w = [0.0];
        stats.to_latent(&[3.0], &mut w);
        let v = t * t + (1.0 - t) * (1.0 - t);
        let b_w = w[0] * (2.0 * t - 1.0) / v;
        assert_eq!(rescale_drift(&[b_w], &stats), vec![0.0]);
    }

    #[test]
    fn scaled_score_matches_latent_score() {
        // s_Z(t, z) = s_W(t, w) / sigma.
        let stats = NormStats::new(vec![1.0, -2.0], 3.0).unwrap();
        let t = 0.4;
        let z = [2.5, 0.5];
        let mut w = [0.0; 2];
        stats.to_latent(&z, &mut w);
        let b_w = [0.2, -0.7];
        let s_w = score_from_drift(&b_w, &w, t, Schedule::Linear).unwrap();
        let b_z = rescale_drift(&b_w, &stats);
        let s_z = scaled_score_from_drift(&b_z, &z, t, Schedule::Linear, &stats).unwrap();
        for (a, b) in s_z.iter().zip(&s_w) {
            assert!((a - b / stats.sigma).abs() < 1e-14);
        }
        let e_w = denoiser_mean_from_drift(&b_w, &w, t, Schedule::Linear).unwrap();
        let e_z = scaled_denoiser_mean_from_drift(&b_z, &z, t, Schedule::Linear, &stats).unwrap();
        let mut e_back = [0.0; 2];
        stats.from_latent(&e_w, &mut e_back);
        for (a, b) in e_z.iter().zip(&e_back) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn eps_schedule_profile() {
        let e = EpsSchedule::new(0.8).unwrap();
        assert_eq!(e.at(1.0), 0.0);
        assert!((e.at(0.25) - 0.6).abs() < 1e-15);
        assert!(EpsSchedule::new(-1.0).is_err());
    }

    #[test]
    fn weighted_score_matches_product_away_from_one() {
        let e = EpsSchedule::new(1.7).unwrap();
        let (t, b, z) = (0.37, 0.4, -1.1);
        let s = score_from_drift(&[b], &[z], t, Schedule::Linear).unwrap()[0];
        assert!((e.weighted_score(t, b, z, Schedule::Linear) - e.at(t) * s).abs() < 1e-13);
        assert!(e.weighted_score(1.0, b, z, Schedule::Linear).is_finite());
    }

    #[test]
    fn norm_stats_rejects_bad_sigma() {
        assert!(NormStats::new(vec![0.0], 0.0).is_err());
        assert!(NormStats::new(vec![0.0], f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn linear_closed_forms(t in 1e-6f64..1.0) {
            let (a, b, da, db, g, l) = schedule_coeffs(Schedule::Linear, t).unwrap();
            prop_assert_eq!(a, t);
            prop_assert_eq!(b, 1.0 - t);
            prop_assert_eq!(da, 1.0);
            prop_assert_eq!(db, -1.0);
            prop_assert_eq!(g, 1.0);
            prop_assert!((l - (1.0 - t) / t).abs() <= 1e-15 * l.abs().max(1.0));
        }

        #[test]
        fn alpha_denoiser_plus_beta_noise_is_z(
            t in 0.05f64..0.95,
            b in -10.0f64..10.0,
            z in -10.0f64..10.0,
        ) {
            let s = Schedule::Linear;
            let e1 = denoiser_mean_from_drift(&[b], &[z], t, s).unwrap()[0];
            let score = score_from_drift(&[b], &[z], t, s).unwrap()[0];
            let e0 = -s.beta(t) * score;
            let recon = s.alpha(t) * e1 + s.beta(t) * e0;
            prop_assert!((recon - z).abs() <= 1e-10 * z.abs().max(1.0));
            let e0_direct = noise_mean_from_drift(&[b], &[z], t, s).unwrap()[0];
            prop_assert!((e0 - e0_direct).abs() <= 1e-10 * e0.abs().max(1.0));
        }
    }
}
