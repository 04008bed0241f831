use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_dim, Drift};
use crate::error::{DaisiError, Result};
use crate::interpolant::{NormStats, Schedule};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// One-dimensional Gaussian mixture prior.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    stats: NormStats,
}

/// Per-component posterior quantities at `(t, z)`.
struct Components {
    resp: Vec<f64>,
    /// E[z1 | z_t, k]
    e1: Vec<f64>,
    /// E[z0 | z_t, k]
    e0: Vec<f64>,
    /// d/dz log N(z; m_k, v_k)
    dlog: Vec<f64>,
    /// d/dz E[z1 | z_t, k]
    de1: Vec<f64>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || stds.len() != k {
            return Err(DaisiError::InvalidParameter(
                "mixture weights, means and stds must be non-empty and equally long".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 || weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(DaisiError::InvalidParameter(format!(
                "mixture weights must be non-negative and sum to 1 (sum = {total})"
            )));
        }
        if stds.iter().any(|&s| !(s > 0.0 && s.is_finite())) || means.iter().any(|m| !m.is_finite()) {
            return Err(DaisiError::InvalidParameter(
                "mixture stds must be positive and means finite".into(),
            ));
        }
        Ok(GmmPrior {
            weights,
            means,
            stds,
            stats: NormStats::identity(1),
        })
    }

    /// The three-component mixture used by the 1D testbed.
    pub fn testbed() -> Self {
        GmmPrior::new(vec![0.5, 0.3, 0.2], vec![0.0, 3.0, -2.0], vec![1.0, 0.5, 0.8]).expect("testbed mixture is valid")
    }

    pub fn standard_normal() -> Self {
        GmmPrior::new(vec![1.0], vec![0.0], vec![1.0]).expect("valid")
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(w, (mu, s))| w * (s * s + mu * mu))
            .sum::<f64>()
            - m * m
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let logs: Vec<f64> = (0..self.len())
            .map(|k| {
                let s = self.stds[k];
                let u = (x - self.means[k]) / s;
                self.weights[k].ln() - LN_SQRT_2PI - s.ln() - 0.5 * u * u
            })
            .collect();
        log_sum_exp(&logs)
    }

    pub fn density(&self, x: f64) -> f64 {
        self.log_density(x).exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let xi: f64 = StandardNormal.sample(rng);
        self.means[k] + self.stds[k] * xi
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    fn components(&self, z: f64, t: f64, schedule: Schedule) -> Components {
        let alpha = schedule.alpha(t);
        let beta = schedule.beta(t);
        let k = self.len();
        let mut logr = Vec::with_capacity(k);
        let mut e1 = Vec::with_capacity(k);
        let mut e0 = Vec::with_capacity(k);
        let mut dlog = Vec::with_capacity(k);
        let mut de1 = Vec::with_capacity(k);
        for i in 0..k {
            let s2 = self.stds[i] * self.stds[i];
            let m = alpha * self.means[i];
            let v = alpha * alpha * s2 + beta * beta;
            let r = z - m;
            logr.push(self.weights[i].ln() - 0.5 * v.ln() - 0.5 * r * r / v);
            e1.push(self.means[i] + alpha * s2 * r / v);
            e0.push(beta * r / v);
            dlog.push(-r / v);
            de1.push(alpha * s2 / v);
        }
        let lse = log_sum_exp(&logr);
        let resp = logr.iter().map(|l| (l - lse).exp()).collect();
        Components {
            resp,
            e1,
            e0,
            dlog,
            de1,
        }
    }

    /// Exact score of the interpolant marginal, a mixture of
    /// `N(alpha mu_k, alpha^2 sd_k^2 + beta^2)`.
    pub fn marginal_score(&self, z: f64, t: f64, schedule: Schedule) -> f64 {
        let c = self.components(z, t, schedule);
        c.resp.iter().zip(&c.dlog).map(|(r, d)| r * d).sum()
    }

    /// Exact `E[z_1 | z_t = z]`.
    pub fn denoiser_mean_exact(&self, z: f64, t: f64, schedule: Schedule) -> f64 {
        let c = self.components(z, t, schedule);
        c.resp.iter().zip(&c.e1).map(|(r, e)| r * e).sum()
    }

    /// Exact `d/dz E[z_1 | z_t = z]`.
    pub fn denoiser_derivative(&self, z: f64, t: f64, schedule: Schedule) -> f64 {
        let c = self.components(z, t, schedule);
        let mean_dlog: f64 = c.resp.iter().zip(&c.dlog).map(|(r, d)| r * d).sum();
        (0..self.len())
            .map(|k| c.resp[k] * (c.de1[k] + (c.dlog[k] - mean_dlog) * c.e1[k]))
            .sum()
    }
}

/// Exact interpolant drift toward a 1D Gaussian mixture.
///
/// Conditionally on component `k`, `z_t ~ N(alpha mu_k, alpha^2 sd_k^2 + beta^2)`
/// and `(z_1, z_0)` are jointly Gaussian with `z_t`, so the drift is a
/// responsibility-weighted sum of affine functions of `z`. Responsibilities
/// are computed in log space.
pub fn gmm_drift(prior: &GmmPrior, z: f64, t: f64, schedule: Schedule) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DaisiError::TimeOutOfRange { t });
    }
    let c = prior.components(z, t, schedule);
    let (da, db) = (schedule.dalpha(t), schedule.dbeta(t));
    Ok((0..prior.len())
        .map(|k| c.resp[k] * (da * c.e1[k] + db * c.e0[k]))
        .sum())
}

impl Drift for GmmPrior {
    fn dim(&self) -> usize {
        1
    }

    fn stats(&self) -> &NormStats {
        &self.stats
    }

    fn drift_batch(&self, t: f64, z: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(z.len(), out.len())?;
        for (o, &zi) in out.iter_mut().zip(z) {
            *o = gmm_drift(self, zi, t, Schedule::Linear)?;
        }
        Ok(())
    }

    fn denoiser_jvp(&self, t: f64, z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_dim(1, z.len())?;
        check_dim(1, v.len())?;
        Ok(vec![self.denoiser_derivative(z[0], t, Schedule::Linear) * v[0]])
    }
}

/// Isotropic Gaussian prior `N(mean, std^2 I)` in any dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct IsoGaussianPrior {
    pub mean: Vec<f64>,
    pub std: f64,
    stats: NormStats,
}

impl IsoGaussianPrior {
    pub fn new(mean: Vec<f64>, std: f64) -> Result<Self> {
        if mean.is_empty() || !(std > 0.0 && std.is_finite()) {
            return Err(DaisiError::InvalidParameter(
                "Gaussian prior needs a non-empty mean and positive std".into(),
            ));
        }
        let d = mean.len();
        Ok(IsoGaussianPrior {
            mean,
            std,
            stats: NormStats::identity(d),
        })
    }

    fn gain(&self, t: f64) -> (f64, f64) {
        let s = Schedule::Linear;
        let (alpha, beta) = (s.alpha(t), s.beta(t));
        let s2 = self.std * self.std;
        let v = alpha * alpha * s2 + beta * beta;
        (alpha * s2 / v, beta / v)
    }
}

impl Drift for IsoGaussianPrior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn stats(&self) -> &NormStats {
        &self.stats
    }

    fn drift_batch(&self, t: f64, z: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(z.len(), out.len())?;
        if !(0.0..=1.0).contains(&t) {
            return Err(DaisiError::TimeOutOfRange { t });
        }
        let d = self.dim();
        if z.len() % d != 0 {
            return Err(DaisiError::DimensionMismatch {
                expected: d,
                got: z.len(),
            });
        }
        let s = Schedule::Linear;
        let (alpha, da, db) = (s.alpha(t), s.dalpha(t), s.dbeta(t));
        let (g1, g0) = self.gain(t);
        for (zrow, orow) in z.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            for i in 0..d {
                let r = zrow[i] - alpha * self.mean[i];
                orow[i] = da * (self.mean[i] + g1 * r) + db * g0 * r;
            }
        }
        Ok(())
    }

    fn denoiser_jvp(&self, t: f64, z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len())?;
        check_dim(self.dim(), v.len())?;
        let (g1, _) = self.gain(t);
        Ok(v.iter().map(|x| g1 * x).collect())
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
