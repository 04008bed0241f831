//! Drift evaluators `b(t, z)`.
//!
//! Every evaluator works in its own latent coordinates `w = (x - mu) / sigma`
//! described by [`Drift::stats`]; the analytic priors use identity stats.
//! Score and denoiser mean are derived from the drift through
//! [`crate::interpolant`], so a drift is all a sampler needs.

mod gmm;
mod net;

pub use gmm::{gmm_drift, GmmPrior, IsoGaussianPrior};
pub use net::{Mlp, NetDrift};

use crate::error::{DaisiError, Result};
use crate::interpolant::{denoiser_mean_from_drift, NormStats, Schedule};

pub trait Drift: Send + Sync {
    fn dim(&self) -> usize;

    fn stats(&self) -> &NormStats;

    fn schedule(&self) -> Schedule {
        Schedule::Linear
    }

    /// Latent-space drift for a batch of states stored row-major (`n x dim`).
    fn drift_batch(&self, t: f64, z: &[f64], out: &mut [f64]) -> Result<()>;

    fn drift(&self, t: f64, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len())?;
        let mut out = vec![0.0; z.len()];
        self.drift_batch(t, z, &mut out)?;
        Ok(out)
    }

    fn denoiser_mean(&self, t: f64, z: &[f64]) -> Result<Vec<f64>> {
        let b = self.drift(t, z)?;
        denoiser_mean_from_drift(&b, z, t, self.schedule())
    }

    /// Jacobian of the denoiser mean `E[z_1 | z_t = z]` applied to `v`.
    ///
    /// The default uses central differences along `v` with step
    /// `1e-4 (1 + |z|_inf)`.
    fn denoiser_jvp(&self, t: f64, z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len())?;
        check_dim(self.dim(), v.len())?;
        let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if vmax == 0.0 {
            return Ok(vec![0.0; v.len()]);
        }
        let zmax = z.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let h = 1e-4 * (1.0 + zmax);
        let step: Vec<f64> = v.iter().map(|x| h * x / vmax).collect();
        let plus: Vec<f64> = z.iter().zip(&step).map(|(a, b)| a + b).collect();
        let minus: Vec<f64> = z.iter().zip(&step).map(|(a, b)| a - b).collect();
        let ep = self.denoiser_mean(t, &plus)?;
        let em = self.denoiser_mean(t, &minus)?;
        Ok(ep.iter().zip(&em).map(|(a, b)| vmax * (a - b) / (2.0 * h)).collect())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(DaisiError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// `(d/dz E[z_1 | z_t = z]) v`.
pub fn jacobian_vector_product<D: Drift + ?Sized>(model: &D, z: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
    model.denoiser_jvp(t, z, v)
}

/// Full denoiser Jacobian, row-major `dim x dim`, assembled column by column from JVPs.
pub fn denoiser_jacobian<D: Drift + ?Sized>(model: &D, z: &[f64], t: f64) -> Result<Vec<f64>> {
    let d = model.dim();
    let mut jac = vec![0.0; d * d];
    let mut e = vec![0.0; d];
    for col in 0..d {
        e.iter_mut().for_each(|x| *x = 0.0);
        e[col] = 1.0;
        let jv = model.denoiser_jvp(t, z, &e)?;
        for row in 0..d {
            jac[row * d + col] = jv[row];
        }
    }
    Ok(jac)
}

/// The drift models the experiments use.
#[derive(Debug, Clone)]
pub enum DriftModel {
    Gmm(GmmPrior),
    Gaussian(IsoGaussianPrior),
    Net(NetDrift),
}

impl Drift for DriftModel {
    fn dim(&self) -> usize {
        match self {
            DriftModel::Gmm(m) => m.dim(),
            DriftModel::Gaussian(m) => m.dim(),
            DriftModel::Net(m) => m.dim(),
        }
    }

    fn stats(&self) -> &NormStats {
        match self {
            DriftModel::Gmm(m) => m.stats(),
            DriftModel::Gaussian(m) => m.stats(),
            DriftModel::Net(m) => m.stats(),
        }
    }

    fn drift_batch(&self, t: f64, z: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            DriftModel::Gmm(m) => m.drift_batch(t, z, out),
            DriftModel::Gaussian(m) => m.drift_batch(t, z, out),
            DriftModel::Net(m) => m.drift_batch(t, z, out),
        }
    }

    fn denoiser_jvp(&self, t: f64, z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        match self {
            DriftModel::Gmm(m) => m.denoiser_jvp(t, z, v),
            DriftModel::Gaussian(m) => m.denoiser_jvp(t, z, v),
            DriftModel::Net(m) => m.denoiser_jvp(t, z, v),
        }
    }
}
