//! Dynamical systems and observation generation.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::drift::GmmPrior;
use crate::error::{DaisiError, Result};
use crate::filters::reweight_resample;
use crate::guidance::ObservationModel;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L63Params {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt: f64,
}

impl Default for L63Params {
    fn default() -> Self {
        L63Params {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.01,
        }
    }
}

/// Canonical Lorenz '63 vector field.
pub fn l63_rhs(x: &[f64; 3], p: &L63Params) -> [f64; 3] {
    [
        p.sigma * (x[1] - x[0]),
        x[0] * (p.rho - x[2]) - x[1],
        x[0] * x[1] - p.beta * x[2],
    ]
}

/// One classical fourth-order Runge–Kutta step.
pub fn rk4_step<const N: usize, F>(f: F, x: &[f64; N], dt: f64) -> [f64; N]
where
    F: Fn(&[f64; N]) -> [f64; N],
{
    let axpy = |a: &[f64; N], k: &[f64; N], h: f64| {
        let mut out = *a;
        for i in 0..N {
            out[i] += h * k[i];
        }
        out
    };
    let k1 = f(x);
    let k2 = f(&axpy(x, &k1, 0.5 * dt));
    let k3 = f(&axpy(x, &k2, 0.5 * dt));
    let k4 = f(&axpy(x, &k3, dt));
    let mut out = *x;
    for i in 0..N {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

pub fn l63_step(x: &[f64; 3], p: &L63Params) -> [f64; 3] {
    rk4_step(|s| l63_rhs(s, p), x, p.dt)
}

/// `n_steps` states starting at `x0` (included) with one RK4 step between rows.
pub fn l63_trajectory(x0: [f64; 3], n_steps: usize, p: &L63Params) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(n_steps);
    let mut x = x0;
    for _ in 0..n_steps {
        out.push(x);
        x = l63_step(&x, p);
    }
    out
}

/// Forecast model `x_n = F(x_{n-1}, omega_n)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Propagator {
    /// Lorenz '63 with `steps` RK4 steps per assimilation cycle and optional
    /// additive Gaussian jitter of standard deviation `jitter` per cycle.
    L63 {
        params: L63Params,
        steps: usize,
        jitter: f64,
    },
    /// Scalar (applied componentwise) AR(1): `x' = a x + sqrt(q) xi`.
    LinearGaussian {
        a: f64,
        q: f64,
    },
    Static,
}

impl Propagator {
    pub fn l63() -> Self {
        Propagator::L63 {
            params: L63Params::default(),
            steps: 1,
            jitter: 0.0,
        }
    }

    pub fn is_stochastic(&self) -> bool {
        match self {
            Propagator::L63 { jitter, .. } => *jitter > 0.0,
            Propagator::LinearGaussian { q, .. } => *q > 0.0,
            Propagator::Static => false,
        }
    }

    /// Advances one state in place, drawing process noise from `rng`.
    pub fn advance(&self, x: &mut [f64], rng: &mut StreamRng) -> Result<()> {
        match self {
            Propagator::L63 { params, steps, jitter } => {
                if x.len() != 3 {
                    return Err(DaisiError::DimensionMismatch {
                        expected: 3,
                        got: x.len(),
                    });
                }
                let mut s = [x[0], x[1], x[2]];
                for _ in 0..*steps {
                    s = l63_step(&s, params);
                }
                x.copy_from_slice(&s);
                if *jitter > 0.0 {
                    for v in x.iter_mut() {
                        let xi: f64 = rng.sample(StandardNormal);
                        *v += jitter * xi;
                    }
                }
            }
            Propagator::LinearGaussian { a, q } => {
                let sd = q.sqrt();
                for v in x.iter_mut() {
                    let xi: f64 = rng.sample(StandardNormal);
                    *v = a * *v + sd * xi;
                }
            }
            Propagator::Static => {}
        }
        Ok(())
    }

    /// Truth propagation: identical to [`advance`](Self::advance) but without the
    /// filter-side jitter on deterministic systems.
    pub fn advance_truth(&self, x: &mut [f64], rng: &mut StreamRng) -> Result<()> {
        match self {
            Propagator::L63 { params, steps, .. } => Propagator::L63 {
                params: *params,
                steps: *steps,
                jitter: 0.0,
            }
            .advance(x, rng),
            other => other.advance(x, rng),
        }
    }
}

/// `H(x) + N(0, sigma_obs^2 I)`.
pub fn observe<R: Rng + ?Sized>(x: &[f64], obs: &ObservationModel, rng: &mut R) -> Vec<f64> {
    let mut y = obs.apply(x);
    for v in y.iter_mut() {
        let xi: f64 = rng.sample(StandardNormal);
        *v += obs.sigma_obs * xi;
    }
    y
}

/// The static one-dimensional filtering problem built around a Gaussian mixture.
#[derive(Debug, Clone)]
pub struct GmmTestbed {
    pub prior: GmmPrior,
    /// Draws from the mixture, shared with Monte Carlo guidance.
    pub pool: Arc<Vec<f64>>,
    /// Predictive ensemble: mixture draws reweighted by the forecast tilt `f`.
    pub forecast: Vec<f64>,
    /// Samples of the true filtering distribution `p(y|x) pi_hat(x)`.
    pub posterior: Vec<f64>,
    /// Samples of the stationary posterior `p(y|x) P_inf(x)`.
    pub stationary_posterior: Vec<f64>,
    pub y: f64,
    pub sigma_obs: f64,
    pub tilt_mean: f64,
    pub tilt_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmTestbedParams {
    /// Number of mixture draws behind each resampled set.
    pub n: usize,
    /// Size of the Monte Carlo guidance pool.
    pub pool: usize,
    pub y: f64,
    pub sigma_obs: f64,
    pub tilt_mean: f64,
    pub tilt_std: f64,
}

impl Default for GmmTestbedParams {
    fn default() -> Self {
        GmmTestbedParams {
            n: 10_000,
            pool: 10_000,
            y: 2.5,
            sigma_obs: 1.0,
            tilt_mean: 0.5,
            tilt_std: 1.5,
        }
    }
}

impl GmmTestbed {
    /// Log of the Gaussian forecast tilt `f`, up to a constant.
    pub fn log_tilt(&self, x: f64) -> f64 {
        let u = (x - self.tilt_mean) / self.tilt_std;
        -0.5 * u * u
    }

    pub fn log_lik(&self, x: f64) -> f64 {
        let u = (self.y - x) / self.sigma_obs;
        -0.5 * u * u
    }
}

/// Builds the prior pool, the forecast ensemble and the two posterior oracles.
pub fn build_gmm_testbed(seed: u64, params: &GmmTestbedParams) -> Result<GmmTestbed> {
    if params.n == 0 || params.pool == 0 {
        return Err(DaisiError::InvalidParameter("testbed sizes must be positive".into()));
    }
    let prior = GmmPrior::testbed();
    let mut bed = GmmTestbed {
        prior: prior.clone(),
        pool: Arc::new(Vec::new()),
        forecast: Vec::new(),
        posterior: Vec::new(),
        stationary_posterior: Vec::new(),
        y: params.y,
        sigma_obs: params.sigma_obs,
        tilt_mean: params.tilt_mean,
        tilt_std: params.tilt_std,
    };
    let draws = |tag: u64, n: usize| prior.sample_n(n, &mut rng::stream(seed, &[0x6d6d, tag]));
    bed.pool = Arc::new(draws(0, params.pool));

    let base = draws(1, params.n);
    let mut r = rng::stream(seed, &[0x6d6d, 2]);
    let log_w: Vec<f64> = base.iter().map(|&x| bed.log_tilt(x)).collect();
    bed.forecast = reweight_resample(&base, 1, &log_w, params.n, &mut r)?;

    let base = draws(3, params.n);
    let mut r = rng::stream(seed, &[0x6d6d, 4]);
    let log_w: Vec<f64> = base.iter().map(|&x| bed.log_tilt(x) + bed.log_lik(x)).collect();
    bed.posterior = reweight_resample(&base, 1, &log_w, params.n, &mut r)?;

    let base = draws(5, params.n);
    let mut r = rng::stream(seed, &[0x6d6d, 6]);
    let log_w: Vec<f64> = base.iter().map(|&x| bed.log_lik(x)).collect();
    bed.stationary_posterior = reweight_resample(&base, 1, &log_w, params.n, &mut r)?;
    Ok(bed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::ObservationOperator;

    #[test]
    fn rhs_examples() {
        let p = L63Params::default();
        assert_eq!(l63_rhs(&[0.0; 3], &p), [0.0; 3]);
        let r = l63_rhs(&[1.0, 1.0, 1.0], &p);
        assert_eq!(r[0], 0.0);
        assert_eq!(r[1], 26.0);
        assert!((r[2] + 5.0 / 3.0).abs() < 1e-15);
        let c = (p.beta * (p.rho - 1.0)).sqrt();
        let r = l63_rhs(&[c, c, p.rho - 1.0], &p);
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rk4_exponential() {
        let dt = 0.01;
        let x = rk4_step(|x: &[f64; 1]| [x[0]], &[1.0], dt)[0];
        let poly = 1.0 + dt + dt * dt / 2.0 + dt.powi(3) / 6.0 + dt.powi(4) / 24.0;
        assert!((x - poly).abs() < 1e-15);
        assert!(((x - dt.exp()) / dt.exp()).abs() < 1e-10);
        assert_eq!(rk4_step(|_: &[f64; 2]| [0.0, 0.0], &[3.0, -1.0], 0.1), [3.0, -1.0]);
    }

    #[test]
    fn rk4_fourth_order() {
        // Error at t = 1 after n steps of x' = x; the one-step error is O(dt^5),
        // so the accumulated error drops ~16x when dt halves.
        let err = |n: usize| {
            let dt = 1.0 / n as f64;
            let mut x = [1.0];
            for _ in 0..n {
                x = rk4_step(|x: &[f64; 1]| [x[0]], &x, dt);
            }
            (x[0] - 1f64.exp()).abs()
        };
        let ratio = err(10) / err(20);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn l63_bounded_and_chaotic() {
        let p = L63Params::default();
        let a = l63_trajectory([0.0, 1.0, 1.05], 5000, &p);
        assert!(a.iter().all(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt() < 100.0));
        // Perturb a state on the attractor by 1e-8. With a leading exponent near
        // 0.9 the separation grows ~e^18 over 2000 steps and saturates at the
        // attractor scale a little later.
        let x0 = a[2500];
        let c = l63_trajectory(x0, 4000, &p);
        let d = l63_trajectory([x0[0] + 1e-8, x0[1], x0[2]], 4000, &p);
        let gap = |n: usize| {
            c[..n]
                .iter()
                .zip(&d[..n])
                .map(|(u, v)| (0..3).map(|i| (u[i] - v[i]).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max)
        };
        let rate = (gap(2000) / 1e-8).ln() / (2000.0 * p.dt);
        assert!((0.6..1.3).contains(&rate), "growth rate {rate}");
        assert!(gap(4000) > 5.0, "gap {}", gap(4000));
    }

    #[test]
    fn observe_examples() {
        let mut r = rng::stream(3, &[]);
        let id = ObservationModel::new(ObservationOperator::Identity, 1e-12, 3).unwrap();
        let y = observe(&[1.0, 2.0, 3.0], &id, &mut r);
        assert!(y.iter().zip([1.0, 2.0, 3.0]).all(|(a, b)| (a - b).abs() < 1e-9));
        let mask = ObservationModel::new(ObservationOperator::SparseLinear { indices: vec![0] }, 1e-12, 3).unwrap();
        assert!((observe(&[3.0, 1.0, 4.0], &mask, &mut r)[0] - 3.0).abs() < 1e-9);
        let a = observe(&[3.0, 1.0, 4.0], &mask, &mut rng::stream(4, &[]));
        let b = observe(&[3.0, 1.0, 4.0], &mask, &mut rng::stream(4, &[]));
        assert_eq!(a, b);
    }

    #[test]
    fn static_never_moves() {
        let mut x = vec![1.0, 2.0];
        Propagator::Static.advance(&mut x, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(x, vec![1.0, 2.0]);
    }
}
