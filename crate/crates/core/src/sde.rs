//! Euler–Maruyama integrators for the forward, backward and guided SDEs.
//!
//! All integrators act on latent states of the drift model and use the uniform
//! grid `t_k = t_min + k (1 - t_min) / T`. The forward pass evaluates the drift
//! at `t_k` and steps to `t_{k+1}`; the backward pass evaluates at `t_{k+1}` and
//! steps to `t_k`, so the two share evaluation points and roundtrip in the
//! continuum limit.
//!
//! Ensemble versions take one rng per member and process members in fixed
//! chunks, so results do not depend on the number of threads.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::drift::Drift;
use crate::error::{DaisiError, Result};
use crate::guidance::Guidance;
use crate::interpolant::{EpsSchedule, Schedule};
use crate::rng::StreamRng;

/// Members per drift batch.
pub const CHUNK: usize = 32;

/// Steps between non-finite checks.
const GUARD_EVERY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeConfig {
    pub steps: usize,
    pub eps: EpsSchedule,
    pub t_min: f64,
}

impl SdeConfig {
    pub fn new(steps: usize, eps: f64, t_min: f64) -> Result<Self> {
        if steps == 0 {
            return Err(DaisiError::InvalidParameter("SDE needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&t_min) {
            return Err(DaisiError::InvalidParameter(format!(
                "t_min must lie in [0, 1), got {t_min}"
            )));
        }
        Ok(SdeConfig {
            steps,
            eps: EpsSchedule::new(eps)?,
            t_min,
        })
    }

    pub fn dt(&self) -> f64 {
        (1.0 - self.t_min) / self.steps as f64
    }

    /// Grid point `k` of `steps` uniform steps from `from` to 1.
    fn time(&self, from: f64, k: usize) -> f64 {
        if k == self.steps {
            1.0
        } else {
            from + k as f64 * (1.0 - from) / self.steps as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub t: f64,
}

#[derive(Clone, Copy)]
enum Direction {
    Forward,
    Backward,
}

fn check_finite(z: &[f64], d: usize, step: usize, base: usize) -> Result<()> {
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(DaisiError::NonFinite { step }.in_member(base + i / d));
    }
    Ok(())
}

/// Integrates one chunk of members. `first` is the global index of the first member.
#[allow(clippy::too_many_arguments)]
fn run_chunk<D: Drift + ?Sized>(
    drift: &D,
    cfg: &SdeConfig,
    from: f64,
    dir: Direction,
    guide: Option<&Guidance<'_>>,
    z: &mut [f64],
    rngs: &mut [StreamRng],
    first: usize,
) -> Result<()> {
    let d = drift.dim();
    let schedule: Schedule = drift.schedule();
    let mut b = vec![0.0; z.len()];
    let h = (1.0 - from) / cfg.steps as f64;
    let stochastic = !cfg.eps.is_zero();
    for n in 0..cfg.steps {
        // Forward visits t_0, t_1, ...; backward visits t_T, t_{T-1}, ...
        let t = match dir {
            Direction::Forward => cfg.time(from, n),
            Direction::Backward => cfg.time(from, cfg.steps - n),
        };
        drift.drift_batch(t, z, &mut b).map_err(|e| e.in_member(first))?;
        let eps_t = cfg.eps.at(t);
        let noise_scale = (2.0 * eps_t * h).sqrt();
        let sign = match dir {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        };
        // Guidance is undefined at t = 0 (lambda_t diverges); the first step is unguided.
        let guided = guide.filter(|g| g.is_active() && t > 0.0);
        for (m, (zm, bm)) in z.chunks_exact_mut(d).zip(b.chunks_exact(d)).enumerate() {
            let extra = match guided {
                Some(g) => {
                    let grad = g.grad(drift, zm, t).map_err(|e| e.in_member(first + m))?;
                    let coef = g.zeta() * (schedule.lambda(t)? + eps_t);
                    Some(grad.into_iter().map(move |v| coef * v))
                }
                None => None,
            };
            let mut extra = extra.into_iter().flatten();
            for i in 0..d {
                let es = if stochastic {
                    cfg.eps.weighted_score(t, bm[i], zm[i], schedule)
                } else {
                    0.0
                };
                let g = extra.next().unwrap_or(0.0);
                // Forward: z += (b + eps s + guide) h; backward: z -= (b - eps s) h.
                let incr = match dir {
                    Direction::Forward => bm[i] + es + g,
                    Direction::Backward => bm[i] - es,
                };
                zm[i] += sign * incr * h;
            }
            if stochastic && noise_scale > 0.0 {
                let r = &mut rngs[m];
                for v in zm.iter_mut() {
                    let xi: f64 = r.sample(StandardNormal);
                    *v += noise_scale * xi;
                }
            }
        }
        if (n + 1) % GUARD_EVERY == 0 || n + 1 == cfg.steps {
            check_finite(z, d, n, first)?;
        }
    }
    Ok(())
}

fn run_ensemble<D: Drift + ?Sized>(
    drift: &D,
    cfg: &SdeConfig,
    from: f64,
    dir: Direction,
    guide: Option<&Guidance<'_>>,
    z: &mut [f64],
    rngs: &mut [StreamRng],
) -> Result<()> {
    let d = drift.dim();
    if z.len() != rngs.len() * d {
        return Err(DaisiError::DimensionMismatch {
            expected: rngs.len() * d,
            got: z.len(),
        });
    }
    if !(0.0..1.0).contains(&from) {
        return Err(DaisiError::TimeOutOfRange { t: from });
    }
    let results: Vec<Result<()>> = z
        .par_chunks_mut(CHUNK * d)
        .zip(rngs.par_chunks_mut(CHUNK))
        .enumerate()
        .map(|(c, (zc, rc))| run_chunk(drift, cfg, from, dir, guide, zc, rc, c * CHUNK))
        .collect();
    results.into_iter().collect()
}

/// Forward SDE from `from_t` to 1 for every member of `z` (row-major `n x d`).
pub fn forward_ensemble<D: Drift + ?Sized>(
    drift: &D,
    cfg: &SdeConfig,
    z: &mut [f64],
    from_t: f64,
    rngs: &mut [StreamRng],
) -> Result<()> {
    run_ensemble(drift, cfg, from_t, Direction::Forward, None, z, rngs)
}

/// Backward SDE from 1 down to `cfg.t_min` for every member.
pub fn backward_ensemble<D: Drift + ?Sized>(
    drift: &D,
    cfg: &SdeConfig,
    z: &mut [f64],
    rngs: &mut [StreamRng],
) -> Result<()> {
    run_ensemble(drift, cfg, cfg.t_min, Direction::Backward, None, z, rngs)
}

/// Guided forward SDE from `cfg.t_min` to 1 for every member.
pub fn guided_forward_ensemble<D: Drift + ?Sized>(
    drift: &D,
    guide: &Guidance<'_>,
    cfg: &SdeConfig,
    z: &mut [f64],
    rngs: &mut [StreamRng],
) -> Result<()> {
    run_ensemble(drift, cfg, cfg.t_min, Direction::Forward, Some(guide), z, rngs)
}

pub fn integrate_forward<D: Drift + ?Sized>(
    drift: &D,
    cfg: &SdeConfig,
    z0: &[f64],
    from_t: f64,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let mut z = z0.to_vec();
    forward_ensemble(drift, cfg, &mut z, from_t, std::slice::from_mut(rng))?;
    Ok(z)
}

pub fn integrate_backward<D: Drift + ?Sized>(
    drift: &D,
    cfg: &SdeConfig,
    z1: &[f64],
    rng: &mut StreamRng,
) -> Result<LatentState> {
    let mut z = z1.to_vec();
    backward_ensemble(drift, cfg, &mut z, std::slice::from_mut(rng))?;
    Ok(LatentState { z, t: cfg.t_min })
}

pub fn integrate_guided_forward<D: Drift + ?Sized>(
    drift: &D,
    guide: &Guidance<'_>,
    cfg: &SdeConfig,
    start: &LatentState,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    if start.t != cfg.t_min {
        return Err(DaisiError::InvalidParameter(format!(
            "guided integration starts at t_min = {}, state is at t = {}",
            cfg.t_min, start.t
        )));
    }
    let mut z = start.z.clone();
    guided_forward_ensemble(drift, guide, cfg, &mut z, std::slice::from_mut(rng))?;
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{GmmPrior, IsoGaussianPrior};
    use crate::guidance::{GuidanceKind, GuidanceMethod, ObservationModel, ObservationOperator};
    use crate::interpolant::NormStats;
    use crate::rng::stream;
    use std::sync::atomic::{AtomicU64, Ordering};

    struct ZeroDrift(NormStats);

    impl Drift for ZeroDrift {
        fn dim(&self) -> usize {
            1
        }
        fn stats(&self) -> &NormStats {
            &self.0
        }
        fn drift_batch(&self, _t: f64, _z: &[f64], out: &mut [f64]) -> Result<()> {
            out.iter_mut().for_each(|v| *v = 0.0);
            Ok(())
        }
    }

    /// Records the largest evaluation time.
    struct Probe {
        inner: GmmPrior,
        max_t: AtomicU64,
    }

    impl Drift for Probe {
        fn dim(&self) -> usize {
            1
        }
        fn stats(&self) -> &NormStats {
            self.inner.stats()
        }
        fn drift_batch(&self, t: f64, z: &[f64], out: &mut [f64]) -> Result<()> {
            self.max_t.fetch_max(t.to_bits(), Ordering::Relaxed);
            self.inner.drift_batch(t, z, out)
        }
    }

    #[test]
    fn single_step_zero_drift_is_identity() {
        let cfg = SdeConfig::new(1, 0.0, 0.0).unwrap();
        let out = integrate_forward(
            &ZeroDrift(NormStats::identity(1)),
            &cfg,
            &[1.25],
            0.0,
            &mut stream(0, &[]),
        )
        .unwrap();
        assert_eq!(out, vec![1.25]);
    }

    #[test]
    fn forward_never_evaluates_at_one() {
        let probe = Probe {
            inner: GmmPrior::testbed(),
            max_t: AtomicU64::new(0),
        };
        let cfg = SdeConfig::new(50, 0.5, 0.2).unwrap();
        integrate_forward(&probe, &cfg, &[0.3], 0.2, &mut stream(1, &[])).unwrap();
        let max_t = f64::from_bits(probe.max_t.load(Ordering::Relaxed));
        assert!(max_t < 1.0 && (max_t - (1.0 - cfg.dt())).abs() < 1e-12);
    }

    #[test]
    fn deterministic_without_noise() {
        let prior = GmmPrior::testbed();
        let cfg = SdeConfig::new(40, 0.0, 0.1).unwrap();
        let a = integrate_backward(&prior, &cfg, &[1.3], &mut stream(1, &[])).unwrap();
        let b = integrate_backward(&prior, &cfg, &[1.3], &mut stream(99, &[])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.t, 0.1);
    }

    #[test]
    fn near_one_inversion_is_identity() {
        let prior = GmmPrior::testbed();
        let cfg = SdeConfig::new(1, 0.0, 0.999).unwrap();
        let out = integrate_backward(&prior, &cfg, &[2.2], &mut stream(0, &[])).unwrap();
        assert!((out.z[0] - 2.2).abs() < 1e-2);
    }

    #[test]
    fn zero_zeta_matches_unguided() {
        let prior = GmmPrior::testbed();
        let obs = ObservationModel::new(ObservationOperator::Identity, 1.0, 1).unwrap();
        let method = GuidanceMethod::new(GuidanceKind::Dps, 0.0).unwrap();
        let y = [2.5];
        let guide = method.prepare(&obs, &y, prior.stats()).unwrap();
        let cfg = SdeConfig::new(30, 0.3, 0.2).unwrap();
        let start = LatentState { z: vec![0.4], t: 0.2 };
        let a = integrate_guided_forward(&prior, &guide, &cfg, &start, &mut stream(5, &[1])).unwrap();
        let b = integrate_forward(&prior, &cfg, &[0.4], 0.2, &mut stream(5, &[1])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn guided_start_must_match_t_min() {
        let prior = IsoGaussianPrior::new(vec![0.0], 1.0).unwrap();
        let obs = ObservationModel::new(ObservationOperator::Identity, 1.0, 1).unwrap();
        let method = GuidanceMethod::new(GuidanceKind::Mmps, 1.0).unwrap();
        let y = [2.0];
        let guide = method.prepare(&obs, &y, prior.stats()).unwrap();
        let cfg = SdeConfig::new(10, 0.0, 0.2).unwrap();
        let start = LatentState { z: vec![0.0], t: 0.3 };
        assert!(integrate_guided_forward(&prior, &guide, &cfg, &start, &mut stream(0, &[])).is_err());
    }

    #[test]
    fn ensemble_is_chunk_and_order_stable() {
        let prior = GmmPrior::testbed();
        let cfg = SdeConfig::new(20, 0.4, 0.3).unwrap();
        let n = 3 * CHUNK + 5;
        let z0: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 2.0).collect();
        let mut rngs: Vec<_> = (0..n).map(|i| stream(7, &[i as u64])).collect();
        let mut z = z0.clone();
        backward_ensemble(&prior, &cfg, &mut z, &mut rngs).unwrap();
        for i in [0, CHUNK, n - 1] {
            let single = integrate_backward(&prior, &cfg, &[z0[i]], &mut stream(7, &[i as u64])).unwrap();
            assert_eq!(single.z[0], z[i]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SdeConfig::new(0, 0.0, 0.0).is_err());
        assert!(SdeConfig::new(5, -1.0, 0.0).is_err());
        assert!(SdeConfig::new(5, 0.0, 1.0).is_err());
    }
}
