//! Likelihood scores `grad_z log p(y | z_t)` for guided sampling.
//!
//! Everything here works in the latent coordinates of the drift model: a
//! latent state `w` is mapped to data space as `x = mu + sigma w` before the
//! observation operator is applied, and operator Jacobians carry the extra
//! factor `sigma`.

use std::sync::Arc;

use crate::drift::{denoiser_jacobian, Drift};
use crate::error::{DaisiError, Result};
use crate::interpolant::{NormStats, Schedule};
use crate::kernel::{kernel_sums, kernel_sums_nd, log_sums, LIK_FLOOR};

/// Observation operator `H` in `y = H(x) + noise`.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservationOperator {
    /// Selects the listed state components.
    SparseLinear {
        indices: Vec<usize>,
    },
    /// Elementwise `(x / 7)^2`.
    Square,
    /// Elementwise `arctan(x)`.
    Arctan,
    Identity,
}

/// Operator plus additive Gaussian noise with standard deviation `sigma_obs`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    pub operator: ObservationOperator,
    pub sigma_obs: f64,
    state_dim: usize,
}

const SQUARE_SCALE: f64 = 7.0;

impl ObservationModel {
    pub fn new(operator: ObservationOperator, sigma_obs: f64, state_dim: usize) -> Result<Self> {
        if !(sigma_obs > 0.0 && sigma_obs.is_finite()) {
            return Err(DaisiError::InvalidParameter(format!(
                "sigma_obs must be positive, got {sigma_obs}"
            )));
        }
        if state_dim == 0 {
            return Err(DaisiError::InvalidParameter("state dimension must be positive".into()));
        }
        if let ObservationOperator::SparseLinear { indices } = &operator {
            if indices.is_empty() {
                return Err(DaisiError::InvalidParameter("observation mask is empty".into()));
            }
            let mut seen = vec![false; state_dim];
            for &i in indices {
                if i >= state_dim || seen[i] {
                    return Err(DaisiError::InvalidParameter(format!(
                        "observation mask {indices:?} must hold distinct indices below {state_dim}"
                    )));
                }
                seen[i] = true;
            }
        }
        Ok(ObservationModel {
            operator,
            sigma_obs,
            state_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn obs_dim(&self) -> usize {
        match &self.operator {
            ObservationOperator::SparseLinear { indices } => indices.len(),
            _ => self.state_dim,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match &self.operator {
            ObservationOperator::SparseLinear { indices } => indices.iter().map(|&i| x[i]).collect(),
            ObservationOperator::Square => x.iter().map(|v| (v / SQUARE_SCALE) * (v / SQUARE_SCALE)).collect(),
            ObservationOperator::Arctan => x.iter().map(|v| v.atan()).collect(),
            ObservationOperator::Identity => x.to_vec(),
        }
    }

    /// Jacobian of `H` at `x`, row-major `obs_dim x state_dim`.
    pub fn jacobian(&self, x: &[f64]) -> Vec<f64> {
        let (dy, dx) = (self.obs_dim(), self.state_dim);
        let mut jac = vec![0.0; dy * dx];
        match &self.operator {
            ObservationOperator::SparseLinear { indices } => {
                for (row, &i) in indices.iter().enumerate() {
                    jac[row * dx + i] = 1.0;
                }
            }
            ObservationOperator::Square => {
                for i in 0..dx {
                    jac[i * dx + i] = 2.0 * x[i] / (SQUARE_SCALE * SQUARE_SCALE);
                }
            }
            ObservationOperator::Arctan => {
                for i in 0..dx {
                    jac[i * dx + i] = 1.0 / (1.0 + x[i] * x[i]);
                }
            }
            ObservationOperator::Identity => {
                for i in 0..dx {
                    jac[i * dx + i] = 1.0;
                }
            }
        }
        jac
    }

    /// `log p(y | x)` up to the normalising constant.
    pub fn log_likelihood(&self, y: &[f64], x: &[f64]) -> f64 {
        let hx = self.apply(x);
        let s2 = self.sigma_obs * self.sigma_obs;
        -0.5 * y.iter().zip(&hx).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s2
    }

    /// Residual `y - H(mu + sigma w)` and the Jacobian of `w -> H(mu + sigma w)`.
    pub fn latent_residual(&self, y: &[f64], w: &[f64], stats: &NormStats) -> (Vec<f64>, Vec<f64>) {
        let mut x = vec![0.0; w.len()];
        stats.from_latent(w, &mut x);
        let hx = self.apply(&x);
        let r = y.iter().zip(&hx).map(|(a, b)| a - b).collect();
        let mut jac = self.jacobian(&x);
        jac.iter_mut().for_each(|v| *v *= stats.sigma);
        (r, jac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GuidanceKind {
    Dps,
    Mmps,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

/// Guidance approximation and its strength `zeta`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMethod {
    pub kind: GuidanceKind,
    pub zeta: f64,
    /// Prior samples in data units, row-major `M x d` (Monte Carlo only).
    pub mc_pool: Option<Arc<Vec<f64>>>,
    pub cg: CgConfig,
}

impl GuidanceMethod {
    pub fn new(kind: GuidanceKind, zeta: f64) -> Result<Self> {
        if !(zeta >= 0.0 && zeta.is_finite()) {
            return Err(DaisiError::InvalidParameter(format!("zeta must be >= 0, got {zeta}")));
        }
        if kind == GuidanceKind::MonteCarlo {
            return Err(DaisiError::InvalidParameter(
                "Monte Carlo guidance needs a prior pool; use GuidanceMethod::monte_carlo".into(),
            ));
        }
        Ok(GuidanceMethod {
            kind,
            zeta,
            mc_pool: None,
            cg: CgConfig::default(),
        })
    }

    pub fn monte_carlo(zeta: f64, pool: Arc<Vec<f64>>) -> Result<Self> {
        if !(zeta >= 0.0 && zeta.is_finite()) {
            return Err(DaisiError::InvalidParameter(format!("zeta must be >= 0, got {zeta}")));
        }
        if pool.is_empty() {
            return Err(DaisiError::InvalidParameter("Monte Carlo pool is empty".into()));
        }
        Ok(GuidanceMethod {
            kind: GuidanceKind::MonteCarlo,
            zeta,
            mc_pool: Some(pool),
            cg: CgConfig::default(),
        })
    }

    pub fn is_active(&self) -> bool {
        self.zeta > 0.0
    }

    /// Binds the method to one observation, precomputing whatever can be shared
    /// across ensemble members.
    pub fn prepare<'a>(&'a self, obs: &'a ObservationModel, y: &'a [f64], stats: &NormStats) -> Result<Guidance<'a>> {
        if y.len() != obs.obs_dim() {
            return Err(DaisiError::DimensionMismatch {
                expected: obs.obs_dim(),
                got: y.len(),
            });
        }
        let mc = match self.kind {
            GuidanceKind::MonteCarlo => {
                let pool = self
                    .mc_pool
                    .as_ref()
                    .ok_or_else(|| DaisiError::InvalidParameter("Monte Carlo guidance needs a prior pool".into()))?;
                let d = obs.state_dim();
                if pool.len() % d != 0 {
                    return Err(DaisiError::DimensionMismatch {
                        expected: d,
                        got: pool.len(),
                    });
                }
                let mut latent = vec![0.0; pool.len()];
                for (x, w) in pool.chunks_exact(d).zip(latent.chunks_exact_mut(d)) {
                    stats.to_latent(x, w);
                }
                Some(McGuidance::new(latent, d, y, obs, stats)?)
            }
            _ => None,
        };
        Ok(Guidance {
            method: self,
            obs,
            y,
            mc,
        })
    }
}

/// A guidance method bound to one observation.
pub struct Guidance<'a> {
    method: &'a GuidanceMethod,
    obs: &'a ObservationModel,
    y: &'a [f64],
    mc: Option<McGuidance>,
}

impl Guidance<'_> {
    pub fn zeta(&self) -> f64 {
        self.method.zeta
    }

    pub fn is_active(&self) -> bool {
        self.method.is_active()
    }

    /// Unscaled likelihood score `g(z, t)`; callers multiply by `zeta`.
    pub fn grad<D: Drift + ?Sized>(&self, drift: &D, z: &[f64], t: f64) -> Result<Vec<f64>> {
        let g = match self.method.kind {
            GuidanceKind::Dps => dps_grad(z, t, self.y, self.obs, drift),
            GuidanceKind::Mmps => mmps_grad(z, t, self.y, self.obs, drift, &self.method.cg),
            GuidanceKind::MonteCarlo => self
                .mc
                .as_ref()
                .expect("prepared with a pool")
                .grad(z, t, drift.schedule()),
        };
        g.map_err(|e| e.in_guidance(t))
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(DaisiError::TimeOutOfRange { t });
    }
    Ok(())
}

/// `J^T x` for row-major square `J`.
fn transpose_apply(jac: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..d)
        .map(|col| (0..d).map(|row| jac[row * d + col] * x[row]).sum())
        .collect()
}

/// `H^T r` for row-major `H` with `dy` rows.
fn op_transpose_apply(h: &[f64], r: &[f64], dx: usize) -> Vec<f64> {
    (0..dx)
        .map(|col| r.iter().enumerate().map(|(row, v)| h[row * dx + col] * v).sum())
        .collect()
}

fn op_apply(h: &[f64], v: &[f64], dy: usize) -> Vec<f64> {
    let dx = v.len();
    (0..dy)
        .map(|row| (0..dx).map(|c| h[row * dx + c] * v[c]).sum())
        .collect()
}

/// Plug-in (DPS) likelihood score `J^T H_t^T (y - H(E[z_1 | z_t]))`.
pub fn dps_grad<D: Drift + ?Sized>(
    z: &[f64],
    t: f64,
    y: &[f64],
    obs: &ObservationModel,
    drift: &D,
) -> Result<Vec<f64>> {
    check_time(t)?;
    let zhat = drift.denoiser_mean(t, z)?;
    let (r, h) = obs.latent_residual(y, &zhat, drift.stats());
    let jac = denoiser_jacobian(drift, z, t)?;
    Ok(transpose_apply(&jac, &op_transpose_apply(&h, &r, z.len())))
}

/// Moment-matched (MMPS) likelihood score.
///
/// Solves `(sigma_obs^2 I + beta^2/alpha H_t J H_t^T) v = y - H(E[z_1 | z_t])`
/// by conjugate gradients and returns `J^T H_t^T v`. The Jacobian is assembled
/// from JVPs and symmetrised, since the exact denoiser Jacobian is symmetric.
pub fn mmps_grad<D: Drift + ?Sized>(
    z: &[f64],
    t: f64,
    y: &[f64],
    obs: &ObservationModel,
    drift: &D,
    cg: &CgConfig,
) -> Result<Vec<f64>> {
    check_time(t)?;
    let schedule = drift.schedule();
    let (alpha, beta) = (schedule.alpha(t), schedule.beta(t));
    let d = z.len();
    let zhat = drift.denoiser_mean(t, z)?;
    let (r, h) = obs.latent_residual(y, &zhat, drift.stats());
    let raw = denoiser_jacobian(drift, z, t)?;
    let mut jac = raw.clone();
    for i in 0..d {
        for j in 0..d {
            jac[i * d + j] = 0.5 * (raw[i * d + j] + raw[j * d + i]);
        }
    }
    let dy = r.len();
    let s2 = obs.sigma_obs * obs.sigma_obs;
    let scale = beta * beta / alpha;
    let apply = |u: &[f64], out: &mut [f64]| {
        let hu = op_transpose_apply(&h, u, d);
        let jhu: Vec<f64> = (0..d)
            .map(|row| (0..d).map(|c| jac[row * d + c] * hu[c]).sum())
            .collect();
        let back = op_apply(&h, &jhu, dy);
        for i in 0..dy {
            out[i] = s2 * u[i] + scale * back[i];
        }
    };
    let v = conjugate_gradient(apply, &r, cg)?;
    Ok(transpose_apply(&jac, &op_transpose_apply(&h, &v, d)))
}

/// Conjugate gradients for a symmetric positive-definite operator.
pub fn conjugate_gradient<F>(apply: F, b: &[f64], cfg: &CgConfig) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let bnorm = dot(b, b).sqrt();
    let target = cfg.tol * bnorm.max(1.0);
    let mut rr = dot(&r, &r);
    if rr.sqrt() <= target {
        return Ok(x);
    }
    for _ in 0..cfg.max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let a = rr / pap;
        for i in 0..n {
            x[i] += a * p[i];
            r[i] -= a * ap[i];
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= target {
            return Ok(x);
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Err(DaisiError::CgNotConverged {
        iterations: cfg.max_iter,
        residual: rr.sqrt(),
    })
}

/// Monte Carlo likelihood score from a prior pool, bound to one observation.
///
/// With Gaussian transition kernels `N(z_t; alpha w_i, beta^2 I)`,
/// `grad log( sum_i L_i k_i / sum_j k_j ) = alpha/beta^2 (E_num[w] - E_den[w])`
/// where the expectations use weights `L_i k_i` and `k_i` respectively.
#[derive(Debug, Clone)]
pub struct McGuidance {
    /// Latent prior samples; sorted when one-dimensional.
    pool: Vec<f64>,
    /// Column-major copy of `pool` for the vectorised two- and three-dimensional sums.
    cols: Vec<f64>,
    dim: usize,
    log_lik: Vec<f64>,
    /// `exp(log_lik - max log_lik)`, zeroed below the kernel floor.
    lik: Vec<f64>,
}

impl McGuidance {
    /// `pool` holds latent prior samples, row-major `M x dim`.
    pub fn new(pool: Vec<f64>, dim: usize, y: &[f64], obs: &ObservationModel, stats: &NormStats) -> Result<Self> {
        if pool.is_empty() || dim == 0 || pool.len() % dim != 0 {
            return Err(DaisiError::InvalidParameter(
                "Monte Carlo pool must be a non-empty M x d matrix".into(),
            ));
        }
        let mut pool = pool;
        if dim == 1 {
            pool.sort_by(f64::total_cmp);
        }
        let mut x = vec![0.0; dim];
        let log_lik: Vec<f64> = pool
            .chunks_exact(dim)
            .map(|w| {
                stats.from_latent(w, &mut x);
                obs.log_likelihood(y, &x)
            })
            .collect();
        let max = log_lik.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lik = log_lik
            .iter()
            .map(|l| {
                let v = (l - max).exp();
                if v < LIK_FLOOR {
                    0.0
                } else {
                    v
                }
            })
            .collect();
        let m = pool.len() / dim;
        let cols = if dim == 2 || dim == 3 {
            (0..dim)
                .flat_map(|k| (0..m).map(move |i| (k, i)))
                .map(|(k, i)| pool[i * dim + k])
                .collect()
        } else {
            Vec::new()
        };
        Ok(McGuidance {
            pool,
            cols,
            dim,
            log_lik,
            lik,
        })
    }

    pub fn len(&self) -> usize {
        self.pool.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.pool.is_empty()
    }

    pub fn grad(&self, z: &[f64], t: f64, schedule: Schedule) -> Result<Vec<f64>> {
        check_time(t)?;
        if z.len() != self.dim {
            return Err(DaisiError::DimensionMismatch {
                expected: self.dim,
                got: z.len(),
            });
        }
        let (alpha, beta) = (schedule.alpha(t), schedule.beta(t));
        let inv2b2 = 0.5 / (beta * beta);
        let d = self.dim;
        let log_kernel = |w: &[f64]| {
            let mut s = 0.0;
            for i in 0..d {
                let e = z[i] - alpha * w[i];
                s += e * e;
            }
            -s * inv2b2
        };
        let mut den = 0.0;
        let mut num = 0.0;
        let mut den_w = vec![0.0; d];
        let mut num_w = vec![0.0; d];
        if d == 1 {
            // The pool is sorted, so the largest kernel belongs to the atom
            // nearest to z / alpha and one pass suffices.
            let target = z[0] / alpha;
            let p = self.pool.partition_point(|&w| w < target);
            let kmax = [p.wrapping_sub(1), p]
                .iter()
                .filter_map(|&i| self.pool.get(i))
                .map(|w| log_kernel(std::slice::from_ref(w)))
                .fold(f64::NEG_INFINITY, f64::max);
            let sums = kernel_sums(&self.pool, &self.lik, z[0], alpha, inv2b2, kmax);
            den = sums.den;
            num = sums.num;
            den_w[0] = sums.den_w;
            num_w[0] = sums.num_w;
        } else if d == 2 {
            let s = kernel_sums_nd(&self.cols, &self.lik, &[z[0], z[1]], alpha, inv2b2);
            (den, num) = (s.den, s.num);
            den_w.copy_from_slice(&s.den_w);
            num_w.copy_from_slice(&s.num_w);
        } else if d == 3 {
            let s = kernel_sums_nd(&self.cols, &self.lik, &[z[0], z[1], z[2]], alpha, inv2b2);
            (den, num) = (s.den, s.num);
            den_w.copy_from_slice(&s.den_w);
            num_w.copy_from_slice(&s.num_w);
        } else {
            // Online rescaling keeps a single pass without knowing the maximum.
            let mut kmax = f64::NEG_INFINITY;
            for (w, l) in self.pool.chunks_exact(d).zip(&self.lik) {
                let lk = log_kernel(w);
                if lk > kmax {
                    let r = (kmax - lk).exp();
                    den *= r;
                    num *= r;
                    den_w.iter_mut().chain(num_w.iter_mut()).for_each(|v| *v *= r);
                    kmax = lk;
                }
                let k = (lk - kmax).exp();
                let kl = k * l;
                den += k;
                num += kl;
                for c in 0..d {
                    den_w[c] += k * w[c];
                    num_w[c] += kl * w[c];
                }
            }
        }
        if !(num > 1e-250) {
            // Likelihood and kernel mass do not overlap at double precision;
            // redo the numerator with its own shift.
            if d == 1 {
                let sums = log_sums(&self.pool, &self.log_lik, z[0], alpha, inv2b2);
                if sums.max == f64::NEG_INFINITY {
                    return Err(DaisiError::PoolDepleted { t });
                }
                num = sums.num;
                num_w[0] = sums.num_w;
            } else {
                let lw: Vec<f64> = self
                    .pool
                    .chunks_exact(d)
                    .zip(&self.log_lik)
                    .map(|(w, l)| log_kernel(w) + l)
                    .collect();
                let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    return Err(DaisiError::PoolDepleted { t });
                }
                num = 0.0;
                num_w.iter_mut().for_each(|v| *v = 0.0);
                for (i, w) in self.pool.chunks_exact(d).enumerate() {
                    let kl = (lw[i] - m).exp();
                    num += kl;
                    for c in 0..d {
                        num_w[c] += kl * w[c];
                    }
                }
            }
        }
        if !(den > 0.0) || !(num > 0.0) {
            return Err(DaisiError::PoolDepleted { t });
        }
        let f = alpha / (beta * beta);
        Ok((0..d).map(|c| f * (num_w[c] / num - den_w[c] / den)).collect())
    }
}

/// Monte Carlo likelihood score for a single state; see [`McGuidance`].
pub fn mc_grad(
    z: &[f64],
    t: f64,
    y: &[f64],
    obs: &ObservationModel,
    prior_pool: &[f64],
    stats: &NormStats,
    schedule: Schedule,
) -> Result<Vec<f64>> {
    McGuidance::new(prior_pool.to_vec(), z.len(), y, obs, stats)?.grad(z, t, schedule)
}

/// Guided drift `b + lambda_t zeta g` and score increment `zeta g`.
pub fn guided_terms(b: &[f64], g: &[f64], t: f64, schedule: Schedule, zeta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if zeta == 0.0 {
        return Ok((b.to_vec(), vec![0.0; b.len()]));
    }
    let lambda = schedule.lambda(t)?;
    let bt = b.iter().zip(g).map(|(b, g)| b + lambda * zeta * g).collect();
    let ds = g.iter().map(|g| zeta * g).collect();
    Ok((bt, ds))
}
