//! The assimilation loop, the bootstrap particle filter and the Kalman oracle.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::drift::Drift;
use crate::error::{DaisiError, Result};
use crate::guidance::{GuidanceMethod, ObservationModel};
use crate::metrics::{self, MetricReport};
use crate::rng::{self, StreamRng};
use crate::sde::{self, SdeConfig};
use crate::systems::Propagator;

// Stream tags keep the forecast, analysis and resampling draws independent.
const TAG_FORECAST: u64 = 0xf0;
const TAG_ANALYSIS: u64 = 0xa0;
const TAG_RESAMPLE: u64 = 0x5e;

/// `J` members of dimension `d`, row-major, in data units.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<f64>,
    pub dim: usize,
    pub step: usize,
}

impl Ensemble {
    pub fn new(members: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || members.is_empty() || members.len() % dim != 0 {
            return Err(DaisiError::InvalidParameter(format!(
                "ensemble of {} values is not a non-empty J x {dim} matrix",
                members.len()
            )));
        }
        if members.iter().any(|v| !v.is_finite()) {
            return Err(DaisiError::NonFinite { step: 0 });
        }
        Ok(Ensemble { members, dim, step: 0 })
    }

    pub fn len(&self) -> usize {
        self.members.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member(&self, j: usize) -> &[f64] {
        &self.members[j * self.dim..(j + 1) * self.dim]
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for row in self.members.chunks_exact(self.dim) {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// `x0 + sd * xi` for each of `j` members.
    pub fn gaussian(center: &[f64], sd: f64, j: usize, rng: &mut StreamRng) -> Result<Self> {
        let mut members = Vec::with_capacity(j * center.len());
        for _ in 0..j {
            for &c in center {
                let xi: f64 = rng.sample(StandardNormal);
                members.push(c + sd * xi);
            }
        }
        Ensemble::new(members, center.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaisiConfig {
    pub t_min: f64,
    pub eps: f64,
    pub steps: usize,
    pub guidance: GuidanceMethod,
    pub seed: u64,
    /// Skip the inversion: each analysis starts from fresh reference noise at
    /// `t = 0` and runs the guided SDE over `[0, 1]`.
    pub no_inversion: bool,
}

impl DaisiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.t_min) {
            return Err(DaisiError::InvalidParameter(format!(
                "t_min must lie in [0, 1), got {}",
                self.t_min
            )));
        }
        if self.guidance.is_active() && self.t_min == 0.0 && !self.no_inversion {
            return Err(DaisiError::InvalidParameter(
                "t_min must be positive when guidance is active".into(),
            ));
        }
        SdeConfig::new(self.steps, self.eps, self.t_min)?;
        Ok(())
    }

    fn sde(&self) -> Result<SdeConfig> {
        SdeConfig::new(self.steps, self.eps, self.t_min)
    }
}

/// Per-step record of a filter run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterTrace {
    pub means: Vec<Vec<f64>>,
    /// Present when the truth was supplied.
    pub reports: Vec<MetricReport>,
    /// Present when ensembles were requested.
    pub ensembles: Vec<Ensemble>,
}

impl FilterTrace {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    fn record(&mut self, ens: &Ensemble, truth: Option<&[f64]>, keep: bool) -> Result<()> {
        self.means.push(ens.mean());
        if let Some(x) = truth {
            self.reports.push(MetricReport::compute(ens, x)?);
        }
        if keep {
            self.ensembles.push(ens.clone());
        }
        Ok(())
    }
}

/// Inputs shared by the filter loops.
pub struct RunInputs<'a> {
    pub observations: &'a [Vec<f64>],
    pub truth: Option<&'a [Vec<f64>]>,
    pub propagator: &'a Propagator,
    pub obs: &'a ObservationModel,
    pub keep_ensembles: bool,
}

/// One DAISI analysis: invert each forecast member to `t_min`, then run the
/// guided SDE back to `t = 1`. `cycle` selects the rng streams.
pub fn daisi_analysis<D: Drift + ?Sized>(
    forecast: &Ensemble,
    y: &[f64],
    obs: &ObservationModel,
    drift: &D,
    cfg: &DaisiConfig,
    cycle: u64,
) -> Result<Ensemble> {
    let mut rngs: Vec<StreamRng> = (0..forecast.len())
        .map(|j| rng::stream(cfg.seed, &[TAG_ANALYSIS, cycle, j as u64]))
        .collect();
    daisi_analysis_with_rngs(forecast, y, obs, drift, cfg, &mut rngs)
}

/// [`daisi_analysis`] with one caller-supplied rng stream per member.
pub fn daisi_analysis_with_rngs<D: Drift + ?Sized>(
    forecast: &Ensemble,
    y: &[f64],
    obs: &ObservationModel,
    drift: &D,
    cfg: &DaisiConfig,
    rngs: &mut [StreamRng],
) -> Result<Ensemble> {
    let d = forecast.dim;
    if rngs.len() != forecast.len() {
        return Err(DaisiError::DimensionMismatch {
            expected: forecast.len(),
            got: rngs.len(),
        });
    }
    if d != drift.dim() || d != obs.state_dim() {
        return Err(DaisiError::DimensionMismatch {
            expected: drift.dim(),
            got: d,
        });
    }
    let stats = drift.stats();
    let mut z = vec![0.0; forecast.members.len()];
    let guide = cfg.guidance.prepare(obs, y, stats)?;
    if cfg.no_inversion {
        for (zj, r) in z.chunks_exact_mut(d).zip(rngs.iter_mut()) {
            for v in zj {
                *v = r.sample(StandardNormal);
            }
        }
        let sde_cfg = SdeConfig::new(cfg.steps, cfg.eps, 0.0)?;
        sde::guided_forward_ensemble(drift, &guide, &sde_cfg, &mut z, rngs)?;
    } else {
        let sde_cfg = cfg.sde()?;
        for (x, w) in forecast.members.chunks_exact(d).zip(z.chunks_exact_mut(d)) {
            stats.to_latent(x, w);
        }
        sde::backward_ensemble(drift, &sde_cfg, &mut z, rngs)?;
        sde::guided_forward_ensemble(drift, &guide, &sde_cfg, &mut z, rngs)?;
    }
    let mut members = vec![0.0; z.len()];
    for (w, x) in z.chunks_exact(d).zip(members.chunks_exact_mut(d)) {
        stats.from_latent(w, x);
    }
    Ok(Ensemble {
        members,
        dim: d,
        step: forecast.step,
    })
}

/// Propagates every member one assimilation cycle.
pub fn forecast(ens: &Ensemble, propagator: &Propagator, seed: u64, cycle: u64) -> Result<Ensemble> {
    let d = ens.dim;
    let mut members = ens.members.clone();
    let results: Vec<Result<()>> = members
        .par_chunks_mut(d)
        .enumerate()
        .map(|(j, x)| {
            let mut r = rng::stream(seed, &[TAG_FORECAST, cycle, j as u64]);
            propagator.advance(x, &mut r).map_err(|e| e.in_member(j))
        })
        .collect();
    results.into_iter().collect::<Result<()>>()?;
    if let Some(i) = members.iter().position(|v| !v.is_finite()) {
        return Err(DaisiError::NonFinite { step: cycle as usize }.in_member(i / d));
    }
    Ok(Ensemble {
        members,
        dim: d,
        step: ens.step + 1,
    })
}

/// Alternates forecast and DAISI analysis for every observation.
pub fn daisi_run<D: Drift + ?Sized>(
    init: &Ensemble,
    inputs: &RunInputs<'_>,
    drift: &D,
    cfg: &DaisiConfig,
) -> Result<FilterTrace> {
    cfg.validate()?;
    let mut trace = FilterTrace::default();
    let mut ens = init.clone();
    for (n, y) in inputs.observations.iter().enumerate() {
        let fc = forecast(&ens, inputs.propagator, cfg.seed, n as u64)?;
        ens = daisi_analysis(&fc, y, inputs.obs, drift, cfg, n as u64)?;
        trace.record(&ens, inputs.truth.map(|t| t[n].as_slice()), inputs.keep_ensembles)?;
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resampling {
    Multinomial,
    Systematic,
}

/// Normalised weights from log weights; errors when none is positive.
fn normalise(log_w: &[f64]) -> Option<Vec<f64>> {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return None;
    }
    let mut w: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    Some(w)
}

/// Indices of `n` draws with replacement, proportional to `w` (normalised).
pub fn resample_indices<R: Rng + ?Sized>(w: &[f64], n: usize, scheme: Resampling, rng: &mut R) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for v in w {
        acc += v;
        cdf.push(acc);
    }
    let total = acc;
    let find = |u: f64| cdf.partition_point(|&c| c <= u).min(w.len() - 1);
    match scheme {
        Resampling::Multinomial => (0..n).map(|_| find(rng.random::<f64>() * total)).collect(),
        Resampling::Systematic => {
            let u0: f64 = rng.random();
            (0..n).map(|i| find((i as f64 + u0) / n as f64 * total)).collect()
        }
    }
}

/// Multinomial resampling of `n` rows of `samples` (row-major, dimension `d`)
/// with probabilities proportional to `exp(log_w)`.
pub fn reweight_resample<R: Rng + ?Sized>(
    samples: &[f64],
    d: usize,
    log_w: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if d == 0 || samples.len() != log_w.len() * d {
        return Err(DaisiError::DimensionMismatch {
            expected: log_w.len() * d,
            got: samples.len(),
        });
    }
    let w = normalise(log_w).ok_or_else(|| DaisiError::InvalidParameter("all resampling weights are zero".into()))?;
    let idx = resample_indices(&w, n, Resampling::Multinomial, rng);
    let mut out = Vec::with_capacity(n * d);
    for i in idx {
        out.extend_from_slice(&samples[i * d..(i + 1) * d]);
    }
    Ok(out)
}

/// Bootstrap particle filter: propagate, weight by the likelihood, resample.
pub fn bpf_run(init: &Ensemble, inputs: &RunInputs<'_>, scheme: Resampling, seed: u64) -> Result<FilterTrace> {
    let mut trace = FilterTrace::default();
    let mut ens = init.clone();
    let d = ens.dim;
    for (n, y) in inputs.observations.iter().enumerate() {
        let fc = forecast(&ens, inputs.propagator, seed, n as u64)?;
        let log_w: Vec<f64> = fc
            .members
            .chunks_exact(d)
            .map(|x| inputs.obs.log_likelihood(y, x))
            .collect();
        let w = normalise(&log_w).ok_or(DaisiError::WeightDegeneracy { step: n })?;
        let mut r = rng::stream(seed, &[TAG_RESAMPLE, n as u64]);
        let idx = resample_indices(&w, fc.len(), scheme, &mut r);
        let mut members = Vec::with_capacity(fc.members.len());
        for i in idx {
            members.extend_from_slice(fc.member(i));
        }
        ens = Ensemble {
            members,
            dim: d,
            step: fc.step,
        };
        trace.record(&ens, inputs.truth.map(|t| t[n].as_slice()), inputs.keep_ensembles)?;
    }
    Ok(trace)
}

/// Linear-Gaussian state-space model for [`kalman_filter`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianModel {
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

fn check_psd(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if !m.is_square() || (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
        return Err(DaisiError::NotPsd(what));
    }
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * (1.0 + m.amax())) {
        return Err(DaisiError::NotPsd(what));
    }
    Ok(())
}

/// Exact filtering recursion; returns the posterior mean and covariance after
/// each observation (predict, then update).
pub fn kalman_filter(
    model: &LinearGaussianModel,
    m0: &DVector<f64>,
    p0: &DMatrix<f64>,
    observations: &[DVector<f64>],
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    check_psd(p0, "prior covariance")?;
    check_psd(&model.q, "process noise covariance")?;
    check_psd(&model.r, "observation noise covariance")?;
    let (mut m, mut p) = (m0.clone(), p0.clone());
    let mut out = Vec::with_capacity(observations.len());
    for y in observations {
        m = &model.a * &m;
        p = &model.a * &p * model.a.transpose() + &model.q;
        let s = &model.h * &p * model.h.transpose() + &model.r;
        let s_inv = s
            .clone()
            .cholesky()
            .ok_or(DaisiError::NotPsd("innovation covariance"))?
            .inverse();
        let k = &p * model.h.transpose() * s_inv;
        m = &m + &k * (y - &model.h * &m);
        let ikh = DMatrix::identity(p.nrows(), p.ncols()) - &k * &model.h;
        p = &ikh * &p;
        p = (&p + p.transpose()) * 0.5;
        out.push((m.clone(), p.clone()));
    }
    Ok(out)
}

/// Averages the per-step reports of the last `window` steps.
pub fn window_average(reports: &[MetricReport], window: usize) -> Option<metrics::WindowSummary> {
    metrics::WindowSummary::from_reports(&reports[reports.len().saturating_sub(window)..])
}
