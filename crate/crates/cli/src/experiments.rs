//! Experiment runners. Each returns its results in memory; [`crate::output`]
//! turns them into files.
//!
//! Repeat `r` runs with seed `seed + r`. Grid cells within a repeat share that
//! seed, so cells are compared on common random numbers.

use std::sync::Arc;

use daisi::drift::{Drift, IsoGaussianPrior, NetDrift};
use daisi::filters::{
    bpf_run, daisi_analysis, daisi_run, kalman_filter, window_average, DaisiConfig, Ensemble, FilterTrace,
    LinearGaussianModel, Resampling, RunInputs,
};
use daisi::guidance::{GuidanceMethod, ObservationModel, ObservationOperator};
use daisi::io::load_model;
use daisi::metrics::{mmd_rbf, WindowSummary};
use daisi::rng::{stream, StreamRng};
use daisi::sde::{guided_forward_ensemble, SdeConfig};
use daisi::systems::{build_gmm_testbed, observe, GmmTestbed, GmmTestbedParams, L63Params, Propagator};
use daisi::training::{generate_l63_dataset, train_drift, Dataset, TrainReport, L63_DATASET_START};
use daisi::{GuidanceKind, NormStats};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, FilterMethod, GmmSection, GuidanceChoice, Reference};
use crate::error::CliError;

const TAG_TRUTH: u64 = 0x7472;
const TAG_INIT: u64 = 0x696e;
const TAG_POOL: u64 = 0x706f;

pub fn repeat_seed(master: u64, r: usize) -> u64 {
    master.wrapping_add(r as u64)
}

// GMM ablation

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridRow {
    pub t_min: f64,
    pub eps: f64,
    pub value: f64,
    pub seed: u64,
}

/// Rows of a grid experiment plus the cell with the lowest repeat-mean value.
#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub best: (f64, f64),
    pub best_value: f64,
}

impl GridResult {
    fn from_rows(rows: Vec<GridRow>, cells: &[(f64, f64)]) -> Self {
        let mut best = (cells[0], f64::INFINITY);
        for &cell in cells {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| (r.t_min, r.eps) == cell)
                .map(|r| r.value)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            if mean < best.1 {
                best = (cell, mean);
            }
        }
        GridResult {
            rows,
            best: best.0,
            best_value: best.1,
        }
    }

    /// Argmin cell for each repeat seed, in seed order.
    pub fn best_per_seed(&self) -> Vec<(u64, (f64, f64))> {
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        seeds.dedup();
        seeds
            .into_iter()
            .map(|s| {
                let best = self
                    .rows
                    .iter()
                    .filter(|r| r.seed == s)
                    .fold(None::<&GridRow>, |acc, r| match acc {
                        Some(a) if a.value <= r.value => Some(a),
                        _ => Some(r),
                    })
                    .expect("every seed has rows");
                (s, (best.t_min, best.eps))
            })
            .collect()
    }
}

pub fn gmm_testbed(g: &GmmSection, seed: u64) -> Result<GmmTestbed, CliError> {
    let params = GmmTestbedParams {
        n: g.particles,
        pool: g.pool,
        y: g.y,
        sigma_obs: g.sigma_obs,
        tilt_mean: g.tilt_mean,
        tilt_std: g.tilt_std,
    };
    Ok(build_gmm_testbed(seed, &params)?)
}

pub fn reference_samples(bed: &GmmTestbed, reference: Reference) -> &[f64] {
    match reference {
        Reference::Posterior => &bed.posterior,
        Reference::Forecast => &bed.forecast,
        Reference::StationaryPosterior => &bed.stationary_posterior,
    }
}

/// One DAISI analysis of the testbed forecast with Monte Carlo guidance.
pub fn ablation_cell(bed: &GmmTestbed, g: &GmmSection, t_min: f64, eps: f64, seed: u64) -> Result<Vec<f64>, CliError> {
    let obs = ObservationModel::new(ObservationOperator::Identity, bed.sigma_obs, 1)?;
    let cfg = DaisiConfig {
        t_min,
        eps,
        steps: g.steps,
        guidance: GuidanceMethod::monte_carlo(g.zeta, bed.pool.clone())?,
        seed,
        no_inversion: false,
    };
    cfg.validate()?;
    let fc = Ensemble::new(bed.forecast.clone(), 1)?;
    Ok(daisi_analysis(&fc, &[bed.y], &obs, &bed.prior, &cfg, 0)?.members)
}

/// MMD between the analysis and the configured reference for every grid cell
/// and repeat.
pub fn run_gmm_ablation(cfg: &ExperimentConfig) -> Result<GridResult, CliError> {
    let cells = cfg.grid.cells();
    let mut rows = Vec::with_capacity(cells.len() * cfg.repeats);
    for r in 0..cfg.repeats {
        let seed = repeat_seed(cfg.seed, r);
        let bed = gmm_testbed(&cfg.gmm, seed)?;
        let reference = reference_samples(&bed, cfg.gmm.reference);
        let cell_rows: Vec<GridRow> = cells
            .par_iter()
            .map(|&(t_min, eps)| {
                let out = ablation_cell(&bed, &cfg.gmm, t_min, eps, seed)?;
                Ok(GridRow {
                    t_min,
                    eps,
                    value: mmd_rbf(&out, reference, 1)?,
                    seed,
                })
            })
            .collect::<Result<_, CliError>>()?;
        rows.extend(cell_rows);
    }
    Ok(GridResult::from_rows(rows, &cells))
}

// Lorenz '63

/// Shared inputs of every L63 run: normalisation, drift, pool, observation model.
pub struct L63Setup {
    pub stats: NormStats,
    pub model: Option<NetDrift>,
    pub pool: Option<Arc<Vec<f64>>>,
    pub obs: ObservationModel,
    pub propagator: Propagator,
}

/// Truth, observations and initial ensemble of one evaluation trajectory.
pub struct Scenario {
    pub truth: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
    pub init: Ensemble,
}

fn pool_from_training_rows(ds: &Dataset, size: usize, rng: &mut StreamRng) -> Vec<f64> {
    let n = ds.n_train();
    let mut pool = Vec::with_capacity(size * ds.dim);
    for _ in 0..size {
        let i = rng.random_range(0..n);
        pool.extend_from_slice(&ds.train[i * ds.dim..(i + 1) * ds.dim]);
    }
    pool
}

/// Regenerates the training dataset (for its statistics and the guidance
/// pool) and loads the drift model when DAISI needs it.
pub fn l63_setup(cfg: &ExperimentConfig) -> Result<L63Setup, CliError> {
    let ds = generate_l63_dataset(cfg.l63.dataset_steps, cfg.l63.dataset_seed)?;
    let f = &cfg.filter;
    let daisi = f.method == FilterMethod::Daisi;
    let model = if daisi { Some(load_model(&cfg.l63.model)?) } else { None };
    let pool = (daisi && f.guidance == GuidanceChoice::Mc)
        .then(|| Arc::new(pool_from_training_rows(&ds, f.pool, &mut stream(cfg.seed, &[TAG_POOL]))));
    let obs = ObservationModel::new(
        ObservationOperator::SparseLinear {
            indices: cfg.l63.observed.clone(),
        },
        cfg.l63.sigma_obs,
        3,
    )?;
    Ok(L63Setup {
        stats: ds.stats,
        model,
        pool,
        obs,
        propagator: Propagator::L63 {
            params: L63Params::default(),
            steps: 1,
            jitter: f.jitter,
        },
    })
}

/// Builds one trajectory. Without `x0` the truth starts from a draw of the
/// training distribution's Gaussian fit.
pub fn l63_scenario(
    cfg: &ExperimentConfig,
    setup: &L63Setup,
    seed: u64,
    x0: Option<[f64; 3]>,
    spinup: usize,
    steps: usize,
) -> Result<Scenario, CliError> {
    let mut r = stream(seed, &[TAG_TRUTH]);
    let mut x: Vec<f64> = match x0 {
        Some(x0) => x0.to_vec(),
        None => (0..3)
            .map(|k| setup.stats.mu[k] + setup.stats.sigma * r.sample::<f64, _>(StandardNormal))
            .collect(),
    };
    for _ in 0..spinup {
        setup.propagator.advance_truth(&mut x, &mut r)?;
    }
    let init = Ensemble::gaussian(&x, cfg.l63.init_sd, cfg.filter.members, &mut stream(seed, &[TAG_INIT]))?;
    let (mut truth, mut observations) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    for _ in 0..steps {
        setup.propagator.advance_truth(&mut x, &mut r)?;
        truth.push(x.clone());
        observations.push(observe(&x, &setup.obs, &mut r));
    }
    Ok(Scenario {
        truth,
        observations,
        init,
    })
}

/// Runs the configured filter on one scenario; `t_min` and `eps` override the
/// filter section (the sweep varies them).
pub fn run_filter(
    cfg: &ExperimentConfig,
    setup: &L63Setup,
    sc: &Scenario,
    t_min: f64,
    eps: f64,
    seed: u64,
) -> Result<FilterTrace, CliError> {
    let f = &cfg.filter;
    let inputs = RunInputs {
        observations: &sc.observations,
        truth: Some(&sc.truth),
        propagator: &setup.propagator,
        obs: &setup.obs,
        keep_ensembles: f.keep_ensembles,
    };
    let trace = match f.method {
        FilterMethod::Bpf => bpf_run(&sc.init, &inputs, Resampling::from(f.resampling), seed)?,
        FilterMethod::Daisi => {
            let model = setup
                .model
                .as_ref()
                .ok_or_else(|| CliError::Config("DAISI needs a drift model".into()))?;
            let guidance = match (f.guidance, &setup.pool) {
                (GuidanceChoice::Mc, Some(pool)) => GuidanceMethod::monte_carlo(f.zeta, pool.clone())?,
                (GuidanceChoice::Mc, None) => return Err(CliError::Config("Monte Carlo guidance needs a pool".into())),
                (g, _) => GuidanceMethod::new(g.kind(), f.zeta)?,
            };
            let dc = DaisiConfig {
                t_min,
                eps,
                steps: f.sde_steps,
                guidance,
                seed,
                no_inversion: f.no_inversion,
            };
            daisi_run(&sc.init, &inputs, model, &dc)?
        }
    };
    Ok(trace)
}

#[derive(Debug, Clone)]
pub struct RepeatResult {
    pub seed: u64,
    pub summary: WindowSummary,
    pub trace: FilterTrace,
}

#[derive(Debug, Clone)]
pub struct L63Result {
    pub repeats: Vec<RepeatResult>,
}

impl L63Result {
    /// Mean of the per-trajectory window summaries.
    pub fn mean(&self) -> WindowSummary {
        let n = self.repeats.len() as f64;
        let avg = |f: fn(&WindowSummary) -> f64| self.repeats.iter().map(|r| f(&r.summary)).sum::<f64>() / n;
        WindowSummary {
            steps: self.repeats.first().map_or(0, |r| r.summary.steps),
            rmse: avg(|s| s.rmse),
            ens_rmse: avg(|s| s.ens_rmse),
            crps: avg(|s| s.crps),
            spread: avg(|s| s.spread),
            ssr: avg(|s| s.ssr),
        }
    }
}

fn summarise(trace: &FilterTrace, window: usize) -> Result<WindowSummary, CliError> {
    window_average(&trace.reports, window).ok_or_else(|| CliError::Config("empty evaluation window".into()))
}

/// Filters `repeats` independent trajectories and summarises the last
/// `l63.window` steps of each.
pub fn run_l63_filter(cfg: &ExperimentConfig) -> Result<L63Result, CliError> {
    let setup = l63_setup(cfg)?;
    let f = &cfg.filter;
    let repeats = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let seed = repeat_seed(cfg.seed, r);
            let sc = l63_scenario(cfg, &setup, seed, None, cfg.l63.spinup, cfg.l63.steps)?;
            let trace = run_filter(cfg, &setup, &sc, f.t_min, f.eps, seed)?;
            Ok(RepeatResult {
                seed,
                summary: summarise(&trace, cfg.l63.window)?,
                trace,
            })
        })
        .collect::<Result<_, CliError>>()?;
    Ok(L63Result { repeats })
}

/// Window-averaged CRPS for every grid cell on a trajectory started from the
/// training start point.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<GridResult, CliError> {
    let setup = l63_setup(cfg)?;
    let cells = cfg.grid.cells();
    let mut rows = Vec::with_capacity(cells.len() * cfg.repeats);
    for r in 0..cfg.repeats {
        let seed = repeat_seed(cfg.seed, r);
        let sc = l63_scenario(
            cfg,
            &setup,
            seed,
            Some(L63_DATASET_START),
            cfg.sweep.spinup,
            cfg.sweep.steps,
        )?;
        let cell_rows: Vec<GridRow> = cells
            .par_iter()
            .map(|&(t_min, eps)| {
                let trace = run_filter(cfg, &setup, &sc, t_min, eps, seed)?;
                Ok(GridRow {
                    t_min,
                    eps,
                    value: summarise(&trace, cfg.sweep.window)?.crps,
                    seed,
                })
            })
            .collect::<Result<_, CliError>>()?;
        rows.extend(cell_rows);
    }
    Ok(GridResult::from_rows(rows, &cells))
}

// Training

pub fn run_train(cfg: &ExperimentConfig) -> Result<(NetDrift, TrainReport), CliError> {
    let ds = generate_l63_dataset(cfg.l63.dataset_steps, cfg.l63.dataset_seed)?;
    Ok(train_drift(&ds, &cfg.train.hidden, &cfg.train.train_config(cfg.seed))?)
}

// Linear-Gaussian oracle battery

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, statistic: f64, threshold: f64) -> Self {
        CheckOutcome {
            name: name.into(),
            statistic,
            threshold,
        }
    }

    pub fn passed(&self) -> bool {
        self.statistic <= self.threshold
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0))
}

/// Guided MMPS sampling from `t = 0` under a Gaussian prior and a sparse
/// linear observation, compared with the conjugate posterior per component.
/// Statistics: mean error in standard errors, relative variance error.
fn mmps_conjugate(cfg: &ExperimentConfig) -> Result<Vec<CheckOutcome>, CliError> {
    let c = &cfg.check;
    let (mean, sd) = (vec![0.5, -1.0, 2.0], 1.7);
    let (indices, so, y) = (vec![2, 0], 0.6, [1.5, 0.2]);
    let prior = IsoGaussianPrior::new(mean.clone(), sd)?;
    let obs = ObservationModel::new(
        ObservationOperator::SparseLinear {
            indices: indices.clone(),
        },
        so,
        3,
    )?;
    let method = GuidanceMethod::new(GuidanceKind::Mmps, 1.0)?;
    let guide = method.prepare(&obs, &y, prior.stats())?;
    let seed = cfg.seed;
    let mut r = stream(seed, &[0x6d6d7073, 0]);
    let mut z: Vec<f64> = (0..3 * c.samples).map(|_| r.sample(StandardNormal)).collect();
    let mut rngs: Vec<StreamRng> = (0..c.samples)
        .map(|i| stream(seed, &[0x6d6d7073, 1, i as u64]))
        .collect();
    guided_forward_ensemble(
        &prior,
        &guide,
        &SdeConfig::new(c.sde_steps, 0.0, 0.0)?,
        &mut z,
        &mut rngs,
    )?;

    let mut out = Vec::new();
    for k in 0..3 {
        let (mut m, mut v) = (mean[k], sd * sd);
        if let Some(i) = indices.iter().position(|&j| j == k) {
            let pv = 1.0 / (1.0 / v + 1.0 / (so * so));
            m = pv * (m / v + y[i] / (so * so));
            v = pv;
        }
        let col: Vec<f64> = z.iter().skip(k).step_by(3).copied().collect();
        let (got_m, got_v) = mean_var(&col);
        let se = (v / c.samples as f64).sqrt();
        out.push(CheckOutcome::new(
            format!("mmps_mean_x{k}"),
            (got_m - m).abs() / se,
            3.0,
        ));
        out.push(CheckOutcome::new(
            format!("mmps_var_x{k}"),
            (got_v / v - 1.0).abs(),
            0.1,
        ));
    }
    Ok(out)
}

struct Ar1 {
    a: f64,
    q: f64,
    so: f64,
    m0: f64,
    p0: f64,
}

impl Ar1 {
    fn obs(&self) -> Result<ObservationModel, CliError> {
        Ok(ObservationModel::new(ObservationOperator::Identity, self.so, 1)?)
    }

    /// Truth, observations and the Kalman means and variances.
    fn scenario(&self, steps: usize, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<(f64, f64)>), CliError> {
        let prop = Propagator::LinearGaussian { a: self.a, q: self.q };
        let obs = self.obs()?;
        let mut r = stream(seed, &[TAG_TRUTH]);
        let mut x = vec![self.m0 + self.p0.sqrt() * r.sample::<f64, _>(StandardNormal)];
        let mut ys = Vec::with_capacity(steps);
        for _ in 0..steps {
            prop.advance_truth(&mut x, &mut r)?;
            ys.push(observe(&x, &obs, &mut r));
        }
        let model = LinearGaussianModel {
            a: DMatrix::from_element(1, 1, self.a),
            q: DMatrix::from_element(1, 1, self.q),
            h: DMatrix::from_element(1, 1, 1.0),
            r: DMatrix::from_element(1, 1, self.so * self.so),
        };
        let yv: Vec<DVector<f64>> = ys.iter().map(|y| DVector::from_column_slice(y)).collect();
        let kalman = kalman_filter(
            &model,
            &DVector::from_element(1, self.m0),
            &DMatrix::from_element(1, 1, self.p0),
            &yv,
        )?
        .into_iter()
        .map(|(m, p)| (m[0], p[(0, 0)]))
        .collect();
        Ok((ys, kalman))
    }
}

/// DAISI with MMPS guidance on white-noise AR(1) dynamics, whose forecast law
/// equals the Gaussian drift prior. Statistic: worst per-step error of the
/// ensemble mean in standard errors of the Kalman posterior.
fn daisi_vs_kalman(cfg: &ExperimentConfig) -> Result<CheckOutcome, CliError> {
    let c = &cfg.check;
    let sys = Ar1 {
        a: 0.0,
        q: 2.0,
        so: 1.0,
        m0: 0.0,
        p0: 2.0,
    };
    let seed = derive(cfg.seed, 1);
    let (ys, kalman) = sys.scenario(c.steps, seed)?;
    let prior = IsoGaussianPrior::new(vec![0.0], sys.q.sqrt())?;
    let prop = Propagator::LinearGaussian { a: sys.a, q: sys.q };
    let obs = sys.obs()?;
    let init = Ensemble::gaussian(&[sys.m0], sys.p0.sqrt(), c.members, &mut stream(seed, &[TAG_INIT]))?;
    let inputs = RunInputs {
        observations: &ys,
        truth: None,
        propagator: &prop,
        obs: &obs,
        keep_ensembles: false,
    };
    let dc = DaisiConfig {
        t_min: 0.01,
        eps: 1.0,
        steps: c.sde_steps,
        guidance: GuidanceMethod::new(GuidanceKind::Mmps, 1.0)?,
        seed,
        no_inversion: false,
    };
    let trace = daisi_run(&init, &inputs, &prior, &dc)?;
    let worst = trace
        .means
        .iter()
        .zip(&kalman)
        .map(|(m, (km, kp))| (m[0] - km).abs() / (kp / c.members as f64).sqrt())
        .fold(0.0, f64::max);
    Ok(CheckOutcome::new("daisi_ar1_kalman_mean", worst, 3.0))
}

/// Bootstrap filter on AR(1) dynamics. The standard error of the filter mean
/// comes from independent replicates; the statistic is the worst per-step
/// error of the first replicate.
fn bpf_vs_kalman(cfg: &ExperimentConfig) -> Result<CheckOutcome, CliError> {
    let c = &cfg.check;
    let sys = Ar1 {
        a: 0.9,
        q: 0.5,
        so: 1.0,
        m0: 1.0,
        p0: 2.0,
    };
    let seed = derive(cfg.seed, 2);
    let (ys, kalman) = sys.scenario(c.steps, seed)?;
    let prop = Propagator::LinearGaussian { a: sys.a, q: sys.q };
    let obs = sys.obs()?;
    let inputs = RunInputs {
        observations: &ys,
        truth: None,
        propagator: &prop,
        obs: &obs,
        keep_ensembles: false,
    };
    let runs: Vec<Vec<f64>> = (0..c.replicates as u64)
        .into_par_iter()
        .map(|rep| {
            let init = Ensemble::gaussian(
                &[sys.m0],
                sys.p0.sqrt(),
                c.particles,
                &mut stream(seed, &[TAG_INIT, rep]),
            )?;
            let trace = bpf_run(&init, &inputs, Resampling::Systematic, derive(seed, 100 + rep))?;
            Ok(trace.means.iter().map(|m| m[0]).collect())
        })
        .collect::<Result<_, CliError>>()?;
    let mut worst: f64 = 0.0;
    for (n, (km, _)) in kalman.iter().enumerate() {
        let col: Vec<f64> = runs.iter().map(|r| r[n]).collect();
        let (_, var) = mean_var(&col);
        worst = worst.max((col[0] - km).abs() / var.sqrt());
    }
    Ok(CheckOutcome::new("bpf_ar1_kalman_mean", worst, 3.0))
}

fn derive(seed: u64, k: u64) -> u64 {
    daisi::rng::derive_seed(seed, &[k])
}

/// Runs the whole battery; failing checks are reported, not raised.
pub fn linear_gaussian_check(cfg: &ExperimentConfig) -> Result<Vec<CheckOutcome>, CliError> {
    let mut out = mmps_conjugate(cfg)?;
    out.push(daisi_vs_kalman(cfg)?);
    out.push(bpf_vs_kalman(cfg)?);
    Ok(out)
}
