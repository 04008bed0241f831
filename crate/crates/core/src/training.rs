//! Flow-matching training of [`NetDrift`] and dataset preparation.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::drift::{Mlp, NetDrift};
use crate::error::{DaisiError, Result};
use crate::interpolant::{NormStats, Schedule, SCORE_SINGULARITY_MARGIN};
use crate::rng;
use crate::systems::{l63_trajectory, L63Params};

/// Starting point of the Lorenz '63 training trajectory.
pub const L63_DATASET_START: [f64; 3] = [0.0, 1.0, 1.05];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of samples used for training; the rest is validation.
    pub split: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 64,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            split: 0.8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DaisiError::InvalidParameter("batch size must be at least 1".into()));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(DaisiError::InvalidParameter(format!(
                "split must lie in (0, 1), got {}",
                self.split
            )));
        }
        if !(self.lr > 0.0) {
            return Err(DaisiError::InvalidParameter("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Samples in data units, split into training and validation rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    /// Computed from the training rows only.
    pub stats: NormStats,
}

/// Per-variable mean and a pooled scalar standard deviation; falls back to
/// `sigma = 1` when the rows carry no spread.
pub fn norm_stats(rows: &[f64], dim: usize) -> Result<NormStats> {
    let n = rows.len() / dim;
    let mut mu = vec![0.0; dim];
    for r in rows.chunks_exact(dim) {
        for (m, v) in mu.iter_mut().zip(r) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let ss: f64 = rows
        .chunks_exact(dim)
        .map(|r| r.iter().zip(&mu).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
        .sum();
    let sigma = (ss / (n * dim) as f64).sqrt();
    NormStats::new(mu, if sigma > 0.0 && sigma.is_finite() { sigma } else { 1.0 })
}

impl Dataset {
    /// Seeded random split; a single row goes to the training side.
    pub fn from_samples(samples: Vec<f64>, dim: usize, split: f64, seed: u64) -> Result<Self> {
        if dim == 0 || samples.is_empty() || samples.len() % dim != 0 {
            return Err(DaisiError::InvalidParameter(
                "dataset must be a non-empty N x d matrix".into(),
            ));
        }
        let n = samples.len() / dim;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(seed, &[0xda7a]));
        let n_train = ((n as f64 * split).round() as usize).clamp(1, n);
        let gather = |ids: &[usize]| -> Vec<f64> {
            let mut out = Vec::with_capacity(ids.len() * dim);
            for &i in ids {
                out.extend_from_slice(&samples[i * dim..(i + 1) * dim]);
            }
            out
        };
        let train = gather(&idx[..n_train]);
        let val = gather(&idx[n_train..]);
        let stats = norm_stats(&train, dim)?;
        Ok(Dataset { dim, train, val, stats })
    }

    pub fn n_train(&self) -> usize {
        self.train.len() / self.dim
    }

    pub fn n_val(&self) -> usize {
        self.val.len() / self.dim
    }

    pub fn len(&self) -> usize {
        self.n_train() + self.n_val()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }
}

/// `n_steps` consecutive RK4 states from the fixed start, split 80-20.
pub fn generate_l63_dataset(n_steps: usize, seed: u64) -> Result<Dataset> {
    if n_steps == 0 {
        return Err(DaisiError::InvalidParameter("n_steps must be at least 1".into()));
    }
    let traj = l63_trajectory(L63_DATASET_START, n_steps, &L63Params::default());
    let flat: Vec<f64> = traj.iter().flatten().copied().collect();
    Dataset::from_samples(flat, 3, 0.8, seed)
}

/// One flow-matching minibatch in latent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FmBatch {
    pub z1: Vec<f64>,
    pub z0: Vec<f64>,
    pub t: Vec<f64>,
}

impl FmBatch {
    /// Pairs the given latent data rows with fresh noise and times in `[0, 1 - delta]`.
    pub fn draw<R: Rng + ?Sized>(z1: Vec<f64>, dim: usize, rng: &mut R) -> Self {
        let n = z1.len() / dim;
        let z0 = (0..z1.len()).map(|_| rng.sample(StandardNormal)).collect();
        let t = (0..n)
            .map(|_| rng.random::<f64>() * (1.0 - SCORE_SINGULARITY_MARGIN))
            .collect();
        FmBatch { z1, z0, t }
    }
}

/// Mean over the batch of `|b(t, z_t) - (da z_1 + db z_0)|^2` and its gradient.
pub fn flow_matching_loss(model: &NetDrift, batch: &FmBatch) -> Result<(f64, Vec<f64>)> {
    let d = model.mlp.output_dim();
    let n = batch.t.len();
    if batch.z1.len() != n * d || batch.z0.len() != n * d {
        return Err(DaisiError::DimensionMismatch {
            expected: n * d,
            got: batch.z1.len(),
        });
    }
    let s = Schedule::Linear;
    let mut x = Array2::zeros((n, d + 1));
    let mut target = Array2::zeros((n, d));
    for i in 0..n {
        let t = batch.t[i];
        let (a, b, da, db) = (s.alpha(t), s.beta(t), s.dalpha(t), s.dbeta(t));
        for c in 0..d {
            let (z1, z0) = (batch.z1[i * d + c], batch.z0[i * d + c]);
            x[[i, c]] = a * z1 + b * z0;
            target[[i, c]] = da * z1 + db * z0;
        }
        x[[i, d]] = t;
    }
    let (out, cache) = model.mlp.forward_train(x.view())?;
    let resid = out - target;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
    let dout = resid * (2.0 / n as f64);
    Ok((loss, model.mlp.backward(&cache, dout.view())))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(n_params: usize, cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    /// Empty when the dataset has no validation rows.
    pub val_loss: Vec<f64>,
}

fn latent_rows(rows: &[f64], stats: &NormStats) -> Vec<f64> {
    let d = stats.dim();
    let mut out = vec![0.0; rows.len()];
    for (x, w) in rows.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        stats.to_latent(x, w);
    }
    out
}

/// Validation loss with noise and times fixed by the seed, so epochs compare
/// on the same draws.
fn validation_loss(model: &NetDrift, val: &[f64], seed: u64, batch: usize) -> Result<f64> {
    let d = model.mlp.output_dim();
    let n = val.len() / d;
    let mut total = 0.0;
    for (k, rows) in val.chunks(batch.max(1) * d * 16).enumerate() {
        let b = FmBatch::draw(rows.to_vec(), d, &mut rng::stream(seed, &[0x7a1, k as u64]));
        let (l, _) = flow_matching_loss(model, &b)?;
        total += l * (rows.len() / d) as f64;
    }
    Ok(total / n as f64)
}

/// Trains a drift network with architecture `[d + 1, hidden..., d]`.
pub fn train_drift(dataset: &Dataset, hidden: &[usize], cfg: &TrainConfig) -> Result<(NetDrift, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(DaisiError::InvalidParameter("empty dataset".into()));
    }
    let d = dataset.dim;
    let mlp = Mlp::init(NetDrift::arch(d, hidden), cfg.seed)?;
    let mut model = NetDrift::new(mlp, dataset.stats.clone())?;
    let train = latent_rows(&dataset.train, &dataset.stats);
    let val = latent_rows(&dataset.val, &dataset.stats);
    let n = train.len() / d;
    let mut adam = Adam::new(model.mlp.params().len(), cfg);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &[0xe90c, epoch as u64]));
        let mut epoch_loss = 0.0;
        for (bi, ids) in order.chunks(cfg.batch_size).enumerate() {
            let mut z1 = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                z1.extend_from_slice(&train[i * d..(i + 1) * d]);
            }
            let mut r = rng::stream(cfg.seed, &[0xba7c, epoch as u64, bi as u64]);
            let batch = FmBatch::draw(z1, d, &mut r);
            let (loss, grad) = flow_matching_loss(&model, &batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(DaisiError::Divergence { epoch, batch: bi });
            }
            adam.update(model.mlp.params_mut(), &grad);
            epoch_loss += loss * ids.len() as f64;
        }
        report.train_loss.push(epoch_loss / n as f64);
        if !val.is_empty() {
            report
                .val_loss
                .push(validation_loss(&model, &val, cfg.seed, cfg.batch_size)?);
        }
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_hygiene() {
        let samples: Vec<f64> = (0..200)
            .map(|i| (i as f64 * 0.731).sin() * 3.0 + i as f64 * 0.01)
            .collect();
        let ds = Dataset::from_samples(samples, 2, 0.8, 4).unwrap();
        assert_eq!((ds.n_train(), ds.n_val()), (80, 20));
        assert_eq!(ds.stats, norm_stats(&ds.train, 2).unwrap());
        let all = norm_stats(&[ds.train.clone(), ds.val.clone()].concat(), 2).unwrap();
        assert_ne!(ds.stats, all);
    }

    #[test]
    fn l63_dataset_shape() {
        let one = generate_l63_dataset(1, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.train, L63_DATASET_START.to_vec());
        assert_eq!(one.stats.sigma, 1.0);
        let ds = generate_l63_dataset(10_000, 0).unwrap();
        assert!(ds.stats.sigma.is_finite() && ds.stats.sigma > 0.0);
        assert!(generate_l63_dataset(0, 0).is_err());
    }

    #[test]
    fn target_is_data_minus_noise() {
        // A zero network yields residual -(z1 - z0), so the loss is |z1 - z0|^2.
        let mlp = Mlp::zeros(NetDrift::arch(2, &[3])).unwrap();
        let model = NetDrift::new(mlp, NormStats::identity(2)).unwrap();
        let batch = FmBatch {
            z1: vec![1.0, 2.0],
            z0: vec![0.5, -1.0],
            t: vec![0.37],
        };
        let (loss, _) = flow_matching_loss(&model, &batch).unwrap();
        assert!((loss - (0.25 + 9.0)).abs() < 1e-14);
    }

    #[test]
    fn perfect_output_has_zero_loss() {
        // Last-layer bias equal to the target with zero weights.
        let mut mlp = Mlp::zeros(NetDrift::arch(1, &[2])).unwrap();
        let n = mlp.params().len();
        mlp.params_mut()[n - 1] = 1.5;
        let model = NetDrift::new(mlp, NormStats::identity(1)).unwrap();
        let batch = FmBatch {
            z1: vec![1.0, 2.0],
            z0: vec![-0.5, 0.5],
            t: vec![0.2, 0.9],
        };
        assert_eq!(flow_matching_loss(&model, &batch).unwrap().0, 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // [1, 1, 1] would be too small to exercise the hidden layer; [2, 1, 1] has 5 parameters.
        let mlp = Mlp::init(vec![2, 1, 1], 11).unwrap();
        assert_eq!(mlp.params().len(), 5);
        let mut model = NetDrift::new(mlp, NormStats::identity(1)).unwrap();
        // Keep the hidden unit active.
        model.mlp.params_mut()[2] = 0.8;
        let batch = FmBatch {
            z1: vec![1.3, -0.4, 0.7],
            z0: vec![0.2, 0.9, -1.1],
            t: vec![0.3, 0.6, 0.8],
        };
        let (_, g) = flow_matching_loss(&model, &batch).unwrap();
        let h = 1e-6;
        for i in 0..5 {
            let mut p = model.clone();
            p.mlp.params_mut()[i] += h;
            let mut m = model.clone();
            m.mlp.params_mut()[i] -= h;
            let fd =
                (flow_matching_loss(&p, &batch).unwrap().0 - flow_matching_loss(&m, &batch).unwrap().0) / (2.0 * h);
            let rel = (fd - g[i]).abs() / g[i].abs().max(1e-8);
            assert!(rel <= 1e-5, "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = generate_l63_dataset(600, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let (a, ra) = train_drift(&ds, &[8], &cfg).unwrap();
        let (b, rb) = train_drift(&ds, &[8], &cfg).unwrap();
        assert_eq!(a.mlp.params(), b.mlp.params());
        assert_eq!(ra, rb);
        assert_eq!(ra.train_loss.len(), 2);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            split: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
