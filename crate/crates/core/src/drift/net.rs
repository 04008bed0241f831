use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{check_dim, Drift};
use crate::error::{DaisiError, Result};
use crate::interpolant::NormStats;
use crate::rng;

/// Dense feed-forward network with ReLU between layers and a linear output.
///
/// Parameters are one flat vector; layer `l` stores its weight matrix
/// (`out x in`, row-major) followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Intermediate values kept by [`Mlp::forward_train`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn param_count(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    pub fn from_params(dims: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(DaisiError::InvalidParameter(format!(
                "network needs at least two non-zero layer widths, got {dims:?}"
            )));
        }
        let expected = Self::param_count(&dims);
        if params.len() != expected {
            return Err(DaisiError::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(Mlp { dims, params })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = Self::param_count(&dims);
        Self::from_params(dims, vec![0.0; n])
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation.
    pub fn init(dims: Vec<usize>, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        let mut r = rng::stream(seed, &[0x1a17]);
        let mut offset = 0;
        for l in 0..net.dims.len() - 1 {
            let (fan_in, fan_out) = (net.dims[l], net.dims[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_out * fan_in + fan_out] {
                *p = r.random_range(-bound..bound);
            }
            offset += fan_out * fan_in + fan_out;
        }
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    fn layer_offset(&self, l: usize) -> usize {
        Self::param_count(&self.dims[..=l])
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ndarray::ArrayView1<'_, f64>) {
        let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
        let off = self.layer_offset(l);
        let w = ArrayView2::from_shape((fan_out, fan_in), &self.params[off..off + fan_out * fan_in])
            .expect("layer shape matches parameter count");
        let b = ndarray::ArrayView1::from(&self.params[off + fan_out * fan_in..off + fan_out * fan_in + fan_out]);
        (w, b)
    }

    fn affine(&self, l: usize, x: &ArrayView2<f64>) -> Array2<f64> {
        let (w, b) = self.layer(l);
        let mut y = x.dot(&w.t());
        y += &b;
        y
    }

    /// Batched forward pass, one row per input.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim(self.input_dim(), x.ncols())?;
        let mut h = self.affine(0, &x);
        for l in 1..self.n_layers() {
            h.mapv_inplace(relu);
            h = self.affine(l, &h.view());
        }
        Ok(h)
    }

    pub fn forward_train(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        check_dim(self.input_dim(), x.ncols())?;
        let mut inputs = vec![x.to_owned()];
        let mut pre = Vec::with_capacity(self.n_layers() - 1);
        let mut h = self.affine(0, &x);
        for l in 1..self.n_layers() {
            let a = h.mapv(relu);
            pre.push(h);
            h = self.affine(l, &a.view());
            inputs.push(a);
        }
        Ok((h, ForwardCache { inputs, pre }))
    }

    /// Gradient of `sum(dout * output)` with respect to the flat parameters.
    pub fn backward(&self, cache: &ForwardCache, dout: ArrayView2<f64>) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = dout.to_owned();
        for l in (0..self.n_layers()).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let off = self.layer_offset(l);
            let gw = delta.t().dot(&cache.inputs[l]);
            let gb: Array1<f64> = delta.sum_axis(Axis(0));
            grad[off..off + fan_out * fan_in].copy_from_slice(gw.as_slice().expect("contiguous"));
            grad[off + fan_out * fan_in..off + fan_out * fan_in + fan_out]
                .copy_from_slice(gb.as_slice().expect("contiguous"));
            if l > 0 {
                let (w, _) = self.layer(l);
                let mut back = delta.dot(&w);
                ndarray::Zip::from(&mut back).and(&cache.pre[l - 1]).for_each(|g, &p| {
                    if p <= 0.0 {
                        *g = 0.0
                    }
                });
                delta = back;
            }
        }
        grad
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Learned drift: an [`Mlp`] on `(w, t)` in normalised coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct NetDrift {
    pub mlp: Mlp,
    pub stats: NormStats,
}

impl NetDrift {
    pub fn new(mlp: Mlp, stats: NormStats) -> Result<Self> {
        let d = mlp.output_dim();
        if mlp.input_dim() != d + 1 {
            return Err(DaisiError::InvalidParameter(format!(
                "drift network must map {} inputs to {d} outputs, got {}",
                d + 1,
                mlp.input_dim()
            )));
        }
        check_dim(d, stats.dim())?;
        Ok(NetDrift { mlp, stats })
    }

    /// Architecture `[d + 1, hidden..., d]`.
    pub fn arch(d: usize, hidden: &[usize]) -> Vec<usize> {
        let mut dims = vec![d + 1];
        dims.extend_from_slice(hidden);
        dims.push(d);
        dims
    }

    /// Network input rows `[w, t]`.
    pub fn inputs(z: &[f64], t: &[f64], d: usize) -> Array2<f64> {
        let n = z.len() / d;
        let mut x = Array2::zeros((n, d + 1));
        for (i, mut row) in x.outer_iter_mut().enumerate() {
            row.slice_mut(s![..d])
                .assign(&ndarray::ArrayView1::from(&z[i * d..(i + 1) * d]));
            row[d] = t[if t.len() == 1 { 0 } else { i }];
        }
        x
    }
}

impl Drift for NetDrift {
    fn dim(&self) -> usize {
        self.mlp.output_dim()
    }

    fn stats(&self) -> &NormStats {
        &self.stats
    }

    fn drift_batch(&self, t: f64, z: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(z.len(), out.len())?;
        let d = self.dim();
        if z.len() % d != 0 {
            return Err(DaisiError::DimensionMismatch {
                expected: d,
                got: z.len(),
            });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(DaisiError::TimeOutOfRange { t });
        }
        let y = self.mlp.forward(Self::inputs(z, &[t], d).view())?;
        for (o, v) in out.iter_mut().zip(y.iter()) {
            *o = *v;
        }
        Ok(())
    }
}
