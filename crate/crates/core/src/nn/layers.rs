use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{BatchNormMode, Graph, ParamId, ParamStore, Tensor, Var};

/// Negative slope of every leaky ReLU in the discriminator.
pub const LEAKY_SLOPE: f64 = 0.2;

/// All convolutions halve (or, transposed, double) the spatial grid.
const STRIDE: usize = 2;

/// DCGAN weight initialisation: N(0, 0.02).
fn init_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, 0.02).unwrap();
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(normal.sample(rng)))
}

/// Stride-2 convolution with zero "same" padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_normal(&[out_channels, in_channels, kernel, kernel], rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_channels]));
        Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias,
        }
    }

    pub fn stride(&self) -> usize {
        STRIDE
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(x, w, b, STRIDE)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Stride-2 transposed convolution; doubles both spatial dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_normal(&[in_channels, out_channels, kernel, kernel], rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_channels]));
        Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv_transpose2d(x, w, b, STRIDE)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Fully connected layer over `[B, in]` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_normal(&[out_dim, in_dim], rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_dim]));
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Per-channel batch normalisation with learned scale/shift and running
/// statistics for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([channels]));
        Self {
            channels,
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Train mode normalises with batch statistics and folds them into the
    /// running averages; eval mode uses the running averages.
    pub fn forward<T: Scalar>(&mut self, g: &mut Graph<'_, T>, x: Var, train: bool) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        let eps = T::from_f64_lossy(self.eps);
        if train {
            let (y, stats) = g.batch_norm(x, gamma, beta, BatchNormMode::Train, eps)?;
            let stats = stats.expect("train mode returns statistics");
            let m = self.momentum;
            for c in 0..self.channels {
                self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c].to_f64_lossy();
                self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c].to_f64_lossy();
            }
            Ok(y)
        } else {
            let mean: Vec<T> = self.running_mean.iter().map(|&v| T::from_f64_lossy(v)).collect();
            let var: Vec<T> = self.running_var.iter().map(|&v| T::from_f64_lossy(v)).collect();
            let (y, _) = g.batch_norm(x, gamma, beta, BatchNormMode::Eval { mean: &mean, var: &var }, eps)?;
            Ok(y)
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}
