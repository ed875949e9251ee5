//! Parameterized layers built on the graph primitives.

use rand::Rng;

use crate::autodiff::{Graph, NormMode, Var};
use crate::params::{kaiming_uniform, ParamId, ParamStore};
use crate::tensor::{Real, Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;

/// Parameters, running buffers and the train/eval switch seen by a forward pass.
pub struct Env<'a, T: Real> {
    pub params: &'a ParamStore<T>,
    pub buffers: &'a ParamStore<T>,
    pub train: bool,
}

/// Allocates named parameters during model construction.
pub struct Builder<'a, T: Real, R: Rng> {
    pub params: &'a mut ParamStore<T>,
    pub buffers: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let t = kaiming_uniform(self.rng, shape, fan_in);
        self.params.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.params.add(name, Tensor::zeros(shape))
    }

    pub fn full(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.params.add(name, Tensor::full(shape, T::of(v)))
    }
}

/// 3×3-style spatial convolution, either depthwise-separable or dense.
#[derive(Clone, Debug)]
pub enum Conv {
    Separable {
        dw: ParamId,
        pw: ParamId,
        bias: Option<ParamId>,
    },
    Dense {
        k: ParamId,
        bias: Option<ParamId>,
    },
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub conv: Conv,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    /// "Same"-padded `k×k` convolution from `cin` to `cout` channels.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        separable: bool,
        bias: bool,
    ) -> Self {
        let conv = if separable {
            let dw = b.kaiming(&format!("{name}.dw"), &[cin, k, k], k * k);
            let pw = b.kaiming(&format!("{name}.pw"), &[cout, cin], cin);
            let bias = bias.then(|| b.zeros(&format!("{name}.bias"), &[cout]));
            Conv::Separable { dw, pw, bias }
        } else {
            let kk = b.kaiming(&format!("{name}.k"), &[cout, cin, k, k], cin * k * k);
            let bias = bias.then(|| b.zeros(&format!("{name}.bias"), &[cout]));
            Conv::Dense { k: kk, bias }
        };
        ConvLayer {
            conv,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, env: &Env<T>, x: Var) -> Result<Var, TensorError> {
        let pad = (self.pad, self.pad);
        match &self.conv {
            Conv::Separable { dw, pw, bias } => {
                let dw = g.param(env.params, *dw);
                let pw = g.param(env.params, *pw);
                let bias = bias.map(|b| g.param(env.params, b));
                let y = g.depthwise_conv2d(x, dw, self.stride, pad)?;
                g.pointwise(y, pw, bias)
            }
            Conv::Dense { k, bias } => {
                let k = g.param(env.params, *k);
                let y = g.conv2d(x, k, self.stride, pad)?;
                match bias {
                    Some(b) => {
                        let b = g.param(env.params, *b);
                        add_channel_bias(g, y, b)
                    }
                    None => Ok(y),
                }
            }
        }
    }
}

/// Adds a per-channel bias through an identity pointwise map so the bias
/// gradient comes from the existing kernel.
fn add_channel_bias<T: Real>(g: &mut Graph<T>, x: Var, b: Var) -> Result<Var, TensorError> {
    let c = g.shape(x)[1];
    let mut eye = Tensor::zeros(&[c, c]);
    for i in 0..c {
        eye.data_mut()[i * c + i] = T::one();
    }
    let eye = g.constant(eye);
    g.pointwise(x, eye, Some(b))
}

/// 1×1 convolution.
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub w: ParamId,
    pub bias: Option<ParamId>,
}

impl Pointwise {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<T, R>, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        let w = b.kaiming(&format!("{name}.w"), &[cout, cin], cin);
        let bias = bias.then(|| b.zeros(&format!("{name}.bias"), &[cout]));
        Pointwise { w, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, env: &Env<T>, x: Var) -> Result<Var, TensorError> {
        let w = g.param(env.params, self.w);
        let b = self.bias.map(|b| g.param(env.params, b));
        g.pointwise(x, w, b)
    }
}

/// Depthwise `kh×kw` convolution without bias.
#[derive(Clone, Debug)]
pub struct Depthwise {
    pub k: ParamId,
    pub stride: usize,
    pub pad: (usize, usize),
}

impl Depthwise {
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<T, R>,
        name: &str,
        channels: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: (usize, usize),
    ) -> Self {
        let k = b.kaiming(&format!("{name}.k"), &[channels, kernel.0, kernel.1], kernel.0 * kernel.1);
        Depthwise { k, stride, pad }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, env: &Env<T>, x: Var) -> Result<Var, TensorError> {
        let k = g.param(env.params, self.k);
        g.depthwise_conv2d(x, k, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Ids in the buffer store.
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<T, R>, name: &str, channels: usize) -> Self {
        let gamma = b.full(&format!("{name}.gamma"), &[channels], 1.0);
        let beta = b.zeros(&format!("{name}.beta"), &[channels]);
        let running_mean = b
            .buffers
            .add(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = b
            .buffers
            .add(format!("{name}.running_var"), Tensor::full(&[channels], T::one()));
        BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, env: &Env<T>, x: Var) -> Result<Var, TensorError> {
        let gamma = g.param(env.params, self.gamma);
        let beta = g.param(env.params, self.beta);
        let old_mean = env.buffers.get(self.running_mean);
        let old_var = env.buffers.get(self.running_var);
        let mode = if env.train {
            NormMode::Train
        } else {
            NormMode::Eval {
                mean: old_mean.data().to_vec(),
                var: old_var.data().to_vec(),
            }
        };
        let (y, stats) = g.batch_norm(x, gamma, beta, mode, BN_EPS)?;
        if let Some(s) = stats {
            let mom = T::of(BN_MOMENTUM);
            let keep = T::one() - mom;
            let ema = |old: &Tensor<T>, new: &[T]| {
                let data = old.data().iter().zip(new).map(|(&o, &n)| keep * o + mom * n).collect();
                Tensor::new(old.shape().to_vec(), data)
            };
            let m = ema(old_mean, &s.mean)?;
            let v = ema(old_var, &s.var)?;
            g.record_buffer_update(self.running_mean, m);
            g.record_buffer_update(self.running_var, v);
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Prelu {
    pub slope: ParamId,
}

impl Prelu {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<T, R>, name: &str, channels: usize) -> Self {
        Prelu {
            slope: b.full(&format!("{name}.slope"), &[channels], PRELU_INIT),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, env: &Env<T>, x: Var) -> Result<Var, TensorError> {
        let a = g.param(env.params, self.slope);
        g.prelu(x, a)
    }
}
