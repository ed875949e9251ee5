//! Wavegram front end, feature stacking and the attention module `f_ATT`.

use rand::Rng;

use super::layers::{Builder, ConvLayer, Env, Pointwise};
use crate::autodiff::conv::Pad1d;
use crate::autodiff::{Graph, Var};
use crate::params::ParamId;
use crate::tensor::{Real, Tensor, TensorError};

/// Widths of the two separable blocks of the attention module.
pub const ATTENTION_WIDTHS: [usize; 2] = [16, 64];

/// Separable strided 1-D convolution producing a `t×f` map aligned with the
/// log-mel frames: depthwise kernels of window length with a channel
/// multiplier, then a pointwise mix to `f` channels.
#[derive(Clone, Debug)]
pub struct Wavegram {
    pub dw: ParamId,
    pub pw: Pointwise,
    pub win_length: usize,
    pub hop: usize,
}

impl Wavegram {
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<T, R>,
        win_length: usize,
        hop: usize,
        multiplier: usize,
        n_bins: usize,
    ) -> Self {
        let dw = b.kaiming("wavegram.dw", &[multiplier, win_length], win_length);
        let pw = Pointwise::new(b, "wavegram.pw", multiplier, n_bins, true);
        Wavegram {
            dw,
            pw,
            win_length,
            hop,
        }
    }

    /// `x: [N, 1, L]` → `[N, 1, t, f]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, env: &Env<T>, x: Var) -> Result<Var, TensorError> {
        let k = g.param(env.params, self.dw);
        let y = g.depthwise_conv1d(x, k, self.hop, Pad1d::Reflect(self.win_length / 2))?;
        let y = self.pw.forward(g, env, y)?;
        let y = g.swap_last2(y)?;
        let s = g.shape(y).to_vec();
        g.reshape(y, &[s[0], 1, s[1], s[2]])
    }
}

/// `X = [X_Mel, X_Wave]` along the channel axis, mel first.
pub fn build_feature_stack<T: Real>(g: &mut Graph<T>, channels: &[Var]) -> Result<Var, TensorError> {
    match channels {
        [] => Err(TensorError::invalid("feature_stack", "no feature channels")),
        [one] => Ok(*one),
        many => g.concat_channels(many),
    }
}

/// `X̃ = H ⊗ X`.
pub fn apply_attention<T: Real>(g: &mut Graph<T>, x: Var, h: Var) -> Result<Var, TensorError> {
    g.mul(h, x)
}

/// Two 3×3 convolution blocks with ReLU, a 1×1 projection back to the input
/// channel count and a sigmoid.
#[derive(Clone, Debug)]
pub struct Attention {
    pub block1: ConvLayer,
    pub block2: ConvLayer,
    pub proj: Pointwise,
}

impl Attention {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<T, R>, channels: usize, separable: bool) -> Self {
        let [w1, w2] = ATTENTION_WIDTHS;
        Attention {
            block1: ConvLayer::new(b, "attention.block1", channels, w1, 3, 1, separable, true),
            block2: ConvLayer::new(b, "attention.block2", w1, w2, 3, 1, separable, true),
            proj: Pointwise::new(b, "attention.proj", w2, channels, true),
        }
    }

    /// Attention map `H ∈ (0,1)` with the shape of `x`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, env: &Env<T>, x: Var) -> Result<Var, TensorError> {
        let y = self.block1.forward(g, env, x)?;
        let y = g.relu(y);
        let y = self.block2.forward(g, env, y)?;
        let y = g.relu(y);
        let y = self.proj.forward(g, env, y)?;
        Ok(g.sigmoid(y))
    }

    pub fn projection_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.proj.w];
        ids.extend(self.proj.bias);
        ids
    }
}

/// Zero a set of parameters in place.
pub(crate) fn zero_params<T: Real>(store: &mut crate::params::ParamStore<T>, ids: &[ParamId]) {
    for &id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape));
    }
}
