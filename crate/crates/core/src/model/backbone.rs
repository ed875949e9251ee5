//! MobileFaceNet-style embedding network.

use rand::Rng;

use super::layers::{BatchNorm, Builder, ConvLayer, Depthwise, Env, Pointwise, Prelu};
use crate::autodiff::{Graph, Var};
use crate::tensor::{Real, TensorError};

/// Inverted-bottleneck stages `(expansion, out_channels, repeats, stride)`
/// at unit width.
pub const STAGES: [(usize, usize, usize, usize); 5] = [
    (2, 64, 5, 2),
    (4, 128, 1, 2),
    (2, 128, 2, 1),
    (4, 128, 1, 2),
    (2, 128, 2, 1),
];
pub const STEM_WIDTH: usize = 64;
pub const LAST_WIDTH: usize = 384;

/// Channel width scaled by `mult`, never below 8.
pub fn scaled(width: usize, mult: f64) -> usize {
    ((width as f64 * mult).round() as usize).max(8)
}

/// Spatial size after a "same"-padded 3×3 convolution with `stride`.
fn shrink(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

#[derive(Clone, Debug)]
struct ConvBnAct {
    conv: ConvLayer,
    bn: BatchNorm,
    act: Prelu,
}

impl ConvBnAct {
    fn forward<T: Real>(&self, g: &mut Graph<T>, env: &Env<T>, x: Var) -> Result<Var, TensorError> {
        let y = self.conv.forward(g, env, x)?;
        let y = self.bn.forward(g, env, y)?;
        self.act.forward(g, env, y)
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    expand: Pointwise,
    expand_bn: BatchNorm,
    expand_act: Prelu,
    dw: Depthwise,
    dw_bn: BatchNorm,
    dw_act: Prelu,
    project: Pointwise,
    project_bn: BatchNorm,
    residual: bool,
}

impl Bottleneck {
    fn new<T: Real, R: Rng>(b: &mut Builder<T, R>, name: &str, cin: usize, cout: usize, t: usize, stride: usize) -> Self {
        let e = cin * t;
        Bottleneck {
            expand: Pointwise::new(b, &format!("{name}.expand"), cin, e, false),
            expand_bn: BatchNorm::new(b, &format!("{name}.expand_bn"), e),
            expand_act: Prelu::new(b, &format!("{name}.expand_act"), e),
            dw: Depthwise::new(b, &format!("{name}.dw"), e, (3, 3), stride, (1, 1)),
            dw_bn: BatchNorm::new(b, &format!("{name}.dw_bn"), e),
            dw_act: Prelu::new(b, &format!("{name}.dw_act"), e),
            project: Pointwise::new(b, &format!("{name}.project"), e, cout, false),
            project_bn: BatchNorm::new(b, &format!("{name}.project_bn"), cout),
            residual: stride == 1 && cin == cout,
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, env: &Env<T>, x: Var) -> Result<Var, TensorError> {
        let y = self.expand.forward(g, env, x)?;
        let y = self.expand_bn.forward(g, env, y)?;
        let y = self.expand_act.forward(g, env, y)?;
        let y = self.dw.forward(g, env, y)?;
        let y = self.dw_bn.forward(g, env, y)?;
        let y = self.dw_act.forward(g, env, y)?;
        let y = self.project.forward(g, env, y)?;
        let y = self.project_bn.forward(g, env, y)?;
        if self.residual {
            g.add(x, y)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stem: ConvBnAct,
    conv2: ConvBnAct,
    blocks: Vec<Bottleneck>,
    last: Pointwise,
    last_bn: BatchNorm,
    last_act: Prelu,
    gdc: Depthwise,
    gdc_bn: BatchNorm,
    embed: Pointwise,
    embed_bn: BatchNorm,
}

impl Backbone {
    /// Embedding network for a `cin × frames × bins` input.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<T, R>,
        cin: usize,
        frames: usize,
        bins: usize,
        h: usize,
        width_mult: f64,
        separable: bool,
    ) -> Self {
        let c0 = scaled(STEM_WIDTH, width_mult);
        let stem = ConvBnAct {
            conv: ConvLayer::new(b, "backbone.stem", cin, c0, 3, 2, separable, false),
            bn: BatchNorm::new(b, "backbone.stem.bn", c0),
            act: Prelu::new(b, "backbone.stem.act", c0),
        };
        let conv2 = ConvBnAct {
            conv: ConvLayer::new(b, "backbone.conv2", c0, c0, 3, 1, separable, false),
            bn: BatchNorm::new(b, "backbone.conv2.bn", c0),
            act: Prelu::new(b, "backbone.conv2.act", c0),
        };
        let (mut ht, mut wd) = (shrink(frames, 2), shrink(bins, 2));
        let mut blocks = Vec::new();
        let mut c = c0;
        for (si, &(t, cout, n, s)) in STAGES.iter().enumerate() {
            let cout = scaled(cout, width_mult);
            for i in 0..n {
                let stride = if i == 0 { s } else { 1 };
                blocks.push(Bottleneck::new(b, &format!("backbone.stage{si}.{i}"), c, cout, t, stride));
                ht = shrink(ht, stride);
                wd = shrink(wd, stride);
                c = cout;
            }
        }
        let cl = scaled(LAST_WIDTH, width_mult);
        Backbone {
            stem,
            conv2,
            blocks,
            last: Pointwise::new(b, "backbone.last", c, cl, false),
            last_bn: BatchNorm::new(b, "backbone.last_bn", cl),
            last_act: Prelu::new(b, "backbone.last_act", cl),
            gdc: Depthwise::new(b, "backbone.gdc", cl, (ht, wd), 1, (0, 0)),
            gdc_bn: BatchNorm::new(b, "backbone.gdc_bn", cl),
            embed: Pointwise::new(b, "backbone.embed", cl, h, false),
            embed_bn: BatchNorm::new(b, "backbone.embed_bn", h),
        }
    }

    /// `[N, C, t, f]` → unit-norm embeddings `[N, h]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, env: &Env<T>, x: Var) -> Result<Var, TensorError> {
        let mut y = self.stem.forward(g, env, x)?;
        y = self.conv2.forward(g, env, y)?;
        for block in &self.blocks {
            y = block.forward(g, env, y)?;
        }
        y = self.last.forward(g, env, y)?;
        y = self.last_bn.forward(g, env, y)?;
        y = self.last_act.forward(g, env, y)?;
        y = self.gdc.forward(g, env, y)?;
        y = self.gdc_bn.forward(g, env, y)?;
        y = self.embed.forward(g, env, y)?;
        y = self.embed_bn.forward(g, env, y)?;
        let n = g.shape(y)[0];
        let h = g.shape(y)[1];
        let y = g.reshape(y, &[n, h])?;
        g.l2_normalize_rows(y)
    }
}
