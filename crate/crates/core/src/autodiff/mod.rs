//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every forward operation as a node in creation order,
//! which is already a topological order of the DAG. [`Graph::backward`] walks
//! the nodes once in reverse and accumulates vector-Jacobian products.
//!
//! Convolutions use NCHW (`[batch, channels, height, width]`) layout; the
//! model maps the time×frequency grid onto height×width.

pub mod conv;

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor, TensorError};

pub use conv::{Conv1dGeom, Conv2dGeom, Pad1d};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Clamp applied before `arccos` so its derivative stays finite.
pub const ACOS_EPS: f64 = 1e-7;

/// Batch-norm mode. Training normalizes with batch statistics; evaluation
/// uses the supplied running statistics.
#[derive(Clone, Debug)]
pub enum NormMode<T> {
    Train,
    Eval { mean: Vec<T>, var: Vec<T> },
}

/// Batch statistics produced by a training-mode batch norm. `var` is the
/// unbiased estimate used for running-average updates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Reshape(Var),
    Concat(Vec<Var>),
    SwapLast2(Var),
    Depthwise2d {
        x: Var,
        k: Var,
        geom: Conv2dGeom,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: Conv2dGeom,
    },
    Pointwise {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Depthwise1d {
        x: Var,
        k: Var,
        geom: Conv1dGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatmulNT {
        a: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Prelu {
        x: Var,
        slope: Var,
    },
    Sigmoid(Var),
    Mul(Var, Var),
    Axpby {
        a: Var,
        alpha: T,
        b: Var,
        beta: T,
    },
    SumAll(Var),
    MeanAll(Var),
    GlobalAvgPool(Var),
    L2NormRows {
        x: Var,
        norms: Vec<T>,
    },
    SafeAcos(Var),
    MarginCe {
        theta: Var,
        target: Vec<T>,
        scale: T,
        margin: T,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn spatial(shape: &[usize]) -> usize {
    shape[2..].iter().product::<usize>().max(1)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf holding an input; gradients are reported for it when
    /// `requires_grad` is set.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Queue a non-trainable buffer update (batch-norm running statistics).
    pub fn record_buffer_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Concatenate `[N, C_i, ...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = self
            .value(*xs.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?)
            .shape()
            .to_vec();
        let n = first[0];
        let rest = &first[2..];
        let mut channels = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[0] != n || &s[2..] != rest {
                return Err(TensorError::shape("concat", &first, s));
            }
            channels += s[1];
        }
        let sp = spatial(&first);
        let mut data = Vec::with_capacity(n * channels * sp);
        for b in 0..n {
            for &x in xs {
                let v = self.value(x);
                let c = v.dim(1);
                data.extend_from_slice(&v.data()[b * c * sp..][..c * sp]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(xs.to_vec()), rg))
    }

    /// Swap the two trailing axes.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() < 2 {
            return Err(TensorError::invalid("swap_last2", "rank < 2"));
        }
        let (a, b) = (s[s.len() - 2], s[s.len() - 1]);
        let outer = v.len() / (a * b);
        let mut data = vec![T::zero(); v.len()];
        for o in 0..outer {
            let src = &v.data()[o * a * b..][..a * b];
            let dst = &mut data[o * a * b..][..a * b];
            for i in 0..a {
                for j in 0..b {
                    dst[j * a + i] = src[i * b + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::SwapLast2(x), rg))
    }

    fn conv2d_geom(
        &self,
        op: &'static str,
        x: Var,
        k: Var,
        stride: usize,
        pad: (usize, usize),
        dense: bool,
    ) -> Result<Conv2dGeom, TensorError> {
        let xs = self.shape(x);
        let ks = self.shape(k);
        if xs.len() != 4 {
            return Err(TensorError::invalid(op, format!("input must be NCHW, got {xs:?}")));
        }
        let (kh, kw, cin, cout) = if dense {
            if ks.len() != 4 || ks[1] != xs[1] {
                return Err(TensorError::shape(op, &[ks[0], xs[1], 0, 0], ks));
            }
            (ks[2], ks[3], ks[1], ks[0])
        } else {
            if ks.len() != 3 || ks[0] != xs[1] {
                return Err(TensorError::shape(op, &[xs[1], 0, 0], ks));
            }
            (ks[1], ks[2], ks[0], ks[0])
        };
        let g = Conv2dGeom {
            batch: xs[0],
            in_channels: cin,
            out_channels: cout,
            height: xs[2],
            width: xs[3],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad_h: pad.0,
            pad_w: pad.1,
        };
        if !g.is_valid() {
            return Err(TensorError::invalid(op, format!("kernel {ks:?} does not fit input {xs:?}")));
        }
        Ok(g)
    }

    /// Per-channel convolution. `x: [N, C, H, W]`, `k: [C, kh, kw]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        k: Var,
        stride: usize,
        pad: (usize, usize),
    ) -> Result<Var, TensorError> {
        let geom = self.conv2d_geom("depthwise_conv2d", x, k, stride, pad, false)?;
        let shape = [geom.batch, geom.out_channels, geom.out_height(), geom.out_width()];
        let mut out = Tensor::zeros(&shape);
        conv::depthwise2d_forward(&geom, self.value(x).data(), self.value(k).data(), out.data_mut());
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(out, Op::Depthwise2d { x, k, geom }, rg))
    }

    /// Dense convolution. `x: [N, C_in, H, W]`, `k: [C_out, C_in, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        stride: usize,
        pad: (usize, usize),
    ) -> Result<Var, TensorError> {
        let geom = self.conv2d_geom("conv2d", x, k, stride, pad, true)?;
        let shape = [geom.batch, geom.out_channels, geom.out_height(), geom.out_width()];
        let mut out = Tensor::zeros(&shape);
        conv::conv2d_forward(&geom, self.value(x).data(), self.value(k).data(), out.data_mut());
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(out, Op::Conv2d { x, k, geom }, rg))
    }

    /// 1×1 channel mixing. `x: [N, C_in, ...]`, `w: [C_out, C_in]`, `b: [C_out]`.
    pub fn pointwise(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() < 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(TensorError::shape("pointwise", &[0, *xs.get(1).unwrap_or(&0)], &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(TensorError::shape("pointwise", &[ws[0]], self.shape(b)));
            }
        }
        let sp = spatial(&xs);
        let mut shape = xs.clone();
        shape[1] = ws[0];
        let mut out = Tensor::zeros(&shape);
        conv::pointwise_forward(
            xs[0],
            xs[1],
            ws[0],
            sp,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            out.data_mut(),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Pointwise { x, w, b }, rg))
    }

    /// Depthwise 1-D convolution with channel multiplier.
    /// `x: [N, C_in, L]`, `k: [C_in·M, K]` → `[N, C_in·M, T]`.
    pub fn depthwise_conv1d(
        &mut self,
        x: Var,
        k: Var,
        stride: usize,
        pad: Pad1d,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if stride == 0 {
            return Err(TensorError::invalid("depthwise_conv1d", "stride must be positive"));
        }
        if xs.len() != 3 || ks.len() != 2 || ks[0] % xs[1] != 0 {
            return Err(TensorError::shape("depthwise_conv1d", &[xs[1], 0], &ks));
        }
        if let Pad1d::Reflect(p) = pad {
            if p >= xs[2] {
                return Err(TensorError::invalid(
                    "depthwise_conv1d",
                    format!("reflect padding {p} needs more than {} samples", xs[2]),
                ));
            }
        }
        let geom = Conv1dGeom {
            batch: xs[0],
            in_channels: xs[1],
            multiplier: ks[0] / xs[1],
            len: xs[2],
            kernel: ks[1],
            stride,
            pad,
        };
        if geom.kernel > geom.padded_len() {
            return Err(TensorError::invalid(
                "depthwise_conv1d",
                format!("kernel {} longer than padded input {}", geom.kernel, geom.padded_len()),
            ));
        }
        let mut out = Tensor::zeros(&[geom.batch, geom.out_channels(), geom.out_len()]);
        conv::depthwise1d_forward(&geom, self.value(x).data(), self.value(k).data(), out.data_mut());
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(out, Op::Depthwise1d { x, k, geom }, rg))
    }

    /// Affine map. `x: [N, d_in]`, `w: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(TensorError::shape("linear", &[xs[xs.len() - 1], 0], &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(TensorError::shape("linear", &[ws[1]], self.shape(b)));
            }
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * dout];
        for i in 0..n {
            let row = &mut out[i * dout..][..dout];
            if let Some(b) = b {
                row.copy_from_slice(self.value(b).data());
            }
            for k in 0..din {
                let a = xv[i * din + k];
                for (o, &wkj) in row.iter_mut().zip(&wv[k * dout..][..dout]) {
                    *o += a * wkj;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![n, dout], out)?, Op::Linear { x, w, b }, rg))
    }

    /// `a: [N, d]`, `b: [M, d]` → `a · bᵀ: [N, M]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::shape("matmul_nt", &sa, &sb));
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = av[i * d..][..d]
                    .iter()
                    .zip(&bv[j * d..][..d])
                    .map(|(&x, &y)| x * y)
                    .sum();
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatmulNT { a, b }, rg))
    }

    /// Per-channel normalization over batch and spatial axes of `[N, C, ...]`.
    /// Returns the output and, in training mode, the batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>), TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(TensorError::invalid("batch_norm", "input rank < 2"));
        }
        let c = xs[1];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::shape("batch_norm", &[c], self.shape(p)));
            }
        }
        let (n, sp) = (xs[0], spatial(&xs));
        let count = n * sp;
        let xv = self.value(x).data();
        let eps = T::of(eps);
        let (mean, var_biased, stats) = match &mode {
            NormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += xv[(b * c + ch) * sp..][..sp].iter().copied().sum::<T>();
                    }
                    let mu = s / T::of(count as f64);
                    let mut ss = T::zero();
                    for b in 0..n {
                        for &v in &xv[(b * c + ch) * sp..][..sp] {
                            ss += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = ss / T::of(count as f64);
                }
                let unbiased = if count > 1 {
                    let f = T::of(count as f64 / (count - 1) as f64);
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::shape("batch_norm", &[c], &[mean.len()]));
                }
                (mean.clone(), var.clone(), None)
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * sp;
                for i in base..base + sp {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let train = matches!(mode, NormMode::Train);
        let v = self.push(
            Tensor::new(xs, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Parametric ReLU with one slope per channel of `[N, C, ...]`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(slope) != [xs[1]] {
            return Err(TensorError::shape("prelu", &[*xs.get(1).unwrap_or(&0)], self.shape(slope)));
        }
        let (c, sp) = (xs[1], spatial(&xs));
        let a = self.value(slope).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if *v < T::zero() {
                *v *= a[(i / sp) % c];
            }
        }
        let rg = self.rg(x) || self.rg(slope);
        Ok(self.push(out, Op::Prelu { x, slope }, rg))
    }

    /// Logistic function, clamped so outputs stay strictly inside (0, 1)
    /// in the element type's precision.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let hi = T::one() - T::epsilon() / T::of(2.0);
        let lo = T::min_positive_value();
        let out = self.value(x).map(|v| {
            let s = if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            };
            s.max(lo).min(hi)
        });
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `alpha·a + beta·b`.
    pub fn axpby(&mut self, a: Var, alpha: T, b: Var, beta: T) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape("axpby", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| alpha * x + beta * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Axpby { a, alpha, b, beta }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.axpby(a, T::one(), b, T::one())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / T::of(v.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Mean over all spatial positions: `[N, C, ...]` → `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(TensorError::invalid("global_avg_pool", "needs spatial axes"));
        }
        let sp = spatial(&xs);
        let scale = T::of(1.0 / sp as f64);
        let data = self
            .value(x)
            .data()
            .chunks(sp)
            .map(|c| c.iter().copied().sum::<T>() * scale)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![xs[0], xs[1]], data)?, Op::GlobalAvgPool(x), rg))
    }

    /// Scale each row of `[N, d]` to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(TensorError::invalid("l2_normalize_rows", format!("expected [N, d], got {xs:?}")));
        }
        let d = xs[1];
        let floor = T::of(1e-12);
        let mut norms = Vec::with_capacity(xs[0]);
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            row.iter_mut().for_each(|v| *v = *v / n);
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2NormRows { x, norms }, rg))
    }

    /// `arccos` of inputs clamped to `[-1 + ε, 1 - ε]`, ε = [`ACOS_EPS`].
    pub fn safe_acos(&mut self, x: Var) -> Var {
        let (lo, hi) = acos_bounds::<T>();
        let out = self.value(x).map(|v| v.max(lo).min(hi).acos());
        let rg = self.rg(x);
        self.push(out, Op::SafeAcos(x), rg)
    }

    /// Per-row additive-angular-margin cross-entropy.
    ///
    /// `theta: [N, c]` angles, `target: [N, c]` label weights. Logits are
    /// `s·cos(θ_i + m·y_i)`; the row loss is `-Σ y_i · log softmax(z)_i`.
    pub fn margin_cross_entropy(
        &mut self,
        theta: Var,
        target: &Tensor<T>,
        scale: T,
        margin: T,
    ) -> Result<Var, TensorError> {
        let ts = self.shape(theta).to_vec();
        if ts.len() != 2 || target.shape() != ts.as_slice() {
            return Err(TensorError::shape("margin_cross_entropy", &ts, target.shape()));
        }
        let c = ts[1];
        let th = self.value(theta).data();
        let y = target.data();
        let mut probs = vec![T::zero(); th.len()];
        let mut losses = Vec::with_capacity(ts[0]);
        for r in 0..ts[0] {
            let (tr, yr) = (&th[r * c..][..c], &y[r * c..][..c]);
            let z: Vec<T> = tr
                .iter()
                .zip(yr)
                .map(|(&t, &yi)| scale * (t + margin * yi).cos())
                .collect();
            let zmax = z.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp: T = z.iter().map(|&v| (v - zmax).exp()).sum();
            let lse = zmax + sum_exp.ln();
            let mut loss = T::zero();
            for i in 0..c {
                probs[r * c + i] = (z[i] - lse).exp();
                loss -= yr[i] * (z[i] - lse);
            }
            losses.push(loss);
        }
        let rg = self.rg(theta);
        Ok(self.push(
            Tensor::new(vec![ts[0]], losses)?,
            Op::MarginCe {
                theta,
                target: y.to_vec(),
                scale,
                margin,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn zeros_like(&self, v: Var) -> Tensor<T> {
        Tensor::zeros(self.shape(v))
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        // Buffers for inputs that need gradients; accumulated at the end.
        let mut out: Vec<(Var, Tensor<T>)> = Vec::new();
        let want = |v: Var| self.rg(v);
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => {
                out.push((*x, g.clone().reshape(self.shape(*x)).expect("reshape back")));
            }
            Op::Concat(xs) => {
                let n = self.shape(xs[0])[0];
                let sp = spatial(self.shape(xs[0]));
                let total_c = node.value.dim(1);
                let mut offset = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if want(x) {
                        let mut t = self.zeros_like(x);
                        for b in 0..n {
                            t.data_mut()[b * c * sp..][..c * sp]
                                .copy_from_slice(&gd[(b * total_c + offset) * sp..][..c * sp]);
                        }
                        out.push((x, t));
                    }
                    offset += c;
                }
            }
            Op::SwapLast2(x) => {
                let s = self.shape(*x);
                let (a, b) = (s[s.len() - 2], s[s.len() - 1]);
                let mut t = self.zeros_like(*x);
                let outer = t.len() / (a * b);
                for o in 0..outer {
                    let src = &gd[o * a * b..][..a * b];
                    let dst = &mut t.data_mut()[o * a * b..][..a * b];
                    for i in 0..a {
                        for j in 0..b {
                            dst[i * b + j] = src[j * a + i];
                        }
                    }
                }
                out.push((*x, t));
            }
            Op::Depthwise2d { x, k, geom } => {
                let mut gx = want(*x).then(|| self.zeros_like(*x));
                let mut gk = want(*k).then(|| self.zeros_like(*k));
                conv::depthwise2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*k).data(),
                    gd,
                    gx.as_mut().map(|t| t.data_mut()),
                    gk.as_mut().map(|t| t.data_mut()),
                );
                out.extend(gx.map(|t| (*x, t)));
                out.extend(gk.map(|t| (*k, t)));
            }
            Op::Conv2d { x, k, geom } => {
                let mut gx = want(*x).then(|| self.zeros_like(*x));
                let mut gk = want(*k).then(|| self.zeros_like(*k));
                conv::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*k).data(),
                    gd,
                    gx.as_mut().map(|t| t.data_mut()),
                    gk.as_mut().map(|t| t.data_mut()),
                );
                out.extend(gx.map(|t| (*x, t)));
                out.extend(gk.map(|t| (*k, t)));
            }
            Op::Pointwise { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let mut gx = want(*x).then(|| self.zeros_like(*x));
                let mut gw = want(*w).then(|| self.zeros_like(*w));
                let mut gb = b.filter(|&b| want(b)).map(|b| self.zeros_like(b));
                conv::pointwise_backward(
                    xs[0],
                    xs[1],
                    ws[0],
                    spatial(xs),
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                out.extend(gx.map(|t| (*x, t)));
                out.extend(gw.map(|t| (*w, t)));
                if let (Some(b), Some(t)) = (b, gb) {
                    out.push((*b, t));
                }
            }
            Op::Depthwise1d { x, k, geom } => {
                let mut gx = want(*x).then(|| self.zeros_like(*x));
                let mut gk = want(*k).then(|| self.zeros_like(*k));
                conv::depthwise1d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*k).data(),
                    gd,
                    gx.as_mut().map(|t| t.data_mut()),
                    gk.as_mut().map(|t| t.data_mut()),
                );
                out.extend(gx.map(|t| (*x, t)));
                out.extend(gk.map(|t| (*k, t)));
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[1];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if want(*x) {
                    let mut t = self.zeros_like(*x);
                    for i in 0..n {
                        for k in 0..din {
                            t.data_mut()[i * din + k] = gd[i * dout..][..dout]
                                .iter()
                                .zip(&wv[k * dout..][..dout])
                                .map(|(&a, &b)| a * b)
                                .sum();
                        }
                    }
                    out.push((*x, t));
                }
                if want(*w) {
                    let mut t = self.zeros_like(*w);
                    for i in 0..n {
                        for k in 0..din {
                            let a = xv[i * din + k];
                            for (o, &gv) in t.data_mut()[k * dout..][..dout].iter_mut().zip(&gd[i * dout..][..dout]) {
                                *o += a * gv;
                            }
                        }
                    }
                    out.push((*w, t));
                }
                if let Some(b) = b.filter(|&b| want(b)) {
                    let mut t = self.zeros_like(b);
                    for row in gd.chunks(dout) {
                        for (o, &gv) in t.data_mut().iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                    out.push((b, t));
                }
            }
            Op::MatmulNT { a, b } => {
                let (n, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if want(*a) {
                    let mut t = self.zeros_like(*a);
                    for i in 0..n {
                        let row = &mut t.data_mut()[i * d..][..d];
                        for j in 0..m {
                            let gv = gd[i * m + j];
                            for (o, &bv) in row.iter_mut().zip(&bv[j * d..][..d]) {
                                *o += gv * bv;
                            }
                        }
                    }
                    out.push((*a, t));
                }
                if want(*b) {
                    let mut t = self.zeros_like(*b);
                    for j in 0..m {
                        let row = &mut t.data_mut()[j * d..][..d];
                        for i in 0..n {
                            let gv = gd[i * m + j];
                            for (o, &av) in row.iter_mut().zip(&av[i * d..][..d]) {
                                *o += gv * av;
                            }
                        }
                    }
                    out.push((*b, t));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xs = self.shape(*x);
                let (n, c, sp) = (xs[0], xs[1], spatial(xs));
                let count = T::of((n * sp) as f64);
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * sp;
                        for i in base..base + sp {
                            sum_g[ch] += gd[i];
                            sum_gx[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                if want(*x) {
                    let mut t = self.zeros_like(*x);
                    let td = t.data_mut();
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            let f = gam[ch] * inv_std[ch];
                            for i in base..base + sp {
                                td[i] = if *train {
                                    f * (gd[i] - sum_g[ch] / count - xhat[i] * sum_gx[ch] / count)
                                } else {
                                    f * gd[i]
                                };
                            }
                        }
                    }
                    out.push((*x, t));
                }
                if want(*gamma) {
                    out.push((*gamma, Tensor::new(vec![c], sum_gx).expect("shape")));
                }
                if want(*beta) {
                    out.push((*beta, Tensor::new(vec![c], sum_g).expect("shape")));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let data = gd
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, Tensor::new(self.shape(*x).to_vec(), data).expect("shape")));
            }
            Op::Prelu { x, slope } => {
                let xs = self.shape(*x);
                let (c, sp) = (xs[1], spatial(xs));
                let xv = self.value(*x).data();
                let a = self.value(*slope).data();
                let mut gx = self.zeros_like(*x);
                let mut ga = vec![T::zero(); c];
                for (i, (&gv, &v)) in gd.iter().zip(xv).enumerate() {
                    let ch = (i / sp) % c;
                    if v < T::zero() {
                        gx.data_mut()[i] = gv * a[ch];
                        ga[ch] += gv * v;
                    } else {
                        gx.data_mut()[i] = gv;
                    }
                }
                if want(*x) {
                    out.push((*x, gx));
                }
                if want(*slope) {
                    out.push((*slope, Tensor::new(vec![c], ga).expect("shape")));
                }
            }
            Op::Sigmoid(x) => {
                let data = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &s)| gv * s * (T::one() - s))
                    .collect();
                out.push((*x, Tensor::new(self.shape(*x).to_vec(), data).expect("shape")));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if want(*a) {
                    let data = gd.iter().zip(bv).map(|(&gv, &y)| gv * y).collect();
                    out.push((*a, Tensor::new(self.shape(*a).to_vec(), data).expect("shape")));
                }
                if want(*b) {
                    let data = gd.iter().zip(av).map(|(&gv, &y)| gv * y).collect();
                    out.push((*b, Tensor::new(self.shape(*b).to_vec(), data).expect("shape")));
                }
            }
            Op::Axpby { a, alpha, b, beta } => {
                if want(*a) {
                    out.push((*a, g.map(|v| v * *alpha)));
                }
                if want(*b) {
                    out.push((*b, g.map(|v| v * *beta)));
                }
            }
            Op::SumAll(x) => {
                out.push((*x, Tensor::full(self.shape(*x), gd[0])));
            }
            Op::MeanAll(x) => {
                let n = T::of(self.value(*x).len() as f64);
                out.push((*x, Tensor::full(self.shape(*x), gd[0] / n)));
            }
            Op::GlobalAvgPool(x) => {
                let sp = spatial(self.shape(*x));
                let scale = T::of(1.0 / sp as f64);
                let mut t = self.zeros_like(*x);
                for (chunk, &gv) in t.data_mut().chunks_mut(sp).zip(gd) {
                    chunk.iter_mut().for_each(|v| *v = gv * scale);
                }
                out.push((*x, t));
            }
            Op::L2NormRows { x, norms } => {
                let d = self.shape(*x)[1];
                let y = node.value.data();
                let mut t = self.zeros_like(*x);
                for (r, &nrm) in norms.iter().enumerate() {
                    let yr = &y[r * d..][..d];
                    let gr = &gd[r * d..][..d];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in t.data_mut()[r * d..][..d].iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * dot) / nrm;
                    }
                }
                out.push((*x, t));
            }
            Op::SafeAcos(x) => {
                let (lo, hi) = acos_bounds::<T>();
                let data = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &v)| {
                        if v < lo || v > hi {
                            T::zero()
                        } else {
                            -gv / (T::one() - v * v).sqrt()
                        }
                    })
                    .collect();
                out.push((*x, Tensor::new(self.shape(*x).to_vec(), data).expect("shape")));
            }
            Op::MarginCe {
                theta,
                target,
                scale,
                margin,
                probs,
            } => {
                let c = self.shape(*theta)[1];
                let th = self.value(*theta).data();
                let mut t = self.zeros_like(*theta);
                for (r, &gv) in gd.iter().enumerate() {
                    let yr = &target[r * c..][..c];
                    let ysum: T = yr.iter().copied().sum();
                    for i in 0..c {
                        let k = r * c + i;
                        let dz = probs[k] * ysum - yr[i];
                        let dtheta = -*scale * (th[k] + *margin * yr[i]).sin();
                        t.data_mut()[k] = gv * dz * dtheta;
                    }
                }
                out.push((*theta, t));
            }
        }
        for (v, t) in out {
            if !self.rg(v) {
                continue;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        }
    }
}

fn acos_bounds<T: Real>() -> (T, T) {
    (T::of(-1.0 + ACOS_EPS), T::of(1.0 - ACOS_EPS))
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a node, if it lies on a path to the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    /// One gradient per stored parameter, in store order. Parameters the
    /// loss never touched get zeros.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}
