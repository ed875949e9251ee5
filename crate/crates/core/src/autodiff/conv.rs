//! Convolution kernels on NCHW / NCL buffers.
//!
//! Every kernel here is a plain function over slices; the tape in
//! [`super::Graph`] owns shapes and decides which gradients are needed.

use crate::tensor::Real;

/// Geometry of a 2-D convolution over `[N, C, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Conv2dGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad_h - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad_w - self.kernel_w) / self.stride + 1
    }

    /// Valid iff the (padded) input covers the kernel at least once.
    pub fn is_valid(&self) -> bool {
        self.stride > 0
            && self.height + 2 * self.pad_h >= self.kernel_h
            && self.width + 2 * self.pad_w >= self.kernel_w
    }
}

/// Output extent and per-position input offset, clipped to valid taps.
#[inline]
fn tap_range(o: usize, stride: usize, pad: usize, k: usize, n: usize) -> (usize, usize, isize) {
    let base = (o * stride) as isize - pad as isize;
    let lo = if base < 0 { (-base) as usize } else { 0 };
    let hi = ((n as isize - base).max(0) as usize).min(k);
    (lo, hi.max(lo), base)
}

/// Depthwise convolution: one `kh×kw` kernel per channel, `in == out` channels.
pub fn depthwise2d_forward<T: Real>(g: &Conv2dGeom, x: &[T], k: &[T], out: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w) = (g.height, g.width);
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let xs = &x[(n * g.in_channels + c) * h * w..][..h * w];
            let ks = &k[c * g.kernel_h * g.kernel_w..][..g.kernel_h * g.kernel_w];
            let os = &mut out[(n * g.in_channels + c) * oh * ow..][..oh * ow];
            for oy in 0..oh {
                let (ky0, ky1, iy0) = tap_range(oy, g.stride, g.pad_h, g.kernel_h, h);
                for ox in 0..ow {
                    let (kx0, kx1, ix0) = tap_range(ox, g.stride, g.pad_w, g.kernel_w, w);
                    let mut acc = T::zero();
                    for ky in ky0..ky1 {
                        let iy = (iy0 + ky as isize) as usize;
                        let row = &xs[iy * w..];
                        let krow = &ks[ky * g.kernel_w..];
                        for kx in kx0..kx1 {
                            acc += krow[kx] * row[(ix0 + kx as isize) as usize];
                        }
                    }
                    os[oy * ow + ox] = acc;
                }
            }
        }
    }
}

pub fn depthwise2d_backward<T: Real>(
    g: &Conv2dGeom,
    x: &[T],
    k: &[T],
    grad_out: &[T],
    mut grad_x: Option<&mut [T]>,
    mut grad_k: Option<&mut [T]>,
) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w) = (g.height, g.width);
    let kk = g.kernel_h * g.kernel_w;
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let plane = (n * g.in_channels + c) * h * w;
            let gs = &grad_out[(n * g.in_channels + c) * oh * ow..][..oh * ow];
            for oy in 0..oh {
                let (ky0, ky1, iy0) = tap_range(oy, g.stride, g.pad_h, g.kernel_h, h);
                for ox in 0..ow {
                    let go = gs[oy * ow + ox];
                    if go == T::zero() {
                        continue;
                    }
                    let (kx0, kx1, ix0) = tap_range(ox, g.stride, g.pad_w, g.kernel_w, w);
                    for ky in ky0..ky1 {
                        let iy = (iy0 + ky as isize) as usize;
                        for kx in kx0..kx1 {
                            let xi = plane + iy * w + (ix0 + kx as isize) as usize;
                            let ki = c * kk + ky * g.kernel_w + kx;
                            if let Some(gx) = grad_x.as_deref_mut() {
                                gx[xi] += go * k[ki];
                            }
                            if let Some(gk) = grad_k.as_deref_mut() {
                                gk[ki] += go * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dense convolution, kernel layout `[C_out, C_in, kh, kw]`.
pub fn conv2d_forward<T: Real>(g: &Conv2dGeom, x: &[T], k: &[T], out: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w) = (g.height, g.width);
    let kk = g.kernel_h * g.kernel_w;
    out.iter_mut().for_each(|v| *v = T::zero());
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let os = &mut out[(n * g.out_channels + co) * oh * ow..][..oh * ow];
            for ci in 0..g.in_channels {
                let xs = &x[(n * g.in_channels + ci) * h * w..][..h * w];
                let ks = &k[(co * g.in_channels + ci) * kk..][..kk];
                for oy in 0..oh {
                    let (ky0, ky1, iy0) = tap_range(oy, g.stride, g.pad_h, g.kernel_h, h);
                    for ox in 0..ow {
                        let (kx0, kx1, ix0) = tap_range(ox, g.stride, g.pad_w, g.kernel_w, w);
                        let mut acc = T::zero();
                        for ky in ky0..ky1 {
                            let iy = (iy0 + ky as isize) as usize;
                            for kx in kx0..kx1 {
                                acc += ks[ky * g.kernel_w + kx]
                                    * xs[iy * w + (ix0 + kx as isize) as usize];
                            }
                        }
                        os[oy * ow + ox] += acc;
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward<T: Real>(
    g: &Conv2dGeom,
    x: &[T],
    k: &[T],
    grad_out: &[T],
    mut grad_x: Option<&mut [T]>,
    mut grad_k: Option<&mut [T]>,
) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w) = (g.height, g.width);
    let kk = g.kernel_h * g.kernel_w;
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let gs = &grad_out[(n * g.out_channels + co) * oh * ow..][..oh * ow];
            for ci in 0..g.in_channels {
                let plane = (n * g.in_channels + ci) * h * w;
                let kbase = (co * g.in_channels + ci) * kk;
                for oy in 0..oh {
                    let (ky0, ky1, iy0) = tap_range(oy, g.stride, g.pad_h, g.kernel_h, h);
                    for ox in 0..ow {
                        let go = gs[oy * ow + ox];
                        let (kx0, kx1, ix0) = tap_range(ox, g.stride, g.pad_w, g.kernel_w, w);
                        for ky in ky0..ky1 {
                            let iy = (iy0 + ky as isize) as usize;
                            for kx in kx0..kx1 {
                                let xi = plane + iy * w + (ix0 + kx as isize) as usize;
                                let ki = kbase + ky * g.kernel_w + kx;
                                if let Some(gx) = grad_x.as_deref_mut() {
                                    gx[xi] += go * k[ki];
                                }
                                if let Some(gk) = grad_k.as_deref_mut() {
                                    gk[ki] += go * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 1×1 channel mixing over `[N, C_in, S]` with weights `[C_out, C_in]`.
pub fn pointwise_forward<T: Real>(
    batch: usize,
    c_in: usize,
    c_out: usize,
    spatial: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    for n in 0..batch {
        let xn = &x[n * c_in * spatial..][..c_in * spatial];
        for co in 0..c_out {
            let row = &mut out[(n * c_out + co) * spatial..][..spatial];
            let b = bias.map_or(T::zero(), |b| b[co]);
            row.iter_mut().for_each(|v| *v = b);
            for ci in 0..c_in {
                let wv = w[co * c_in + ci];
                let xs = &xn[ci * spatial..][..spatial];
                for (o, &xv) in row.iter_mut().zip(xs) {
                    *o += wv * xv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn pointwise_backward<T: Real>(
    batch: usize,
    c_in: usize,
    c_out: usize,
    spatial: usize,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    mut grad_x: Option<&mut [T]>,
    mut grad_w: Option<&mut [T]>,
    mut grad_b: Option<&mut [T]>,
) {
    for n in 0..batch {
        for co in 0..c_out {
            let gs = &grad_out[(n * c_out + co) * spatial..][..spatial];
            if let Some(gb) = grad_b.as_deref_mut() {
                gb[co] += gs.iter().copied().sum::<T>();
            }
            for ci in 0..c_in {
                let xs = &x[(n * c_in + ci) * spatial..][..spatial];
                if let Some(gw) = grad_w.as_deref_mut() {
                    let mut acc = T::zero();
                    for (&a, &b) in gs.iter().zip(xs) {
                        acc += a * b;
                    }
                    gw[co * c_in + ci] += acc;
                }
                if let Some(gx) = grad_x.as_deref_mut() {
                    let wv = w[co * c_in + ci];
                    let gxs = &mut gx[(n * c_in + ci) * spatial..][..spatial];
                    for (o, &gv) in gxs.iter_mut().zip(gs) {
                        *o += wv * gv;
                    }
                }
            }
        }
    }
}

/// Padding applied to the time axis of a 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pad1d {
    None,
    /// Zero padding of the given width on both sides.
    Zero(usize),
    /// Mirror padding (edge sample not repeated) on both sides.
    Reflect(usize),
}

impl Pad1d {
    pub fn width(&self) -> usize {
        match *self {
            Pad1d::None => 0,
            Pad1d::Zero(p) | Pad1d::Reflect(p) => p,
        }
    }

    /// Source index of each padded position; `None` marks a zero.
    pub fn source_indices(&self, len: usize) -> Vec<Option<usize>> {
        let p = self.width();
        (0..len + 2 * p)
            .map(|q| {
                let i = q as isize - p as isize;
                match *self {
                    Pad1d::Reflect(_) => {
                        let r = if i < 0 {
                            -i
                        } else if i >= len as isize {
                            2 * (len as isize - 1) - i
                        } else {
                            i
                        };
                        Some(r as usize)
                    }
                    _ => (i >= 0 && i < len as isize).then_some(i as usize),
                }
            })
            .collect()
    }
}

/// Geometry of a depthwise 1-D convolution with channel multiplier over
/// `[N, C_in, L]`, kernels `[C_in·M, K]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub multiplier: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: Pad1d,
}

impl Conv1dGeom {
    pub fn padded_len(&self) -> usize {
        self.len + 2 * self.pad.width()
    }

    pub fn out_len(&self) -> usize {
        (self.padded_len() - self.kernel) / self.stride + 1
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels * self.multiplier
    }
}

fn padded_row<T: Real>(src: &[T], map: &[Option<usize>]) -> Vec<T> {
    map.iter()
        .map(|s| s.map_or(T::zero(), |i| src[i]))
        .collect()
}

pub fn depthwise1d_forward<T: Real>(g: &Conv1dGeom, x: &[T], k: &[T], out: &mut [T]) {
    let map = g.pad.source_indices(g.len);
    let t_out = g.out_len();
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let row = padded_row(&x[(n * g.in_channels + c) * g.len..][..g.len], &map);
            for j in 0..g.multiplier {
                let oc = c * g.multiplier + j;
                let ks = &k[oc * g.kernel..][..g.kernel];
                let os = &mut out[(n * g.out_channels() + oc) * t_out..][..t_out];
                for (t, o) in os.iter_mut().enumerate() {
                    let seg = &row[t * g.stride..][..g.kernel];
                    let mut acc = T::zero();
                    for (&a, &b) in ks.iter().zip(seg) {
                        acc += a * b;
                    }
                    *o = acc;
                }
            }
        }
    }
}

pub fn depthwise1d_backward<T: Real>(
    g: &Conv1dGeom,
    x: &[T],
    k: &[T],
    grad_out: &[T],
    mut grad_x: Option<&mut [T]>,
    mut grad_k: Option<&mut [T]>,
) {
    let map = g.pad.source_indices(g.len);
    let t_out = g.out_len();
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let row = padded_row(&x[(n * g.in_channels + c) * g.len..][..g.len], &map);
            let mut grad_row = grad_x.as_ref().map(|_| vec![T::zero(); row.len()]);
            for j in 0..g.multiplier {
                let oc = c * g.multiplier + j;
                let ks = &k[oc * g.kernel..][..g.kernel];
                let gs = &grad_out[(n * g.out_channels() + oc) * t_out..][..t_out];
                for (t, &go) in gs.iter().enumerate() {
                    if go == T::zero() {
                        continue;
                    }
                    let start = t * g.stride;
                    if let Some(gk) = grad_k.as_deref_mut() {
                        let gks = &mut gk[oc * g.kernel..][..g.kernel];
                        for (dk, &xv) in gks.iter_mut().zip(&row[start..start + g.kernel]) {
                            *dk += go * xv;
                        }
                    }
                    if let Some(gr) = grad_row.as_mut() {
                        for (d, &kv) in gr[start..start + g.kernel].iter_mut().zip(ks) {
                            *d += go * kv;
                        }
                    }
                }
            }
            if let (Some(gr), Some(gx)) = (grad_row, grad_x.as_deref_mut()) {
                let dst = &mut gx[(n * g.in_channels + c) * g.len..][..g.len];
                for (q, src) in map.iter().enumerate() {
                    if let Some(i) = src {
                        dst[*i] += gr[q];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        let idx = Pad1d::Reflect(2).source_indices(4);
        let got: Vec<usize> = idx.into_iter().map(Option::unwrap).collect();
        assert_eq!(got, vec![2, 1, 0, 1, 2, 3, 2, 1]);
    }

    #[test]
    fn zero_padding_marks_outside() {
        let idx = Pad1d::Zero(1).source_indices(2);
        assert_eq!(idx, vec![None, Some(0), Some(1), None]);
    }

    #[test]
    fn same_padding_stride_two_rounds_up() {
        let g = Conv2dGeom {
            batch: 1,
            in_channels: 1,
            out_channels: 1,
            height: 313,
            width: 128,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            pad_h: 1,
            pad_w: 1,
        };
        assert_eq!((g.out_height(), g.out_width()), (157, 64));
    }
}
