//! Additive angular margin head.
//!
//! Logits are `z_i = s·cos(θ_i + m·y_i)` and the loss is
//! `-Σ y_i · log softmax(z)_i`. The margin is weighted by the label entry, so
//! it is the usual ArcFace margin for one-hot labels and shrinks for mixed
//! ones.

use rand::Rng;
use thiserror::Error;

use super::layers::{Builder, Env};
use crate::autodiff::{Graph, Var, ACOS_EPS};
use crate::params::{xavier_uniform, ParamId};
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArcFaceError {
    #[error("mixup coefficient {0} outside [0, 1]")]
    Lambda(f64),
    #[error("length mismatch: {what} has {actual} entries, expected {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
}

/// Class-weight matrix `[c, h]`; rows are renormalized in every forward.
#[derive(Clone, Debug)]
pub struct ArcFaceHead {
    pub weight: ParamId,
}

impl ArcFaceHead {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<T, R>, classes: usize, h: usize) -> Self {
        let mut w: Tensor<T> = xavier_uniform(b.rng, &[classes, h], h, classes);
        for row in w.data_mut().chunks_mut(h) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        ArcFaceHead {
            weight: b.params.add("head.weight", w),
        }
    }

    /// Cosines `[N, c]` between unit embeddings and normalized class rows.
    pub fn cosines<T: Real>(&self, g: &mut Graph<T>, env: &Env<T>, emb: Var) -> Result<Var, TensorError> {
        let w = g.param(env.params, self.weight);
        let w = g.l2_normalize_rows(w)?;
        g.matmul_nt(emb, w)
    }
}

/// Mean over the batch of `λ·L_AF(θ, y) + (1−λ)·L_AF(θ, y_mix)`.
pub fn combined_loss_graph<T: Real>(
    g: &mut Graph<T>,
    theta: Var,
    y_dominant: &Tensor<T>,
    y_mixed: &Tensor<T>,
    lambda: f64,
    scale: f64,
    margin: f64,
) -> Result<Var, TensorError> {
    let (s, m) = (T::of(scale), T::of(margin));
    let a = g.margin_cross_entropy(theta, y_dominant, s, m)?;
    let b = g.margin_cross_entropy(theta, y_mixed, s, m)?;
    let l = g.axpby(a, T::of(lambda), b, T::of(1.0 - lambda))?;
    Ok(g.mean(l))
}

fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0 + ACOS_EPS, 1.0 - ACOS_EPS)
}

/// `θ_i = arccos(ŵ_iᵀ ĥ)` for each row of `weights` (`c × h`, row-major).
pub fn arcface_angles(embedding: &[f64], weights: &[f64]) -> Result<Vec<f64>, ArcFaceError> {
    let h = embedding.len();
    if h == 0 || weights.len() % h != 0 {
        return Err(ArcFaceError::Length {
            what: "weights",
            expected: h,
            actual: weights.len(),
        });
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let he = norm(embedding);
    Ok(weights
        .chunks(h)
        .map(|w| {
            let dot: f64 = w.iter().zip(embedding).map(|(a, b)| a * b).sum();
            clamp_cos(dot / (norm(w) * he)).acos()
        })
        .collect())
}

/// Margin cross-entropy of one clip's angles against a label vector.
pub fn arcface_loss(theta: &[f64], y: &[f64], scale: f64, margin: f64) -> Result<f64, ArcFaceError> {
    if theta.len() != y.len() {
        return Err(ArcFaceError::Length {
            what: "label",
            expected: theta.len(),
            actual: y.len(),
        });
    }
    let z: Vec<f64> = theta
        .iter()
        .zip(y)
        .map(|(t, yi)| scale * (t + margin * yi).cos())
        .collect();
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
    Ok(-z.iter().zip(y).map(|(zi, yi)| yi * (zi - lse)).sum::<f64>())
}

/// `λ·L_AF(θ, y_dominant) + (1−λ)·L_AF(θ, y_mixed)`.
pub fn combined_loss(
    theta: &[f64],
    y_dominant: &[f64],
    y_mixed: &[f64],
    lambda: f64,
    scale: f64,
    margin: f64,
) -> Result<f64, ArcFaceError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ArcFaceError::Lambda(lambda));
    }
    let a = arcface_loss(theta, y_dominant, scale, margin)?;
    let b = arcface_loss(theta, y_mixed, scale, margin)?;
    Ok(lambda * a + (1.0 - lambda) * b)
}

/// One-hot label vector.
pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; classes];
    y[class] = 1.0;
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn cosine_softmax_reduction() {
        let loss = arcface_loss(&[0.0, FRAC_PI_2], &[1.0, 0.0], 1.0, 0.0).unwrap();
        let oracle = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((loss - oracle).abs() < 1e-10);
        assert!((loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn aligned_target_closed_form() {
        let c = 41;
        let mut theta = vec![FRAC_PI_2; c];
        theta[3] = 0.0;
        let loss = arcface_loss(&theta, &one_hot(3, c), 40.0, 0.7).unwrap();
        let t = (40.0 * 0.7f64.cos()).exp();
        let oracle = -(t / (t + (c - 1) as f64)).ln();
        assert!((loss - oracle).abs() < 1e-12, "{loss} {oracle}");
    }

    #[test]
    fn uniform_label_is_mean_of_per_class_losses() {
        let theta = [0.3, 1.2, 2.0, 0.9];
        let c = theta.len();
        let y = vec![1.0 / c as f64; c];
        // With m = 0 the loss is linear in y.
        let loss = arcface_loss(&theta, &y, 40.0, 0.0).unwrap();
        let mean = (0..c)
            .map(|k| arcface_loss(&theta, &one_hot(k, c), 40.0, 0.0).unwrap())
            .sum::<f64>()
            / c as f64;
        assert!((loss - mean).abs() < 1e-10);
    }

    #[test]
    fn combined_loss_endpoints_and_mix() {
        let theta = [0.4, 1.1, 2.2];
        let ya = one_hot(0, 3);
        let yb = [0.3, 0.7, 0.0];
        let la = arcface_loss(&theta, &ya, 40.0, 0.7).unwrap();
        let lb = arcface_loss(&theta, &yb, 40.0, 0.7).unwrap();
        assert_eq!(combined_loss(&theta, &ya, &yb, 1.0, 40.0, 0.7).unwrap(), la);
        assert_eq!(combined_loss(&theta, &ya, &yb, 0.0, 40.0, 0.7).unwrap(), lb);
        let mix = combined_loss(&theta, &ya, &yb, 0.3, 40.0, 0.7).unwrap();
        assert!((mix - (0.3 * la + 0.7 * lb)).abs() < 1e-12);
        assert!(matches!(
            combined_loss(&theta, &ya, &yb, 1.5, 40.0, 0.7),
            Err(ArcFaceError::Lambda(_))
        ));
    }

    #[test]
    fn angle_examples() {
        let th = arcface_angles(&[1.0, 0.0], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((th[0] - (1.0 - ACOS_EPS).acos()).abs() < 1e-15);
        assert!((th[0] - 4.47e-4).abs() < 1e-6);
        assert!((th[1] - FRAC_PI_2).abs() < 1e-15);
        let scaled = arcface_angles(&[3.0, 0.0], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(th, scaled);
    }
}
