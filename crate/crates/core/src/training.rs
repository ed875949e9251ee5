//! Mixup, AdamW and the training loop.
//!
//! All randomness comes from one ChaCha8 stream seeded with `train.seed`,
//! consumed in this order: model initialization, then per epoch a shuffle of
//! the example order, then per batch the mixup coefficient followed by the
//! pairing permutation.

use std::path::PathBuf;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::{Config, ConfigError};
use crate::data::{load_clip, DataError, DatasetIndex, LabelVocab, Split, WavError};
use crate::model::{arcface::combined_loss_graph, Model, ModelError};
use crate::tensor::{Tensor, TensorError};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("mixup needs at least two clips, got {0}")]
    BatchTooSmall(usize),
    #[error("mixup coefficient {0} outside [0, 1]")]
    Lambda(f64),
    #[error("pairing is not a permutation of 0..{0}")]
    Permutation(usize),
    #[error("{waveforms} waveforms but {labels} labels")]
    LengthMismatch { waveforms: usize, labels: usize },
    #[error("clip {index} has {actual} samples, expected {expected}")]
    ClipLength { index: usize, expected: usize, actual: usize },
    #[error("class {class} outside vocabulary of {classes}")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("vocabulary has {vocab} labels but the model has {classes} classes")]
    VocabMismatch { vocab: usize, classes: usize },
    #[error("invalid Beta({0}) distribution")]
    Beta(f64),
    #[error("non-finite {what} at epoch {epoch}, batch {batch}{}", param.as_ref().map(|p| format!(", parameter {p}")).unwrap_or_default())]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
        param: Option<String>,
    },
}

/// Where a training clip's samples come from.
#[derive(Clone, Debug)]
pub enum ClipSource {
    Memory(Vec<f32>),
    /// Decoded and fitted to the clip length when its batch is assembled.
    File(PathBuf),
}

#[derive(Clone, Debug)]
pub struct TrainExample {
    pub source: ClipSource,
    pub class: usize,
}

impl TrainExample {
    pub fn in_memory(samples: Vec<f32>, class: usize) -> Self {
        TrainExample {
            source: ClipSource::Memory(samples),
            class,
        }
    }

    fn samples(&self, sample_rate: u32, len: usize) -> Result<Vec<f32>, TrainError> {
        match &self.source {
            ClipSource::Memory(s) => Ok(s.clone()),
            ClipSource::File(p) => Ok(load_clip(p, sample_rate, len)?),
        }
    }
}

/// File-backed examples for every training clip of `index`.
pub fn examples_from_index(index: &DatasetIndex, vocab: &LabelVocab) -> Result<Vec<TrainExample>, TrainError> {
    index
        .split(Split::Train)
        .map(|r| {
            let class = vocab.parse_label(&format!("{}:{}", r.machine_type, r.machine_id))?;
            Ok(TrainExample {
                source: ClipSource::File(r.path.clone()),
                class,
            })
        })
        .collect()
}

/// Mixup coefficient and pairing for one batch: slot `i` is mixed with
/// slot `perm[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupDraw {
    lambda: f64,
    perm: Vec<usize>,
}

impl MixupDraw {
    pub fn new(lambda: f64, perm: Vec<usize>) -> Result<Self, TrainError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(TrainError::Lambda(lambda));
        }
        let n = perm.len();
        let mut seen = vec![false; n];
        for &j in &perm {
            if j >= n || std::mem::replace(&mut seen[j], true) {
                return Err(TrainError::Permutation(n));
            }
        }
        Ok(MixupDraw { lambda, perm })
    }

    /// `λ ~ Beta(α, α)` first, then a uniform permutation of `0..n`.
    pub fn sample<R: Rng>(rng: &mut R, n: usize, alpha: f64) -> Result<Self, TrainError> {
        let beta = Beta::new(alpha, alpha).map_err(|_| TrainError::Beta(alpha))?;
        let lambda = beta.sample(rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        Self::new(lambda, perm)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub waveforms: Vec<Vec<f32>>,
    /// Class of slot `i` before mixing.
    pub y_dominant: Vec<usize>,
    /// `λ·y^i + (1−λ)·y^perm(i)`, one row per slot.
    pub y_mixed: Vec<Vec<f64>>,
    pub lambda: f64,
}

/// Mix raw waveforms (and their one-hot labels) pairwise.
pub fn mixup_batch<S: AsRef<[f32]>>(
    waveforms: &[S],
    labels: &[usize],
    classes: usize,
    draw: &MixupDraw,
) -> Result<MixedBatch, TrainError> {
    let n = waveforms.len();
    if n < 2 {
        return Err(TrainError::BatchTooSmall(n));
    }
    if labels.len() != n || draw.perm.len() != n {
        return Err(TrainError::LengthMismatch {
            waveforms: n,
            labels: labels.len().min(draw.perm.len()),
        });
    }
    if let Some(&class) = labels.iter().find(|&&c| c >= classes) {
        return Err(TrainError::ClassOutOfRange { class, classes });
    }
    let len = waveforms[0].as_ref().len();
    if let Some((index, w)) = waveforms.iter().enumerate().find(|(_, w)| w.as_ref().len() != len) {
        return Err(TrainError::ClipLength {
            index,
            expected: len,
            actual: w.as_ref().len(),
        });
    }
    let l = draw.lambda;
    let mut mixed = Vec::with_capacity(n);
    let mut y_mixed = Vec::with_capacity(n);
    for (i, &j) in draw.perm.iter().enumerate() {
        let (a, b) = (waveforms[i].as_ref(), waveforms[j].as_ref());
        mixed.push(
            a.iter()
                .zip(b)
                .map(|(&x, &y)| (l * x as f64 + (1.0 - l) * y as f64) as f32)
                .collect(),
        );
        let mut y = vec![0.0; classes];
        y[labels[i]] += l;
        y[labels[j]] += 1.0 - l;
        y_mixed.push(y);
    }
    Ok(MixedBatch {
        waveforms: mixed,
        y_dominant: labels.to_vec(),
        y_mixed,
        lambda: l,
    })
}

/// AdamW moments, one pair per parameter tensor in store order.
#[derive(Clone, Debug)]
pub struct AdamState {
    /// Steps taken so far.
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn zeros_like(params: &[&Tensor<f32>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            betas: ADAM_BETAS,
            eps: ADAM_EPS,
            weight_decay,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step(params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>], state: &mut AdamState, opt: &AdamW) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    assert_eq!(params.len(), state.m.len(), "one moment per parameter");
    state.step += 1;
    let (b1, b2) = opt.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        assert_eq!(p.shape(), g.shape(), "gradient shape");
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi as f64;
            let m_new = b1 * *mi as f64 + (1.0 - b1) * gi;
            let v_new = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let mut x = *w as f64;
            x -= opt.lr * opt.weight_decay * x;
            x -= opt.lr * (m_new / c1) / ((v_new / c2).sqrt() + opt.eps);
            *w = x as f32;
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of the combined loss over the epoch's clips.
    pub loss: f64,
    /// Fraction of mixed clips whose nearest class is the label with the
    /// larger mixup weight.
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Checkpoint of the epoch with the lowest mean training loss.
    pub best: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Train a fresh model. `config.train.lr` may be zero; everything else
/// must validate.
pub fn train(
    config: &Config,
    examples: &[TrainExample],
    labels: &LabelVocab,
    mut observer: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, TrainError> {
    config.validate_model()?;
    let tc = config.train.clone();
    let classes = config.model.classes;
    if labels.len() != classes {
        return Err(TrainError::VocabMismatch {
            vocab: labels.len(),
            classes,
        });
    }
    if examples.len() < 2 {
        return Err(TrainError::BatchTooSmall(examples.len()));
    }
    if let Some(e) = examples.iter().find(|e| e.class >= classes) {
        return Err(TrainError::ClassOutOfRange { class: e.class, classes });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut model = Model::<f32>::with_rng(config, &mut rng)?;
    let mut state = AdamState::zeros_like(&model.params().iter().map(|(_, t)| t).collect::<Vec<_>>());
    let opt = AdamW::new(tc.lr, tc.weight_decay);
    let (sr, len) = (config.features.sample_rate, config.features.clip_samples());
    info!(
        "training {} parameters on {} clips, {} classes",
        model.params().num_elements(),
        examples.len(),
        classes
    );

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    for epoch in 1..=tc.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (batch, idx) in order.chunks(tc.batch).enumerate() {
            if idx.len() < 2 {
                warn!("dropping size-1 remainder batch in epoch {epoch}");
                continue;
            }
            let clips = idx
                .iter()
                .map(|&i| examples[i].samples(sr, len))
                .collect::<Result<Vec<_>, _>>()?;
            let ys: Vec<usize> = idx.iter().map(|&i| examples[i].class).collect();
            let draw = MixupDraw::sample(&mut rng, idx.len(), tc.alpha)?;
            let mix = mixup_batch(&clips, &ys, classes, &draw)?;

            let inputs = model.prepare(&mix.waveforms)?;
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &inputs, true)?;
            let n = idx.len();
            let y_dom: Vec<f64> = mix.y_dominant.iter().flat_map(|&c| crate::model::one_hot(c, classes)).collect();
            let y_dom = Tensor::from_f64(&[n, classes], &y_dom)?;
            let y_mix = Tensor::from_f64(&[n, classes], &mix.y_mixed.concat())?;
            let loss = combined_loss_graph(&mut g, fwd.theta, &y_dom, &y_mix, mix.lambda, tc.scale, tc.margin)?;
            let loss_value = g.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "loss",
                    epoch,
                    batch,
                    param: None,
                });
            }
            let grads = g.backward(loss)?.for_store(model.params());
            if let Some(k) = grads.iter().position(|t| !t.is_finite()) {
                let id = model.params().ids().nth(k).unwrap();
                return Err(TrainError::NonFinite {
                    what: "gradient",
                    epoch,
                    batch,
                    param: Some(model.params().name(id).to_string()),
                });
            }

            let theta = g.value(fwd.theta);
            for (slot, row) in theta.data().chunks(classes).enumerate() {
                let target = if mix.lambda >= 0.5 { ys[slot] } else { ys[draw.perm()[slot]] };
                let pred = argmin(row);
                correct += usize::from(pred == target);
            }
            model.apply_buffer_updates(&mut g);
            drop(g);
            let mut params: Vec<&mut Tensor<f32>> = model.params_mut().tensors_mut().iter_mut().collect();
            adamw_step(&mut params, &grads, &mut state, &opt);
            loss_sum += loss_value * n as f64;
            seen += n;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            accuracy: correct as f64 / seen.max(1) as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!("epoch {epoch}: loss {:.5} accuracy {:.4}", stats.loss, stats.accuracy);
        observer(&stats);
        if best.as_ref().is_none_or(|(l, _)| stats.loss < *l) {
            best = Some((stats.loss, Checkpoint::from_model(&model, epoch, labels, Some(&state))));
        }
        history.push(stats);
    }
    let last = Checkpoint::from_model(&model, tc.epochs, labels, Some(&state));
    Ok(TrainOutcome {
        best: best.map(|(_, c)| c).unwrap_or_else(|| last.clone()),
        last,
        history,
    })
}

fn argmin(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) })
        .0
}

/// Eval-mode fraction of clips whose nearest class is their own.
pub fn classification_accuracy<S: AsRef<[f32]>>(model: &Model<f32>, clips: &[S], classes: &[usize]) -> Result<f64, TrainError> {
    if clips.len() != classes.len() {
        return Err(TrainError::LengthMismatch {
            waveforms: clips.len(),
            labels: classes.len(),
        });
    }
    let c = model.classes();
    let mut correct = 0;
    for (chunk, ys) in clips.chunks(16).zip(classes.chunks(16)) {
        let theta = model.infer(chunk)?.theta;
        for (row, &y) in theta.data().chunks(c).zip(ys) {
            correct += usize::from(argmin(row) == y);
        }
    }
    Ok(correct as f64 / clips.len().max(1) as f64)
}
