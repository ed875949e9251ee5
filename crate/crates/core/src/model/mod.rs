//! The full network: log-mel and Wavegram features, attention, backbone and
//! ArcFace head.

pub mod arcface;
pub mod backbone;
pub mod feature_net;
pub mod layers;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::config::{Config, ConfigError};
use crate::dsp::{mel_filterbank, DspError, LogMel};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor, TensorError};

pub use arcface::{arcface_angles, arcface_loss, combined_loss, one_hot, ArcFaceError, ArcFaceHead};
pub use backbone::Backbone;
pub use feature_net::{apply_attention, build_feature_stack, Attention, Wavegram};
pub use layers::Env;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    ArcFace(#[from] ArcFaceError),
    #[error("waveform has {actual} samples, model expects {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("class index {class} outside vocabulary of {classes}")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
}

/// Non-learned network inputs for a batch.
#[derive(Clone, Debug)]
pub struct Inputs<T> {
    /// Log-mel `[N, 1, t, f]`.
    pub mel: Option<Tensor<T>>,
    /// Raw waveforms `[N, 1, L]`.
    pub raw: Option<Tensor<T>>,
}

impl<T: Real> Inputs<T> {
    pub fn batch(&self) -> usize {
        self.mel
            .as_ref()
            .or(self.raw.as_ref())
            .map_or(0, |t| t.shape()[0])
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `X`, `[N, C, t, f]`.
    pub features: Var,
    /// `H`, same shape as `X`, when attention is enabled.
    pub attention: Option<Var>,
    /// `X̃ = H ⊗ X` (or `X` without attention).
    pub weighted: Var,
    /// Unit embeddings `[N, h]`.
    pub embedding: Var,
    /// Angles `[N, c]`.
    pub theta: Var,
}

#[derive(Clone, Debug)]
struct Network {
    wavegram: Option<Wavegram>,
    attention: Option<Attention>,
    backbone: Backbone,
    head: ArcFaceHead,
}

/// Trainable parameter totals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// Keyed by top-level module name.
    pub per_module: BTreeMap<String, usize>,
}

#[derive(Clone)]
pub struct Model<T: Real> {
    config: Config,
    params: ParamStore<T>,
    buffers: ParamStore<T>,
    net: Network,
    logmel: LogMel,
    frames: usize,
}

impl<T: Real> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("params", &self.params.num_elements())
            .field("frames", &self.frames)
            .finish()
    }
}

impl<T: Real> Model<T> {
    /// Build with weights drawn from a ChaCha8 stream seeded by `seed`.
    pub fn new(config: &Config, seed: u64) -> Result<Self, ModelError> {
        Self::with_rng(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Build with weights drawn from `rng`, leaving it positioned after the
    /// last initializer draw.
    pub fn with_rng<R: Rng>(config: &Config, rng: &mut R) -> Result<Self, ModelError> {
        config.validate_model()?;
        let fc = &config.features;
        let mc = &config.model;
        let framing = fc.framing()?;
        let frames = framing.frame_count(fc.clip_samples())?;
        let fb = mel_filterbank(framing.n_bins(), fc.n_mels, fc.f_min, fc.f_max(), fc.sample_rate)?;
        let logmel = LogMel::new(framing, fb)?;

        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut b = layers::Builder {
            params: &mut params,
            buffers: &mut buffers,
            rng,
        };
        let wavegram = mc.use_wavegram.then(|| {
            Wavegram::new(&mut b, framing.win_length, framing.hop, mc.wavegram_multiplier, fc.n_mels)
        });
        let channels = mc.in_channels();
        let attention = mc.use_attention.then(|| Attention::new(&mut b, channels, mc.use_separable));
        let backbone = Backbone::new(&mut b, channels, frames, fc.n_mels, mc.h, mc.width_mult, mc.use_separable);
        let head = ArcFaceHead::new(&mut b, mc.classes, mc.h);
        Ok(Model {
            config: config.clone(),
            params,
            buffers,
            net: Network {
                wavegram,
                attention,
                backbone,
                head,
            },
            logmel,
            frames,
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Batch-norm running statistics.
    pub fn buffers(&self) -> &ParamStore<T> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.buffers
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_mels(&self) -> usize {
        self.config.features.n_mels
    }

    pub fn classes(&self) -> usize {
        self.config.model.classes
    }

    pub fn clip_samples(&self) -> usize {
        self.config.features.clip_samples()
    }

    pub fn logmel(&self) -> &LogMel {
        &self.logmel
    }

    pub fn mel_center_freqs(&self) -> &[f64] {
        self.logmel.filterbank().center_freqs()
    }

    pub fn has_attention(&self) -> bool {
        self.net.attention.is_some()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            net: self.net.clone(),
            logmel: self.logmel.clone(),
            frames: self.frames,
        }
    }

    pub fn count_parameters(&self) -> ParamCount {
        let mut per_module = BTreeMap::new();
        for (name, t) in self.params.iter() {
            let module = name.split('.').next().unwrap_or(name).to_string();
            *per_module.entry(module).or_insert(0) += t.len();
        }
        ParamCount {
            total: self.params.num_elements(),
            per_module,
        }
    }

    /// Set the attention projection to zero so that `H ≡ 0.5`.
    pub fn zero_attention_projection(&mut self) {
        if let Some(a) = &self.net.attention {
            feature_net::zero_params(&mut self.params, &a.projection_ids());
        }
    }

    /// Log-mel `[t, f]` of one clip (row-major), cast to `T`.
    pub fn log_mel(&self, samples: &[f32]) -> Result<Vec<T>, ModelError> {
        self.check_len(samples)?;
        let m = self.logmel.compute(samples)?;
        Ok(m.values.iter().map(|&v| T::of(v)).collect())
    }

    fn check_len(&self, samples: &[f32]) -> Result<(), ModelError> {
        let expected = self.clip_samples();
        if samples.len() != expected {
            return Err(ModelError::LengthMismatch {
                expected,
                actual: samples.len(),
            });
        }
        Ok(())
    }

    /// Compute the non-learned inputs for a batch of equal-length clips.
    pub fn prepare<S: AsRef<[f32]>>(&self, clips: &[S]) -> Result<Inputs<T>, ModelError> {
        if clips.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let n = clips.len();
        let (t, f, l) = (self.frames, self.n_mels(), self.clip_samples());
        let mel = if self.config.model.use_mel {
            let mut data = Vec::with_capacity(n * t * f);
            for c in clips {
                data.extend(self.log_mel(c.as_ref())?);
            }
            Some(Tensor::new(vec![n, 1, t, f], data)?)
        } else {
            None
        };
        let raw = if self.config.model.use_wavegram {
            let mut data = Vec::with_capacity(n * l);
            for c in clips {
                self.check_len(c.as_ref())?;
                data.extend(c.as_ref().iter().map(|&v| T::of(v as f64)));
            }
            Some(Tensor::new(vec![n, 1, l], data)?)
        } else {
            None
        };
        Ok(Inputs { mel, raw })
    }

    /// Build the forward graph. In training mode batch norm uses batch
    /// statistics and queues running-stat updates on `g`.
    pub fn forward(&self, g: &mut Graph<T>, inputs: &Inputs<T>, train: bool) -> Result<Forward, ModelError> {
        let env = Env {
            params: &self.params,
            buffers: &self.buffers,
            train,
        };
        let mut channels = Vec::new();
        if let Some(mel) = &inputs.mel {
            channels.push(g.constant(mel.clone()));
        }
        if let (Some(wg), Some(raw)) = (&self.net.wavegram, &inputs.raw) {
            let raw = g.constant(raw.clone());
            channels.push(wg.forward(g, &env, raw)?);
        }
        let features = build_feature_stack(g, &channels)?;
        let (attention, weighted) = match &self.net.attention {
            Some(a) => {
                let h = a.forward(g, &env, features)?;
                (Some(h), apply_attention(g, features, h)?)
            }
            None => (None, features),
        };
        let embedding = self.net.backbone.forward(g, &env, weighted)?;
        let cos = self.net.head.cosines(g, &env, embedding)?;
        let theta = g.safe_acos(cos);
        Ok(Forward {
            features,
            attention,
            weighted,
            embedding,
            theta,
        })
    }

    /// Apply queued running-stat updates from a training forward pass.
    pub fn apply_buffer_updates(&mut self, g: &mut Graph<T>) {
        for (id, t) in g.take_buffer_updates() {
            self.buffers.set(id, t);
        }
    }

    /// Eval-mode outputs for a batch of clips.
    pub fn infer<S: AsRef<[f32]>>(&self, clips: &[S]) -> Result<Inference<T>, ModelError> {
        let inputs = self.prepare(clips)?;
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, &inputs, false)?;
        Ok(Inference {
            features: g.value(fwd.features).clone(),
            attention: fwd.attention.map(|h| g.value(h).clone()),
            embedding: g.value(fwd.embedding).clone(),
            theta: g.value(fwd.theta).clone(),
        })
    }

    /// `L_AF(θ, y)` of each clip against its one-hot class, in eval mode.
    pub fn scores<S: AsRef<[f32]>>(&self, clips: &[S], classes: &[usize]) -> Result<Vec<f64>, ModelError> {
        let c = self.classes();
        if let Some(&class) = classes.iter().find(|&&k| k >= c) {
            return Err(ModelError::ClassOutOfRange { class, classes: c });
        }
        let inf = self.infer(clips)?;
        let t = &self.config.train;
        inf.theta
            .data()
            .chunks(c)
            .zip(classes)
            .map(|(row, &k)| {
                let theta: Vec<f64> = row.iter().map(|v| v.f64()).collect();
                Ok(arcface_loss(&theta, &one_hot(k, c), t.scale, t.margin)?)
            })
            .collect()
    }
}

/// Values of one eval-mode forward pass.
#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub features: Tensor<T>,
    pub attention: Option<Tensor<T>>,
    pub embedding: Tensor<T>,
    pub theta: Tensor<T>,
}
