//! Flat `key=value` configuration with `#` comments.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{DspError, Framing};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("key {key:?}: cannot parse {value:?} as {expected}")]
    Type {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("key {key:?}: {msg}")]
    Range { key: String, msg: String },
}

fn range(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Range {
        key: key.into(),
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub clip_seconds: f64,
    pub win_ms: f64,
    pub overlap: f64,
    pub n_mels: usize,
    pub f_min: f64,
    /// Defaults to the Nyquist frequency.
    pub f_max: Option<f64>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16_000,
            clip_seconds: 10.0,
            win_ms: 64.0,
            overlap: 0.5,
            n_mels: 128,
            f_min: 0.0,
            f_max: None,
        }
    }
}

impl FeatureConfig {
    pub fn f_max(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn clip_samples(&self) -> usize {
        (self.sample_rate as f64 * self.clip_seconds).round() as usize
    }

    pub fn framing(&self) -> Result<Framing, DspError> {
        Framing::from_ms(self.sample_rate, self.win_ms, self.overlap)
    }

    pub fn frames(&self) -> Result<usize, DspError> {
        self.framing()?.frame_count(self.clip_samples())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding dimensionality.
    pub h: usize,
    pub classes: usize,
    pub wavegram_multiplier: usize,
    /// Scales backbone channel widths.
    pub width_mult: f64,
    pub use_mel: bool,
    pub use_wavegram: bool,
    pub use_attention: bool,
    pub use_separable: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            h: 128,
            classes: 41,
            wavegram_multiplier: 128,
            width_mult: 1.0,
            use_mel: true,
            use_wavegram: true,
            use_attention: true,
            use_separable: true,
        }
    }
}

impl ModelConfig {
    pub fn in_channels(&self) -> usize {
        self.use_mel as usize + self.use_wavegram as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub margin: f64,
    pub scale: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.2,
            margin: 0.7,
            scale: 40.0,
            lr: 1e-4,
            epochs: 300,
            batch: 64,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_model()?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(range("lr", "must be positive"));
        }
        Ok(())
    }

    /// Every check except the learning rate, which a model does not need.
    pub fn validate_model(&self) -> Result<(), ConfigError> {
        let f = &self.features;
        let m = &self.model;
        let t = &self.train;
        if f.sample_rate == 0 {
            return Err(range("sample_rate", "must be positive"));
        }
        if !(f.clip_seconds > 0.0) {
            return Err(range("clip_seconds", "must be positive"));
        }
        if !(f.win_ms > 0.0) {
            return Err(range("win_ms", "must be positive"));
        }
        if !(0.0..1.0).contains(&f.overlap) {
            return Err(range("overlap", "must lie in [0, 1)"));
        }
        if f.n_mels < 2 {
            return Err(range("n_mels", "must be at least 2"));
        }
        let nyquist = f.sample_rate as f64 / 2.0;
        if !(f.f_min >= 0.0) {
            return Err(range("f_min", "must be non-negative"));
        }
        if !(f.f_max() > f.f_min && f.f_max() <= nyquist) {
            return Err(range("f_max", format!("must lie in (f_min, {nyquist}]")));
        }
        let framing = f.framing().map_err(|e| range("win_ms", e.to_string()))?;
        framing
            .frame_count(f.clip_samples())
            .map_err(|e| range("clip_seconds", e.to_string()))?;
        if m.h == 0 {
            return Err(range("h", "must be positive"));
        }
        if m.classes < 2 {
            return Err(range("classes", "must be at least 2"));
        }
        if m.wavegram_multiplier == 0 {
            return Err(range("wavegram_multiplier", "must be positive"));
        }
        if !(m.width_mult > 0.0) {
            return Err(range("width_mult", "must be positive"));
        }
        if m.in_channels() == 0 {
            return Err(range("use_mel", "at least one of use_mel/use_wavegram must be set"));
        }
        if !(t.alpha > 0.0) {
            return Err(range("alpha", "must be positive"));
        }
        if !(t.margin >= 0.0 && t.margin < std::f64::consts::FRAC_PI_2) {
            return Err(range("margin", "must satisfy 0 <= m < pi/2"));
        }
        if !(t.scale > 0.0) {
            return Err(range("scale", "must be positive"));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(range("lr", "must be non-negative"));
        }
        if t.epochs == 0 {
            return Err(range("epochs", "must be positive"));
        }
        if t.batch < 2 {
            return Err(range("batch", "must be at least 2 for mixup pairs"));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(range("weight_decay", "must be non-negative"));
        }
        Ok(())
    }

    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let f = &mut self.features;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "sample_rate" => f.sample_rate = parse(key, value, "unsigned integer")?,
            "clip_seconds" => f.clip_seconds = parse(key, value, "number")?,
            "win_ms" => f.win_ms = parse(key, value, "number")?,
            "overlap" => f.overlap = parse(key, value, "number")?,
            "n_mels" => f.n_mels = parse(key, value, "unsigned integer")?,
            "f_min" => f.f_min = parse(key, value, "number")?,
            "f_max" => f.f_max = Some(parse(key, value, "number")?),
            "h" => m.h = parse(key, value, "unsigned integer")?,
            "classes" => m.classes = parse(key, value, "unsigned integer")?,
            "wavegram_multiplier" => m.wavegram_multiplier = parse(key, value, "unsigned integer")?,
            "width_mult" => m.width_mult = parse(key, value, "number")?,
            "use_mel" => m.use_mel = parse(key, value, "bool")?,
            "use_wavegram" => m.use_wavegram = parse(key, value, "bool")?,
            "use_attention" => m.use_attention = parse(key, value, "bool")?,
            "use_separable" => m.use_separable = parse(key, value, "bool")?,
            "alpha" => t.alpha = parse(key, value, "number")?,
            "margin" => t.margin = parse(key, value, "number")?,
            "scale" => t.scale = parse(key, value, "number")?,
            "lr" => t.lr = parse(key, value, "number")?,
            "epochs" => t.epochs = parse(key, value, "unsigned integer")?,
            "batch" => t.batch = parse(key, value, "unsigned integer")?,
            "weight_decay" => t.weight_decay = parse(key, value, "number")?,
            "seed" => t.seed = parse(key, value, "unsigned integer")?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.into(),
                })
            }
        }
        Ok(())
    }
}

fn parse<V: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<V, ConfigError>
where
    V::Err: Display,
{
    value.parse().map_err(|_| ConfigError::Type {
        key: key.into(),
        value: value.into(),
        expected,
    })
}

/// Parse config text. Missing keys keep their defaults.
pub fn parse_config(text: &str) -> Result<Config, ConfigError> {
    let mut cfg = Config::default();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            text: raw.to_string(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::Duplicate {
                line,
                key: key.into(),
            });
        }
        cfg.set(key, value).map_err(|e| match e {
            ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line, key },
            other => other,
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.features.sample_rate, 16_000);
        assert_eq!(c.features.n_mels, 128);
        assert_eq!(c.features.frames().unwrap(), 313);
        assert_eq!(c.model.h, 128);
        assert_eq!(c.train.batch, 64);
        assert_eq!(c.train.epochs, 300);
        assert_eq!((c.train.alpha, c.train.margin, c.train.scale), (0.2, 0.7, 40.0));
        assert_eq!(c.train.lr, 1e-4);
    }

    #[test]
    fn comments_and_whitespace() {
        let c = parse_config("# header\n  h = 64  # smaller\n\nuse_attention=false\n").unwrap();
        assert_eq!(c.model.h, 64);
        assert!(!c.model.use_attention);
    }

    #[test]
    fn margin_out_of_range() {
        match parse_config("margin=1.8") {
            Err(ConfigError::Range { key, .. }) => assert_eq!(key, "margin"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn errors_name_the_key() {
        assert!(matches!(parse_config("bogus=1"), Err(ConfigError::UnknownKey { line: 1, .. })));
        match parse_config("batch=many") {
            Err(ConfigError::Type { key, .. }) => assert_eq!(key, "batch"),
            other => panic!("{other:?}"),
        }
        match parse_config("batch=1") {
            Err(ConfigError::Range { key, .. }) => assert_eq!(key, "batch"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_config("lr=0"), Err(ConfigError::Range { .. })));
        assert!(matches!(parse_config("h"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(parse_config("h=1\nh=2"), Err(ConfigError::Duplicate { .. })));
        assert!(matches!(
            parse_config("use_mel=false\nuse_wavegram=false"),
            Err(ConfigError::Range { .. })
        ));
    }

    #[test]
    fn f_max_follows_sample_rate() {
        let c = parse_config("sample_rate=8000").unwrap();
        assert_eq!(c.features.f_max(), 4000.0);
        assert!(parse_config("sample_rate=8000\nf_max=5000").is_err());
    }
}
