//! "ASDC" checkpoint files.
//!
//! Layout: magic, `u32` version, `u64` metadata length, JSON metadata, then
//! the little-endian `f32` payload. The metadata lists every tensor with its
//! kind, shape and byte offset into the payload, plus a CRC-32 of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::data::LabelVocab;
use crate::model::{Model, ModelError};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::AdamState;

pub const MAGIC: &[u8; 4] = b"ASDC";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt header: not an ASDC checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("truncated {section}: need {needed} bytes, found {found}")]
    Truncated {
        section: &'static str,
        needed: u64,
        found: u64,
    },
    #[error("unreadable metadata: {0}")]
    Metadata(String),
    #[error("payload checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
    dtype: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Metadata {
    config: Config,
    epoch: usize,
    labels: Vec<(String, String)>,
    adam_step: Option<u64>,
    payload_bytes: u64,
    crc32: u32,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    /// Epochs completed.
    pub epoch: usize,
    pub labels: LabelVocab,
    pub params: ParamStore<f32>,
    pub buffers: ParamStore<f32>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, epoch: usize, labels: &LabelVocab, optimizer: Option<&AdamState>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            epoch,
            labels: labels.clone(),
            params: model.params().clone(),
            buffers: model.buffers().clone(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuild the model described by the stored config and load the tensors.
    pub fn model(&self) -> Result<Model<f32>, CheckpointError> {
        let mut model = Model::new(&self.config, 0)?;
        copy_into(model.params_mut(), &self.params, "parameter")?;
        copy_into(model.buffers_mut(), &self.buffers, "buffer")?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |kind: TensorKind, name: &str, t: &Tensor<f32>| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                dtype: "f32".into(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in self.params.iter() {
            push(TensorKind::Param, name, t);
        }
        for (name, t) in self.buffers.iter() {
            push(TensorKind::Buffer, name, t);
        }
        if let Some(opt) = &self.optimizer {
            for ((name, _), (m, v)) in self.params.iter().zip(opt.m.iter().zip(&opt.v)) {
                push(TensorKind::AdamM, name, m);
                push(TensorKind::AdamV, name, v);
            }
        }
        let meta = Metadata {
            config: self.config.clone(),
            epoch: self.epoch,
            labels: self.labels.pairs().to_vec(),
            adam_step: self.optimizer.as_ref().map(|o| o.step),
            payload_bytes: payload.len() as u64,
            crc32: crc32fast::hash(&payload),
            tensors,
        };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Truncated {
                section: "header",
                needed: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let rest = (bytes.len() - HEADER_LEN) as u64;
        if meta_len > rest {
            return Err(CheckpointError::Truncated {
                section: "metadata",
                needed: meta_len,
                found: rest,
            });
        }
        let meta_end = HEADER_LEN + meta_len as usize;
        let meta: Metadata =
            serde_json::from_slice(&bytes[HEADER_LEN..meta_end]).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let payload = &bytes[meta_end..];
        if (payload.len() as u64) < meta.payload_bytes {
            return Err(CheckpointError::Truncated {
                section: "payload",
                needed: meta.payload_bytes,
                found: payload.len() as u64,
            });
        }
        if payload.len() as u64 != meta.payload_bytes {
            return Err(CheckpointError::Inconsistent(format!(
                "{} trailing bytes after payload",
                payload.len() as u64 - meta.payload_bytes
            )));
        }
        let computed = crc32fast::hash(payload);
        if computed != meta.crc32 {
            return Err(CheckpointError::Checksum {
                stored: meta.crc32,
                computed,
            });
        }
        meta.config
            .validate_model()
            .map_err(|e| CheckpointError::Inconsistent(format!("stored config: {e}")))?;

        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &meta.tensors {
            let t = read_tensor(payload, e)?;
            match e.kind {
                TensorKind::Param => add_unique(&mut params, &e.name, t)?,
                TensorKind::Buffer => add_unique(&mut buffers, &e.name, t)?,
                TensorKind::AdamM => m.push((e.name.clone(), t)),
                TensorKind::AdamV => v.push((e.name.clone(), t)),
            }
        }
        let optimizer = match meta.adam_step {
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(CheckpointError::Inconsistent("optimizer moments without a step count".into())),
            Some(step) => {
                let ordered = |moments: Vec<(String, Tensor<f32>)>, what: &str| {
                    let names: Vec<&str> = params.iter().map(|(n, _)| n).collect();
                    let got: Vec<&str> = moments.iter().map(|(n, _)| n.as_str()).collect();
                    if names != got {
                        return Err(CheckpointError::Inconsistent(format!("{what} moments do not match parameters")));
                    }
                    for ((_, t), (_, p)) in moments.iter().zip(params.iter()) {
                        if t.shape() != p.shape() {
                            return Err(CheckpointError::Inconsistent(format!("{what} moment shape mismatch")));
                        }
                    }
                    Ok(moments.into_iter().map(|(_, t)| t).collect::<Vec<_>>())
                };
                Some(AdamState {
                    step,
                    m: ordered(m, "first")?,
                    v: ordered(v, "second")?,
                })
            }
        };
        let ckpt = Checkpoint {
            config: meta.config,
            epoch: meta.epoch,
            labels: LabelVocab::from_pairs(meta.labels),
            params,
            buffers,
            optimizer,
        };
        // Tensor names and shapes must describe the configured architecture.
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn add_unique(store: &mut ParamStore<f32>, name: &str, t: Tensor<f32>) -> Result<(), CheckpointError> {
    if store.id_of(name).is_some() {
        return Err(CheckpointError::Inconsistent(format!("duplicate tensor {name}")));
    }
    store.add(name, t);
    Ok(())
}

fn read_tensor(payload: &[u8], e: &TensorEntry) -> Result<Tensor<f32>, CheckpointError> {
    if e.dtype != "f32" {
        return Err(CheckpointError::Inconsistent(format!("{}: unsupported dtype {}", e.name, e.dtype)));
    }
    let bad = || CheckpointError::Inconsistent(format!("{}: extent outside payload", e.name));
    let n = e
        .shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(bad)?;
    let start = usize::try_from(e.offset).map_err(|_| bad())?;
    let end = n.checked_mul(4).and_then(|b| b.checked_add(start)).ok_or_else(bad)?;
    let bytes = payload.get(start..end).ok_or_else(bad)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::Inconsistent(err.to_string()))
}

fn copy_into(dst: &mut ParamStore<f32>, src: &ParamStore<f32>, what: &str) -> Result<(), CheckpointError> {
    if dst.len() != src.len() {
        return Err(CheckpointError::Inconsistent(format!(
            "{} {what} tensors stored, architecture has {}",
            src.len(),
            dst.len()
        )));
    }
    for (name, t) in src.iter() {
        let id = dst
            .id_of(name)
            .ok_or_else(|| CheckpointError::Inconsistent(format!("unknown {what} {name}")))?;
        if dst.get(id).shape() != t.shape() {
            return Err(CheckpointError::Inconsistent(format!(
                "{what} {name}: stored shape {:?}, architecture expects {:?}",
                t.shape(),
                dst.get(id).shape()
            )));
        }
        dst.set(id, t.clone());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> Config {
        let mut c = Config::default();
        for (k, v) in [
            ("sample_rate", "4000"),
            ("clip_seconds", "0.5"),
            ("n_mels", "16"),
            ("h", "16"),
            ("classes", "2"),
            ("wavegram_multiplier", "4"),
            ("width_mult", "0.125"),
            ("lr", "0.003"),
        ] {
            c.set(k, v).unwrap();
        }
        c
    }

    fn rand_like(rng: &mut ChaCha8Rng, t: &Tensor<f32>) -> Tensor<f32> {
        Tensor::new(t.shape().to_vec(), (0..t.len()).map(|_| rng.random()).collect()).unwrap()
    }

    fn sample_ckpt(with_opt: bool) -> Checkpoint {
        let model = Model::<f32>::new(&small(), 9).unwrap();
        let labels = LabelVocab::from_pairs([("fan".into(), "00".into()), ("fan".into(), "02".into())]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let opt = AdamState {
            step: 7,
            m: model.params().iter().map(|(_, t)| rand_like(&mut rng, t)).collect(),
            v: model.params().iter().map(|(_, t)| rand_like(&mut rng, t)).collect(),
        };
        Checkpoint::from_model(&model, 3, &labels, with_opt.then_some(&opt))
    }

    fn bits(s: &ParamStore<f32>) -> Vec<(String, Vec<usize>, Vec<u32>)> {
        s.iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        for with_opt in [false, true] {
            let c = sample_ckpt(with_opt);
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(bits(&back.params), bits(&c.params));
            assert_eq!(bits(&back.buffers), bits(&c.buffers));
            assert_eq!(back.config, c.config);
            assert_eq!(back.labels, c.labels);
            assert_eq!(back.epoch, 3);
            assert_eq!(back.optimizer.as_ref().map(|o| o.step), c.optimizer.as_ref().map(|o| o.step));
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample_ckpt(true);
        let p = dir.path().join("a.asdc");
        let q = dir.path().join("b.asdc");
        c.save(&p).unwrap();
        Checkpoint::load(&p).unwrap().save(&q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }

    #[test]
    fn size_matches_parameter_count() {
        let c = sample_ckpt(false);
        let bytes = c.to_bytes();
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let floats = c.params.num_elements() + c.buffers.num_elements();
        assert_eq!(bytes.len(), HEADER_LEN + meta_len + 4 * floats);
    }

    #[test]
    fn loaded_model_reproduces_outputs() {
        let c = sample_ckpt(false);
        let model = c.model().unwrap();
        let x: Vec<f32> = (0..model.clip_samples()).map(|i| (i as f32 * 0.01).sin()).collect();
        let reloaded = Checkpoint::from_bytes(&c.to_bytes()).unwrap().model().unwrap();
        let a = model.infer(&[&x]).unwrap().theta;
        let b = reloaded.infer(&[&x]).unwrap().theta;
        assert_eq!(a.data(), b.data());
    }

    fn meta_range(bytes: &[u8]) -> std::ops::Range<usize> {
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        HEADER_LEN..HEADER_LEN + n
    }

    fn with_meta(bytes: &[u8], edit: impl Fn(&mut serde_json::Value)) -> Vec<u8> {
        let r = meta_range(bytes);
        let mut meta: serde_json::Value = serde_json::from_slice(&bytes[r.clone()]).unwrap();
        edit(&mut meta);
        let m = serde_json::to_vec(&meta).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(m.len() as u64).to_le_bytes());
        out.extend_from_slice(&m);
        out.extend_from_slice(&bytes[r.end..]);
        out
    }

    #[test]
    fn corrupted_files_give_structured_errors() {
        let good = sample_ckpt(true).to_bytes();
        let meta = meta_range(&good);
        let cases = crate::checkpoint::tests::fuzz_cases(&good);
        assert!(cases.len() >= 20);
        for (label, bytes) in cases {
            let err = Checkpoint::from_bytes(&bytes).expect_err(label);
            let _ = err.to_string();
        }
        assert!(matches!(Checkpoint::from_bytes(&good[..2]), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            Checkpoint::from_bytes(&good[..good.len() - 1]),
            Err(CheckpointError::Truncated { section: "payload", .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&good[..meta.end - 5]),
            Err(CheckpointError::Truncated { section: "metadata", .. })
        ));
        let mut v = good.clone();
        v[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(CheckpointError::Version { found: 2 })));
        let mut p = good.clone();
        *p.last_mut().unwrap() ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&p), Err(CheckpointError::Checksum { .. })));
        let shape = with_meta(&good, |m| m["tensors"][0]["shape"] = serde_json::json!([1, 2]));
        assert!(matches!(Checkpoint::from_bytes(&shape), Err(CheckpointError::Inconsistent(_))));
    }

    /// Twenty-plus corruptions of a valid file, each of which must be rejected.
    pub(crate) fn fuzz_cases(good: &[u8]) -> Vec<(&'static str, Vec<u8>)> {
        let meta = meta_range(good);
        let mut cases: Vec<(&'static str, Vec<u8>)> = vec![
            ("empty", vec![]),
            ("magic only", good[..4].to_vec()),
            ("half header", good[..10].to_vec()),
            ("header only", good[..HEADER_LEN].to_vec()),
            ("half metadata", good[..meta.start + (meta.len() / 2)].to_vec()),
            ("metadata only", good[..meta.end].to_vec()),
            ("half payload", good[..meta.end + (good.len() - meta.end) / 2].to_vec()),
            ("one byte short", good[..good.len() - 1].to_vec()),
            ("trailing byte", [good, &[0u8]].concat()),
            ("random bytes", (0..400u32).map(|i| (i.wrapping_mul(2654435761) >> 13) as u8).collect()),
        ];
        let flip = |at: usize, mask: u8| {
            let mut b = good.to_vec();
            b[at] ^= mask;
            b
        };
        cases.push(("magic bit", flip(0, 1)));
        cases.push(("version bit", flip(5, 1)));
        cases.push(("length high byte", flip(15, 0x80)));
        cases.push(("length low byte", flip(8, 0x01)));
        cases.push(("metadata brace", flip(meta.start, 0xff)));
        cases.push(("first payload byte", flip(meta.end, 0x10)));
        cases.push(("last payload byte", flip(good.len() - 1, 0x01)));
        cases.push(("drop tensor", with_meta(good, |m| {
            m["tensors"].as_array_mut().unwrap().remove(0);
        })));
        cases.push(("offset past end", with_meta(good, |m| m["tensors"][1]["offset"] = serde_json::json!(1u64 << 40))));
        cases.push(("dtype", with_meta(good, |m| m["tensors"][0]["dtype"] = serde_json::json!("f16"))));
        cases.push(("bad config", with_meta(good, |m| m["config"]["model"]["h"] = serde_json::json!(0))));
        cases.push(("rename tensor", with_meta(good, |m| m["tensors"][0]["name"] = serde_json::json!("nope"))));
        cases.push(("moment count", with_meta(good, |m| m["adam_step"] = serde_json::Value::Null)));
        cases.push(("payload length", with_meta(good, |m| {
            let n = m["payload_bytes"].as_u64().unwrap();
            m["payload_bytes"] = serde_json::json!(n + 4);
        })));
        cases
    }
}
