//! WAV ingestion, DCASE-style dataset scanning and the label vocabulary.
//!
//! Layout: `root/<machine_type>/{train,test}/<clip>.wav` with clip names
//! `{normal|anomaly}_id_<NN>_<seq>.wav`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::{info, warn};
use thiserror::Error;

use crate::dsp::Waveform;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("{path}: cannot open: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed WAV header: {msg}")]
    Malformed { path: String, msg: String },
    #[error("{path}: expected mono, found channel count {channels}")]
    ChannelCount { path: String, channels: u16 },
    #[error("{path}: sample rate {actual} Hz, expected {expected} Hz")]
    SampleRate { path: String, expected: u32, actual: u32 },
    #[error("{path}: unsupported encoding {format} with {bits} bits, expected 16-bit PCM")]
    Encoding { path: String, format: String, bits: u16 },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no training clips found under {0}")]
    EmptyTrain(String),
    #[error("bad label {0:?}: expected <machine_type>:<machine_id>")]
    BadLabel(String),
    #[error("unknown label {0}")]
    UnknownLabel(String),
    #[error(transparent)]
    Wav(#[from] WavError),
}

/// Read a 16-bit PCM mono file at `expected_rate`, scaling samples by 1/32768.
pub fn decode_wav(path: impl AsRef<Path>, expected_rate: u32) -> Result<Waveform, WavError> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| WavError::Io { path: p.clone(), source })?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file)).map_err(|e| WavError::Malformed {
        path: p.clone(),
        msg: e.to_string(),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(WavError::ChannelCount {
            path: p,
            channels: spec.channels,
        });
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(WavError::Encoding {
            path: p,
            format: format!("{:?}", spec.sample_format),
            bits: spec.bits_per_sample,
        });
    }
    if spec.sample_rate != expected_rate {
        return Err(WavError::SampleRate {
            path: p,
            expected: expected_rate,
            actual: spec.sample_rate,
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<Result<Vec<f32>, _>>()
        .map_err(|e| WavError::Malformed {
            path: p.clone(),
            msg: e.to_string(),
        })?;
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Write 16-bit PCM mono; samples are scaled by 32768, rounded and clipped.
pub fn encode_wav(path: impl AsRef<Path>, x: &Waveform) -> Result<(), WavError> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: x.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(source) => WavError::Io { path: p.clone(), source },
        other => WavError::Malformed {
            path: p.clone(),
            msg: other.to_string(),
        },
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &x.samples {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipRecord {
    pub path: PathBuf,
    pub machine_type: String,
    pub machine_id: String,
    pub split: Split,
    pub is_anomaly: bool,
}

impl ClipRecord {
    /// `<type>/<split>/<file name>`.
    pub fn clip_id(&self) -> String {
        let name = self
            .path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        format!("{}/{}/{}", self.machine_type, self.split, name)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub records: Vec<ClipRecord>,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Sorted `(machine_type, machine_id)` pairs; the position is the class index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelVocab {
    pairs: Vec<(String, String)>,
}

impl LabelVocab {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        let mut pairs: Vec<_> = pairs.into_iter().collect();
        pairs.sort();
        pairs.dedup();
        LabelVocab { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn index_of(&self, machine_type: &str, machine_id: &str) -> Option<usize> {
        self.pairs
            .binary_search_by(|(t, i)| (t.as_str(), i.as_str()).cmp(&(machine_type, machine_id)))
            .ok()
    }

    pub fn get(&self, class: usize) -> Option<(&str, &str)> {
        self.pairs.get(class).map(|(t, i)| (t.as_str(), i.as_str()))
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    /// Class of a `type:id` label; `id` may be given as `NN` or `id_NN`.
    pub fn parse_label(&self, label: &str) -> Result<usize, DataError> {
        let (t, id) = label
            .split_once(':')
            .ok_or_else(|| DataError::BadLabel(label.into()))?;
        let id = id.strip_prefix("id_").unwrap_or(id);
        if t.is_empty() || id.is_empty() {
            return Err(DataError::BadLabel(label.into()));
        }
        self.index_of(t, id)
            .ok_or_else(|| DataError::UnknownLabel(label.into()))
    }
}

/// Parse `{normal|anomaly}_id_<NN>_<seq>.wav` into `(is_anomaly, id)`.
pub fn parse_clip_name(name: &str) -> Option<(bool, String)> {
    let stem = name.strip_suffix(".wav")?;
    let mut parts = stem.split('_');
    let is_anomaly = match parts.next()? {
        "normal" => false,
        "anomaly" => true,
        _ => return None,
    };
    if parts.next()? != "id" {
        return None;
    }
    let id = parts.next()?;
    let seq = parts.next()?;
    if parts.next().is_some()
        || id.is_empty()
        || !id.chars().all(|c| c.is_ascii_digit())
        || seq.is_empty()
        || !seq.chars().all(|c| c.is_ascii_digit())
    {
        return None;
    }
    Some((is_anomaly, id.to_string()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let rd = std::fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for e in rd {
        let e = e.map_err(|source| DataError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        out.push(e.path());
    }
    out.sort();
    Ok(out)
}

/// Index a dataset tree and build its vocabulary. The training split must
/// not be empty.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<(DatasetIndex, LabelVocab), DataError> {
    let root = root.as_ref();
    let index = scan_tree(root)?;
    if !index.records.iter().any(|r| r.split == Split::Train) {
        return Err(DataError::EmptyTrain(root.display().to_string()));
    }
    let vocab = LabelVocab::from_pairs(
        index
            .records
            .iter()
            .map(|r| (r.machine_type.clone(), r.machine_id.clone())),
    );
    Ok((index, vocab))
}

/// Index every clip under `root`. Unparseable names and anomalous training
/// clips are skipped with a warning.
pub fn scan_tree(root: impl AsRef<Path>) -> Result<DatasetIndex, DataError> {
    let root = root.as_ref();
    let mut records = Vec::new();
    for type_dir in sorted_entries(root)? {
        if !type_dir.is_dir() {
            continue;
        }
        let machine_type = type_dir.file_name().unwrap().to_string_lossy().into_owned();
        for split in [Split::Train, Split::Test] {
            let dir = type_dir.join(split.to_string());
            if !dir.is_dir() {
                continue;
            }
            for path in sorted_entries(&dir)? {
                let name = path.file_name().unwrap().to_string_lossy().into_owned();
                let Some((is_anomaly, machine_id)) = parse_clip_name(&name) else {
                    warn!("skipping unparseable clip name {}", path.display());
                    continue;
                };
                if split == Split::Train && is_anomaly {
                    warn!("skipping anomalous clip in training split: {}", path.display());
                    continue;
                }
                records.push(ClipRecord {
                    path,
                    machine_type: machine_type.clone(),
                    machine_id,
                    split,
                    is_anomaly,
                });
            }
        }
    }
    let mut counts: BTreeMap<(&str, &str, Split), usize> = BTreeMap::new();
    for r in &records {
        *counts
            .entry((&r.machine_type, &r.machine_id, r.split))
            .or_default() += 1;
    }
    for ((t, id, split), n) in counts {
        info!("{t} id_{id} {split}: {n} clips");
    }
    Ok(DatasetIndex { records })
}

/// Decode a clip and zero-pad or truncate it to `len` samples.
pub fn load_clip(path: impl AsRef<Path>, sample_rate: u32, len: usize) -> Result<Vec<f32>, WavError> {
    Ok(decode_wav(path, sample_rate)?.fit_to(len).samples)
}

/// Machine types and IDs of the DCASE 2020 Task 2 development and
/// additional-training sets.
pub fn dcase2020_machines() -> Vec<(String, String)> {
    let ids = |t: &str, ids: &[&str]| -> Vec<(String, String)> {
        ids.iter().map(|i| (t.to_string(), i.to_string())).collect()
    };
    let seven = ["00", "01", "02", "03", "04", "05", "06"];
    let mut all = Vec::new();
    for t in ["fan", "pump", "slider", "valve"] {
        all.extend(ids(t, &seven));
    }
    all.extend(ids("ToyCar", &["01", "02", "03", "04", "05", "06", "07"]));
    all.extend(ids("ToyConveyor", &["01", "02", "03", "04", "05", "06"]));
    all
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(path: &Path) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        encode_wav(path, &Waveform::new(vec![0.0; 8], 16_000)).unwrap();
    }

    #[test]
    fn sample_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for v in [16384i16, -32768, 0, 32767] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let x = decode_wav(&p, 16_000).unwrap();
        assert_eq!(x.samples, vec![0.5, -1.0, 0.0, 32767.0 / 32768.0]);
    }

    #[test]
    fn contract_violations() {
        let dir = tempfile::tempdir().unwrap();
        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        w.write_sample(1i16).unwrap();
        w.write_sample(1i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(decode_wav(&stereo, 16_000), Err(WavError::ChannelCount { channels: 2, .. })));

        let float = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&float, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(decode_wav(&float, 16_000), Err(WavError::Encoding { .. })));

        let rate = dir.path().join("r.wav");
        encode_wav(&rate, &Waveform::new(vec![0.1; 4], 22_050)).unwrap();
        assert!(matches!(decode_wav(&rate, 16_000), Err(WavError::SampleRate { actual: 22_050, .. })));

        let junk = dir.path().join("j.wav");
        std::fs::write(&junk, b"RIFFnope").unwrap();
        assert!(matches!(decode_wav(&junk, 16_000), Err(WavError::Malformed { .. })));
        assert!(matches!(decode_wav(dir.path().join("missing.wav"), 16_000), Err(WavError::Io { .. })));
    }

    #[test]
    fn encode_decode_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x: Vec<f32> = (0..1000).map(|i| ((i * 7919) % 65536) as f32 / 32768.0 - 1.0).collect();
        encode_wav(&p, &Waveform::new(x.clone(), 16_000)).unwrap();
        let a = decode_wav(&p, 16_000).unwrap();
        assert_eq!(a.samples, x);
        let q = dir.path().join("b.wav");
        encode_wav(&q, &a).unwrap();
        assert_eq!(decode_wav(&q, 16_000).unwrap(), a);
    }

    #[test]
    fn clip_name_grammar() {
        assert_eq!(parse_clip_name("anomaly_id_01_00000005.wav"), Some((true, "01".into())));
        assert_eq!(parse_clip_name("normal_id_00_00000000.wav"), Some((false, "00".into())));
        for bad in ["normal_id_00.wav", "weird_id_00_01.wav", "normal_id_xx_01.wav", "normal_id_00_01.flac", "normal_00_01.wav"] {
            assert_eq!(parse_clip_name(bad), None, "{bad}");
        }
    }

    #[test]
    fn toy_fixture_scan() {
        let dir = tempfile::tempdir().unwrap();
        let r = dir.path();
        for t in ["pump", "fan"] {
            for id in ["02", "00"] {
                touch(&r.join(format!("{t}/train/normal_id_{id}_00000000.wav")));
                touch(&r.join(format!("{t}/test/normal_id_{id}_00000000.wav")));
                touch(&r.join(format!("{t}/test/anomaly_id_{id}_00000001.wav")));
            }
        }
        touch(&r.join("fan/train/garbage.wav"));
        touch(&r.join("fan/train/anomaly_id_00_00000009.wav"));
        let (idx, vocab) = scan_dataset(r).unwrap();
        assert_eq!(vocab.len(), 4);
        assert_eq!(vocab.get(0), Some(("fan", "00")));
        assert_eq!(vocab.get(3), Some(("pump", "02")));
        assert_eq!(idx.records.len(), 12);
        assert!(idx.split(Split::Train).all(|c| !c.is_anomaly));
        let again = scan_dataset(r).unwrap();
        assert_eq!(again.0, idx);
        assert_eq!(again.1, vocab);
        assert_eq!(vocab.parse_label("pump:02").unwrap(), 3);
        assert_eq!(vocab.parse_label("pump:id_02").unwrap(), 3);
        assert!(matches!(vocab.parse_label("pump"), Err(DataError::BadLabel(_))));
        assert!(matches!(vocab.parse_label("valve:00"), Err(DataError::UnknownLabel(_))));
        let test_anom = idx.records.iter().find(|c| c.is_anomaly).unwrap();
        assert_eq!(test_anom.clip_id(), "fan/test/anomaly_id_00_00000001.wav");
    }

    #[test]
    fn empty_train_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        touch(&dir.path().join("fan/test/normal_id_00_00000000.wav"));
        assert!(matches!(scan_dataset(dir.path()), Err(DataError::EmptyTrain(_))));
        assert_eq!(scan_tree(dir.path()).unwrap().records.len(), 1);
    }

    #[test]
    fn full_dcase_layout_has_41_classes() {
        let dir = tempfile::tempdir().unwrap();
        for (t, id) in dcase2020_machines() {
            touch(&dir.path().join(format!("{t}/train/normal_id_{id}_00000000.wav")));
        }
        let (_, vocab) = scan_dataset(dir.path()).unwrap();
        assert_eq!(vocab.len(), 41);
    }
}
