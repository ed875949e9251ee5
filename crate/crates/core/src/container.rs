//! "ASDF" float containers for features and attention maps.
//!
//! Version 1: magic, `u32` version, `u32 t`, `u32 f`, then `t×f` little-endian
//! `f32` row-major. Version 2 adds a `u32` channel count after `f` and stores
//! `t×f×c` row-major.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"ASDF";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an ASDF container")]
    BadMagic,
    #[error("unsupported ASDF version {0}")]
    Version(u32),
    #[error("payload truncated: expected {expected} values, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("data has {actual} values, header describes {expected}")]
    LengthMismatch { expected: usize, actual: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub frames: usize,
    pub bins: usize,
    /// `None` for a version-1 single-channel file.
    pub channels: Option<usize>,
    pub data: Vec<f32>,
}

impl FeatureFile {
    pub fn version(&self) -> u32 {
        if self.channels.is_some() {
            2
        } else {
            1
        }
    }

    fn expected_len(&self) -> usize {
        self.frames * self.bins * self.channels.unwrap_or(1)
    }

    /// Value at frame `t`, bin `f`, channel `c`.
    pub fn at(&self, t: usize, f: usize, c: usize) -> f32 {
        let ch = self.channels.unwrap_or(1);
        self.data[(t * self.bins + f) * ch + c]
    }

    /// Build a version-2 file from channel-major `[c][t][f]` data.
    pub fn from_channel_major(frames: usize, bins: usize, channels: usize, planes: &[f32]) -> Result<Self, ContainerError> {
        let n = frames * bins;
        if planes.len() != n * channels {
            return Err(ContainerError::LengthMismatch {
                expected: n * channels,
                actual: planes.len(),
            });
        }
        let mut data = vec![0.0; planes.len()];
        for c in 0..channels {
            for i in 0..n {
                data[i * channels + c] = planes[c * n + i];
            }
        }
        Ok(FeatureFile {
            frames,
            bins,
            channels: Some(channels),
            data,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), ContainerError> {
        if self.data.len() != self.expected_len() {
            return Err(ContainerError::LengthMismatch {
                expected: self.expected_len(),
                actual: self.data.len(),
            });
        }
        w.write_all(MAGIC)?;
        w.write_all(&self.version().to_le_bytes())?;
        w.write_all(&(self.frames as u32).to_le_bytes())?;
        w.write_all(&(self.bins as u32).to_le_bytes())?;
        if let Some(c) = self.channels {
            w.write_all(&(c as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ContainerError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let word = |i: usize| -> Option<u32> {
            bytes
                .get(i * 4..i * 4 + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = word(1).ok_or(ContainerError::BadMagic)?;
        let header_words = match version {
            1 => 4,
            2 => 5,
            v => return Err(ContainerError::Version(v)),
        };
        let (frames, bins) = match (word(2), word(3)) {
            (Some(t), Some(f)) => (t as usize, f as usize),
            _ => return Err(ContainerError::BadMagic),
        };
        let channels = if version == 2 {
            Some(word(4).ok_or(ContainerError::BadMagic)? as usize)
        } else {
            None
        };
        let expected = frames
            .checked_mul(bins)
            .and_then(|n| n.checked_mul(channels.unwrap_or(1)))
            .ok_or(ContainerError::Truncated {
                expected: usize::MAX,
                actual: 0,
            })?;
        let payload = &bytes[header_words * 4..];
        if payload.len() / 4 < expected || payload.len() % 4 != 0 {
            return Err(ContainerError::Truncated {
                expected,
                actual: payload.len() / 4,
            });
        }
        if payload.len() / 4 != expected {
            return Err(ContainerError::LengthMismatch {
                expected,
                actual: payload.len() / 4,
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(FeatureFile {
            frames,
            bins,
            channels,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn v1_layout_and_round_trip() {
        let f = FeatureFile {
            frames: 2,
            bins: 3,
            channels: None,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.5],
        };
        let mut bytes = Vec::new();
        f.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(&bytes[..4], b"ASDF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1.0);
        assert_eq!(FeatureFile::from_bytes(&bytes).unwrap(), f);
    }

    #[test]
    fn v2_interleaves_channels() {
        // Channel 0 = 0..6, channel 1 = 10..16.
        let planes: Vec<f32> = (0..6).map(|v| v as f32).chain((10..16).map(|v| v as f32)).collect();
        let f = FeatureFile::from_channel_major(2, 3, 2, &planes).unwrap();
        assert_eq!(f.at(1, 2, 0), 5.0);
        assert_eq!(f.at(1, 2, 1), 15.0);
        assert_eq!(&f.data[..4], &[0.0, 10.0, 1.0, 11.0]);
        let mut bytes = Vec::new();
        f.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 20 + 48);
        assert_eq!(FeatureFile::from_bytes(&bytes).unwrap(), f);
    }

    #[test]
    fn corrupt_inputs_are_errors() {
        let f = FeatureFile {
            frames: 2,
            bins: 2,
            channels: None,
            data: vec![0.0; 4],
        };
        let mut bytes = Vec::new();
        f.write_to(&mut bytes).unwrap();
        assert!(matches!(FeatureFile::from_bytes(b"ASD"), Err(ContainerError::BadMagic)));
        assert!(matches!(FeatureFile::from_bytes(&bytes[..10]), Err(ContainerError::BadMagic)));
        assert!(matches!(
            FeatureFile::from_bytes(&bytes[..bytes.len() - 4]),
            Err(ContainerError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(FeatureFile::from_bytes(&bad), Err(ContainerError::Version(9))));
    }
}
