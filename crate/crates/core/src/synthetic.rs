//! Generated tone "machines" for end-to-end checks.
//!
//! Four machines hum at 440 Hz, 1 kHz, 2.2 kHz and 4 kHz. Normal clips
//! jitter phase, amplitude and pitch slightly over a faint noise floor.
//! Anomalous clips alternate between a tone detuned by a factor of 1.5 and
//! the normal tone buried in broadband noise of equal power.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{encode_wav, LabelVocab, WavError};
use crate::dsp::Waveform;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Machine {
    pub machine_type: &'static str,
    pub machine_id: &'static str,
    pub freq: f64,
}

pub const MACHINES: [Machine; 4] = [
    Machine { machine_type: "hum", machine_id: "00", freq: 440.0 },
    Machine { machine_type: "hum", machine_id: "01", freq: 1000.0 },
    Machine { machine_type: "whine", machine_id: "00", freq: 2200.0 },
    Machine { machine_type: "whine", machine_id: "01", freq: 4000.0 },
];

pub const DETUNE: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Anomaly {
    Detuned,
    Noised,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub sample_rate: u32,
    pub seconds: f64,
    pub train_per_machine: usize,
    pub test_normal_per_machine: usize,
    pub test_anomalous_per_machine: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            sample_rate: 16_000,
            seconds: 1.0,
            train_per_machine: 50,
            test_normal_per_machine: 20,
            test_anomalous_per_machine: 20,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub samples: Vec<f32>,
    /// Index into [`MACHINES`], which is also the vocabulary class.
    pub machine: usize,
    pub is_anomaly: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    pub sample_rate: u32,
    pub train: Vec<SyntheticClip>,
    pub test: Vec<SyntheticClip>,
}

/// Vocabulary of [`MACHINES`]; its order matches the array order.
pub fn vocab() -> LabelVocab {
    LabelVocab::from_pairs(MACHINES.iter().map(|m| (m.machine_type.to_string(), m.machine_id.to_string())))
}

fn tone(rng: &mut ChaCha8Rng, out: &mut [f64], freq: f64, sr: f64, amp: f64) {
    let phase = rng.random_range(0.0..2.0 * PI);
    for (i, v) in out.iter_mut().enumerate() {
        *v += amp * (2.0 * PI * freq * i as f64 / sr + phase).sin();
    }
}

fn noise(rng: &mut ChaCha8Rng, out: &mut [f64], sigma: f64) {
    let d = Normal::new(0.0, sigma).expect("positive sigma");
    for v in out.iter_mut() {
        *v += d.sample(rng);
    }
}

/// One clip of `machine`, normal when `anomaly` is `None`.
pub fn clip(rng: &mut ChaCha8Rng, machine: &Machine, sample_rate: u32, len: usize, anomaly: Option<Anomaly>) -> Vec<f32> {
    let sr = sample_rate as f64;
    let mut x = vec![0.0; len];
    let amp = rng.random_range(0.2..0.4);
    let jitter = rng.random_range(0.99..1.01);
    let f = match anomaly {
        Some(Anomaly::Detuned) => machine.freq * DETUNE,
        _ => machine.freq,
    } * jitter;
    tone(rng, &mut x, f, sr, amp);
    if anomaly == Some(Anomaly::Noised) {
        // A sine of amplitude a carries power a²/2.
        noise(rng, &mut x, amp / 2f64.sqrt());
    }
    noise(rng, &mut x, 0.005);
    x.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect()
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticSet {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let len = (spec.seconds * spec.sample_rate as f64).round() as usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (k, m) in MACHINES.iter().enumerate() {
        for _ in 0..spec.train_per_machine {
            train.push(SyntheticClip {
                samples: clip(&mut rng, m, spec.sample_rate, len, None),
                machine: k,
                is_anomaly: false,
            });
        }
        for i in 0..spec.test_normal_per_machine + spec.test_anomalous_per_machine {
            let anomaly = (i >= spec.test_normal_per_machine).then(|| {
                if i % 2 == 0 {
                    Anomaly::Detuned
                } else {
                    Anomaly::Noised
                }
            });
            test.push(SyntheticClip {
                samples: clip(&mut rng, m, spec.sample_rate, len, anomaly),
                machine: k,
                is_anomaly: anomaly.is_some(),
            });
        }
    }
    SyntheticSet {
        sample_rate: spec.sample_rate,
        train,
        test,
    }
}

impl SyntheticSet {
    /// Write `root/<type>/{train,test}/{normal|anomaly}_id_<id>_<seq>.wav`.
    pub fn write_dcase(&self, root: impl AsRef<Path>) -> Result<(), WavError> {
        let root = root.as_ref();
        for (split, clips) in [("train", &self.train), ("test", &self.test)] {
            let mut seq = vec![0usize; MACHINES.len()];
            for c in clips.iter() {
                let m = &MACHINES[c.machine];
                let dir = root.join(m.machine_type).join(split);
                std::fs::create_dir_all(&dir).map_err(|source| WavError::Io {
                    path: dir.display().to_string(),
                    source,
                })?;
                let kind = if c.is_anomaly { "anomaly" } else { "normal" };
                let name = format!("{kind}_id_{}_{:08}.wav", m.machine_id, seq[c.machine]);
                seq[c.machine] += 1;
                encode_wav(dir.join(name), &Waveform::new(c.samples.clone(), self.sample_rate))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{scan_dataset, Split};

    #[test]
    fn vocab_order_matches_machines() {
        let v = vocab();
        for (k, m) in MACHINES.iter().enumerate() {
            assert_eq!(v.get(k), Some((m.machine_type, m.machine_id)));
        }
    }

    #[test]
    fn deterministic_and_sized() {
        let spec = SyntheticSpec {
            train_per_machine: 3,
            test_normal_per_machine: 2,
            test_anomalous_per_machine: 1,
            seconds: 0.1,
            ..Default::default()
        };
        let a = generate(&spec);
        assert_eq!(a, generate(&spec));
        assert_eq!(a.train.len(), 12);
        assert_eq!(a.test.len(), 12);
        assert!(a.train.iter().all(|c| c.samples.len() == 1600 && !c.is_anomaly));
        assert!(a.train.iter().flat_map(|c| &c.samples).all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn detuned_tone_moves_the_spectral_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = &MACHINES[1];
        let peak = |x: &[f32]| {
            // Goertzel-style probe at a handful of candidate frequencies.
            let power = |f: f64| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &v) in x.iter().enumerate() {
                    let w = 2.0 * PI * f * i as f64 / 16_000.0;
                    re += v as f64 * w.cos();
                    im += v as f64 * w.sin();
                }
                re * re + im * im
            };
            [1000.0, 1500.0].map(power)
        };
        let n = clip(&mut rng, m, 16_000, 16_000, None);
        let a = clip(&mut rng, m, 16_000, 16_000, Some(Anomaly::Detuned));
        let (pn, pa) = (peak(&n), peak(&a));
        assert!(pn[0] > 100.0 * pn[1]);
        assert!(pa[1] > 100.0 * pa[0]);
    }

    #[test]
    fn written_layout_scans_back() {
        let spec = SyntheticSpec {
            train_per_machine: 2,
            test_normal_per_machine: 1,
            test_anomalous_per_machine: 1,
            seconds: 0.05,
            ..Default::default()
        };
        let set = generate(&spec);
        let dir = tempfile::tempdir().unwrap();
        set.write_dcase(dir.path()).unwrap();
        let (idx, v) = scan_dataset(dir.path()).unwrap();
        assert_eq!(v, vocab());
        assert_eq!(idx.split(Split::Train).count(), 8);
        assert_eq!(idx.split(Split::Test).filter(|r| r.is_anomaly).count(), 4);
    }
}
