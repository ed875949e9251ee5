//! Signal-processing front end: Hann window, STFT, mel filterbank and the
//! log-mel transform `20·log10(max(H_mel · |STFT{x}|, floor))`.
//!
//! All arithmetic is done in `f64`. Frames are centered: the signal is
//! reflect-padded by `win_length / 2` on both sides, so frame `i` is centered
//! on sample `i·hop`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

/// Magnitudes below this are clamped before the logarithm.
pub const AMPLITUDE_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("window length must be at least 2, got {0}")]
    WindowTooShort(usize),
    #[error("invalid framing: {0}")]
    InvalidFraming(String),
    #[error("signal of {len} samples is too short: need at least {needed}")]
    SignalTooShort { len: usize, needed: usize },
    #[error("invalid mel filterbank: {0}")]
    InvalidFilterbank(String),
    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    SampleRateMismatch { expected: u32, actual: u32 },
    #[error("filterbank expects {expected} FFT bins, framing produces {actual}")]
    FilterbankMismatch { expected: usize, actual: usize },
}

/// Mono signal `x ∈ R^{1×l}` with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Zero-pad at the tail or truncate to exactly `len` samples.
    pub fn fit_to(mut self, len: usize) -> Self {
        self.samples.resize(len, 0.0);
        self
    }
}

/// STFT framing shared by the log-mel path and the Wavegram.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Framing {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Framing {
    /// Window of `win_ms` milliseconds with fractional `overlap`; the FFT size
    /// equals the window length.
    pub fn from_ms(sample_rate: u32, win_ms: f64, overlap: f64) -> Result<Self, DspError> {
        if !(0.0..1.0).contains(&overlap) {
            return Err(DspError::InvalidFraming(format!("overlap {overlap} outside [0, 1)")));
        }
        let win = (sample_rate as f64 * win_ms / 1000.0).round() as usize;
        let hop = (win as f64 * (1.0 - overlap)).round() as usize;
        let f = Framing {
            sample_rate,
            win_length: win,
            hop,
            fft_size: win,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if self.win_length < 2 {
            return Err(DspError::WindowTooShort(self.win_length));
        }
        if self.hop == 0 || self.fft_size < self.win_length || self.sample_rate == 0 {
            return Err(DspError::InvalidFraming(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn pad(&self) -> usize {
        self.win_length / 2
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of centered frames for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> Result<usize, DspError> {
        frame_count(len, self.win_length, self.hop)
    }
}

/// Frames produced by centered framing: `⌊(len + 2·⌊win/2⌋ − win) / hop⌋ + 1`.
/// Reflect padding needs `len > win/2`.
pub fn frame_count(len: usize, win: usize, hop: usize) -> Result<usize, DspError> {
    if win < 2 {
        return Err(DspError::WindowTooShort(win));
    }
    if hop == 0 {
        return Err(DspError::InvalidFraming("hop must be positive".into()));
    }
    let pad = win / 2;
    let needed = (pad + 1).max(hop);
    if len < needed {
        return Err(DspError::SignalTooShort { len, needed });
    }
    Ok((len + 2 * pad - win) / hop + 1)
}

/// Periodic Hann window `w[n] = 0.5·(1 − cos(2πn/N))`.
pub fn hann_window(len: usize) -> Result<Vec<f64>, DspError> {
    if len < 2 {
        return Err(DspError::WindowTooShort(len));
    }
    let n = len as f64;
    Ok((0..len)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n).cos()))
        .collect())
}

/// Mirror `x` by `pad` samples on both sides without repeating the edge.
pub fn reflect_pad(x: &[f32], pad: usize) -> Vec<f64> {
    let len = x.len() as isize;
    (-(pad as isize)..len + pad as isize)
        .map(|i| {
            let r = if i < 0 {
                -i
            } else if i >= len {
                2 * (len - 1) - i
            } else {
                i
            };
            x[r as usize] as f64
        })
        .collect()
}

/// Complex STFT, `frames × n_bins`, row-major.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrum {
    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Reusable STFT plan for one framing.
#[derive(Clone)]
pub struct Stft {
    framing: Framing,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(framing: Framing) -> Result<Self, DspError> {
        framing.validate()?;
        let window = hann_window(framing.win_length)?;
        let fft = FftPlanner::new().plan_fft_forward(framing.fft_size);
        Ok(Stft {
            framing,
            window,
            fft,
        })
    }

    pub fn framing(&self) -> &Framing {
        &self.framing
    }

    pub fn process(&self, x: &[f32]) -> Result<Spectrum, DspError> {
        let f = &self.framing;
        let frames = f.frame_count(x.len())?;
        let padded = reflect_pad(x, f.pad());
        let bins = f.n_bins();
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); f.fft_size];
        for t in 0..frames {
            let seg = &padded[t * f.hop..][..f.win_length];
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                b.re = s * w;
            }
            self.fft.process(&mut buf);
            data.extend_from_slice(&buf[..bins]);
        }
        Ok(Spectrum { frames, bins, data })
    }
}

pub fn stft(x: &Waveform, framing: &Framing) -> Result<Spectrum, DspError> {
    if x.sample_rate != framing.sample_rate {
        return Err(DspError::SampleRateMismatch {
            expected: framing.sample_rate,
            actual: x.sample_rate,
        });
    }
    Stft::new(*framing)?.process(&x.samples)
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with centers equally spaced on the HTK mel scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    /// `n_mels × n_bins`, row-major.
    weights: Vec<f64>,
    n_bins: usize,
    n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub sample_rate: u32,
    /// `n_mels + 2` edge frequencies in Hz: filter `j` rises from
    /// `edges[j]`, peaks at `edges[j+1]` and falls to `edges[j+2]`.
    edges: Vec<f64>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn row(&self, mel: usize) -> &[f64] {
        &self.weights[mel * self.n_bins..][..self.n_bins]
    }

    pub fn center_freqs(&self) -> &[f64] {
        &self.edges[1..=self.n_mels]
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Apply to one magnitude frame of `n_bins` values.
    pub fn apply(&self, magnitudes: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.row(j).iter().zip(magnitudes).map(|(w, m)| w * m).sum();
        }
    }
}

pub fn mel_filterbank(
    n_fft_bins: usize,
    n_mels: usize,
    f_min: f64,
    f_max: f64,
    sample_rate: u32,
) -> Result<MelFilterbank, DspError> {
    let nyquist = sample_rate as f64 / 2.0;
    if n_mels < 2 {
        return Err(DspError::InvalidFilterbank(format!("n_mels must be >= 2, got {n_mels}")));
    }
    if n_fft_bins < 2 {
        return Err(DspError::InvalidFilterbank(format!("need at least 2 FFT bins, got {n_fft_bins}")));
    }
    if !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) {
        return Err(DspError::InvalidFilterbank(format!(
            "need 0 <= f_min < f_max <= {nyquist}, got [{f_min}, {f_max}]"
        )));
    }
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = nyquist / (n_fft_bins - 1) as f64;
    let mut weights = vec![0.0; n_mels * n_fft_bins];
    for j in 0..n_mels {
        let (lo, c, hi) = (edges[j], edges[j + 1], edges[j + 2]);
        for k in 0..n_fft_bins {
            let f = k as f64 * bin_hz;
            let up = (f - lo) / (c - lo);
            let down = (hi - f) / (hi - c);
            weights[j * n_fft_bins + k] = up.min(down).max(0.0);
        }
    }
    Ok(MelFilterbank {
        weights,
        n_bins: n_fft_bins,
        n_mels,
        f_min,
        f_max,
        sample_rate,
        edges,
    })
}

/// Log-mel spectrogram `X_Mel`, `frames × n_mels` in dB.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Vec<f64>,
    pub frames: usize,
    pub n_mels: usize,
    pub frame_times: Vec<f64>,
    pub mel_center_freqs: Vec<f64>,
}

impl MelSpectrogram {
    pub fn at(&self, frame: usize, mel: usize) -> f64 {
        self.values[frame * self.n_mels + mel]
    }
}

/// Log-mel extractor bundling an STFT plan with its filterbank.
#[derive(Clone)]
pub struct LogMel {
    stft: Stft,
    fb: MelFilterbank,
}

impl LogMel {
    pub fn new(framing: Framing, fb: MelFilterbank) -> Result<Self, DspError> {
        if fb.n_bins() != framing.n_bins() {
            return Err(DspError::FilterbankMismatch {
                expected: fb.n_bins(),
                actual: framing.n_bins(),
            });
        }
        if fb.sample_rate != framing.sample_rate {
            return Err(DspError::SampleRateMismatch {
                expected: framing.sample_rate,
                actual: fb.sample_rate,
            });
        }
        Ok(LogMel {
            stft: Stft::new(framing)?,
            fb,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.fb
    }

    pub fn framing(&self) -> &Framing {
        self.stft.framing()
    }

    /// Log-mel of raw samples at the framing's sample rate.
    pub fn compute(&self, samples: &[f32]) -> Result<MelSpectrogram, DspError> {
        let spec = self.stft.process(samples)?;
        let mags = spec.magnitude();
        let n_mels = self.fb.n_mels();
        let mut values = vec![0.0; spec.frames * n_mels];
        for t in 0..spec.frames {
            let row = &mut values[t * n_mels..][..n_mels];
            self.fb.apply(&mags[t * spec.bins..][..spec.bins], row);
            row.iter_mut()
                .for_each(|v| *v = 20.0 * v.max(AMPLITUDE_FLOOR).log10());
        }
        let f = self.framing();
        Ok(MelSpectrogram {
            values,
            frames: spec.frames,
            n_mels,
            frame_times: (0..spec.frames)
                .map(|t| (t * f.hop) as f64 / f.sample_rate as f64)
                .collect(),
            mel_center_freqs: self.fb.center_freqs().to_vec(),
        })
    }
}

pub fn log_mel(x: &Waveform, fb: &MelFilterbank, framing: &Framing) -> Result<MelSpectrogram, DspError> {
    if x.sample_rate != framing.sample_rate {
        return Err(DspError::SampleRateMismatch {
            expected: framing.sample_rate,
            actual: x.sample_rate,
        });
    }
    LogMel::new(*framing, fb.clone())?.compute(&x.samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full_scale_framing() -> Framing {
        Framing::from_ms(16_000, 64.0, 0.5).unwrap()
    }

    /// Direct evaluation of `Σ x[n]·w[n]·e^{−2πikn/N}` for `k ≤ N/2`.
    fn naive_windowed_dft(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        let tau = 2.0 * std::f64::consts::PI;
        (0..=n / 2)
            .map(|k| {
                x.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, &v)| {
                    let w = 0.5 - 0.5 * (tau * i as f64 / n as f64).cos();
                    let a = tau * (k * i % n) as f64 / n as f64;
                    (re + v * w * a.cos(), im - v * w * a.sin())
                })
            })
            .collect()
    }

    #[test]
    fn stft_matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..50 {
            let win = 2 * rng.random_range(8..200);
            let framing = Framing {
                sample_rate: 16_000,
                win_length: win,
                hop: win / 2,
                fft_size: win,
            };
            // One window of signal: the centered frame 1 covers it exactly.
            let x: Vec<f32> = (0..win).map(|_| rng.random_range(-1.0..1.0)).collect();
            let spec = Stft::new(framing).unwrap().process(&x).unwrap();
            assert_eq!(spec.frames, 3);
            let padded = reflect_pad(&x, win / 2);
            for t in 0..spec.frames {
                let want = naive_windowed_dft(&padded[t * win / 2..][..win]);
                let scale = want.iter().map(|(r, i)| r.hypot(*i)).fold(0.0, f64::max);
                for (k, (re, im)) in want.iter().enumerate() {
                    let got = spec.data[t * spec.bins + k];
                    let err = (got.re - re).hypot(got.im - im) / scale;
                    assert!(err < 1e-6, "case {case} win {win} frame {t} bin {k}: {err}");
                }
            }
            let direct: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            assert_eq!(&padded[win / 2..][..win], &direct[..]);
        }
    }

    fn sine(freq: f64, sr: u32, len: usize, amp: f64) -> Vec<f32> {
        (0..len)
            .map(|n| (amp * (2.0 * std::f64::consts::PI * freq * n as f64 / sr as f64).sin()) as f32)
            .collect()
    }

    #[test]
    fn hann_closed_form_values() {
        let w = hann_window(4).unwrap();
        let expected = [0.0, 0.5, 1.0, 0.5];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let w = hann_window(1024).unwrap();
        assert_eq!(w[0], 0.0);
        assert!((w[512] - 1.0).abs() < 1e-15);
        assert!(hann_window(1).is_err());
    }

    #[test]
    fn hann_at_half_overlap_sums_to_one() {
        let (n, hop) = (64, 32);
        let w = hann_window(n).unwrap();
        let total = 8 * hop + n;
        let mut acc = vec![0.0; total];
        for f in 0..(total - n) / hop + 1 {
            for i in 0..n {
                acc[f * hop + i] += w[i];
            }
        }
        assert!(acc[n..total - n].iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn full_scale_framing_gives_313_frames() {
        let f = full_scale_framing();
        assert_eq!((f.win_length, f.hop, f.fft_size), (1024, 512, 1024));
        assert_eq!(f.frame_count(160_000).unwrap(), 313);
        let x = Waveform::new(vec![0.0; 160_000], 16_000);
        let s = stft(&x, &f).unwrap();
        assert_eq!((s.frames, s.bins), (313, 513));
        assert!(s.magnitude().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn frame_count_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let win = rng.random_range(2..200);
            let hop = rng.random_range(1..=win);
            let len = rng.random_range(1..2000);
            let got = frame_count(len, win, hop);
            let pad = win / 2;
            if len <= pad || len < hop {
                assert!(got.is_err());
                continue;
            }
            let padded = len + 2 * pad;
            let mut count = 0;
            let mut start = 0;
            while start + win <= padded {
                count += 1;
                start += hop;
            }
            assert_eq!(got.unwrap(), count, "len {len} win {win} hop {hop}");
        }
    }

    #[test]
    fn short_signal_is_rejected() {
        let f = full_scale_framing();
        let x = Waveform::new(vec![0.0; 300], 16_000);
        assert!(matches!(stft(&x, &f), Err(DspError::SignalTooShort { .. })));
    }

    #[test]
    fn bin_centred_sine_peaks_at_its_bin() {
        let f = Framing {
            sample_rate: 16_000,
            win_length: 256,
            hop: 128,
            fft_size: 256,
        };
        let k = 20;
        let freq = k as f64 * 16_000.0 / 256.0;
        let x = Waveform::new(sine(freq, 16_000, 4096, 0.5), 16_000);
        let s = stft(&x, &f).unwrap();
        let mags = s.magnitude();
        for t in 2..s.frames - 2 {
            let row = &mags[t * s.bins..][..s.bins];
            let argmax = (0..s.bins).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, k);
        }
    }

    #[test]
    fn mel_scale_closed_form() {
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filterbank_shape_and_triangles() {
        let fb = mel_filterbank(513, 128, 0.0, 8000.0, 16_000).unwrap();
        assert_eq!(fb.n_mels(), 128);
        for j in 0..128 {
            let row = fb.row(j);
            assert!(row.iter().all(|&w| w >= 0.0));
            let max = row.iter().copied().fold(0.0, f64::max);
            assert!(max > 0.0, "filter {j} empty");
            assert_eq!(row.iter().filter(|&&w| w == max).count(), 1, "filter {j}");
            // Non-zero support is one contiguous run (triangle).
            let nz: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
            assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len());
        }
        // Every interior bin between f_min and f_max is covered.
        for k in 1..512 {
            assert!((0..128).any(|j| fb.row(j)[k] > 0.0), "bin {k} uncovered");
        }
        // First filter's upper edge from the mel spacing.
        let upper = mel_to_hz(2.0 * hz_to_mel(8000.0) / 129.0);
        assert!((fb.edges()[2] - upper).abs() < 1e-9);
        assert!((upper - 27.89).abs() < 0.01);
        // The lowest four bands together end just above 71 Hz.
        assert!((fb.edges()[5] - 71.8).abs() < 0.1, "{}", fb.edges()[5]);
    }

    #[test]
    fn filterbank_rejects_bad_ranges() {
        assert!(mel_filterbank(513, 1, 0.0, 8000.0, 16_000).is_err());
        assert!(mel_filterbank(513, 64, 100.0, 50.0, 16_000).is_err());
        assert!(mel_filterbank(513, 64, 0.0, 9000.0, 16_000).is_err());
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let f = full_scale_framing();
        let fb = mel_filterbank(f.n_bins(), 128, 0.0, 8000.0, 16_000).unwrap();
        let m = log_mel(&Waveform::new(vec![0.0; 160_000], 16_000), &fb, &f).unwrap();
        assert_eq!((m.frames, m.n_mels), (313, 128));
        assert!(m.values.iter().all(|&v| v == -200.0));
    }

    #[test]
    fn tone_peaks_at_nearest_mel_center() {
        let f = full_scale_framing();
        let fb = mel_filterbank(f.n_bins(), 128, 0.0, 8000.0, 16_000).unwrap();
        let m = log_mel(&Waveform::new(sine(1000.0, 16_000, 32_000, 0.5), 16_000), &fb, &f).unwrap();
        let nearest = (0..128)
            .min_by(|&a, &b| {
                (m.mel_center_freqs[a] - 1000.0)
                    .abs()
                    .total_cmp(&(m.mel_center_freqs[b] - 1000.0).abs())
            })
            .unwrap();
        for t in 2..m.frames - 2 {
            let argmax = (0..128).max_by(|&a, &b| m.at(t, a).total_cmp(&m.at(t, b))).unwrap();
            assert_eq!(argmax, nearest, "frame {t}");
        }
    }

    #[test]
    fn gain_shifts_log_mel_by_constant() {
        let f = Framing::from_ms(16_000, 32.0, 0.5).unwrap();
        let fb = mel_filterbank(f.n_bins(), 32, 0.0, 8000.0, 16_000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f32> = (0..4000).map(|_| rng.random_range(-0.1..0.1)).collect();
        let g = 4.0f32;
        let y: Vec<f32> = x.iter().map(|v| v * g).collect();
        let lm = LogMel::new(f, fb).unwrap();
        let a = lm.compute(&x).unwrap();
        let b = lm.compute(&y).unwrap();
        let shift = 20.0 * (g as f64).log10();
        for (va, vb) in a.values.iter().zip(&b.values) {
            assert!((vb - va - shift).abs() < 1e-9);
        }
    }

    #[test]
    fn log_mel_is_deterministic() {
        let f = Framing::from_ms(16_000, 32.0, 0.5).unwrap();
        let fb = mel_filterbank(f.n_bins(), 32, 0.0, 8000.0, 16_000).unwrap();
        let x = Waveform::new(sine(440.0, 16_000, 16_000, 0.3), 16_000);
        let a = log_mel(&x, &fb, &f).unwrap();
        let b = log_mel(&x, &fb, &f).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.frames, a.n_mels), (63, 32));
    }

    #[test]
    fn rate_mismatch_is_an_error() {
        let f = full_scale_framing();
        let fb = mel_filterbank(f.n_bins(), 128, 0.0, 8000.0, 16_000).unwrap();
        let x = Waveform::new(vec![0.0; 160_000], 22_050);
        assert!(matches!(log_mel(&x, &fb, &f), Err(DspError::SampleRateMismatch { .. })));
        let fb_small = mel_filterbank(257, 64, 0.0, 8000.0, 16_000).unwrap();
        assert!(matches!(LogMel::new(f, fb_small), Err(DspError::FilterbankMismatch { .. })));
    }
}
