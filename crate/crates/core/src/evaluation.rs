//! Anomaly scores, AUC/pAUC, per-machine aggregation and attention-map
//! statistics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{ContainerError, FeatureFile};
use crate::data::{load_clip, DataError, DatasetIndex, LabelVocab, Split, WavError};
use crate::model::{Model, ModelError, ParamCount};
use crate::tensor::Real;

/// Upper FPR bound of the partial AUC.
pub const DEFAULT_MAX_FPR: f64 = 0.1;

/// Clips scored per forward pass.
const SCORE_BATCH: usize = 16;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC needs at least one positive and one negative (got {positives} positive, {negatives} negative)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("max FPR must lie in (0, 1], got {0}")]
    InvalidFpr(f64),
    #[error("non-finite score for {0}")]
    NonFinite(String),
    #[error("empty clip set")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image export failed: {0}")]
    Image(#[from] image::ImageError),
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass { positives, negatives });
    }
    Ok((positives, negatives))
}

/// Groups of tied scores in descending order, as `(positives, negatives)`.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut prev: Option<f64> = None;
    for i in order {
        if prev != Some(scores[i]) {
            groups.push((0, 0));
            prev = Some(scores[i]);
        }
        let g = groups.last_mut().unwrap();
        if labels[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. Positives are the anomalous clips.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let (np, nn) = check_inputs(scores, labels)?;
    // Twice the U statistic, kept integral.
    let mut u2: u64 = 0;
    let mut neg_below = nn as u64;
    for (p, n) in tie_groups(scores, labels) {
        neg_below -= n;
        u2 += 2 * p * neg_below + p * n;
    }
    Ok((u2 as f64 * 0.5) / (np as f64 * nn as f64))
}

/// Area under the ROC curve over FPR ∈ [0, max_fpr], divided by `max_fpr`.
pub fn partial_auc(scores: &[f64], labels: &[bool], max_fpr: f64) -> Result<f64, EvalError> {
    if !(max_fpr > 0.0 && max_fpr <= 1.0) {
        return Err(EvalError::InvalidFpr(max_fpr));
    }
    let (np, nn) = check_inputs(scores, labels)?;
    let (np, nn) = (np as f64, nn as f64);
    let mut area = 0.0;
    let (mut tp, mut fp) = (0u64, 0u64);
    for (p, n) in tie_groups(scores, labels) {
        let (x0, y0) = (fp as f64 / nn, tp as f64 / np);
        tp += p;
        fp += n;
        let (x1, y1) = (fp as f64 / nn, tp as f64 / np);
        if x1 <= max_fpr {
            area += (x1 - x0) * (y0 + y1) * 0.5;
        } else {
            if x0 < max_fpr {
                let y = y0 + (y1 - y0) * (max_fpr - x0) / (x1 - x0);
                area += (max_fpr - x0) * (y0 + y) * 0.5;
            }
            break;
        }
    }
    Ok(area / max_fpr)
}

/// `L_AF` of one clip against its metadata class.
pub fn anomaly_score<T: Real>(model: &Model<T>, samples: &[f32], class: usize) -> Result<f64, EvalError> {
    let s = model.scores(&[samples], &[class])?[0];
    if !s.is_finite() {
        return Err(EvalError::NonFinite("clip".into()));
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRecord {
    pub clip_id: String,
    pub machine_type: String,
    pub machine_id: String,
    pub is_anomaly: bool,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineMetrics {
    pub machine_type: String,
    pub machine_id: String,
    pub auc: f64,
    pub pauc: f64,
    pub normal: usize,
    pub anomalous: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeMetrics {
    pub machine_type: String,
    pub auc: f64,
    pub pauc: f64,
    pub ids: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub max_fpr: f64,
    pub machines: Vec<MachineMetrics>,
    pub types: Vec<TypeMetrics>,
    /// Mean over machine types.
    pub auc: f64,
    pub pauc: f64,
    /// `type:id` pairs lacking either normal or anomalous clips.
    pub missing: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub records: Vec<AnomalyRecord>,
    pub summary: Summary,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalReport {
    /// Metrics per machine ID, then the unweighted mean over IDs of each
    /// type, then over types.
    pub fn aggregate(records: Vec<AnomalyRecord>, max_fpr: f64) -> Result<Self, EvalError> {
        if records.is_empty() {
            return Err(EvalError::Empty);
        }
        if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
            return Err(EvalError::NonFinite(r.clip_id.clone()));
        }
        let mut groups: BTreeMap<(&str, &str), (Vec<f64>, Vec<bool>)> = BTreeMap::new();
        for r in &records {
            let g = groups.entry((&r.machine_type, &r.machine_id)).or_default();
            g.0.push(r.score);
            g.1.push(r.is_anomaly);
        }
        let mut machines = Vec::new();
        let mut missing = Vec::new();
        for ((t, id), (scores, labels)) in &groups {
            match (roc_auc(scores, labels), partial_auc(scores, labels, max_fpr)) {
                (Ok(auc), Ok(pauc)) => {
                    let anomalous = labels.iter().filter(|&&l| l).count();
                    machines.push(MachineMetrics {
                        machine_type: t.to_string(),
                        machine_id: id.to_string(),
                        auc,
                        pauc,
                        normal: labels.len() - anomalous,
                        anomalous,
                    })
                }
                (Err(EvalError::SingleClass { positives, negatives }), _) => {
                    warn!("{t}:{id} has {negatives} normal and {positives} anomalous clips; excluded from averages");
                    missing.push(format!("{t}:{id}"));
                }
                (Err(e), _) | (_, Err(e)) => return Err(e),
            }
        }
        let mut types = Vec::new();
        let mut by_type: BTreeMap<&str, Vec<&MachineMetrics>> = BTreeMap::new();
        for m in &machines {
            by_type.entry(&m.machine_type).or_default().push(m);
        }
        for (t, ms) in by_type {
            types.push(TypeMetrics {
                machine_type: t.to_string(),
                auc: mean(ms.iter().map(|m| m.auc)),
                pauc: mean(ms.iter().map(|m| m.pauc)),
                ids: ms.len(),
            });
        }
        let summary = Summary {
            max_fpr,
            auc: mean(types.iter().map(|t| t.auc)),
            pauc: mean(types.iter().map(|t| t.pauc)),
            machines,
            types,
            missing,
        };
        Ok(EvalReport { records, summary })
    }

    /// One JSON object per clip, then `{"summary": ...}` on the last line.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), EvalError> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
            writeln!(w)?;
        }
        let s = serde_json::json!({ "summary": &self.summary });
        writeln!(w, "{s}")?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Score every test clip of `index` against its metadata class.
pub fn evaluate_dataset<T: Real>(
    model: &Model<T>,
    index: &DatasetIndex,
    vocab: &LabelVocab,
    max_fpr: f64,
) -> Result<EvalReport, EvalError> {
    let fc = &model.config().features;
    let test: Vec<_> = index.split(Split::Test).collect();
    let mut records = Vec::with_capacity(test.len());
    for chunk in test.chunks(SCORE_BATCH) {
        let mut clips = Vec::with_capacity(chunk.len());
        let mut classes = Vec::with_capacity(chunk.len());
        for r in chunk {
            let label = format!("{}:{}", r.machine_type, r.machine_id);
            classes.push(vocab.parse_label(&label)?);
            clips.push(load_clip(&r.path, fc.sample_rate, fc.clip_samples())?);
        }
        let scores = model.scores(&clips, &classes)?;
        for (r, score) in chunk.iter().zip(scores) {
            records.push(AnomalyRecord {
                clip_id: r.clip_id(),
                machine_type: r.machine_type.clone(),
                machine_id: r.machine_id.clone(),
                is_anomaly: r.is_anomaly,
                score,
            });
        }
    }
    EvalReport::aggregate(records, max_fpr)
}

pub fn count_parameters<T: Real>(model: &Model<T>) -> ParamCount {
    model.count_parameters()
}

/// Mean attention of one mel bin, averaged over time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BandMean {
    pub bin: usize,
    pub center_hz: f64,
    /// One value per feature channel.
    pub mean: Vec<f64>,
}

/// Elementwise mean and population standard deviation of attention maps.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStats {
    pub clips: usize,
    pub channels: usize,
    pub frames: usize,
    pub bins: usize,
    /// Channel-major `[c][t][f]`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub bands: Vec<BandMean>,
}

impl AttentionStats {
    fn idx(&self, c: usize, t: usize, f: usize) -> usize {
        (c * self.frames + t) * self.bins + f
    }

    pub fn mean_at(&self, c: usize, t: usize, f: usize) -> f64 {
        self.mean[self.idx(c, t, f)]
    }

    pub fn std_at(&self, c: usize, t: usize, f: usize) -> f64 {
        self.std[self.idx(c, t, f)]
    }

    /// Mean of the band means whose center lies in `[lo_hz, hi_hz]`.
    pub fn band_range_mean(&self, channel: usize, lo_hz: f64, hi_hz: f64) -> Option<f64> {
        let m = mean(
            self.bands
                .iter()
                .filter(|b| b.center_hz >= lo_hz && b.center_hz <= hi_hz)
                .map(|b| b.mean[channel]),
        );
        m.is_finite().then_some(m)
    }

    /// Standard deviation, over mel bins, of the time-averaged mean map.
    pub fn band_spread(&self, channel: usize) -> f64 {
        let xs: Vec<f64> = self.bands.iter().map(|b| b.mean[channel]).collect();
        let mu = mean(xs.iter().copied());
        mean(xs.iter().map(|x| (x - mu).powi(2))).sqrt()
    }

    /// Write `mean.asdf`, `std.asdf`, `bands.json` and one grayscale PNG per
    /// channel and statistic. Images put time on the x axis and low
    /// frequencies at the bottom; std is scaled by 2 to fill the range.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), EvalError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (name, data, gain) in [("mean", &self.mean, 1.0), ("std", &self.std, 2.0)] {
            let planes: Vec<f32> = data.iter().map(|&v| v as f32).collect();
            FeatureFile::from_channel_major(self.frames, self.bins, self.channels, &planes)?
                .save(dir.join(format!("{name}.asdf")))?;
            for c in 0..self.channels {
                let img = image::GrayImage::from_fn(self.frames as u32, self.bins as u32, |x, y| {
                    let f = self.bins - 1 - y as usize;
                    let v = data[self.idx(c, x as usize, f)] * gain;
                    image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
                });
                img.save(dir.join(format!("{name}_ch{c}.png")))?;
            }
        }
        let bands = serde_json::to_string_pretty(&self.bands).map_err(std::io::Error::from)?;
        std::fs::write(dir.join("bands.json"), bands)?;
        Ok(())
    }
}

/// Streaming accumulator for [`AttentionStats`] (Welford updates).
#[derive(Clone, Debug, Default)]
pub struct AttentionAccumulator {
    count: usize,
    shape: [usize; 3],
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl AttentionAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Add a batch of clips; a model without attention contributes nothing.
    pub fn push<T: Real, S: AsRef<[f32]>>(&mut self, model: &Model<T>, clips: &[S]) -> Result<(), EvalError> {
        if clips.is_empty() || !model.has_attention() {
            return Ok(());
        }
        let inf = model.infer(clips)?;
        let h = inf.attention.expect("model has attention");
        let s = h.shape();
        let shape = [s[1], s[2], s[3]];
        let per = shape.iter().product::<usize>();
        if self.count == 0 {
            self.shape = shape;
            self.mean = vec![0.0; per];
            self.m2 = vec![0.0; per];
        }
        assert_eq!(self.shape, shape, "attention shape is fixed by the model");
        for clip in h.data().chunks(per) {
            self.count += 1;
            let n = self.count as f64;
            for ((m, q), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(clip) {
                let x = v.f64();
                let d = x - *m;
                *m += d / n;
                *q += d * (x - *m);
            }
        }
        Ok(())
    }

    /// Final statistics; `None` if no clip was added.
    pub fn finish<T: Real>(self, model: &Model<T>) -> Option<AttentionStats> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        let std: Vec<f64> = self.m2.iter().map(|q| (q / n).max(0.0).sqrt()).collect();
        let [channels, frames, bins] = self.shape;
        let centers = model.mel_center_freqs();
        let mean = self.mean;
        let bands = (0..bins)
            .map(|f| BandMean {
                bin: f,
                center_hz: centers[f],
                mean: (0..channels)
                    .map(|c| (0..frames).map(|t| mean[(c * frames + t) * bins + f]).sum::<f64>() / frames as f64)
                    .collect(),
            })
            .collect();
        Some(AttentionStats {
            clips: self.count,
            channels,
            frames,
            bins,
            mean,
            std,
            bands,
        })
    }
}

/// Attention statistics over a clip set; `None` when the model has no
/// attention module.
pub fn attention_statistics<T: Real, S: AsRef<[f32]>>(
    model: &Model<T>,
    clips: &[S],
) -> Result<Option<AttentionStats>, EvalError> {
    if clips.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut acc = AttentionAccumulator::new();
    for chunk in clips.chunks(SCORE_BATCH) {
        acc.push(model, chunk)?;
    }
    Ok(acc.finish(model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut sum = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        sum += 1.0;
                    } else if scores[i] == scores[j] {
                        sum += 0.5;
                    }
                }
            }
        }
        sum / pairs
    }

    fn bools(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn auc_examples() {
        let l = bools(&[1, 1, 0, 0]);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.1], &l).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.3, 0.6, 0.2], &l).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.4; 4], &l).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &l).unwrap(), 0.0);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &bools(&[1, 1])),
            Err(EvalError::SingleClass { positives: 2, negatives: 0 })
        ));
        assert!(matches!(partial_auc(&[0.1, 0.2], &bools(&[1, 0]), 0.0), Err(EvalError::InvalidFpr(_))));
    }

    #[test]
    fn pauc_examples() {
        let l = bools(&[1, 1, 0, 0]);
        assert_eq!(partial_auc(&[0.9, 0.8, 0.3, 0.1], &l, 0.1).unwrap(), 1.0);
        assert_eq!(partial_auc(&[0.1, 0.2, 0.8, 0.9], &l, 0.1).unwrap(), 0.0);
        // One negative above one positive: ROC (0,0)→(0,.5)→(.5,.5)→(.5,1)→(1,1).
        let s = [0.9, 0.3, 0.6, 0.2];
        assert!((partial_auc(&s, &l, 0.5).unwrap() - 0.5).abs() < 1e-15);
        // All ties: the diagonal, area p²/2.
        assert!((partial_auc(&[0.3; 4], &l, 0.1).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn pairwise_oracle_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 2..=200 {
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            // Coarse grid so ties occur.
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64 / 7.0).collect();
            let auc = roc_auc(&scores, &labels).unwrap();
            assert_eq!(auc, pairwise_auc(&scores, &labels), "n={n}");
            assert!((partial_auc(&scores, &labels, 1.0).unwrap() - auc).abs() < 1e-12);
        }
    }

    #[test]
    fn random_scorer_pauc() {
        // The diagonal ROC has area p²/2 on [0, p], so the normalized value is p/2.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let p = partial_auc(&scores, &labels, 0.1).unwrap();
        assert!((p - 0.05).abs() < 0.02, "{p}");
        assert!((roc_auc(&scores, &labels).unwrap() - 0.5).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(raw in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 4..80)) {
            let mut labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            labels[0] = true;
            labels[1] = false;
            let scores: Vec<f64> = raw.iter().map(|r| (r.0 * 4.0).round() / 4.0).collect();
            let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() * 3.0 - 1.0).collect();
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&warped, &labels).unwrap());
            for p in [0.1, 0.37, 1.0] {
                let a = partial_auc(&scores, &labels, p).unwrap();
                let b = partial_auc(&warped, &labels, p).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }

    fn rec(t: &str, id: &str, anomaly: bool, score: f64) -> AnomalyRecord {
        AnomalyRecord {
            clip_id: format!("{t}/{id}/{score}"),
            machine_type: t.into(),
            machine_id: id.into(),
            is_anomaly: anomaly,
            score,
        }
    }

    #[test]
    fn aggregation_and_missing_ids() {
        let mut records = Vec::new();
        for (t, id) in [("fan", "00"), ("fan", "02"), ("pump", "00")] {
            for k in 0..6 {
                let anomaly = k % 2 == 0;
                records.push(rec(t, id, anomaly, if anomaly { 1.0 } else { 0.0 }));
            }
        }
        records.push(rec("pump", "04", false, 0.3));
        let oracle = EvalReport::aggregate(records.clone(), 0.1).unwrap();
        assert_eq!(oracle.summary.machines.len(), 3);
        assert!(oracle.summary.machines.iter().all(|m| m.auc == 1.0 && m.pauc == 1.0));
        assert_eq!(oracle.summary.missing, vec!["pump:04".to_string()]);
        assert_eq!((oracle.summary.auc, oracle.summary.pauc), (1.0, 1.0));

        let anti: Vec<_> = records.iter().map(|r| AnomalyRecord { score: 1.0 - r.score, ..r.clone() }).collect();
        let anti = EvalReport::aggregate(anti, 0.1).unwrap();
        assert!(anti.summary.machines.iter().all(|m| m.auc == 0.0 && m.pauc == 0.0));

        // Mixed quality: fan IDs at 1.0 and 0.5, pump at 0.0.
        let mut mixed = records.clone();
        for r in mixed.iter_mut().filter(|r| r.machine_id == "02") {
            r.score = 0.5;
        }
        for r in mixed.iter_mut().filter(|r| r.machine_type == "pump") {
            r.score = 1.0 - r.score;
        }
        let rep = EvalReport::aggregate(mixed, 0.1).unwrap();
        let fan = &rep.summary.types[0];
        assert_eq!(fan.machine_type, "fan");
        assert!((fan.auc - 0.75).abs() < 1e-12);
        assert!((rep.summary.auc - 0.375).abs() < 1e-12);
    }

    #[test]
    fn report_text_layout() {
        let records = vec![rec("fan", "00", true, 2.0), rec("fan", "00", false, 1.0)];
        let rep = EvalReport::aggregate(records, 0.1).unwrap();
        let text = rep.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let first: AnomalyRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first, rep.records[0]);
        let summary: serde_json::Value = serde_json::from_str(lines[2]).unwrap();
        assert_eq!(summary["summary"]["auc"], 1.0);
    }

    #[test]
    fn non_finite_scores_rejected() {
        let records = vec![rec("fan", "00", true, f64::NAN), rec("fan", "00", false, 1.0)];
        assert!(matches!(EvalReport::aggregate(records, 0.1), Err(EvalError::NonFinite(_))));
    }

    fn small_config() -> Config {
        let mut c = Config::default();
        for (k, v) in [
            ("sample_rate", "4000"),
            ("clip_seconds", "0.5"),
            ("win_ms", "64"),
            ("n_mels", "16"),
            ("h", "16"),
            ("classes", "3"),
            ("wavegram_multiplier", "4"),
            ("width_mult", "0.125"),
        ] {
            c.set(k, v).unwrap();
        }
        c
    }

    fn clip(seed: u64, n: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn zero_projection_attention_is_half() {
        let mut model = Model::<f32>::new(&small_config(), 3).unwrap();
        model.zero_attention_projection();
        let clips: Vec<_> = (0..3).map(|s| clip(s, model.clip_samples())).collect();
        let st = attention_statistics(&model, &clips).unwrap().unwrap();
        assert_eq!(st.channels, 2);
        assert_eq!(st.clips, 3);
        assert!(st.mean.iter().all(|&m| m == 0.5));
        assert!(st.std.iter().all(|&s| s == 0.0));
        assert_eq!(st.band_spread(0), 0.0);
    }

    #[test]
    fn attention_two_point_oracle() {
        let model = Model::<f32>::new(&small_config(), 4).unwrap();
        let clips: Vec<_> = (0..2).map(|s| clip(10 + s, model.clip_samples())).collect();
        let st = attention_statistics(&model, &clips).unwrap().unwrap();
        let a = model.infer(&clips[..1]).unwrap().attention.unwrap();
        let b = model.infer(&clips[1..]).unwrap().attention.unwrap();
        for ((i, x), y) in a.data().iter().enumerate().zip(b.data()) {
            let (x, y) = (*x as f64, *y as f64);
            assert!((st.mean[i] - (x + y) / 2.0).abs() < 1e-6);
            assert!((st.std[i] - (x - y).abs() / 2.0).abs() < 1e-6);
            assert!(st.mean[i] > 0.0 && st.mean[i] < 1.0);
            assert!(st.std[i] <= 0.5);
        }
        let single = attention_statistics(&model, &clips[..1]).unwrap().unwrap();
        assert!(single.std.iter().all(|&s| s == 0.0));
        let centers = model.mel_center_freqs();
        assert_eq!(st.bands.len(), 16);
        assert_eq!(st.bands[5].center_hz, centers[5]);
        let band0: f64 = (0..st.frames).map(|t| st.mean_at(1, t, 0)).sum::<f64>() / st.frames as f64;
        assert!((st.bands[0].mean[1] - band0).abs() < 1e-12);
    }

    #[test]
    fn attention_export() {
        let model = Model::<f32>::new(&small_config(), 4).unwrap();
        let clips = vec![clip(1, model.clip_samples())];
        let st = attention_statistics(&model, &clips).unwrap().unwrap();
        let dir = tempfile::tempdir().unwrap();
        st.save(dir.path()).unwrap();
        let mean = FeatureFile::load(dir.path().join("mean.asdf")).unwrap();
        assert_eq!(mean.version(), 2);
        assert_eq!((mean.frames, mean.bins, mean.channels), (st.frames, st.bins, Some(2)));
        assert_eq!(mean.at(3, 4, 1), st.mean_at(1, 3, 4) as f32);
        let img = image::open(dir.path().join("mean_ch0.png")).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (st.frames as u32, st.bins as u32));
        let expect = (st.mean_at(0, 2, st.bins - 1).clamp(0.0, 1.0) * 255.0).round() as u8;
        assert_eq!(img.get_pixel(2, 0).0[0], expect);
        assert!(dir.path().join("std_ch1.png").exists());
    }

    #[test]
    fn no_attention_gives_none() {
        let mut c = small_config();
        c.set("use_attention", "false").unwrap();
        let model = Model::<f32>::new(&c, 1).unwrap();
        assert!(attention_statistics(&model, &[clip(1, model.clip_samples())]).unwrap().is_none());
    }
}
