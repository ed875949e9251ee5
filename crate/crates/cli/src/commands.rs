use std::path::{Path, PathBuf};

use asd_core::checkpoint::{Checkpoint, CheckpointError};
use asd_core::config::{load_config, Config, ConfigError};
use asd_core::container::{ContainerError, FeatureFile};
use asd_core::data::{decode_wav, load_clip, scan_dataset, scan_tree, DataError, Split, WavError};
use asd_core::dsp::{mel_filterbank, DspError, LogMel};
use asd_core::evaluation::{anomaly_score, evaluate_dataset, AttentionAccumulator, EvalError};
use asd_core::gradcheck::suite::run_suite;
use asd_core::model::{Model, ModelError};
use asd_core::training::{examples_from_index, train, TrainError};
use log::{info, warn};
use thiserror::Error;

use crate::Command;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

const BATCH: usize = 16;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("{path}: {source}")]
    Checkpoint {
        path: String,
        #[source]
        source: CheckpointError,
    },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Config(_) => EXIT_USAGE,
        ModelError::Tensor(_) | ModelError::ArcFace(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Config(ConfigError::Io { .. }) => EXIT_DATA,
            CliError::Config(_) => EXIT_USAGE,
            CliError::Model(e)
            | CliError::Checkpoint {
                source: CheckpointError::Model(e),
                ..
            } => model_code(e),
            CliError::Train(TrainError::NonFinite { .. } | TrainError::Tensor(_)) => EXIT_NUMERIC,
            CliError::Train(TrainError::Config(_)) => EXIT_USAGE,
            CliError::Train(TrainError::Model(e)) => model_code(e),
            CliError::Eval(EvalError::NonFinite(_)) => EXIT_NUMERIC,
            CliError::Eval(EvalError::Model(e)) => model_code(e),
            _ => EXIT_DATA,
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train { config, data, out } => cmd_train(&config, &data, &out),
        Command::Eval {
            ckpt,
            data,
            report,
            max_fpr,
        } => cmd_eval(&ckpt, &data, &report, max_fpr),
        Command::Score { ckpt, wav, label } => cmd_score(&ckpt, &wav, &label),
        Command::Features { wav, out, ckpt, config } => cmd_features(&wav, &out, ckpt.as_deref(), config.as_deref()),
        Command::AttentionStats { ckpt, data, out } => cmd_attention_stats(&ckpt, &data, &out),
        Command::Params { config } => cmd_params(&config),
        Command::Gradcheck { seeds, tol } => cmd_gradcheck(seeds, tol),
    }
}

/// `dir/model.asdc` → `dir/model.best.asdc`.
pub fn best_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.best.{}", ext.to_string_lossy()),
        None => format!("{stem}.best"),
    };
    out.with_file_name(name)
}

fn cmd_train(config: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    let (index, vocab) = scan_dataset(data)?;
    if cfg.model.classes != vocab.len() {
        info!("dataset has {} machine labels; using that as the class count", vocab.len());
        cfg.model.classes = vocab.len();
    }
    cfg.validate()?;
    let examples = examples_from_index(&index, &vocab)?;
    let outcome = train(&cfg, &examples, &vocab, |s| {
        println!("{}", serde_json::to_string(s).expect("stats serialize"));
    })?;
    outcome.last.save(out).map_err(ckpt_err(out))?;
    let best = best_path(out);
    outcome.best.save(&best).map_err(ckpt_err(&best))?;
    info!(
        "wrote {} (epoch {}) and {} (epoch {})",
        out.display(),
        outcome.last.epoch,
        best.display(),
        outcome.best.epoch
    );
    Ok(())
}

fn ckpt_err(path: &Path) -> impl FnOnce(CheckpointError) -> CliError + '_ {
    move |source| CliError::Checkpoint {
        path: path.display().to_string(),
        source,
    }
}

fn load_model(ckpt: &Path) -> Result<(Checkpoint, Model<f32>), CliError> {
    let ck = Checkpoint::load(ckpt).map_err(ckpt_err(ckpt))?;
    let model = ck.model().map_err(ckpt_err(ckpt))?;
    Ok((ck, model))
}

fn cmd_eval(ckpt: &Path, data: &Path, report: &Path, max_fpr: f64) -> Result<(), CliError> {
    if !(max_fpr > 0.0 && max_fpr <= 1.0) {
        return Err(CliError::Usage(format!("--max-fpr must lie in (0, 1], got {max_fpr}")));
    }
    let (ck, model) = load_model(ckpt)?;
    let index = scan_tree(data)?;
    let rep = evaluate_dataset(&model, &index, &ck.labels, max_fpr)?;
    rep.save(report)?;
    let s = &rep.summary;
    for m in &s.machines {
        println!("{}:{}\tAUC {:.4}\tpAUC {:.4}", m.machine_type, m.machine_id, m.auc, m.pauc);
    }
    for t in &s.types {
        println!("{}\tAUC {:.4}\tpAUC {:.4}", t.machine_type, t.auc, t.pauc);
    }
    println!("overall\tAUC {:.4}\tpAUC {:.4}", s.auc, s.pauc);
    for m in &s.missing {
        warn!("{m}: not scored (needs both normal and anomalous clips)");
    }
    Ok(())
}

fn fitted(wav: &Path, cfg: &Config) -> Result<Vec<f32>, CliError> {
    let fc = &cfg.features;
    let x = decode_wav(wav, fc.sample_rate)?;
    if x.len() != fc.clip_samples() {
        warn!(
            "{} has {} samples; fitting to {}",
            wav.display(),
            x.len(),
            fc.clip_samples()
        );
    }
    Ok(x.fit_to(fc.clip_samples()).samples)
}

fn cmd_score(ckpt: &Path, wav: &Path, label: &str) -> Result<(), CliError> {
    let (ck, model) = load_model(ckpt)?;
    let class = ck.labels.parse_label(label).map_err(|e| CliError::Usage(e.to_string()))?;
    let x = fitted(wav, &ck.config)?;
    println!("{}", anomaly_score(&model, &x, class)?);
    Ok(())
}

fn cmd_features(wav: &Path, out: &Path, ckpt: Option<&Path>, config: Option<&Path>) -> Result<(), CliError> {
    let file = match ckpt {
        Some(ckpt) => {
            let (ck, model) = load_model(ckpt)?;
            let x = fitted(wav, &ck.config)?;
            let feats = model.infer(&[x])?.features;
            let s = feats.shape().to_vec();
            let data: Vec<f32> = feats.data().to_vec();
            FeatureFile::from_channel_major(s[2], s[3], s[1], &data)?
        }
        None => {
            let cfg = match config {
                Some(p) => load_config(p)?,
                None => Config::default(),
            };
            let fc = &cfg.features;
            let framing = fc.framing()?;
            let fb = mel_filterbank(framing.n_bins(), fc.n_mels, fc.f_min, fc.f_max(), fc.sample_rate)?;
            let x = decode_wav(wav, fc.sample_rate)?;
            let m = LogMel::new(framing, fb)?.compute(&x.samples)?;
            FeatureFile {
                frames: m.frames,
                bins: m.n_mels,
                channels: None,
                data: m.values.iter().map(|&v| v as f32).collect(),
            }
        }
    };
    file.save(out)?;
    println!(
        "{}: {} frames x {} bins x {} channel(s)",
        out.display(),
        file.frames,
        file.bins,
        file.channels.unwrap_or(1)
    );
    Ok(())
}

fn cmd_attention_stats(ckpt: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let (ck, model) = load_model(ckpt)?;
    if !model.has_attention() {
        return Err(CliError::Usage("checkpoint has no attention module".into()));
    }
    let index = scan_tree(data)?;
    let split = if index.split(Split::Test).next().is_some() {
        Split::Test
    } else {
        Split::Train
    };
    let paths: Vec<_> = index.split(split).map(|r| r.path.clone()).collect();
    let fc = &ck.config.features;
    let mut acc = AttentionAccumulator::new();
    for chunk in paths.chunks(BATCH) {
        let clips = chunk
            .iter()
            .map(|p| load_clip(p, fc.sample_rate, fc.clip_samples()))
            .collect::<Result<Vec<_>, _>>()?;
        acc.push(&model, &clips)?;
    }
    let stats = acc.finish(&model).ok_or(EvalError::Empty)?;
    stats.save(out)?;
    println!("{} {split} clips; mean map written to {}", stats.clips, out.display());
    for c in 0..stats.channels {
        println!("channel {c}: spread of band means {:.4}", stats.band_spread(c));
    }
    for b in &stats.bands {
        let means: Vec<String> = b.mean.iter().map(|m| format!("{m:.4}")).collect();
        println!("bin {:3}\t{:8.1} Hz\t{}", b.bin, b.center_hz, means.join("\t"));
    }
    Ok(())
}

fn cmd_params(config: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let count = Model::<f32>::new(&cfg, 0)?.count_parameters();
    for (module, n) in &count.per_module {
        println!("{module}\t{n}");
    }
    println!("total\t{}", count.total);
    Ok(())
}

fn cmd_gradcheck(seeds: usize, tol: f64) -> Result<(), CliError> {
    if seeds == 0 || !(tol > 0.0) {
        return Err(CliError::Usage("--seeds and --tol must be positive".into()));
    }
    let results = run_suite(seeds, tol)?;
    let mut failed = 0;
    for r in &results {
        let ok = r.passed();
        failed += usize::from(!ok);
        println!(
            "{} {}: {} coordinates over {} seeds, max relative error {:.2e}, {} non-smooth",
            if ok { "PASS" } else { "FAIL" },
            r.name,
            r.report.checked,
            r.seeds,
            r.report.max_rel_error,
            r.report.nonsmooth
        );
    }
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} of {} gradient checks failed", results.len())));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_path_inserts_suffix() {
        assert_eq!(best_path(Path::new("/x/model.asdc")), PathBuf::from("/x/model.best.asdc"));
        assert_eq!(best_path(Path::new("model")), PathBuf::from("model.best"));
    }

    #[test]
    fn exit_code_classes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Data(DataError::EmptyTrain("d".into())).exit_code(), 2);
        let nan = TrainError::NonFinite {
            what: "loss",
            epoch: 1,
            batch: 0,
            param: None,
        };
        assert_eq!(CliError::Train(nan).exit_code(), 3);
        let bad = CliError::Checkpoint {
            path: "m.asdc".into(),
            source: CheckpointError::BadMagic,
        };
        assert_eq!(bad.exit_code(), 2);
    }
}
