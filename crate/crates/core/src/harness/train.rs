use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{error, info};

use crate::corpus::{read_dataset, CorpusConfig, Utterance};
use crate::error::{Error, Result};
use crate::harness::average::{average_checkpoints, select_top};
use crate::harness::Manifest;
use crate::model::{checkpoint, Model, Vocab};
use crate::numerics::Rng;
use crate::training::{evaluate_dev, train_epoch, EpochMetrics, TrainConfig, TrainState};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_MODEL: &str = "model.mctc";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub metrics: Vec<EpochMetrics>,
    /// Per-epoch checkpoints still on disk, oldest first.
    pub checkpoints: Vec<PathBuf>,
    /// The checkpoints that went into the final model.
    pub averaged: Vec<PathBuf>,
    pub final_model: PathBuf,
    pub seconds: f64,
}

/// Vocabulary for a dataset: taken from the `manifest.json` next to it
/// when present, otherwise sized to the largest token id seen.
pub fn infer_vocab(data_path: &Path, splits: &[&[Utterance]]) -> Result<Vocab> {
    let manifest = data_path.with_file_name(super::MANIFEST_FILE);
    if manifest.exists() {
        let text = fs::read_to_string(&manifest).map_err(|e| Error::file(&manifest, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        return Ok(m.corpus.vocab());
    }
    let max = splits
        .iter()
        .flat_map(|s| s.iter())
        .flat_map(|u| u.transcript.iter().copied())
        .max()
        .unwrap_or(1);
    Ok(CorpusConfig {
        vocab_size: max,
        ..CorpusConfig::default()
    }
    .vocab())
}

fn check_data(utts: &[Utterance], vocab: &Vocab, feat_dim: usize, name: &str) -> Result<()> {
    for u in utts {
        if u.features.shape()[1] != feat_dim {
            return Err(Error::Contract(format!(
                "{name} utterance {} has feature dim {}, expected {feat_dim}",
                u.id,
                u.features.shape()[1]
            )));
        }
        if let Some(&t) = u.transcript.iter().find(|&&t| !vocab.is_content(t)) {
            return Err(Error::Contract(format!("{name} utterance {} has token id {t} outside the vocabulary", u.id)));
        }
    }
    Ok(())
}

/// Reads the datasets named in `cfg` and trains into `out`.
pub fn run_train(cfg: &TrainConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let train_path = Path::new(&cfg.train_data);
    let train = read_dataset(train_path)?;
    let dev = read_dataset(Path::new(&cfg.dev_data))?;
    let vocab = infer_vocab(train_path, &[&train, &dev])?;
    train_model(cfg, vocab, &train, &dev, out)
}

/// Trains for `cfg.epochs` epochs. Each epoch appends a row to
/// `metrics.csv` and writes a checkpoint; only the newest
/// `keep_checkpoints` are kept. The final model averages the
/// `average_top` kept checkpoints with the best dev accuracy.
///
/// A numeric failure stops training with the error; checkpoints from
/// earlier epochs stay on disk.
pub fn train_model(
    cfg: &TrainConfig,
    vocab: Vocab,
    train: &[Utterance],
    dev: &[Utterance],
    out: &Path,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let feat_dim = train
        .first()
        .ok_or_else(|| Error::Contract("training set is empty".into()))?
        .features
        .shape()[1];
    check_data(train, &vocab, feat_dim, "train")?;
    check_data(dev, &vocab, feat_dim, "dev")?;

    let ckpt_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::file(&ckpt_dir, e))?;
    let cfg_path = out.join("train_config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::file(&cfg_path, e))?;
    let csv_path = out.join(METRICS_FILE);
    let mut csv = fs::File::create(&csv_path).map_err(|e| Error::file(&csv_path, e))?;
    writeln!(csv, "{}", EpochMetrics::CSV_HEADER).map_err(|e| Error::file(&csv_path, e))?;

    let mut model = Model::<f32>::new(cfg.model_config(feat_dim), vocab, cfg.model_type, &mut Rng::new(cfg.seed))?;
    let mut state = TrainState::new(&model.params);
    let mut kept: VecDeque<(PathBuf, f64)> = VecDeque::new();
    let mut metrics = Vec::new();

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let (train_loss, skipped) = match train_epoch(&mut model, &mut state, train, cfg, epoch) {
            Ok(r) => r,
            Err(e) => {
                error!("epoch {epoch} failed: {e}");
                return Err(e);
            }
        };
        let (dev_loss, dev_acc) = evaluate_dev(&model, dev, cfg)?;
        let row = EpochMetrics {
            epoch,
            step: state.step,
            train_loss,
            dev_loss,
            dev_acc,
            skipped,
        };
        writeln!(csv, "{}", row.csv_row()).map_err(|e| Error::file(&csv_path, e))?;
        info!(
            "epoch {epoch}: train {train_loss:.4} dev {dev_loss:.4} acc {dev_acc:.4} ({:.1}s)",
            t0.elapsed().as_secs_f64()
        );
        state.history.push(row.clone());
        metrics.push(row);

        let path = ckpt_dir.join(format!("epoch{epoch:04}.mctc"));
        checkpoint::save(&model, &path)?;
        kept.push_back((path, dev_acc));
        while kept.len() > cfg.keep_checkpoints {
            let (old, _) = kept.pop_front().expect("non-empty");
            for p in [checkpoint::sidecar_path(&old), old] {
                fs::remove_file(&p).map_err(|e| Error::file(&p, e))?;
            }
        }
    }

    let final_model = out.join(FINAL_MODEL);
    let candidates: Vec<(PathBuf, f64)> = kept.iter().cloned().collect();
    let averaged = select_top(&candidates, cfg.average_top);
    if averaged.is_empty() {
        checkpoint::save(&model, &final_model)?;
    } else {
        checkpoint::save(&average_checkpoints(&averaged)?, &final_model)?;
    }
    Ok(TrainSummary {
        metrics,
        checkpoints: candidates.into_iter().map(|(p, _)| p).collect(),
        averaged,
        final_model,
        seconds: started.elapsed().as_secs_f64(),
    })
}
