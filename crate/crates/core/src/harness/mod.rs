//! Evaluation metrics, checkpoint averaging, and the train / eval / bench
//! drivers behind the command-line tool.

mod average;
mod bench;
mod eval;
pub mod metrics;
mod train;

pub use average::{average_checkpoints, average_params, select_top};
pub use bench::{bench_models, run_bench, BenchReport, BenchRow};
pub use eval::{decode_dataset, default_modes, evaluate, run_eval, score, EvalReport, EvalRow, FRAME_SHIFT};
pub use metrics::{edit_distance, EditStats, ErrorCounts};
pub use train::{infer_vocab, run_train, train_model, TrainSummary, CHECKPOINT_DIR, FINAL_MODEL, METRICS_FILE};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{gen_split, write_dataset, CorpusConfig, Utterance};
use crate::decoding::{DecodeConfig, Iterations};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const THREADS_ENV: &str = "MASKCTC_THREADS";

pub const SPLITS: [&str; 3] = ["train", "dev", "eval"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub file: String,
    pub utterances: usize,
    pub frames: usize,
    pub tokens: usize,
}

/// Written next to generated datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub corpus: CorpusConfig,
    pub splits: Vec<SplitInfo>,
}

/// Generates the train, dev and eval splits into `out` as `<split>.mcds`
/// plus `manifest.json`.
pub fn gen_data(cfg: &CorpusConfig, sizes: [usize; 3], out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    let mut splits = Vec::new();
    for (i, (name, &n)) in SPLITS.iter().zip(&sizes).enumerate() {
        let utts = gen_split(cfg, i as u64, n);
        let file = format!("{name}.mcds");
        write_dataset(&utts, &out.join(&file))?;
        splits.push(SplitInfo {
            name: name.to_string(),
            file,
            utterances: n,
            frames: utts.iter().map(Utterance::frames).sum(),
            tokens: utts.iter().map(|u| u.transcript.len()).sum(),
        });
    }
    let manifest = Manifest {
        corpus: cfg.clone(),
        splits,
    };
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::file(&path, e))?;
    Ok(manifest)
}

/// Settings for `decode`, `eval` and `bench`, read from a flat TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: String,
    /// Extra checkpoints for `bench`, e.g. an autoregressive baseline.
    pub models: Vec<String>,
    pub data: String,
    pub p_thres: f64,
    pub k_iters: Iterations,
    /// Iteration budgets `eval` reports for Mask CTC models.
    pub k_values: Vec<Iterations>,
    pub max_ar_len: usize,
    pub repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DecodeConfig::default();
        RunConfig {
            model: "exp/model.mctc".into(),
            models: Vec::new(),
            data: "data/eval.mcds".into(),
            p_thres: d.p_thres,
            k_iters: d.k_iters,
            k_values: vec![
                Iterations::Fixed(1),
                Iterations::Fixed(5),
                Iterations::Fixed(10),
                Iterations::NumMask,
            ],
            max_ar_len: d.max_ar_len,
            repeats: 5,
        }
    }
}

impl RunConfig {
    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            p_thres: self.p_thres,
            k_iters: self.k_iters,
            max_ar_len: self.max_ar_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.decode_config().validate()?;
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.k_values.contains(&Iterations::Fixed(0)) {
            return Err(Error::Config("k_values must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sizes the global rayon pool from `MASKCTC_THREADS` when set. Returns
/// the number of worker threads in use.
pub fn configure_threads() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        // Already initialised pools keep their size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::read_dataset;

    #[test]
    fn gen_data_writes_splits_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig::default();
        let m = gen_data(&cfg, [12, 3, 4], dir.path()).unwrap();
        assert_eq!(m.splits.iter().map(|s| s.utterances).collect::<Vec<_>>(), [12, 3, 4]);
        let train = read_dataset(&dir.path().join("train.mcds")).unwrap();
        assert_eq!(train, gen_split(&cfg, 0, 12));
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(serde_json::from_str::<Manifest>(&text).unwrap(), m);
        let vocab = infer_vocab(&dir.path().join("train.mcds"), &[]).unwrap();
        assert_eq!(vocab.content_size(), cfg.vocab_size);
    }

    #[test]
    fn run_config_toml() {
        let cfg = RunConfig::from_toml("model = \"m.mctc\"\nk_iters = \"num_mask\"\nk_values = [\"1\", \"num_mask\"]\n").unwrap();
        assert_eq!(cfg.k_iters, Iterations::NumMask);
        assert_eq!(cfg.k_values, [Iterations::Fixed(1), Iterations::NumMask]);
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("p_thres = 2.0"), Err(Error::Config(_))));
        let text = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
    }
}
