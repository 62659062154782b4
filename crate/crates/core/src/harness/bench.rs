use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_dataset, Utterance};
use crate::decoding::DecodeMode;
use crate::error::{Error, Result};
use crate::harness::eval::FRAME_SHIFT;
use crate::model::{checkpoint, Model, ModelType};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub model_type: ModelType,
    pub mode: DecodeMode,
    pub iterations: String,
    /// Median over repeats of the time to decode the whole split.
    pub median_seconds: f64,
    pub rtf: f64,
    pub mean_decoder_calls: f64,
    pub mean_encoder_calls: f64,
    pub mean_output_len: f64,
    /// Autoregressive median time over this row's, when an autoregressive
    /// row is present.
    pub speedup_vs_ar: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub utterances: usize,
    pub frames: usize,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} utterances, {} frames, median of {} runs",
            self.utterances, self.frames, self.repeats
        );
        let _ = writeln!(
            s,
            "{:<9} {:<26} {:>6} {:>10} {:>8} {:>8} {:>8} {:>8}",
            "model", "decode", "iters", "seconds", "RTF", "dec/utt", "len", "speedup"
        );
        for r in &self.rows {
            let speedup = r.speedup_vs_ar.map_or_else(|| "-".to_string(), |x| format!("{x:.2}x"));
            let _ = writeln!(
                s,
                "{:<9} {:<26} {:>6} {:>10.4} {:>8.4} {:>8.2} {:>8.2} {:>8}",
                r.model_type.as_str(),
                r.mode.label(),
                r.iterations,
                r.median_seconds,
                r.rtf,
                r.mean_decoder_calls,
                r.mean_output_len,
                speedup
            );
        }
        s
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Times each `(model, mode)` pass over `utts` on the calling thread,
/// `repeats` times, and reports medians.
pub fn bench_models(entries: &[(&str, &Model<f32>, DecodeMode)], utts: &[Utterance], repeats: usize) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let frames: usize = utts.iter().map(Utterance::frames).sum();
    let n = utts.len().max(1) as f64;
    let mut rows = Vec::with_capacity(entries.len());
    for &(name, model, mode) in entries {
        let mut times = Vec::with_capacity(repeats);
        let (mut dec, mut enc, mut len) = (0, 0, 0);
        for rep in 0..repeats {
            let t0 = Instant::now();
            for u in utts {
                let (hyp, trace) = mode.decode(model, &u.features)?;
                if rep == 0 {
                    dec += trace.decoder_calls;
                    enc += trace.encoder_calls;
                    len += hyp.len();
                }
            }
            times.push(t0.elapsed().as_secs_f64());
        }
        let median_seconds = median(times);
        rows.push(BenchRow {
            model: name.to_string(),
            model_type: model.kind,
            mode,
            iterations: mode.iterations_label(),
            median_seconds,
            rtf: if frames > 0 { median_seconds / (frames as f64 * FRAME_SHIFT) } else { 0.0 },
            mean_decoder_calls: dec as f64 / n,
            mean_encoder_calls: enc as f64 / n,
            mean_output_len: len as f64 / n,
            speedup_vs_ar: None,
        });
    }
    let ar = rows
        .iter()
        .find(|r| matches!(r.mode, DecodeMode::ArGreedy { .. }))
        .map(|r| r.median_seconds);
    if let Some(ar) = ar {
        for r in &mut rows {
            r.speedup_vs_ar = Some(ar / r.median_seconds);
        }
    }
    Ok(BenchReport {
        utterances: utts.len(),
        frames,
        repeats,
        rows,
    })
}

/// Loads the checkpoints and the dataset, then benchmarks.
pub fn run_bench(entries: &[(PathBuf, DecodeMode)], dataset_path: &Path, repeats: usize) -> Result<BenchReport> {
    let utts = read_dataset(dataset_path)?;
    let models = entries
        .iter()
        .map(|(p, _)| checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = entries.iter().map(|(p, _)| p.display().to_string()).collect();
    let list: Vec<(&str, &Model<f32>, DecodeMode)> = entries
        .iter()
        .zip(&models)
        .zip(&names)
        .map(|(((_, mode), m), name)| (name.as_str(), m, *mode))
        .collect();
    bench_models(&list, &utts, repeats)
}
