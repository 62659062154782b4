use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Utterance;
use crate::ctc::TokenSequence;
use crate::decoding::{DecodeConfig, DecodeMode, DecodeTrace, Iterations};
use crate::error::{Error, Result};
use crate::harness::metrics::{EditStats, ErrorCounts};
use crate::model::{checkpoint, Model, ModelType};

/// Seconds of nominal audio per frame.
pub const FRAME_SHIFT: f64 = 0.01;

/// Decodes every utterance. Utterances are spread over the rayon pool;
/// results come back in input order.
pub fn decode_dataset(
    model: &Model<f32>,
    utts: &[Utterance],
    mode: &DecodeMode,
) -> Result<Vec<(TokenSequence, DecodeTrace)>> {
    utts.par_iter().map(|u| mode.decode(model, &u.features)).collect()
}

/// One decode mode's results on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: ModelType,
    pub mode: DecodeMode,
    pub iterations: String,
    pub ter: f64,
    pub ser: f64,
    pub errors: EditStats,
    pub ref_tokens: usize,
    pub utterances: usize,
    pub mean_output_len: f64,
    pub mean_decoder_calls: f64,
    pub mean_encoder_calls: f64,
    pub truncated: usize,
    /// Summed decode wall time over nominal audio time.
    pub rtf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub fingerprint: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, mode: &DecodeMode) -> Option<&EvalRow> {
        self.rows.iter().find(|r| &r.mode == mode)
    }

    /// Fixed-width table: model, iterations, error rates, cost.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "split {}  config {}", self.split, &self.fingerprint[..16]);
        let _ = writeln!(
            s,
            "{:<9} {:<26} {:>6} {:>7} {:>7} {:>5} {:>5} {:>5} {:>8} {:>8}",
            "model", "decode", "iters", "TER%", "SER%", "sub", "ins", "del", "dec/utt", "RTF"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<9} {:<26} {:>6} {:>7.2} {:>7.2} {:>5} {:>5} {:>5} {:>8.2} {:>8.4}",
                r.model.as_str(),
                r.mode.label(),
                r.iterations,
                100.0 * r.ter,
                100.0 * r.ser,
                r.errors.subs,
                r.errors.ins,
                r.errors.dels,
                r.mean_decoder_calls,
                r.rtf
            );
        }
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::file(&json, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::file(&txt, e))
    }
}

/// Scores decoded outputs against the references.
pub fn score(
    model: &Model<f32>,
    utts: &[Utterance],
    mode: DecodeMode,
    decoded: &[(TokenSequence, DecodeTrace)],
) -> EvalRow {
    let mut counts = ErrorCounts::default();
    let (mut out_len, mut dec, mut enc, mut wall, mut frames, mut truncated) = (0, 0, 0, 0.0, 0, 0);
    for (u, (hyp, trace)) in utts.iter().zip(decoded) {
        counts.add(&u.transcript, hyp);
        out_len += hyp.len();
        dec += trace.decoder_calls;
        enc += trace.encoder_calls;
        wall += trace.wall_time;
        frames += u.frames();
        truncated += usize::from(trace.truncated);
    }
    let n = utts.len().max(1) as f64;
    EvalRow {
        model: model.kind,
        mode,
        iterations: mode.iterations_label(),
        ter: counts.ter(),
        ser: counts.ser(),
        errors: counts.edits,
        ref_tokens: counts.ref_tokens,
        utterances: utts.len(),
        mean_output_len: out_len as f64 / n,
        mean_decoder_calls: dec as f64 / n,
        mean_encoder_calls: enc as f64 / n,
        truncated,
        rtf: if frames > 0 { wall / (frames as f64 * FRAME_SHIFT) } else { 0.0 },
    }
}

/// Decode modes an evaluation runs for a model: greedy CTC always, then
/// the autoregressive decoder or one Mask CTC row per iteration budget.
pub fn default_modes(kind: ModelType, cfg: &DecodeConfig, ks: &[Iterations]) -> Vec<DecodeMode> {
    let mut modes = vec![DecodeMode::CtcGreedy];
    match kind {
        ModelType::CtcOnly => {}
        ModelType::ArJoint => modes.push(DecodeMode::ArGreedy {
            max_ar_len: cfg.max_ar_len,
        }),
        ModelType::MaskCtc => modes.extend(ks.iter().map(|&k_iters| DecodeMode::MaskCtc {
            p_thres: cfg.p_thres,
            k_iters,
        })),
    }
    modes
}

fn fingerprint(model: &Model<f32>, modes: &[DecodeMode]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&(&model.kind, &model.config, &model.vocab, modes))?);
    h.update(checkpoint::encode_params(&model.params));
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Decodes `utts` once per mode and scores each pass.
pub fn evaluate(model: &Model<f32>, utts: &[Utterance], split: &str, modes: &[DecodeMode]) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(modes.len());
    for mode in modes {
        let decoded = decode_dataset(model, utts, mode)?;
        rows.push(score(model, utts, *mode, &decoded));
    }
    Ok(EvalReport {
        split: split.to_string(),
        fingerprint: fingerprint(model, modes)?,
        rows,
    })
}

/// Loads a checkpoint and a dataset and evaluates the given modes.
pub fn run_eval(model_path: &Path, dataset_path: &Path, modes: &[DecodeMode]) -> Result<EvalReport> {
    let model = checkpoint::load(model_path)?;
    let utts = crate::corpus::read_dataset(dataset_path)?;
    let split = dataset_path
        .file_stem()
        .map_or_else(|| "data".to_string(), |s| s.to_string_lossy().into_owned());
    evaluate(&model, &utts, &split, modes)
}
