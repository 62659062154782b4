//! Inference: greedy CTC, Mask CTC refinement with easy-first filling, and
//! the autoregressive greedy baseline. Every decode returns a
//! [`DecodeTrace`] that records what happened and how many network passes
//! it took.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_greedy, mask_by_confidence, MaskedSequence, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{Model, ModelType, Vocab};
use crate::numerics::{Scalar, Tensor};

/// Refinement budget: a fixed number of iterations, or one iteration per
/// masked token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Iterations {
    Fixed(usize),
    NumMask,
}

impl Iterations {
    /// Tokens committed per iteration for a hypothesis of `len` tokens.
    pub fn per_iteration(self, len: usize) -> usize {
        match self {
            Iterations::Fixed(k) => len.div_ceil(k.max(1)).max(1),
            Iterations::NumMask => 1,
        }
    }
}

impl fmt::Display for Iterations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Iterations::Fixed(k) => write!(f, "{k}"),
            Iterations::NumMask => f.write_str("num_mask"),
        }
    }
}

impl FromStr for Iterations {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "num_mask" | "#mask" => Ok(Iterations::NumMask),
            t => match t.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(Iterations::Fixed(k)),
                _ => Err(Error::Config(format!(
                    "iterations must be a positive integer or num_mask, got {s:?}"
                ))),
            },
        }
    }
}

impl From<Iterations> for String {
    fn from(k: Iterations) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for Iterations {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub p_thres: f64,
    pub k_iters: Iterations,
    pub max_ar_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            p_thres: 0.999,
            k_iters: Iterations::Fixed(10),
            max_ar_len: 200,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_thres) {
            return Err(Error::Config(format!("p_thres = {} outside [0, 1]", self.p_thres)));
        }
        if self.k_iters == Iterations::Fixed(0) {
            return Err(Error::Config("k_iters must be at least 1".into()));
        }
        if self.max_ar_len == 0 {
            return Err(Error::Config("max_ar_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// One committed token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fill {
    pub position: usize,
    pub token: String,
}

/// Record of one decode. `fills[i]` lists what iteration `i` committed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub initial_ctc: String,
    pub masked_string: String,
    pub fills: Vec<Vec<Fill>>,
    #[serde(rename = "final")]
    pub final_: String,
    pub decoder_calls: usize,
    pub encoder_calls: usize,
    pub wall_time: f64,
    #[serde(default)]
    pub truncated: bool,
}

impl DecodeTrace {
    pub fn iterations(&self) -> usize {
        self.fills.len()
    }

    /// Applies the fills to `masked_string`.
    pub fn replay(&self, vocab: &Vocab) -> Result<String> {
        let compact = vocab.content_ids().all(|i| vocab.token(i).chars().count() == 1);
        let mut units: Vec<String> = if compact {
            self.masked_string.chars().map(String::from).collect()
        } else {
            self.masked_string.split_whitespace().map(String::from).collect()
        };
        for fill in self.fills.iter().flatten() {
            match units.get_mut(fill.position) {
                Some(u) if u == "_" => *u = fill.token.clone(),
                _ => {
                    return Err(Error::Contract(format!(
                        "fill at position {} does not land on a mask",
                        fill.position
                    )))
                }
            }
        }
        Ok(units.join(if compact { "" } else { " " }))
    }

    fn plain(vocab: &Vocab, tokens: &[usize], started: Instant) -> Self {
        let text = vocab.render(tokens);
        DecodeTrace {
            initial_ctc: text.clone(),
            masked_string: text.clone(),
            fills: Vec::new(),
            final_: text,
            decoder_calls: 0,
            encoder_calls: 1,
            wall_time: started.elapsed().as_secs_f64(),
            truncated: false,
        }
    }
}

/// `(encoder_calls, decoder_calls)`.
pub fn count_calls(trace: &DecodeTrace) -> (usize, usize) {
    (trace.encoder_calls, trace.decoder_calls)
}

/// Greedy CTC tokens for any model type.
pub fn ctc_greedy_decode<S: Scalar>(model: &Model<S>, x: &Tensor<S>) -> Result<(TokenSequence, DecodeTrace)> {
    let started = Instant::now();
    let enc = model.encode(x)?;
    let tokens = ctc_greedy(&model.ctc_head(&enc)?).tokens;
    let trace = DecodeTrace::plain(&model.vocab, &tokens, started);
    Ok((tokens, trace))
}

/// Fills every masked position, committing the most confident predictions
/// first. Each iteration runs the bidirectional decoder once over the
/// current hypothesis and commits up to `C` still-masked positions; ties
/// in confidence go to the lower position. Returns the completed tokens
/// and, per iteration, the `(position, token id)` pairs committed.
#[allow(clippy::type_complexity)]
pub fn easy_first_fill<S: Scalar>(
    model: &Model<S>,
    masked: &MaskedSequence,
    enc: &Tensor<S>,
    k: Iterations,
) -> Result<(TokenSequence, Vec<Vec<(usize, usize)>>)> {
    let vocab = &model.vocab;
    let mut tokens = masked.tokens.clone();
    let mut open = masked.masked_positions.clone();
    let per_iter = k.per_iteration(masked.original_length);
    let content = vocab.content_size();
    let mut fills = Vec::new();
    while !open.is_empty() {
        let lp = model.decode_step(&tokens, enc, false)?;
        let mut scored: Vec<(f64, usize, usize)> = open
            .iter()
            .map(|&pos| {
                let row = &lp.row(pos)[..content];
                let class = argmax(row);
                (row[class].as_f64(), pos, vocab.decoder_token(class))
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.truncate(per_iter);
        let mut step: Vec<(usize, usize)> = scored.into_iter().map(|(_, pos, tok)| (pos, tok)).collect();
        step.sort_unstable();
        for &(pos, tok) in &step {
            tokens[pos] = tok;
        }
        open.retain(|p| step.binary_search_by_key(p, |s| s.0).is_err());
        fills.push(step);
    }
    Ok((tokens, fills))
}

/// Greedy CTC, threshold masking, then easy-first refinement. The output
/// always has the greedy CTC length.
pub fn maskctc_decode<S: Scalar>(
    model: &Model<S>,
    x: &Tensor<S>,
    cfg: &DecodeConfig,
) -> Result<(TokenSequence, DecodeTrace)> {
    if model.kind != ModelType::MaskCtc {
        return Err(Error::ModelType {
            found: model.kind.to_string(),
            wanted: ModelType::MaskCtc.to_string(),
        });
    }
    cfg.validate()?;
    let started = Instant::now();
    let vocab = &model.vocab;
    let enc = model.encode(x)?;
    let greedy = ctc_greedy(&model.ctc_head(&enc)?);
    let masked = mask_by_confidence(&greedy, cfg.p_thres, vocab.mask());
    if masked.masked_positions.is_empty() {
        let trace = DecodeTrace::plain(vocab, &greedy.tokens, started);
        return Ok((greedy.tokens, trace));
    }
    let (tokens, fills) = easy_first_fill(model, &masked, &enc, cfg.k_iters)?;
    let trace = DecodeTrace {
        initial_ctc: vocab.render(&greedy.tokens),
        masked_string: vocab.render(&masked.tokens),
        decoder_calls: fills.len(),
        fills: fills
            .into_iter()
            .map(|step| {
                step.into_iter()
                    .map(|(position, tok)| Fill {
                        position,
                        token: vocab.token(tok).to_string(),
                    })
                    .collect()
            })
            .collect(),
        final_: vocab.render(&tokens),
        encoder_calls: 1,
        wall_time: started.elapsed().as_secs_f64(),
        truncated: false,
    };
    Ok((tokens, trace))
}

/// Left-to-right argmax decoding from `<sos>` until `<eos>` or
/// `max_ar_len` tokens. One decoder pass per emitted token plus one for
/// `<eos>`.
pub fn ar_greedy_decode<S: Scalar>(
    model: &Model<S>,
    x: &Tensor<S>,
    max_ar_len: usize,
) -> Result<(TokenSequence, DecodeTrace)> {
    if model.kind != ModelType::ArJoint {
        return Err(Error::ModelType {
            found: model.kind.to_string(),
            wanted: ModelType::ArJoint.to_string(),
        });
    }
    let started = Instant::now();
    let vocab = &model.vocab;
    let enc = model.encode(x)?;
    let mut y_in = vec![vocab.sos()];
    let mut calls = 0;
    let mut truncated = false;
    loop {
        if y_in.len() > max_ar_len {
            truncated = true;
            break;
        }
        let lp = model.decode_step(&y_in, &enc, true)?;
        calls += 1;
        let tok = vocab.decoder_token(argmax(lp.row(y_in.len() - 1)));
        if tok == vocab.eos() {
            break;
        }
        y_in.push(tok);
    }
    let tokens = y_in.split_off(1);
    let text = vocab.render(&tokens);
    let trace = DecodeTrace {
        initial_ctc: String::new(),
        masked_string: String::new(),
        fills: Vec::new(),
        final_: text,
        decoder_calls: calls,
        encoder_calls: 1,
        wall_time: started.elapsed().as_secs_f64(),
        truncated,
    };
    Ok((tokens, trace))
}

/// How a model's output is produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeMode {
    CtcGreedy,
    MaskCtc { p_thres: f64, k_iters: Iterations },
    ArGreedy { max_ar_len: usize },
}

impl DecodeMode {
    /// The natural mode for a model type under `cfg`.
    pub fn for_model(kind: ModelType, cfg: &DecodeConfig) -> Self {
        match kind {
            ModelType::CtcOnly => DecodeMode::CtcGreedy,
            ModelType::ArJoint => DecodeMode::ArGreedy {
                max_ar_len: cfg.max_ar_len,
            },
            ModelType::MaskCtc => DecodeMode::MaskCtc {
                p_thres: cfg.p_thres,
                k_iters: cfg.k_iters,
            },
        }
    }

    /// Short label for report rows, e.g. `maskctc K=10`.
    pub fn label(&self) -> String {
        match self {
            DecodeMode::CtcGreedy => "ctc greedy".into(),
            DecodeMode::MaskCtc { p_thres, k_iters } => match k_iters {
                Iterations::NumMask => format!("maskctc #mask p={p_thres}"),
                Iterations::Fixed(k) => format!("maskctc K={k} p={p_thres}"),
            },
            DecodeMode::ArGreedy { .. } => "ar greedy".into(),
        }
    }

    pub fn iterations_label(&self) -> String {
        match self {
            DecodeMode::CtcGreedy => "1".into(),
            DecodeMode::MaskCtc { k_iters, .. } => match k_iters {
                Iterations::NumMask => "#mask".into(),
                Iterations::Fixed(k) => k.to_string(),
            },
            DecodeMode::ArGreedy { .. } => "L".into(),
        }
    }

    pub fn decode<S: Scalar>(&self, model: &Model<S>, x: &Tensor<S>) -> Result<(TokenSequence, DecodeTrace)> {
        match *self {
            DecodeMode::CtcGreedy => ctc_greedy_decode(model, x),
            DecodeMode::MaskCtc { p_thres, k_iters } => maskctc_decode(
                model,
                x,
                &DecodeConfig {
                    p_thres,
                    k_iters,
                    ..DecodeConfig::default()
                },
            ),
            DecodeMode::ArGreedy { max_ar_len } => ar_greedy_decode(model, x, max_ar_len),
        }
    }
}

/// Writes one JSON object per trace.
pub fn write_traces(traces: &[DecodeTrace], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| Error::file(path, e))?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

pub fn read_traces(path: &Path) -> Result<Vec<DecodeTrace>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}
