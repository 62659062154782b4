use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::ctc::{TokenSequence, BLANK};
use crate::numerics::{Scalar, Tensor};

/// Per-frame argmax labels with their log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub labels: Vec<usize>,
    pub frame_log_probs: Vec<f64>,
}

/// Greedy CTC tokens, each with the frame run it was read from and the
/// highest frame probability inside that run.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenConfidence {
    pub tokens: TokenSequence,
    pub confidences: Vec<f64>,
    pub runs: Vec<Range<usize>>,
    pub alignment: Alignment,
}

/// A hypothesis with some positions replaced by `<MASK>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub tokens: TokenSequence,
    /// Ascending.
    pub masked_positions: Vec<usize>,
    pub original_length: usize,
}

impl MaskedSequence {
    pub fn is_masked(&self, pos: usize) -> bool {
        self.masked_positions.binary_search(&pos).is_ok()
    }

    pub fn mask_count(&self) -> usize {
        self.masked_positions.len()
    }
}

/// Argmax per frame (lowest index wins ties), collapsed into tokens. Each
/// token's confidence is the maximum probability of that token over its run
/// of identical non-blank frames; blanks always end a run.
pub fn ctc_greedy<S: Scalar>(lp: &Tensor<S>) -> TokenConfidence {
    let classes = lp.last_dim();
    let frames = lp.rows();
    let mut labels = Vec::with_capacity(frames);
    let mut frame_log_probs = Vec::with_capacity(frames);
    for t in 0..frames {
        let row = lp.row(t);
        let mut best = 0;
        for c in 1..classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        labels.push(best);
        frame_log_probs.push(row[best].as_f64());
    }

    let mut tokens = Vec::new();
    let mut confidences = Vec::new();
    let mut runs: Vec<Range<usize>> = Vec::new();
    let mut t = 0;
    while t < frames {
        let label = labels[t];
        if label == BLANK {
            t += 1;
            continue;
        }
        let start = t;
        let mut best = f64::NEG_INFINITY;
        while t < frames && labels[t] == label {
            best = best.max(lp.row(t)[label].as_f64());
            t += 1;
        }
        tokens.push(label);
        confidences.push(best.exp());
        runs.push(start..t);
    }

    TokenConfidence {
        tokens,
        confidences,
        runs,
        alignment: Alignment {
            labels,
            frame_log_probs,
        },
    }
}

/// Masks every token whose confidence is strictly below `p_thres`.
pub fn mask_by_confidence(tc: &TokenConfidence, p_thres: f64, mask_id: usize) -> MaskedSequence {
    assert!(
        (0.0..=1.0).contains(&p_thres),
        "p_thres must lie in [0, 1], got {p_thres}"
    );
    let mut tokens = tc.tokens.clone();
    let mut masked_positions = Vec::new();
    for (pos, &conf) in tc.confidences.iter().enumerate() {
        if conf < p_thres {
            tokens[pos] = mask_id;
            masked_positions.push(pos);
        }
    }
    MaskedSequence {
        tokens,
        masked_positions,
        original_length: tc.tokens.len(),
    }
}
