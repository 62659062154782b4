//! Connectionist temporal classification: the collapse map, the log-space
//! forward recursion, greedy alignment decoding with per-token confidences,
//! and threshold masking of low-confidence tokens.
//!
//! CTC classes share ids with [`crate::Vocab`]: class 0 is `<blank>` and
//! classes `1..=V` are the content tokens.

mod forward;
mod greedy;

pub use forward::{ctc_log_prob, ctc_log_prob_var, is_feasible};
pub use greedy::{ctc_greedy, mask_by_confidence, Alignment, MaskedSequence, TokenConfidence};

/// Token ids of one transcript or hypothesis.
pub type TokenSequence = Vec<usize>;

pub const BLANK: usize = 0;

/// The CTC collapse map: merge consecutive duplicates, then drop blanks.
pub fn collapse(labels: &[usize]) -> TokenSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in labels {
        if prev != Some(l) && l != BLANK {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: usize = 1;
    const B: usize = 2;
    const X: usize = BLANK;

    #[test]
    fn collapse_examples() {
        assert!(collapse(&[X, X, X]).is_empty());
        assert!(collapse(&[]).is_empty());
        assert_eq!(collapse(&[A, A, X, B, B]), vec![A, B]);
        assert_eq!(collapse(&[A, X, A]), vec![A, A]);
    }

    proptest! {
        #[test]
        fn collapse_never_emits_blank(labels in prop::collection::vec(0usize..4, 0..24)) {
            prop_assert!(!collapse(&labels).contains(&BLANK));
        }

        #[test]
        fn collapse_idempotent_on_clean_sequences(labels in prop::collection::vec(1usize..4, 0..24)) {
            let mut clean = labels.clone();
            clean.dedup();
            prop_assert_eq!(collapse(&clean), clean.clone());
            prop_assert_eq!(collapse(&collapse(&labels)), collapse(&labels));
        }
    }
}
