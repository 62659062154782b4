use crate::ctc::MaskedSequence;
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Number of tokens to mask, uniform over `1..=len`. `None` for an empty
/// transcript, which has nothing to mask.
pub fn sample_mask_count(len: usize, rng: &mut Rng) -> Option<usize> {
    (len > 0).then(|| rng.uniform_int(1, len))
}

/// Replaces `n` distinct positions, chosen uniformly, with `mask_id`.
pub fn apply_training_masks(y: &[usize], n: usize, rng: &mut Rng, mask_id: usize) -> Result<MaskedSequence> {
    if n == 0 || n > y.len() {
        return Err(Error::Contract(format!(
            "cannot mask {n} of {} tokens",
            y.len()
        )));
    }
    let mut masked_positions = rng.distinct(y.len(), n);
    masked_positions.sort_unstable();
    let mut tokens = y.to_vec();
    for &p in &masked_positions {
        tokens[p] = mask_id;
    }
    Ok(MaskedSequence {
        tokens,
        masked_positions,
        original_length: y.len(),
    })
}
