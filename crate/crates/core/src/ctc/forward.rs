use crate::ctc::BLANK;
use crate::error::{Error, Result};
use crate::numerics::{log_add_exp, CustomOp, Graph, Scalar, Tensor, Var};

/// Minimum frame count for `target`: one frame per token plus one blank
/// between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_feasible(frames: usize, target: &[usize]) -> bool {
    frames >= min_frames(target)
}

fn check_inputs<S: Scalar>(lp: &[S], shape: &[usize], target: &[usize]) -> Result<(usize, usize)> {
    let &[frames, classes] = shape else {
        return Err(Error::shape("ctc_log_prob", shape, &[0, 0]));
    };
    if lp.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("NaN in CTC log-probabilities".into()));
    }
    if let Some(&bad) = target.iter().find(|&&y| y == BLANK || y >= classes) {
        return Err(Error::Contract(format!(
            "CTC target label {bad} outside 1..{classes}"
        )));
    }
    Ok((frames, classes))
}

/// Blank-interleaved label sequence `[-, y1, -, y2, …, -]`.
fn extend(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &y in target {
        ext.push(y);
        ext.push(BLANK);
    }
    ext
}

/// Whether state `s` may be entered from `s - 2` (skipping a blank).
fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// Forward variables, `frames × states`, row-major.
fn alphas<S: Scalar>(lp: &[S], frames: usize, classes: usize, ext: &[usize]) -> Vec<S> {
    let states = ext.len();
    let ninf = S::neg_infinity();
    let mut alpha = vec![ninf; frames * states];
    alpha[0] = lp[ext[0]];
    if states > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * states);
        let prev = &prev[(t - 1) * states..];
        let row = &lp[t * classes..(t + 1) * classes];
        for s in 0..states {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add_exp(acc, prev[s - 1]);
            }
            if can_skip(ext, s) {
                acc = log_add_exp(acc, prev[s - 2]);
            }
            cur[s] = if acc == ninf { ninf } else { acc + row[ext[s]] };
        }
    }
    alpha
}

fn total<S: Scalar>(alpha: &[S], frames: usize, states: usize) -> S {
    let last = &alpha[(frames - 1) * states..frames * states];
    if states == 1 {
        last[0]
    } else {
        log_add_exp(last[states - 1], last[states - 2])
    }
}

/// `log P(target | X)` summed over every alignment that collapses to
/// `target`. `lp` is `[frames, classes]` of per-frame log-probabilities.
/// Returns `-inf` when the target cannot fit in the available frames.
pub fn ctc_log_prob<S: Scalar>(lp: &Tensor<S>, target: &[usize]) -> Result<S> {
    let (frames, classes) = check_inputs(lp.data(), lp.shape(), target)?;
    let ext = extend(target);
    let alpha = alphas(lp.data(), frames, classes, &ext);
    Ok(total(&alpha, frames, ext.len()))
}

struct CtcBackward<S> {
    alpha: Vec<S>,
    ext: Vec<usize>,
    frames: usize,
    classes: usize,
    result: S,
}

impl<S: Scalar> CustomOp<S> for CtcBackward<S> {
    /// Adjoint sweep through the forward recursion. `adj[t][s]` holds
    /// `∂result/∂alpha[t][s]`; each state hands its adjoint to the emitted
    /// log-prob and, weighted by its share of the log-sum, to predecessors.
    fn backward(&self, out_grad: &[S], parents: &[&[S]]) -> Vec<Option<Vec<S>>> {
        let lp = parents[0];
        let (frames, classes, states) = (self.frames, self.classes, self.ext.len());
        let mut dlp = vec![S::zero(); lp.len()];
        if !self.result.is_finite() {
            return vec![Some(dlp)];
        }
        let ext = &self.ext;
        let alpha = &self.alpha;
        let mut adj = vec![S::zero(); states];
        let last = (frames - 1) * states;
        adj[states - 1] = (alpha[last + states - 1] - self.result).exp();
        if states > 1 {
            adj[states - 2] = (alpha[last + states - 2] - self.result).exp();
        }
        for t in (0..frames).rev() {
            let row = t * states;
            let mut prev_adj = vec![S::zero(); states];
            for s in 0..states {
                let a = adj[s];
                if a == S::zero() || alpha[row + s] == S::neg_infinity() {
                    continue;
                }
                dlp[t * classes + ext[s]] += a;
                if t == 0 {
                    continue;
                }
                let prow = (t - 1) * states;
                // alpha[t][s] - lp[t][ext[s]] is the log-sum over predecessors
                let base = alpha[row + s] - lp[t * classes + ext[s]];
                let mut give = |p: usize| {
                    let ap = alpha[prow + p];
                    if ap != S::neg_infinity() {
                        prev_adj[p] += a * (ap - base).exp();
                    }
                };
                give(s);
                if s >= 1 {
                    give(s - 1);
                }
                if can_skip(ext, s) {
                    give(s - 2);
                }
            }
            adj = prev_adj;
        }
        let scale = out_grad[0];
        dlp.iter_mut().for_each(|x| *x *= scale);
        vec![Some(dlp)]
    }
}

/// Differentiable [`ctc_log_prob`] on a graph node of shape `[frames, classes]`.
pub fn ctc_log_prob_var<S: Scalar>(g: &mut Graph<'_, S>, lp: Var, target: &[usize]) -> Result<Var> {
    let shape = g.shape(lp).to_vec();
    let (frames, classes) = check_inputs(g.value(lp), &shape, target)?;
    let ext = extend(target);
    let alpha = alphas(g.value(lp), frames, classes, &ext);
    let result = total(&alpha, frames, ext.len());
    g.custom(
        &[lp],
        Vec::new(),
        vec![result],
        Box::new(CtcBackward {
            alpha,
            ext,
            frames,
            classes,
            result,
        }),
    )
}
