use serde::{Deserialize, Serialize};

/// Levenshtein distance with its substitution / insertion / deletion split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditStats {
    pub dist: usize,
    pub subs: usize,
    pub ins: usize,
    pub dels: usize,
}

impl std::ops::AddAssign for EditStats {
    fn add_assign(&mut self, o: Self) {
        self.dist += o.dist;
        self.subs += o.subs;
        self.ins += o.ins;
        self.dels += o.dels;
    }
}

/// Unit-cost edit distance from `reference` to `hypothesis`.
///
/// The backtrace walks from the end and, among optimal moves, prefers the
/// diagonal (match or substitution), then deletion, then insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditStats {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, x) in d.iter_mut().take(w).enumerate() {
        *x = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }

    let mut stats = EditStats {
        dist: d[n * w + m],
        ..EditStats::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                if !same {
                    stats.subs += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            stats.dels += 1;
            i -= 1;
        } else {
            stats.ins += 1;
            j -= 1;
        }
    }
    stats
}

/// Corpus-level error counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub edits: EditStats,
    pub ref_tokens: usize,
    pub sentences: usize,
    pub sentence_errors: usize,
}

impl ErrorCounts {
    pub fn add(&mut self, reference: &[usize], hypothesis: &[usize]) {
        let e = edit_distance(reference, hypothesis);
        self.edits += e;
        self.ref_tokens += reference.len();
        self.sentences += 1;
        if e.dist > 0 {
            self.sentence_errors += 1;
        }
    }

    /// Token error rate: edits over reference tokens.
    pub fn ter(&self) -> f64 {
        if self.ref_tokens == 0 {
            0.0
        } else {
            self.edits.dist as f64 / self.ref_tokens as f64
        }
    }

    /// Fraction of utterances with at least one error.
    pub fn ser(&self) -> f64 {
        if self.sentences == 0 {
            0.0
        } else {
            self.sentence_errors as f64 / self.sentences as f64
        }
    }
}
