//! Levenshtein alignment and pooled CER/WER.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

/// Unit-cost edit distance. Among optimal alignments the backtrace prefers
/// substitutions, then deletions, then insertions.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut counts = EditCounts { distance: d[n * w + m], ..EditCounts::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                counts.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
    /// `(S + I + D) / max(ref_len, 1)`.
    pub rate: f64,
}

impl ErrorReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    fn push(&mut self, c: EditCounts, ref_len: usize) {
        self.substitutions += c.substitutions;
        self.insertions += c.insertions;
        self.deletions += c.deletions;
        self.ref_len += ref_len;
        self.rate = self.errors() as f64 / self.ref_len.max(1) as f64;
    }
}

fn pooled<R: AsRef<str>, H: AsRef<str>, T: PartialEq>(
    refs: &[R],
    hyps: &[H],
    tokenize: impl Fn(&str) -> Vec<T>,
) -> Result<ErrorReport> {
    if refs.len() != hyps.len() {
        return Err(Error::contract(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut report = ErrorReport::default();
    for (r, h) in refs.iter().zip(hyps) {
        let (r, h) = (tokenize(r.as_ref()), tokenize(h.as_ref()));
        report.push(edit_distance(&r, &h), r.len());
    }
    Ok(report)
}

/// Character error rate; the space is a character.
pub fn cer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<ErrorReport> {
    pooled(refs, hyps, |s| s.chars().collect())
}

/// Word error rate over whitespace-separated tokens.
pub fn wer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<ErrorReport> {
    pooled(refs, hyps, |s| s.split_whitespace().map(str::to_owned).collect())
}
