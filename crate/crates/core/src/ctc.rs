//! Connectionist temporal classification: the collapsing map β, best-path
//! decoding and the forward-backward loss with exact logit gradients.
//!
//! Class 0 is the blank throughout. All recursions run in log space.

use crate::error::{Error, Result};
use crate::net::PosteriorSequence;

const BLANK: usize = 0;

/// β: collapses runs of identical symbols, then drops blanks.
pub fn merge_beta(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != BLANK {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Per-frame argmax (ties resolve to the lowest class index).
pub fn best_path(posteriors: &PosteriorSequence) -> Vec<usize> {
    (0..posteriors.len())
        .map(|t| {
            let row = posteriors.row(t);
            let mut best = 0;
            for (k, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Best-path decoding without a language model: argmax path, then β.
pub fn best_path_decode(posteriors: &PosteriorSequence) -> Vec<usize> {
    merge_beta(&best_path(posteriors))
}

/// `l'`: blank, l1, blank, l2, ..., blank (length `2L + 1`).
pub fn augment_labels(labels: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(2 * labels.len() + 1);
    out.push(BLANK);
    for &l in labels {
        out.push(l);
        out.push(BLANK);
    }
    out
}

/// Number of adjacent equal labels, each of which forces an extra blank frame.
pub fn adjacent_repeats(labels: &[usize]) -> usize {
    labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Minimum frames needed to emit `labels`.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + adjacent_repeats(labels)
}

#[inline]
pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Row-wise log-softmax of a `T × K` logit matrix.
pub fn log_softmax(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&z| z - lse));
    }
    out
}

/// Loss and gradient of one sequence.
#[derive(Clone, Debug)]
pub struct CtcOutput {
    /// `−ln P(y | X)`.
    pub loss: f64,
    /// `∂loss/∂logits`, `T × K` row-major.
    pub grad: Vec<f64>,
    /// Posterior occupancy γ_t(k), `T × K` row-major.
    pub occupancy: Vec<f64>,
}

fn validate(logits: &[f64], frames: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if frames == 0 {
        return Err(Error::contract("CTC needs at least one frame"));
    }
    if classes < 2 || logits.len() != frames * classes {
        return Err(Error::contract(format!(
            "logit buffer of length {} does not match {frames} x {classes}",
            logits.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(Error::contract(format!("label {bad} is not a real class")));
    }
    let needed = min_frames(labels);
    if needed > frames {
        return Err(Error::InfeasibleAlignment {
            labels: labels.len(),
            repeats: adjacent_repeats(labels),
            needed,
            frames,
        });
    }
    Ok(())
}

/// CTC negative log-likelihood with gradient `softmax − γ` w.r.t. the logits.
pub fn ctc_loss_grad(logits: &[f64], frames: usize, classes: usize, labels: &[usize]) -> Result<CtcOutput> {
    validate(logits, frames, classes, labels)?;
    let logp = log_softmax(logits, classes);
    let ext = augment_labels(labels);
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let lp = |t: usize, s: usize| logp[t * classes + ext[s]];
    // Skip transition s-2 -> s is allowed onto a label differing from l'_{s-2}.
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + lp(t, s) };
        }
    }

    // β_t(s): log-probability of frames t+1.. given state s at frame t.
    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s] + lp(t + 1, s);
            if s + 1 < s_len {
                b = log_add(b, beta[next + s + 1] + lp(t + 1, s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, beta[next + s + 2] + lp(t + 1, s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }

    let end = &alpha[last..];
    let log_total = if s_len > 1 { log_add(end[s_len - 1], end[s_len - 2]) } else { end[0] };
    if !log_total.is_finite() {
        return Err(Error::Numerical("CTC path probability underflowed".into()));
    }

    let mut occupancy = vec![0.0; frames * classes];
    for t in 0..frames {
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            if v > ninf {
                occupancy[t * classes + ext[s]] += (v - log_total).exp();
            }
        }
    }
    let grad = logp.iter().zip(&occupancy).map(|(&l, &g)| l.exp() - g).collect();
    Ok(CtcOutput { loss: -log_total, grad, occupancy })
}

/// One batch member: `frames × classes` logits and its target labels.
#[derive(Clone, Copy, Debug)]
pub struct CtcItem<'a> {
    pub logits: &'a [f64],
    pub frames: usize,
    pub labels: &'a [usize],
}

#[derive(Debug)]
pub struct CtcBatchOutput {
    /// Mean loss over the feasible members (0 when none are feasible).
    pub mean_loss: f64,
    /// Per-member output; `None` for skipped members.
    pub outputs: Vec<Option<CtcOutput>>,
    /// Members skipped because their labels cannot be aligned.
    pub skipped: usize,
}

/// Evaluates every member; infeasible members are skipped and counted,
/// other errors abort the batch.
pub fn ctc_loss_batch(items: &[CtcItem<'_>], classes: usize) -> Result<CtcBatchOutput> {
    let mut outputs = Vec::with_capacity(items.len());
    let (mut total, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for item in items {
        match ctc_loss_grad(item.logits, item.frames, classes, item.labels) {
            Ok(out) => {
                total += out.loss;
                used += 1;
                outputs.push(Some(out));
            }
            Err(Error::InfeasibleAlignment { .. }) => {
                skipped += 1;
                outputs.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let mean_loss = if used == 0 { 0.0 } else { total / used as f64 };
    Ok(CtcBatchOutput { mean_loss, outputs, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn symbols(s: &str) -> Vec<usize> {
        s.chars().map(|c| if c == '-' { 0 } else { (c as u8 - b'a' + 1) as usize }).collect()
    }

    /// Sum over all K^T frame paths whose β image equals the labels.
    fn brute_force_prob(probs: &[f64], frames: usize, classes: usize, labels: &[usize]) -> f64 {
        let mut total = 0.0;
        let mut path = vec![0usize; frames];
        let n = classes.pow(frames as u32);
        for code in 0..n {
            let mut c = code;
            for p in path.iter_mut() {
                *p = c % classes;
                c /= classes;
            }
            if merge_beta(&path) == labels {
                total += path.iter().enumerate().map(|(t, &k)| probs[t * classes + k]).product::<f64>();
            }
        }
        total
    }

    fn softmax(logits: &[f64], classes: usize) -> Vec<f64> {
        log_softmax(logits, classes).into_iter().map(f64::exp).collect()
    }

    #[test]
    fn beta_identities() {
        for p in ["a--aab", "--a-ab", "a-abbb", "aa-aab"] {
            assert_eq!(merge_beta(&symbols(p)), symbols("aab"), "{p}");
        }
        assert!(merge_beta(&symbols("----")).is_empty());
        assert!(merge_beta(&[]).is_empty());
    }

    #[test]
    fn best_path_rules() {
        let one_hot = |path: &[usize], k: usize| {
            let mut rows = vec![0.0; path.len() * k];
            for (t, &s) in path.iter().enumerate() {
                rows[t * k + s] = 1.0;
            }
            PosteriorSequence::new(rows, k).unwrap()
        };
        assert_eq!(best_path_decode(&one_hot(&symbols("a--aab"), 3)), symbols("aab"));
        assert_eq!(best_path_decode(&one_hot(&symbols("-ab-"), 3)), symbols("ab"));
        let uniform = PosteriorSequence::new(vec![1.0 / 3.0; 12], 3).unwrap();
        assert_eq!(best_path(&uniform), vec![0; 4]);
        assert!(best_path_decode(&uniform).is_empty());
    }

    #[test]
    fn single_frame_single_label() {
        let logits = [0.3, -1.2, 2.0];
        let out = ctc_loss_grad(&logits, 1, 3, &[2]).unwrap();
        let p = softmax(&logits, 3);
        assert!((out.loss + p[2].ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        let logits = [0.1, 0.7, -0.4, 1.1, -0.3, 0.2];
        let p = softmax(&logits, 3);
        let out = ctc_loss_grad(&logits, 2, 3, &[1]).unwrap();
        // Paths aa, a-, -a.
        let expected = p[1] * p[4] + p[1] * p[3] + p[0] * p[4];
        assert!(((-out.loss).exp() - expected).abs() < 1e-12);
    }

    #[test]
    fn four_frames_matches_exhaustive_paths() {
        let logits = [0.2, -0.5, 1.0, 0.9, 0.1, -1.3, -0.2, 0.4, 0.8, 1.5, -0.7, 0.0];
        let p = softmax(&logits, 3);
        let out = ctc_loss_grad(&logits, 4, 3, &[1, 2]).unwrap();
        let bf = brute_force_prob(&p, 4, 3, &[1, 2]);
        assert!(((-out.loss).exp() - bf).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_separating_blank() {
        let logits = [0.0; 6];
        let err = ctc_loss_grad(&logits, 2, 3, &[1, 1]).unwrap_err();
        assert!(matches!(err, Error::InfeasibleAlignment { needed: 3, frames: 2, .. }));
        assert!(ctc_loss_grad(&[0.0; 9], 3, 3, &[1, 1]).is_ok());
    }

    #[test]
    fn blank_label_is_a_contract_error() {
        assert!(matches!(ctc_loss_grad(&[0.0; 3], 1, 3, &[0]), Err(Error::Contract(_))));
        assert!(matches!(ctc_loss_grad(&[0.0; 3], 1, 3, &[3]), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_labels_is_all_blank_path() {
        let logits = [0.5, 0.1, 1.0, -0.2];
        let p = softmax(&logits, 2);
        let out = ctc_loss_grad(&logits, 2, 2, &[]).unwrap();
        assert!((out.loss + (p[0] * p[2]).ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let frames = 5;
        let classes = 4;
        let logits: Vec<f64> = (0..frames * classes).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let labels = [1, 3, 3];
        let out = ctc_loss_grad(&logits, frames, classes, &labels).unwrap();
        let eps = 1e-6;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus[i] += eps;
            let mut minus = logits.clone();
            minus[i] -= eps;
            let fd = (ctc_loss_grad(&plus, frames, classes, &labels).unwrap().loss
                - ctc_loss_grad(&minus, frames, classes, &labels).unwrap().loss)
                / (2.0 * eps);
            let rel = (fd - out.grad[i]).abs() / fd.abs().max(out.grad[i].abs()).max(1e-8);
            assert!(rel <= 1e-6, "index {i}: fd {fd} analytic {}", out.grad[i]);
        }
    }

    #[test]
    fn batch_semantics() {
        let a = [0.2, -0.1, 0.5, 0.3, 1.0, -0.4, 0.0, 0.1, 0.2];
        let single = ctc_loss_grad(&a, 3, 3, &[1, 2]).unwrap();
        let item = CtcItem { logits: &a, frames: 3, labels: &[1, 2] };
        let one = ctc_loss_batch(&[item], 3).unwrap();
        assert_eq!(one.mean_loss, single.loss);
        assert_eq!(one.outputs[0].as_ref().unwrap().grad, single.grad);
        let two = ctc_loss_batch(&[item, item], 3).unwrap();
        assert!((two.mean_loss - single.loss).abs() < 1e-15);
        let bad = CtcItem { logits: &a, frames: 3, labels: &[1, 1, 2] };
        let mixed = ctc_loss_batch(&[item, bad], 3).unwrap();
        assert_eq!(mixed.skipped, 1);
        assert!(mixed.outputs[1].is_none());
        assert_eq!(mixed.mean_loss, single.loss);
    }

    /// Samples a frame path whose β image is `labels`.
    #[allow(clippy::same_item_push)]
    fn sample_path(labels: &[usize], extra: &[usize], classes: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut e = extra.iter().copied();
        let mut next = || e.next().unwrap_or(0);
        for _ in 0..next() % 3 {
            path.push(0);
        }
        for (i, &l) in labels.iter().enumerate() {
            if i > 0 && labels[i - 1] == l {
                path.push(0);
            }
            for _ in 0..=next() % 3 {
                path.push(l);
            }
            for _ in 0..next() % 2 {
                path.push(0);
            }
        }
        assert!(path.iter().all(|&s| s < classes));
        path
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn beta_inverts_sampled_paths(labels in prop::collection::vec(1usize..5, 0..8), extra in prop::collection::vec(0usize..10, 40)) {
            let path = sample_path(&labels, &extra, 5);
            prop_assert_eq!(merge_beta(&path), labels);
        }

        #[test]
        fn loss_nonnegative_and_gradient_rows_sum_to_zero(
            logits in prop::collection::vec(-4.0f64..4.0, 18),
            labels in prop::collection::vec(1usize..3, 0..3),
        ) {
            prop_assume!(min_frames(&labels) <= 6);
            let out = ctc_loss_grad(&logits, 6, 3, &labels).unwrap();
            prop_assert!(out.loss >= -1e-12);
            for row in out.grad.chunks(3) {
                prop_assert!(row.iter().sum::<f64>().abs() < 1e-9);
            }
        }

        #[test]
        fn matches_brute_force_on_small_grid(
            logits in prop::collection::vec(-3.0f64..3.0, 15),
            labels in prop::collection::vec(1usize..3, 0..=3),
        ) {
            let frames = 5;
            prop_assume!(min_frames(&labels) <= frames);
            let p = softmax(&logits, 3);
            let out = ctc_loss_grad(&logits, frames, 3, &labels).unwrap();
            let bf = brute_force_prob(&p, frames, 3, &labels);
            prop_assert!(((-out.loss).exp() - bf).abs() < 1e-9);
        }
    }
}
