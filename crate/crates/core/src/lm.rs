//! Character and word n-gram models with Good-Turing/Katz backoff, stored and
//! exchanged in ARPA form.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::LabelAlphabet;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
/// Token used for the space character in character models.
pub const SPACE: &str = "<space>";
/// Counts above this threshold are not discounted.
pub const KATZ_K: u64 = 5;

const BOS_ID: u32 = 0;
const EOS_ID: u32 = 1;
const UNK_ID: u32 = 2;
/// Leftover mass below this is treated as none.
const MASS_EPS: f64 = 1e-12;
/// log10 value written for impossible entries.
const ARPA_NEG_INF: f64 = -99.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmMode {
    Char,
    Word,
}

impl LmMode {
    fn name(self) -> &'static str {
        match self {
            LmMode::Char => "char",
            LmMode::Word => "word",
        }
    }
}

impl std::str::FromStr for LmMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(LmMode::Char),
            "word" => Ok(LmMode::Word),
            other => Err(Error::config(format!("unknown LM mode {other:?} (expected char or word)"))),
        }
    }
}

/// The token a character maps to in character mode.
pub fn char_token(c: char) -> String {
    if c == ' ' {
        SPACE.to_string()
    } else {
        c.to_string()
    }
}

/// Inverse of [`char_token`].
pub fn token_char(token: &str) -> Option<char> {
    if token == SPACE {
        return Some(' ');
    }
    let mut it = token.chars();
    match (it.next(), it.next()) {
        (Some(c), None) => Some(c),
        _ => None,
    }
}

/// Character tokens of `text`; characters outside the alphabet are dropped
/// and counted.
pub fn tokenize_char(text: &str, alphabet: &LabelAlphabet) -> (Vec<String>, usize) {
    let mut filtered = 0;
    let tokens = text
        .chars()
        .filter(|&c| {
            let keep = alphabet.contains(c);
            filtered += usize::from(!keep);
            keep
        })
        .map(char_token)
        .collect();
    (tokens, filtered)
}

pub fn tokenize_word(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// Raw n-gram counts, each order padded with its own `order − 1` start
/// sentinels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CountTable {
    /// `counts[n − 1]` maps n-grams to occurrence counts.
    pub counts: Vec<BTreeMap<Vec<String>, u64>>,
}

impl CountTable {
    pub fn order(&self) -> usize {
        self.counts.len()
    }

    /// `N_r` for order `n`: how many distinct n-grams occur exactly `r` times.
    pub fn count_of_counts(&self, n: usize) -> BTreeMap<u64, u64> {
        let mut out = BTreeMap::new();
        for &c in self.counts[n - 1].values() {
            *out.entry(c).or_insert(0) += 1;
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(BTreeMap::is_empty)
    }
}

fn pad(sentence: &[String], n: usize) -> Vec<&str> {
    let mut padded: Vec<&str> = vec![BOS; n - 1];
    padded.extend(sentence.iter().map(String::as_str));
    padded.push(EOS);
    padded
}

pub fn count_ngrams(sentences: &[Vec<String>], order: usize) -> Result<CountTable> {
    if order == 0 {
        return Err(Error::config("n-gram order must be at least 1"));
    }
    let mut counts = vec![BTreeMap::new(); order];
    if sentences.is_empty() {
        return Ok(CountTable { counts });
    }
    for n in 1..=order {
        for s in sentences {
            let padded = pad(s, n);
            for gram in padded.windows(n) {
                let key: Vec<String> = gram.iter().map(|t| t.to_string()).collect();
                *counts[n - 1].entry(key).or_insert(0) += 1;
            }
        }
    }
    Ok(CountTable { counts })
}

/// Katz discount ratio `d_r = (r*/r − A)/(1 − A)` with `r* = (r+1)N_{r+1}/N_r`
/// and `A = (k+1)N_{k+1}/N_1`, for `1 ≤ r ≤ k`; 1 above `k` or wherever the
/// estimate is undefined or leaves `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discounts {
    pub k: u64,
    /// `ratios[r − 1]` for `r = 1..=k`.
    pub ratios: Vec<f64>,
    pub warnings: Vec<String>,
}

impl Discounts {
    pub fn ratio(&self, r: u64) -> f64 {
        if r == 0 || r > self.k {
            1.0
        } else {
            self.ratios[(r - 1) as usize]
        }
    }
}

/// Good-Turing adjusted count `r* = (r+1)·N_{r+1}/N_r`, when defined.
pub fn good_turing_count(r: u64, count_of_counts: &BTreeMap<u64, u64>) -> Option<f64> {
    let nr = *count_of_counts.get(&r)?;
    let nr1 = *count_of_counts.get(&(r + 1))?;
    Some((r + 1) as f64 * nr1 as f64 / nr as f64)
}

pub fn good_turing_discount(count_of_counts: &BTreeMap<u64, u64>, k: u64) -> Discounts {
    let n = |r: u64| count_of_counts.get(&r).copied().unwrap_or(0) as f64;
    let mut warnings = Vec::new();
    let a = if n(1) > 0.0 { (k + 1) as f64 * n(k + 1) / n(1) } else { f64::NAN };
    let ratios = (1..=k)
        .map(|r| {
            if n(r) == 0.0 {
                return 1.0;
            }
            let d = match good_turing_count(r, count_of_counts) {
                Some(rs) if a < 1.0 => (rs / r as f64 - a) / (1.0 - a),
                _ => f64::NAN,
            };
            if d > 0.0 && d <= 1.0 {
                d
            } else {
                warnings.push(format!("no Good-Turing discount for r={r} (N_r={}, N_r+1={})", n(r), n(r + 1)));
                1.0
            }
        })
        .collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    Discounts { k, ratios, warnings }
}

/// One ARPA line: log10 probability and optional log10 backoff weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entry {
    pub logprob: f64,
    pub backoff: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NgramLm {
    order: usize,
    mode: LmMode,
    /// Token strings; ids 0, 1, 2 are the start, end and unknown sentinels,
    /// the rest are the vocabulary in lexicographic order.
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    /// `entries[n − 1]` keyed by n-gram ids.
    entries: Vec<BTreeMap<Vec<u32>, Entry>>,
}

#[derive(Clone, Debug, Default)]
pub struct BuildReport {
    pub filtered_chars: usize,
    pub warnings: Vec<String>,
}

fn token_table(vocab: impl IntoIterator<Item = String>) -> (Vec<String>, HashMap<String, u32>) {
    let specials = [BOS, EOS, UNK];
    let rest: BTreeSet<String> = vocab.into_iter().filter(|t| !specials.contains(&t.as_str())).collect();
    let tokens: Vec<String> = specials.iter().map(|s| s.to_string()).chain(rest).collect();
    let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    (tokens, ids)
}

/// Word vocabulary: the `cap` most frequent words, ties broken lexicographically.
pub fn select_vocab(sentences: &[Vec<String>], cap: Option<usize>) -> Vec<String> {
    let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
    for s in sentences {
        for w in s {
            *freq.entry(w.as_str()).or_insert(0) += 1;
        }
    }
    let mut words: Vec<(&str, u64)> = freq.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    words.truncate(cap.unwrap_or(usize::MAX));
    words.into_iter().map(|(w, _)| w.to_string()).collect()
}

/// Character model over every symbol of `alphabet`.
pub fn build_char_lm<S: AsRef<str>>(corpus: &[S], order: usize, alphabet: &LabelAlphabet) -> Result<(NgramLm, BuildReport)> {
    let mut report = BuildReport::default();
    let sentences: Vec<Vec<String>> = corpus
        .iter()
        .map(|line| {
            let (tokens, filtered) = tokenize_char(line.as_ref(), alphabet);
            report.filtered_chars += filtered;
            tokens
        })
        .collect();
    let vocab = alphabet.symbols().iter().map(|&c| char_token(c));
    let lm = build_lm(&sentences, order, LmMode::Char, vocab, &mut report)?;
    Ok((lm, report))
}

/// Word model over the `vocab_cap` most frequent words.
pub fn build_word_lm<S: AsRef<str>>(corpus: &[S], order: usize, vocab_cap: Option<usize>) -> Result<(NgramLm, BuildReport)> {
    let mut report = BuildReport::default();
    let sentences: Vec<Vec<String>> = corpus.iter().map(|l| tokenize_word(l.as_ref())).collect();
    let vocab = select_vocab(&sentences, vocab_cap);
    let lm = build_lm(&sentences, order, LmMode::Word, vocab, &mut report)?;
    Ok((lm, report))
}

/// Katz backoff model over pre-tokenized sentences. Tokens outside `vocab`
/// are counted as the unknown sentinel.
pub fn build_lm(
    sentences: &[Vec<String>],
    order: usize,
    mode: LmMode,
    vocab: impl IntoIterator<Item = String>,
    report: &mut BuildReport,
) -> Result<NgramLm> {
    if order == 0 {
        return Err(Error::config("n-gram order must be at least 1"));
    }
    if sentences.is_empty() {
        return Err(Error::EmptyInput("language model corpus is empty".into()));
    }
    let (tokens, ids) = token_table(vocab);
    let mapped: Vec<Vec<String>> = sentences
        .iter()
        .map(|s| s.iter().map(|t| if ids.contains_key(t) && t != BOS && t != EOS { t.clone() } else { UNK.to_string() }).collect())
        .collect();
    let table = count_ngrams(&mapped, order)?;
    let mut lm = NgramLm { order, mode, tokens, ids, entries: vec![BTreeMap::new(); order] };
    // Every token except the start sentinel can be predicted.
    let predicted: Vec<u32> = (1..lm.tokens.len() as u32).collect();

    for n in 1..=order {
        let disc = good_turing_discount(&table.count_of_counts(n), KATZ_K);
        report.warnings.extend(disc.warnings.iter().map(|w| format!("order {n}: {w}")));
        let mut by_context: BTreeMap<Vec<u32>, Vec<(u32, u64)>> = BTreeMap::new();
        for (gram, &c) in &table.counts[n - 1] {
            let key: Vec<u32> = gram.iter().map(|t| lm.ids[t]).collect();
            by_context.entry(key[..n - 1].to_vec()).or_default().push((key[n - 1], c));
        }
        for (ctx, seen) in by_context {
            let total: u64 = seen.iter().map(|s| s.1).sum();
            let c = total as f64;
            let mut probs: Vec<(u32, f64)> = seen.iter().map(|&(w, r)| (w, disc.ratio(r) * r as f64 / c)).collect();
            let unseen = predicted.len() - seen.len();
            let seen_mass: f64 = probs.iter().map(|p| p.1).sum();
            let mut leftover = 1.0 - seen_mass;
            if unseen == 0 {
                probs.iter_mut().for_each(|p| p.1 /= seen_mass);
                leftover = 0.0;
            } else if leftover <= MASS_EPS {
                // Reserve mass for the unseen tokens as if one more event had occurred.
                let reserve = if n == 1 { unseen as f64 } else { 1.0 };
                probs.iter_mut().for_each(|p| p.1 = p.1 / seen_mass * c / (c + reserve));
                leftover = reserve / (c + reserve);
            }
            for &(w, p) in &probs {
                let mut key = ctx.clone();
                key.push(w);
                lm.entries[n - 1].insert(key, Entry { logprob: p.log10(), backoff: None });
            }
            if n == 1 {
                if unseen > 0 {
                    let share = (leftover / unseen as f64).log10();
                    for &w in &predicted {
                        lm.entries[0].entry(vec![w]).or_insert(Entry { logprob: share, backoff: None });
                    }
                }
                continue;
            }
            let bow = if unseen == 0 {
                1.0
            } else {
                let lower = &ctx[1..];
                let seen_lower: f64 = seen.iter().map(|&(w, _)| 10f64.powf(lm.logprob_ids(lower, w))).sum();
                let mut denom = 1.0 - seen_lower;
                if denom < 1e-6 {
                    let seen_ids: BTreeSet<u32> = seen.iter().map(|s| s.0).collect();
                    denom = predicted
                        .iter()
                        .filter(|w| !seen_ids.contains(w))
                        .map(|&w| 10f64.powf(lm.logprob_ids(lower, w)))
                        .sum();
                }
                leftover / denom
            };
            lm.entries[n - 2]
                .entry(ctx)
                .or_insert(Entry { logprob: f64::NEG_INFINITY, backoff: None })
                .backoff = Some(bow.log10());
        }
    }
    lm.entries[0].entry(vec![BOS_ID]).or_insert(Entry { logprob: f64::NEG_INFINITY, backoff: None });
    Ok(lm)
}

impl NgramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn mode(&self) -> LmMode {
        self.mode
    }

    /// All token strings indexed by id.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Id of a token; out-of-vocabulary tokens map to the unknown sentinel.
    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn bos_id(&self) -> u32 {
        BOS_ID
    }

    pub fn eos_id(&self) -> u32 {
        EOS_ID
    }

    pub fn unk_id(&self) -> u32 {
        UNK_ID
    }

    /// Stored entries of order `n`.
    pub fn entries(&self, n: usize) -> &BTreeMap<Vec<u32>, Entry> {
        &self.entries[n - 1]
    }

    pub fn entry(&self, gram: &[u32]) -> Option<&Entry> {
        self.entries.get(gram.len().checked_sub(1)?)?.get(gram)
    }

    /// Katz chain over ids; `context` is truncated to the last `order − 1`.
    pub fn logprob_ids(&self, context: &[u32], token: u32) -> f64 {
        let context = &context[context.len().saturating_sub(self.order - 1)..];
        let mut gram = context.to_vec();
        gram.push(token);
        if let Some(e) = self.entries[context.len()].get(&gram) {
            return e.logprob;
        }
        if context.is_empty() {
            return f64::NEG_INFINITY;
        }
        let bow = self.entries[context.len() - 1].get(context).and_then(|e| e.backoff).unwrap_or(0.0);
        bow + self.logprob_ids(&context[1..], token)
    }

    /// log10 P(token | context).
    pub fn logprob(&self, context: &[&str], token: &str) -> f64 {
        let ctx: Vec<u32> = context.iter().map(|t| self.id(t)).collect();
        self.logprob_ids(&ctx, self.id(token))
    }

    /// log10 probability of a whole sentence including its end sentinel.
    pub fn sentence_logprob(&self, tokens: &[&str]) -> f64 {
        let mut ctx: Vec<u32> = vec![BOS_ID; self.order - 1];
        let mut total = 0.0;
        for id in tokens.iter().map(|t| self.id(t)).chain([EOS_ID]) {
            total += self.logprob_ids(&ctx, id);
            ctx.push(id);
        }
        total
    }

    /// Predictable token ids: everything but the start sentinel.
    pub fn predicted_ids(&self) -> impl Iterator<Item = u32> {
        1..self.tokens.len() as u32
    }

    /// Fraction of tokens outside the vocabulary.
    pub fn oov_rate(&self, tokens: &[&str]) -> Result<f64> {
        if self.mode != LmMode::Word {
            return Err(Error::contract("OOV rate is defined for word models only"));
        }
        if tokens.is_empty() {
            return Ok(0.0);
        }
        let oov = tokens.iter().filter(|t| !self.contains(t) || **t == BOS || **t == UNK).count();
        Ok(oov as f64 / tokens.len() as f64)
    }

    pub fn to_arpa(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# inkscribe-lm mode={} order={}", self.mode.name(), self.order);
        out.push_str("\\data\\\n");
        for (n, e) in self.entries.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", n + 1, e.len());
        }
        for (n, entries) in self.entries.iter().enumerate() {
            let _ = write!(out, "\n\\{}-grams:\n", n + 1);
            for (gram, e) in entries {
                let words: Vec<&str> = gram.iter().map(|&id| self.token(id)).collect();
                let _ = write!(out, "{}\t{}", fmt_log(e.logprob), words.join(" "));
                if let Some(b) = e.backoff {
                    let _ = write!(out, "\t{}", fmt_log(b));
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn from_arpa(text: &str) -> Result<Self> {
        let mut mode = None;
        let mut declared: BTreeMap<usize, usize> = BTreeMap::new();
        let mut raw: Vec<Vec<(Vec<String>, Entry)>> = Vec::new();
        let mut section: Option<usize> = None;
        let mut ended = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            let bad = |msg: &str| Error::format(format!("ARPA line {}: {msg}", lineno + 1));
            if let Some(comment) = line.strip_prefix('#') {
                for field in comment.split_whitespace() {
                    if let Some(m) = field.strip_prefix("mode=") {
                        mode = Some(m.parse()?);
                    }
                }
                continue;
            }
            if line.is_empty() || ended {
                continue;
            }
            if line == "\\data\\" {
                continue;
            }
            if line == "\\end\\" {
                ended = true;
                continue;
            }
            if let Some(rest) = line.strip_prefix("ngram ") {
                let (n, c) = rest.split_once('=').ok_or_else(|| bad("malformed count"))?;
                let n: usize = n.trim().parse().map_err(|_| bad("malformed order"))?;
                let c: usize = c.trim().parse().map_err(|_| bad("malformed count"))?;
                declared.insert(n, c);
                continue;
            }
            if let Some(n) = line.strip_prefix('\\').and_then(|l| l.strip_suffix("-grams:")) {
                let n: usize = n.parse().map_err(|_| bad("malformed section header"))?;
                if n == 0 {
                    return Err(bad("order 0 section"));
                }
                if raw.len() < n {
                    raw.resize(n, Vec::new());
                }
                section = Some(n);
                continue;
            }
            let n = section.ok_or_else(|| bad("entry outside an n-gram section"))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != n + 1 && fields.len() != n + 2 {
                return Err(bad("wrong number of fields"));
            }
            let parse = |s: &str| -> Result<f64> {
                let v: f64 = s.parse().map_err(|_| bad("malformed number"))?;
                Ok(if v <= ARPA_NEG_INF { f64::NEG_INFINITY } else { v })
            };
            let logprob = parse(fields[0])?;
            let backoff = fields.get(n + 1).map(|s| parse(s)).transpose()?;
            raw[n - 1].push((fields[1..=n].iter().map(|s| s.to_string()).collect(), Entry { logprob, backoff }));
        }
        if raw.is_empty() || raw[0].is_empty() {
            return Err(Error::format("ARPA model has no unigrams"));
        }
        for (n, &c) in &declared {
            if raw.get(n - 1).map_or(0, Vec::len) != c {
                return Err(Error::format(format!("declared {c} {n}-grams, found a different number")));
            }
        }
        let mode = match mode {
            Some(m) => m,
            None if raw[0].iter().any(|(g, _)| g[0] == SPACE) => LmMode::Char,
            None => LmMode::Word,
        };
        let (tokens, ids) = token_table(raw[0].iter().map(|(g, _)| g[0].clone()));
        let mut entries = vec![BTreeMap::new(); raw.len()];
        for (n, list) in raw.into_iter().enumerate() {
            for (gram, e) in list {
                let key = gram
                    .iter()
                    .map(|t| ids.get(t).copied().ok_or_else(|| Error::format(format!("token {t:?} has no unigram"))))
                    .collect::<Result<Vec<u32>>>()?;
                entries[n].insert(key, e);
            }
        }
        Ok(NgramLm { order: entries.len(), mode, tokens, ids, entries })
    }
}

fn fmt_log(v: f64) -> String {
    if v == f64::NEG_INFINITY || v <= ARPA_NEG_INF {
        return format!("{ARPA_NEG_INF:.6}");
    }
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}
