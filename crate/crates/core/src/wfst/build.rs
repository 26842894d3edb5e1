use std::collections::HashMap;
use std::fmt::Write as _;
use std::f64::consts::LN_10;

use super::{class_label, compose, token_label, Arc, LabelSpace, Wfst, EPS, PHI};
use crate::error::{Error, Result};
use crate::lm::{char_token, LmMode, NgramLm};
use crate::net::LabelAlphabet;

/// Entries at or below this log10 value are treated as impossible.
const LOG10_FLOOR: f64 = -98.0;

fn arc(ilabel: u32, olabel: u32, weight: f64, next: u32) -> Arc {
    Arc { ilabel, olabel, weight, next }
}

/// Output-name table for a token side: `<eps>` then every token.
fn token_names(tokens: &[String]) -> Vec<String> {
    std::iter::once("<eps>".to_string()).chain(tokens.iter().cloned()).collect()
}

/// Symbol topology. State `k + 1` means "the previous frame emitted class
/// `k`": it loops on `k` with ε output and leaves on any other class, which
/// it outputs. The start state outputs the first class. Every state is final,
/// so frame strings map to their run-collapsed strings (blanks kept).
pub fn build_h(alphabet: &LabelAlphabet) -> Wfst {
    let k = alphabet.num_classes();
    let space = LabelSpace::Classes(k);
    let mut h = Wfst::new(space, space);
    let start = h.add_state();
    let states: Vec<u32> = (0..k).map(|_| h.add_state()).collect();
    h.set_start(start).expect("start exists");
    for s in 0..=k as u32 {
        h.set_final(s, 0.0).expect("state exists");
    }
    for (c, &q) in states.iter().enumerate() {
        h.add_arc(start, arc(class_label(c), class_label(c), 0.0, q)).expect("valid arc");
    }
    for (c, &q) in states.iter().enumerate() {
        for (d, &r) in states.iter().enumerate() {
            let out = if c == d { EPS } else { class_label(d) };
            h.add_arc(q, arc(class_label(d), out, 0.0, r)).expect("valid arc");
        }
    }
    h
}

/// Word spellings, one `word TAB spelling` line each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    entries: Vec<(String, String)>,
}

impl Lexicon {
    pub fn new(entries: Vec<(String, String)>) -> Self {
        Lexicon { entries }
    }

    /// Every word spelled as itself.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        Lexicon { entries: words.iter().map(|w| (w.as_ref().to_string(), w.as_ref().to_string())).collect() }
    }

    /// Parses lexicon text. A line without a tab spells the word as itself;
    /// blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, spelling) = line.split_once('\t').unwrap_or((line, line));
            if word.is_empty() || spelling.is_empty() {
                return Err(Error::format(format!("lexicon line {}: empty word or spelling", n + 1)));
            }
            entries.push((word.to_string(), spelling.to_string()));
        }
        Ok(Lexicon { entries })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (w, s) in &self.entries {
            let _ = writeln!(out, "{w}\t{s}");
        }
        out
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Lexicon transducer from collapsed class strings to word tokens.
///
/// Each word is a chain emitting the word on its first character. Between
/// distinct adjacent characters a blank is optional; between repeated ones
/// it is compulsory. Blanks may surround words, and words are joined by the
/// space class when the alphabet has one. `tokens` is the word model's token
/// table; words missing from it are emitted as `<unk>`.
pub fn build_l(lexicon: &Lexicon, alphabet: &LabelAlphabet, tokens: &[String]) -> Result<Wfst> {
    let ids: HashMap<&str, u32> = tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i as u32)).collect();
    let unk = *ids.get(crate::lm::UNK).ok_or_else(|| Error::contract("token table has no <unk>"))?;
    let mut l = Wfst::new(LabelSpace::Classes(alphabet.num_classes()), LabelSpace::tokens_of(tokens));
    l.set_output_names(token_names(tokens));
    let word_start = l.add_state();
    let word_end = l.add_state();
    l.set_start(word_start)?;
    let blank = class_label(alphabet.blank_index());
    if lexicon.is_empty() {
        log::warn!("empty lexicon: the lexicon transducer accepts nothing");
        return Ok(l);
    }
    l.set_final(word_start, 0.0)?;
    l.set_final(word_end, 0.0)?;
    l.add_arc(word_start, arc(blank, EPS, 0.0, word_start))?;
    l.add_arc(word_end, arc(blank, EPS, 0.0, word_end))?;
    if let Some(space) = alphabet.class_of(' ') {
        l.add_arc(word_end, arc(class_label(space), EPS, 0.0, word_start))?;
    }
    let mut missing = 0usize;
    for (word, spelling) in lexicon.entries() {
        let classes: Vec<u32> = spelling
            .chars()
            .map(|c| {
                alphabet.class_of(c).map(class_label).ok_or_else(|| {
                    Error::config(format!("lexicon word {word:?} uses character {c:?} outside the alphabet"))
                })
            })
            .collect::<Result<_>>()?;
        let out = match ids.get(word.as_str()) {
            Some(&t) => token_label(t),
            None => {
                missing += 1;
                token_label(unk)
            }
        };
        let n = classes.len();
        let mut prev = word_start;
        for (i, &c) in classes.iter().enumerate() {
            let next = if i + 1 == n { word_end } else { l.add_state() };
            if i == 0 {
                l.add_arc(prev, arc(c, out, 0.0, next))?;
            } else {
                let mid = l.add_state();
                l.add_arc(prev, arc(blank, EPS, 0.0, mid))?;
                l.add_arc(mid, arc(c, EPS, 0.0, next))?;
                if classes[i - 1] != c {
                    l.add_arc(prev, arc(c, EPS, 0.0, next))?;
                }
            }
            prev = next;
        }
    }
    if missing > 0 {
        log::warn!("{missing} lexicon words are outside the word model vocabulary and map to <unk>");
    }
    l.sort_arcs();
    Ok(l)
}

/// Character-side counterpart of L for H∘G: deletes blanks and maps every
/// other class to its character token.
pub fn build_c(alphabet: &LabelAlphabet, tokens: &[String]) -> Result<Wfst> {
    let ids: HashMap<&str, u32> = tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i as u32)).collect();
    let unk = *ids.get(crate::lm::UNK).ok_or_else(|| Error::contract("token table has no <unk>"))?;
    let mut c = Wfst::new(LabelSpace::Classes(alphabet.num_classes()), LabelSpace::tokens_of(tokens));
    c.set_output_names(token_names(tokens));
    let s = c.add_state();
    c.set_start(s)?;
    c.set_final(s, 0.0)?;
    c.add_arc(s, arc(class_label(alphabet.blank_index()), EPS, 0.0, s))?;
    for (k, &ch) in alphabet.symbols().iter().enumerate() {
        let t = ids.get(char_token(ch).as_str()).copied().unwrap_or(unk);
        c.add_arc(s, arc(class_label(k + 1), token_label(t), 0.0, s))?;
    }
    Ok(c)
}

/// Backoff automaton of an n-gram model: one state per stored context,
/// token arcs weighted `−ln P(w | h)`, and a φ arc to the next shorter
/// context weighted `−ln bow(h)`, taken only for tokens not stored at `h`.
/// Decoding starts in the all-`<s>` context; final weights come from stored
/// `</s>` entries.
pub fn build_g(lm: &NgramLm) -> Result<Wfst> {
    let order = lm.order();
    let space = LabelSpace::tokens_of(lm.tokens());
    let mut g = Wfst::new(space, space);
    g.set_output_names(token_names(lm.tokens()));

    let mut states: HashMap<Vec<u32>, u32> = HashMap::new();
    let mut contexts: Vec<Vec<u32>> = vec![Vec::new()];
    for n in 1..=order {
        for (gram, e) in lm.entries(n) {
            if e.logprob > LOG10_FLOOR && n >= 2 {
                contexts.push(gram[..n - 1].to_vec());
            }
            if e.backoff.is_some() && n < order {
                contexts.push(gram.clone());
            }
        }
    }
    contexts.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
    contexts.dedup();
    for ctx in contexts {
        let s = g.add_state();
        states.insert(ctx, s);
    }

    let longest = |mut h: Vec<u32>| -> u32 {
        if h.len() > order - 1 {
            h.drain(..h.len() - (order - 1));
        }
        loop {
            if let Some(&s) = states.get(&h) {
                return s;
            }
            h.remove(0);
        }
    };

    let bos = lm.bos_id();
    let eos = lm.eos_id();
    for n in 1..=order {
        for (gram, e) in lm.entries(n) {
            let (ctx, w) = (&gram[..n - 1], gram[n - 1]);
            if e.logprob <= LOG10_FLOOR || w == bos {
                continue;
            }
            let src = states[ctx];
            let cost = -e.logprob * LN_10;
            if w == eos {
                g.set_final(src, cost)?;
            } else {
                let mut next = ctx.to_vec();
                next.push(w);
                g.add_arc(src, arc(token_label(w), token_label(w), cost, longest(next)))?;
            }
        }
    }
    let mut backoff: Vec<(Vec<u32>, u32)> = states.iter().filter(|(h, _)| !h.is_empty()).map(|(h, &s)| (h.clone(), s)).collect();
    backoff.sort_by_key(|b| b.1);
    for (h, s) in backoff {
        let bow = lm.entry(&h).and_then(|e| e.backoff).unwrap_or(0.0);
        let lower = longest(h[1..].to_vec());
        g.add_arc(s, arc(PHI, PHI, -bow * LN_10, lower))?;
    }
    g.set_start(longest(vec![bos; order - 1]))?;
    g.sort_arcs();
    g.validate()?;
    Ok(g)
}

/// The decoding graph for a model: H∘L∘G for word models (the lexicon is
/// required) and H∘C∘G for character models.
pub fn build_lm_graph(lm: &NgramLm, alphabet: &LabelAlphabet, lexicon: Option<&Lexicon>) -> Result<Wfst> {
    let g = build_g(lm)?;
    let inner = match lm.mode() {
        LmMode::Word => {
            let lexicon = lexicon.ok_or_else(|| Error::config("a word model needs a lexicon"))?;
            build_l(lexicon, alphabet, lm.tokens())?
        }
        LmMode::Char => build_c(alphabet, lm.tokens())?,
    };
    let lg = compose(&inner, &g)?;
    let hlg = compose(&build_h(alphabet), &lg)?;
    log::info!("decoding graph: {} states, {} arcs", hlg.num_states(), hlg.num_arcs());
    hlg.validate()?;
    Ok(hlg)
}
