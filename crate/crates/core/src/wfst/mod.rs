//! Weighted finite-state transducers over the tropical semiring, the H, L and
//! G builders, composition and Viterbi beam decoding.
//!
//! Labels are `u32` with 0 reserved for ε and `u32::MAX` for φ (failure)
//! arcs. Network class `k` (blank is class 0) is label `k + 1`; n-gram token
//! id `t` is label `t + 1`.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

mod build;
mod compose;
mod decode;

pub use build::{build_c, build_g, build_h, build_l, build_lm_graph, Lexicon};
pub use compose::compose;
pub use decode::{decode, emission_cost, estimate_priors, DecodeConfig, DecodeResult, SymbolPriors, EMISSION_CAP};

pub const EPS: u32 = 0;
/// Failure label: in composition, the right operand follows a φ arc only
/// when the current state has no arc for the wanted label.
pub const PHI: u32 = u32::MAX;
const MAGIC: &[u8; 4] = b"CSFT";
const VERSION: u32 = 1;
const NO_STATE: u32 = u32::MAX;

/// Label of network class `k`.
pub fn class_label(k: usize) -> u32 {
    k as u32 + 1
}

/// Label of n-gram token id `t`.
pub fn token_label(t: u32) -> u32 {
    t + 1
}

/// What the non-ε labels on one side of a transducer mean. Composition
/// requires the inner sides to agree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LabelSpace {
    /// Network classes, blank included; the payload is the class count.
    Classes(usize),
    /// Tokens of one n-gram model, identified by a fingerprint of its vocabulary.
    Tokens(u64),
    /// Free-form labels for hand-built automata.
    Generic(u64),
}

impl LabelSpace {
    fn tag(self) -> (u8, u64) {
        match self {
            LabelSpace::Classes(n) => (0, n as u64),
            LabelSpace::Tokens(f) => (1, f),
            LabelSpace::Generic(g) => (2, g),
        }
    }

    fn from_tag(tag: u8, v: u64) -> Result<Self> {
        match tag {
            0 => Ok(LabelSpace::Classes(v as usize)),
            1 => Ok(LabelSpace::Tokens(v)),
            2 => Ok(LabelSpace::Generic(v)),
            t => Err(Error::format(format!("unknown label space tag {t}"))),
        }
    }

    /// FNV-1a over a token list.
    pub fn tokens_of<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in tokens {
            for b in t.as_ref().bytes().chain([0xff]) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        LabelSpace::Tokens(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arc {
    pub ilabel: u32,
    pub olabel: u32,
    /// Tropical cost (negative natural log).
    pub weight: f64,
    pub next: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Wfst {
    start: u32,
    /// Final cost per state; `+∞` marks a non-final state.
    finals: Vec<f64>,
    arcs: Vec<Vec<Arc>>,
    input_space: LabelSpace,
    output_space: LabelSpace,
    /// Optional names for output labels, indexed by label.
    output_names: Vec<String>,
}

impl Wfst {
    pub fn new(input_space: LabelSpace, output_space: LabelSpace) -> Self {
        Wfst { start: NO_STATE, finals: Vec::new(), arcs: Vec::new(), input_space, output_space, output_names: Vec::new() }
    }

    pub fn add_state(&mut self) -> u32 {
        self.finals.push(f64::INFINITY);
        self.arcs.push(Vec::new());
        (self.finals.len() - 1) as u32
    }

    fn check_state(&self, s: u32) -> Result<()> {
        if (s as usize) < self.finals.len() {
            Ok(())
        } else {
            Err(Error::contract(format!("state {s} out of range ({} states)", self.finals.len())))
        }
    }

    pub fn set_start(&mut self, s: u32) -> Result<()> {
        self.check_state(s)?;
        self.start = s;
        Ok(())
    }

    pub fn set_final(&mut self, s: u32, weight: f64) -> Result<()> {
        self.check_state(s)?;
        if weight.is_nan() || weight == f64::NEG_INFINITY {
            return Err(Error::contract(format!("final weight {weight} on state {s}")));
        }
        self.finals[s as usize] = weight;
        Ok(())
    }

    pub fn add_arc(&mut self, from: u32, arc: Arc) -> Result<()> {
        self.check_state(from)?;
        self.check_state(arc.next)?;
        if !arc.weight.is_finite() {
            return Err(Error::contract(format!("arc weight {} from state {from}", arc.weight)));
        }
        self.arcs[from as usize].push(arc);
        Ok(())
    }

    pub fn start(&self) -> Option<u32> {
        (self.start != NO_STATE).then_some(self.start)
    }

    pub fn num_states(&self) -> usize {
        self.finals.len()
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs.iter().map(Vec::len).sum()
    }

    pub fn arcs(&self, s: u32) -> &[Arc] {
        &self.arcs[s as usize]
    }

    pub fn final_weight(&self, s: u32) -> f64 {
        self.finals[s as usize]
    }

    pub fn is_final(&self, s: u32) -> bool {
        self.finals[s as usize].is_finite()
    }

    pub fn input_space(&self) -> LabelSpace {
        self.input_space
    }

    pub fn output_space(&self) -> LabelSpace {
        self.output_space
    }

    pub fn output_names(&self) -> &[String] {
        &self.output_names
    }

    pub fn set_output_names(&mut self, names: Vec<String>) {
        self.output_names = names;
    }

    /// Name of an output label, if a table is attached.
    pub fn output_name(&self, label: u32) -> Option<&str> {
        self.output_names.get(label as usize).map(String::as_str)
    }

    /// True when no path leads from the start to a final state.
    pub fn is_empty(&self) -> bool {
        match self.start() {
            None => true,
            Some(s) => !self.accessible(s).iter().enumerate().any(|(q, &a)| a && self.finals[q].is_finite()),
        }
    }

    fn accessible(&self, from: u32) -> Vec<bool> {
        let mut seen = vec![false; self.num_states()];
        let mut queue = VecDeque::from([from]);
        seen[from as usize] = true;
        while let Some(s) = queue.pop_front() {
            for a in &self.arcs[s as usize] {
                if !seen[a.next as usize] {
                    seen[a.next as usize] = true;
                    queue.push_back(a.next);
                }
            }
        }
        seen
    }

    fn coaccessible(&self) -> Vec<bool> {
        let n = self.num_states();
        let mut rev: Vec<Vec<u32>> = vec![Vec::new(); n];
        for (s, arcs) in self.arcs.iter().enumerate() {
            for a in arcs {
                rev[a.next as usize].push(s as u32);
            }
        }
        let mut seen: Vec<bool> = self.finals.iter().map(|f| f.is_finite()).collect();
        let mut queue: VecDeque<u32> = (0..n as u32).filter(|&s| seen[s as usize]).collect();
        while let Some(s) = queue.pop_front() {
            for &p in &rev[s as usize] {
                if !seen[p as usize] {
                    seen[p as usize] = true;
                    queue.push_back(p);
                }
            }
        }
        seen
    }

    /// Structural checks from the type's contract.
    pub fn validate(&self) -> Result<()> {
        let start = self.start().ok_or_else(|| Error::contract("transducer has no start state"))?;
        let n = self.num_states() as u32;
        for (s, arcs) in self.arcs.iter().enumerate() {
            for a in arcs {
                if a.next >= n || !a.weight.is_finite() {
                    return Err(Error::contract(format!("bad arc from state {s}: {a:?}")));
                }
            }
        }
        if self.finals.iter().any(|f| f.is_nan() || *f == f64::NEG_INFINITY) {
            return Err(Error::contract("final weights must be finite or +inf"));
        }
        if !self.accessible(start).iter().enumerate().any(|(q, &a)| a && self.finals[q].is_finite()) {
            return Err(Error::contract("no final state is reachable from the start"));
        }
        Ok(())
    }

    /// Drops states that are not both accessible and coaccessible. State order
    /// is kept; an empty language leaves a lone non-final start state.
    pub fn trim(&self) -> Wfst {
        let mut out = Wfst::new(self.input_space, self.output_space);
        out.output_names = self.output_names.clone();
        let Some(start) = self.start() else {
            return out;
        };
        let acc = self.accessible(start);
        let coacc = self.coaccessible();
        let keep: Vec<bool> = acc.iter().zip(&coacc).map(|(a, c)| *a && *c).collect();
        if !keep[start as usize] {
            let s = out.add_state();
            out.start = s;
            return out;
        }
        let mut map = vec![NO_STATE; self.num_states()];
        for (s, &k) in keep.iter().enumerate() {
            if k {
                map[s] = out.add_state();
                out.finals[map[s] as usize] = self.finals[s];
            }
        }
        for (s, arcs) in self.arcs.iter().enumerate() {
            if !keep[s] {
                continue;
            }
            out.arcs[map[s] as usize] = arcs
                .iter()
                .filter(|a| keep[a.next as usize])
                .map(|a| Arc { next: map[a.next as usize], ..*a })
                .collect();
        }
        out.start = map[start as usize];
        out
    }

    /// Stable sort of every arc list by input label.
    pub fn sort_arcs(&mut self) {
        for arcs in &mut self.arcs {
            arcs.sort_by_key(|a| a.ilabel);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        for space in [self.input_space, self.output_space] {
            let (tag, v) = space.tag();
            w.u8(tag);
            w.u64(v);
        }
        w.u32(self.num_states() as u32);
        w.u32(self.start);
        w.f64s(&self.finals);
        w.u64(self.num_arcs() as u64);
        for (s, arcs) in self.arcs.iter().enumerate() {
            let mut sorted = arcs.clone();
            sorted.sort_by_key(|a| a.ilabel);
            for a in sorted {
                w.u32(s as u32);
                w.u32(a.ilabel);
                w.u32(a.olabel);
                w.f64(a.weight);
                w.u32(a.next);
            }
        }
        w.u32(self.output_names.len() as u32);
        for name in &self.output_names {
            w.str(name);
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open(buf, MAGIC)?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported graph version {version}")));
        }
        let mut spaces = [LabelSpace::Generic(0); 2];
        for s in &mut spaces {
            let tag = r.u8()?;
            *s = LabelSpace::from_tag(tag, r.u64()?)?;
        }
        let mut fst = Wfst::new(spaces[0], spaces[1]);
        let n = r.u32()?;
        let start = r.u32()?;
        let finals = r.f64s()?;
        if finals.len() != n as usize {
            return Err(Error::format("final weight count differs from state count"));
        }
        for _ in 0..n {
            fst.add_state();
        }
        for (s, f) in finals.into_iter().enumerate() {
            fst.set_final(s as u32, f).map_err(|e| Error::format(e.to_string()))?;
        }
        if start != NO_STATE {
            fst.set_start(start).map_err(|e| Error::format(e.to_string()))?;
        }
        let arcs = r.u64()?;
        if arcs.saturating_mul(24) > buf.len() as u64 {
            return Err(Error::format("arc count longer than container"));
        }
        let mut prev = (0u32, 0u32);
        for _ in 0..arcs {
            let src = r.u32()?;
            let arc = Arc { ilabel: r.u32()?, olabel: r.u32()?, weight: r.f64()?, next: r.u32()? };
            if (src, arc.ilabel) < prev {
                return Err(Error::format("arcs are not sorted by (state, input label)"));
            }
            prev = (src, arc.ilabel);
            fst.add_arc(src, arc).map_err(|e| Error::format(e.to_string()))?;
        }
        let names = r.u32()?;
        fst.output_names = (0..names).map(|_| r.str()).collect::<Result<_>>()?;
        r.expect_end()?;
        Ok(fst)
    }

    /// One line per arc (`src dst ilabel olabel weight`), then one line per
    /// final state (`state weight`). The start state is listed first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "start {}", self.start().map_or("none".to_string(), |s| s.to_string()));
        for (s, arcs) in self.arcs.iter().enumerate() {
            let mut sorted = arcs.clone();
            sorted.sort_by_key(|a| a.ilabel);
            for a in sorted {
                let _ = writeln!(out, "{} {} {} {} {}", s, a.next, a.ilabel, a.olabel, a.weight);
            }
        }
        for (s, f) in self.finals.iter().enumerate() {
            if f.is_finite() {
                let _ = writeln!(out, "{s} {f}");
            }
        }
        out
    }
}
