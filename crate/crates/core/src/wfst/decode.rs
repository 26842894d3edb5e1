use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::{LabelSpace, Wfst, EPS};
use crate::error::{Error, Result};
use crate::net::PosteriorSequence;

/// Cost charged for a zero posterior.
pub const EMISSION_CAP: f64 = 1e9;
/// Smallest blank prior.
const BLANK_FLOOR: f64 = 1e-6;
/// Re-expansions allowed per state within one ε-closure.
const VISIT_CAP: u32 = 64;
const NONE: u32 = u32::MAX;

/// Class priors `P(s)`, blank first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolPriors {
    pub prior: Vec<f64>,
}

impl SymbolPriors {
    pub fn uniform(num_classes: usize) -> Self {
        SymbolPriors { prior: vec![1.0 / num_classes as f64; num_classes] }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.prior.iter().sum();
        if self.prior.is_empty() || self.prior.iter().any(|p| !(*p > 0.0) || !p.is_finite()) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::contract("priors must be positive and sum to 1"));
        }
        Ok(())
    }
}

/// Priors from training transcripts (class sequences without blanks).
///
/// The blank takes the expected share of blank frames,
/// `b = max(1e-6, 1 − labels / frames)`; real classes share `1 − b` in
/// proportion to their add-one smoothed counts.
pub fn estimate_priors(transcripts: &[Vec<usize>], num_classes: usize, total_frames: usize) -> Result<SymbolPriors> {
    if transcripts.is_empty() {
        return Err(Error::config("no transcripts to estimate priors from"));
    }
    if total_frames == 0 {
        return Err(Error::config("prior estimation needs a positive frame count"));
    }
    if num_classes < 2 {
        return Err(Error::contract("need at least one class besides the blank"));
    }
    let mut counts = vec![0usize; num_classes];
    for t in transcripts {
        for &k in t {
            if k == 0 || k >= num_classes {
                return Err(Error::contract(format!("transcript class {k} outside 1..{num_classes}")));
            }
            counts[k] += 1;
        }
    }
    let labels: usize = counts.iter().sum();
    let blank = (1.0 - labels as f64 / total_frames as f64).max(BLANK_FLOOR);
    let denom = (labels + num_classes - 1) as f64;
    let mut prior = vec![blank; num_classes];
    for k in 1..num_classes {
        prior[k] = (1.0 - blank) * (counts[k] + 1) as f64 / denom;
    }
    Ok(SymbolPriors { prior })
}

/// `−ln P(s | x_t) + α ln P(s)`, capped at [`EMISSION_CAP`].
pub fn emission_cost(row: &[f64], class: usize, priors: &SymbolPriors, alpha: f64) -> f64 {
    let p = row[class];
    if !(p > 0.0) {
        return EMISSION_CAP;
    }
    (-p.ln() + alpha * priors.prior[class].ln()).min(EMISSION_CAP)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Prior scale α.
    pub alpha: f64,
    /// Cost width kept behind the best token; may be infinite.
    pub beam: f64,
    /// Most tokens kept per frame.
    pub max_active: usize,
    /// Multiplier on graph weights.
    pub lm_weight: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { alpha: 0.2, beam: 16.0, max_active: 4000, lm_weight: 1.0 }
    }
}

impl DecodeConfig {
    /// Search without pruning.
    pub fn exhaustive(alpha: f64) -> Self {
        DecodeConfig { alpha, beam: f64::INFINITY, max_active: usize::MAX, lm_weight: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha must be finite and non-negative"));
        }
        if !(self.beam > 0.0) {
            return Err(Error::config("beam must be positive"));
        }
        if self.max_active == 0 {
            return Err(Error::config("max_active must be positive"));
        }
        if !(self.lm_weight >= 0.0 && self.lm_weight.is_finite()) {
            return Err(Error::config("lm_weight must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Non-ε output labels along the best path.
    pub olabels: Vec<u32>,
    pub cost: f64,
    /// False when no final state survived and the best partial path is returned.
    pub reached_final: bool,
}

impl DecodeResult {
    /// Output labels rendered through the graph's name table.
    pub fn tokens<'a>(&self, graph: &'a Wfst) -> Vec<&'a str> {
        self.olabels.iter().map(|&l| graph.output_name(l).unwrap_or("<?>")).collect()
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, u32);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reverse for a min-heap; lower state first on ties.
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dense token storage for one frame.
struct Frame {
    cost: Vec<f64>,
    trace: Vec<u32>,
    pending: Vec<u32>,
    active: Vec<u32>,
}

impl Frame {
    fn new(n: usize) -> Self {
        Frame { cost: vec![f64::INFINITY; n], trace: vec![NONE; n], pending: vec![EPS; n], active: Vec::new() }
    }

    fn clear(&mut self) {
        for &s in &self.active {
            self.cost[s as usize] = f64::INFINITY;
        }
        self.active.clear();
    }
}

struct Search<'a> {
    graph: &'a Wfst,
    lm_weight: f64,
    /// Output history: (previous entry, label).
    arena: Vec<(u32, u32)>,
    visits: Vec<u32>,
    capped: bool,
}

impl Search<'_> {
    /// Moves `to` onto `next` from the token at `from` through an arc with
    /// output `olabel`, if that is cheaper.
    fn relax(&mut self, frame: &mut Frame, (trace, pending): (u32, u32), olabel: u32, cost: f64, to: u32) -> bool {
        let t = to as usize;
        if !(cost < frame.cost[t]) {
            return false;
        }
        if frame.cost[t] == f64::INFINITY {
            frame.active.push(to);
        }
        frame.cost[t] = cost;
        let (trace, pending) = match (pending, olabel) {
            (p, EPS) => (trace, p),
            (EPS, o) => (trace, o),
            (p, o) => {
                self.arena.push((trace, p));
                ((self.arena.len() - 1) as u32, o)
            }
        };
        frame.trace[t] = trace;
        frame.pending[t] = pending;
        true
    }

    /// Shortest-distance closure over ε-input arcs within a frame.
    fn close(&mut self, frame: &mut Frame) {
        let mut heap: BinaryHeap<HeapItem> = frame.active.iter().map(|&s| HeapItem(frame.cost[s as usize], s)).collect();
        let mut touched = Vec::new();
        while let Some(HeapItem(c, s)) = heap.pop() {
            let si = s as usize;
            if c > frame.cost[si] {
                continue;
            }
            if self.visits[si] == 0 {
                touched.push(s);
            }
            self.visits[si] += 1;
            if self.visits[si] > VISIT_CAP {
                self.capped = true;
                continue;
            }
            let from = (frame.trace[si], frame.pending[si]);
            for a in self.graph.arcs(s) {
                if a.ilabel != EPS {
                    continue;
                }
                let nc = c + self.lm_weight * a.weight;
                if self.relax(frame, from, a.olabel, nc, a.next) {
                    heap.push(HeapItem(nc, a.next));
                }
            }
        }
        for s in touched {
            self.visits[s as usize] = 0;
        }
    }

    /// Beam and histogram pruning, then commits pending outputs.
    fn prune(&mut self, frame: &mut Frame, beam: f64, max_active: usize) {
        let best = frame.active.iter().map(|&s| frame.cost[s as usize]).fold(f64::INFINITY, f64::min);
        let limit = best + beam;
        let mut keep: Vec<u32> = Vec::with_capacity(frame.active.len());
        for &s in &frame.active {
            if frame.cost[s as usize] <= limit {
                keep.push(s);
            } else {
                frame.cost[s as usize] = f64::INFINITY;
            }
        }
        if keep.len() > max_active {
            keep.sort_by(|&a, &b| frame.cost[a as usize].total_cmp(&frame.cost[b as usize]).then(a.cmp(&b)));
            for &s in &keep[max_active..] {
                frame.cost[s as usize] = f64::INFINITY;
            }
            keep.truncate(max_active);
        }
        keep.sort_unstable();
        for &s in &keep {
            let si = s as usize;
            if frame.pending[si] != EPS {
                self.arena.push((frame.trace[si], frame.pending[si]));
                frame.trace[si] = (self.arena.len() - 1) as u32;
                frame.pending[si] = EPS;
            }
        }
        frame.active = keep;
    }

    fn backtrace(&self, mut trace: u32, pending: u32) -> Vec<u32> {
        let mut out = Vec::new();
        if pending != EPS {
            out.push(pending);
        }
        while trace != NONE {
            let (prev, label) = self.arena[trace as usize];
            out.push(label);
            trace = prev;
        }
        out.reverse();
        out
    }
}

/// Time-synchronous Viterbi beam search of `graph` over `posteriors`.
///
/// Arcs with input label `k + 1` consume a frame at the emission cost of
/// class `k`; graph weights are scaled by `lm_weight`. At equal cost the
/// lower state index wins.
pub fn decode(graph: &Wfst, posteriors: &PosteriorSequence, priors: &SymbolPriors, cfg: &DecodeConfig) -> Result<DecodeResult> {
    cfg.validate()?;
    let classes = posteriors.num_classes();
    let Some(start) = graph.start().filter(|_| graph.num_states() > 0) else {
        return Err(Error::config("decoding graph is empty"));
    };
    if graph.input_space() != LabelSpace::Classes(classes) {
        return Err(Error::contract(format!(
            "graph input labels {:?} do not match {classes} posterior classes",
            graph.input_space()
        )));
    }
    if (0..graph.num_states() as u32).any(|q| graph.arcs(q).iter().any(|a| a.ilabel as usize > classes)) {
        return Err(Error::contract("graph has input labels outside the posterior classes"));
    }
    if priors.prior.len() != classes {
        return Err(Error::contract(format!("{} priors for {classes} classes", priors.prior.len())));
    }
    if posteriors.is_empty() {
        return Err(Error::contract("cannot decode an empty posterior sequence"));
    }
    let n = graph.num_states();
    let mut search = Search { graph, lm_weight: cfg.lm_weight, arena: Vec::new(), visits: vec![0; n], capped: false };
    let mut cur = Frame::new(n);
    let mut next = Frame::new(n);
    cur.cost[start as usize] = 0.0;
    cur.active.push(start);
    search.close(&mut cur);
    search.prune(&mut cur, cfg.beam, cfg.max_active);

    let mut emit = vec![0.0; classes];
    let mut stalled = false;
    for t in 0..posteriors.len() {
        let row = posteriors.row(t);
        for (k, e) in emit.iter_mut().enumerate() {
            *e = emission_cost(row, k, priors, cfg.alpha);
        }
        for &s in &cur.active {
            let si = s as usize;
            let c = cur.cost[si];
            let from = (cur.trace[si], cur.pending[si]);
            for a in graph.arcs(s) {
                if a.ilabel == EPS {
                    continue;
                }
                let nc = c + emit[(a.ilabel - 1) as usize] + cfg.lm_weight * a.weight;
                search.relax(&mut next, from, a.olabel, nc, a.next);
            }
        }
        if next.active.is_empty() {
            log::warn!("no token survived frame {t}; returning the best partial path");
            stalled = true;
            break;
        }
        search.close(&mut next);
        search.prune(&mut next, cfg.beam, cfg.max_active);
        std::mem::swap(&mut cur, &mut next);
        next.clear();
    }
    if search.capped {
        log::warn!("epsilon closure hit its visit cap; costs may be approximate");
    }

    let mut best: Option<(f64, u32)> = None;
    for &s in cur.active.iter().filter(|_| !stalled) {
        let total = cur.cost[s as usize] + cfg.lm_weight * graph.final_weight(s);
        if total.is_finite() && best.is_none_or(|(b, _)| total < b) {
            best = Some((total, s));
        }
    }
    let reached_final = best.is_some();
    let (cost, s) = match best {
        Some(b) => b,
        None => {
            log::warn!("no final state reached; returning the best partial path");
            let mut partial: Option<(f64, u32)> = None;
            for &s in &cur.active {
                let c = cur.cost[s as usize];
                if partial.is_none_or(|(b, _)| c < b) {
                    partial = Some((c, s));
                }
            }
            partial.ok_or_else(|| Error::config("decoding graph has no path from its start"))?
        }
    };
    let si = s as usize;
    Ok(DecodeResult { olabels: search.backtrace(cur.trace[si], cur.pending[si]), cost, reached_final })
}
