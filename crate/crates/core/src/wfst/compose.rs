use std::collections::{HashMap, VecDeque};

use super::{Arc, Wfst, EPS, PHI};
use crate::error::{Error, Result};

/// Weighted composition `A ∘ B` with the three-state ε filter, followed by trim.
///
/// Filter state 0 allows every move; 1 is entered after `A` moved alone on an
/// ε output and only allows further such moves (or a real match); 2 mirrors 1
/// for `B` moving alone on an ε input. Simultaneous ε moves are allowed from 0
/// only. Each pair of paths is therefore realised once.
///
/// φ arcs of `B` (at most one per state) are failure transitions: a label of
/// `A` with no matching arc at `B`'s state is matched after following φ arcs,
/// whose weights are added, and the same holds for final weights. The result
/// contains no φ arcs.
pub fn compose(a: &Wfst, b: &Wfst) -> Result<Wfst> {
    if a.output_space() != b.input_space() {
        return Err(Error::contract(format!(
            "cannot compose: output labels {:?} do not match input labels {:?}",
            a.output_space(),
            b.input_space()
        )));
    }
    let mut out = Wfst::new(a.input_space(), b.output_space());
    out.set_output_names(b.output_names().to_vec());
    let (Some(sa), Some(sb)) = (a.start(), b.start()) else {
        return Ok(out);
    };

    // B's arcs grouped by input label for matching.
    let by_input: Vec<HashMap<u32, Vec<usize>>> = (0..b.num_states() as u32)
        .map(|q| {
            let mut m: HashMap<u32, Vec<usize>> = HashMap::new();
            for (i, arc) in b.arcs(q).iter().enumerate() {
                m.entry(arc.ilabel).or_default().push(i);
            }
            m
        })
        .collect();

    let mut phi: Vec<Option<(u32, f64)>> = vec![None; b.num_states()];
    for q in 0..b.num_states() {
        let mut fails = b.arcs(q as u32).iter().filter(|e| e.ilabel == PHI);
        phi[q] = fails.next().map(|e| (e.next, e.weight));
        if fails.next().is_some() {
            return Err(Error::contract(format!("state {q} has more than one failure arc")));
        }
    }
    // Follows failure arcs from `q` until `found` holds; returns the state and
    // the accumulated weight.
    let fail_to = |mut q: u32, found: &dyn Fn(u32) -> bool| -> Option<(u32, f64)> {
        let mut w = 0.0;
        for _ in 0..=b.num_states() {
            if found(q) {
                return Some((q, w));
            }
            let (next, pw) = phi[q as usize]?;
            w += pw;
            q = next;
        }
        None
    };

    // Filter states 1 and 2 only differ from 0 where the blocked side has ε moves.
    let a_eps_out: Vec<bool> = (0..a.num_states() as u32).map(|q| a.arcs(q).iter().any(|e| e.olabel == EPS)).collect();
    let b_eps_in: Vec<bool> = (0..b.num_states() as u32).map(|q| b.arcs(q).iter().any(|e| e.ilabel == EPS)).collect();
    let mut ids: HashMap<(u32, u32, u8), u32> = HashMap::new();
    let mut queue = VecDeque::new();
    let mut intern = |(qa, qb, f): (u32, u32, u8), out: &mut Wfst, queue: &mut VecDeque<(u32, u32, u8)>| -> u32 {
        let f = match f {
            1 if !b_eps_in[qb as usize] => 0,
            2 if !a_eps_out[qa as usize] => 0,
            f => f,
        };
        let key = (qa, qb, f);
        *ids.entry(key).or_insert_with(|| {
            queue.push_back(key);
            out.add_state()
        })
    };
    let start = intern((sa, sb, 0), &mut out, &mut queue);
    out.set_start(start)?;

    while let Some((qa, qb, f)) = queue.pop_front() {
        let src = intern((qa, qb, f), &mut out, &mut queue);
        let fin = match fail_to(qb, &|q| b.is_final(q)) {
            Some((q, w)) => a.final_weight(qa) + w + b.final_weight(q),
            None => f64::INFINITY,
        };
        if fin.is_finite() {
            out.set_final(src, fin)?;
        }
        for ea in a.arcs(qa) {
            if ea.olabel != EPS {
                let has = |q: u32| by_input[q as usize].contains_key(&ea.olabel);
                if let Some((qm, fw)) = fail_to(qb, &has) {
                    for &i in &by_input[qm as usize][&ea.olabel] {
                        let eb = &b.arcs(qm)[i];
                        let next = intern((ea.next, eb.next, 0), &mut out, &mut queue);
                        let weight = ea.weight + fw + eb.weight;
                        out.add_arc(src, Arc { ilabel: ea.ilabel, olabel: eb.olabel, weight, next })?;
                    }
                }
                continue;
            }
            // A moves alone; B stays.
            if f != 2 {
                let next = intern((ea.next, qb, 1), &mut out, &mut queue);
                out.add_arc(src, Arc { ilabel: ea.ilabel, olabel: EPS, weight: ea.weight, next })?;
            }
            // Both move on ε.
            if f == 0 {
                if let Some(list) = by_input[qb as usize].get(&EPS) {
                    for &i in list {
                        let eb = &b.arcs(qb)[i];
                        let next = intern((ea.next, eb.next, 0), &mut out, &mut queue);
                        out.add_arc(src, Arc { ilabel: ea.ilabel, olabel: eb.olabel, weight: ea.weight + eb.weight, next })?;
                    }
                }
            }
        }
        // B moves alone on an ε input; A stays.
        if f != 1 {
            if let Some(list) = by_input[qb as usize].get(&EPS) {
                for &i in list {
                    let eb = &b.arcs(qb)[i];
                    let next = intern((qa, eb.next, 2), &mut out, &mut queue);
                    out.add_arc(src, Arc { ilabel: EPS, olabel: eb.olabel, weight: eb.weight, next })?;
                }
            }
        }
    }
    let mut trimmed = out.trim();
    trimmed.sort_arcs();
    Ok(trimmed)
}
