//! Acceptance checks. Prints one line per criterion and exits non-zero if any
//! fails. `ACCEPTANCE_ONLY=4,5` restricts the run to the listed criteria.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use inkscribe::ctc::{best_path, best_path_decode, ctc_loss_grad, merge_beta};
use inkscribe::experiment::{run_experiment, ExperimentTable};
use inkscribe::features::FeatureConfig;
use inkscribe::ink::{default_glyph_bank, render_line, synth_corpus, write_ink_file, JitterConfig, SynthConfig};
use inkscribe::lm::{build_char_lm, build_word_lm, tokenize_char, NgramLm, BOS, EOS, UNK};
use inkscribe::net::{bptt_gradients, forward_pass, train, TrainSample};
use inkscribe::pipeline::{prepare_lines, samples};
use inkscribe::preprocess::{binarize, preprocess_line, rotate, shear_horizontal, PreprocessConfig};
use inkscribe::textgen::TextGrammar;
use inkscribe::wfst::{
    build_l, class_label, decode, estimate_priors, token_label, Arc, DecodeConfig, LabelSpace, Lexicon, SymbolPriors, EPS,
};
use inkscribe::{DblstmModel, Error, FeaturePipeline, FeatureSequence, LabelAlphabet, PosteriorSequence, Topology, TrainConfig, Wfst};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CTC_TOL: f64 = 1e-9;
const CTC_BUDGET_S: f64 = 60.0;
const FD_EPS: f64 = 1e-5;
const FD_REL: f64 = 1e-4;
const FD_ABS: f64 = 1e-8;
const FD_BUDGET_S: f64 = 120.0;
const TOY_CER: f64 = 0.05;
const TOY_BUDGET_S: f64 = 1800.0;
const TREND_GAP: f64 = 2.0;
const DECODE_TOL: f64 = 1e-9;
const LM_TOL: f64 = 1e-9;
const LM_SUM_TOL: f64 = 1e-6;
const ROTATION_TOL: f64 = 1.0;
const SLANT_TOL: f64 = 2.0;
const RECOVERY_SHARE: f64 = 0.95;

type Outcome = Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let only: Option<BTreeSet<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [Criterion; 10] = [
        (1, "CTC probability equals path enumeration", ctc_oracle),
        (2, "BPTT gradients match finite differences", gradient_check),
        (3, "beta identities and best-path round trips", beta_checks),
        (4, "toy corpus convergence and LR halving", toy_convergence),
        (5, "decoder ordering on the English-like corpus", trend),
        (6, "exhaustive decode equals Viterbi DP", decode_optimality),
        (7, "lexicon blank laws", lexicon_laws),
        (8, "n-gram model equals Katz oracle", lm_oracle),
        (9, "experiment reruns are identical", determinism),
        (10, "baseline and slant recovery", preprocess_recovery),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {status} {name}: {detail} [{secs:.1}s]");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Drop repeats, then blanks.
fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != 0 {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

fn all_sequences(symbols: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for k in 1..=symbols {
                let mut t: Vec<usize> = s.clone();
                t.push(k);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn ctc_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut cases, mut infeasible, mut worst) = (0usize, 0usize, 0.0f64);
    for frames in 1..=6 {
        for classes in [2usize, 3] {
            for labels in all_sequences(classes - 1, 3) {
                for _ in 0..20 {
                    let logits: Vec<f64> = (0..frames * classes).map(|_| rng.random_range(-3.0..3.0)).collect();
                    let probs: Vec<Vec<f64>> = logits.chunks(classes).map(softmax).collect();
                    let mut brute = 0.0;
                    let mut path = vec![0usize; frames];
                    loop {
                        if collapse(&path) == labels {
                            brute += path.iter().enumerate().map(|(t, &k)| probs[t][k]).product::<f64>();
                        }
                        let mut i = 0;
                        while i < frames && path[i] == classes - 1 {
                            path[i] = 0;
                            i += 1;
                        }
                        if i == frames {
                            break;
                        }
                        path[i] += 1;
                    }
                    let p = match ctc_loss_grad(&logits, frames, classes, &labels) {
                        Ok(o) => (-o.loss).exp(),
                        Err(Error::InfeasibleAlignment { .. }) => {
                            infeasible += 1;
                            if brute != 0.0 {
                                return Err(format!("{labels:?} in {frames} frames rejected but has mass {brute}"));
                            }
                            0.0
                        }
                        Err(e) => return Err(err(e)),
                    };
                    worst = worst.max((p - brute).abs());
                    cases += 1;
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(
        worst <= CTC_TOL && secs <= CTC_BUDGET_S,
        format!("{cases} tables ({infeasible} infeasible), max |P - brute| = {worst:.2e} (tol {CTC_TOL:e})"),
    )
}

fn gradient_check() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (frames, dim) = (4usize, 3usize);
    let (mut checked, mut worst_abs, mut worst_rel) = (0usize, 0.0f64, 0.0f64);
    for seed in 0..6 {
        let alphabet = LabelAlphabet::new(['a', 'b']).map_err(err)?;
        let model = DblstmModel::init_with_scale(Topology { input_dim: dim, cells: vec![2] }, alphabet, seed, 0.5)
            .map_err(err)?;
        let x = FeatureSequence::new((0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect(), dim).map_err(err)?;
        let len = rng.random_range(1..=2);
        let labels: Vec<usize> = (0..len).map(|_| rng.random_range(1..=2)).collect();
        let loss = |m: &DblstmModel| -> Result<f64, String> {
            let pass = forward_pass(m, x.data(), frames).map_err(err)?;
            Ok(ctc_loss_grad(pass.logits(), frames, 3, &labels).map_err(err)?.loss)
        };
        let pass = forward_pass(&model, x.data(), frames).map_err(err)?;
        let out = ctc_loss_grad(pass.logits(), frames, 3, &labels).map_err(err)?;
        let analytic = bptt_gradients(&model, &x, &out.grad).map_err(err)?;
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = model.clone();
            plus.params_mut()[i] += FD_EPS;
            let mut minus = model.clone();
            minus.params_mut()[i] -= FD_EPS;
            let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * FD_EPS);
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            if diff > FD_ABS.max(FD_REL * scale) {
                return Err(format!("model {seed} param {i}: analytic {a:e} vs numeric {numeric:e}"));
            }
            worst_abs = worst_abs.max(diff);
            if scale > 0.0 {
                worst_rel = worst_rel.max(diff / scale);
            }
            checked += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(
        secs <= FD_BUDGET_S,
        format!(
            "6 models, {checked} parameters, max |analytic - numeric| = {worst_abs:.2e}, max relative {worst_rel:.2e} (tol {FD_REL:e}, floor {FD_ABS:e})"
        ),
    )
}

fn beta_checks() -> Outcome {
    // blank 0, a 1, b 2
    let parse = |s: &str| -> Vec<usize> { s.chars().map(|c| match c { '-' => 0, 'a' => 1, _ => 2 }).collect() };
    for p in ["a--aab", "--a-ab", "a-abbb", "aa-aab"] {
        if merge_beta(&parse(p)) != vec![1, 1, 2] {
            return Err(format!("beta({p}) != aab"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for trial in 0..1000 {
        let len = rng.random_range(0..8);
        let labels: Vec<usize> = (0..len).map(|_| rng.random_range(1..5)).collect();
        let mut path = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            let forced = usize::from(i > 0 && labels[i - 1] == l);
            path.extend(std::iter::repeat_n(0, rng.random_range(forced..3)));
            for _ in 0..rng.random_range(1..4) {
                path.push(l);
            }
        }
        path.extend(std::iter::repeat_n(0, rng.random_range(0..3)));
        if path.is_empty() {
            path.push(0);
        }
        if merge_beta(&path) != labels {
            return Err(format!("trial {trial}: beta({path:?}) != {labels:?}"));
        }
        let rows: Vec<f64> =
            path.iter().flat_map(|&k| (0..5).map(move |c| if c == k { 0.8 } else { 0.05 })).collect();
        let post = PosteriorSequence::new(rows, 5).map_err(err)?;
        if best_path(&post) != path || best_path_decode(&post) != labels {
            return Err(format!("trial {trial}: best path of {path:?} is wrong"));
        }
    }
    Ok("4 worked identities, 1000 random round trips".into())
}

fn train_toy(cfg: &TrainConfig, train_set: &[TrainSample], heldout: &[TrainSample], input_dim: usize) -> Result<(f64, usize), String> {
    let alphabet = LabelAlphabet::new(['a', 'b', 'c']).map_err(err)?;
    let model = DblstmModel::init(Topology::small(input_dim), alphabet, 1).map_err(err)?;
    let out = train(model, train_set, heldout, cfg, |_| {}).map_err(err)?;
    let last = out.log.last().and_then(|r| r.heldout_cer).ok_or("no epochs ran")?;
    Ok((last, out.log.len()))
}

fn toy_convergence() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let texts: Vec<String> = (0..250)
        .map(|_| (0..rng.random_range(3..=8)).map(|_| ['a', 'b', 'c'][rng.random_range(0..3)]).collect())
        .collect();
    let ink = synth_corpus(&texts, &default_glyph_bank(), 3, &JitterConfig::default(), &SynthConfig::default()).map_err(err)?;
    let images = prepare_lines(&ink, &PreprocessConfig::default()).map_err(err)?;
    let (features, _) = FeaturePipeline::fit(&images[..200], &FeatureConfig::default()).map_err(err)?;
    let all = samples(&images, &texts, &features).map_err(err)?;
    let (train_set, heldout) = all.split_at(200);
    let halved = TrainConfig {
        initial_lr: 1e-3,
        first_stage_epochs: 20,
        later_stage_epochs: 10,
        lr_reductions: Some(3),
        ..Default::default()
    };
    let constant = TrainConfig { first_stage_epochs: 50, lr_reductions: Some(0), ..halved.clone() };
    let (cer_halved, epochs) = train_toy(&halved, train_set, heldout, features.output_dim())?;
    let (cer_constant, _) = train_toy(&constant, train_set, heldout, features.output_dim())?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(
        cer_halved < TOY_CER && epochs <= 50 && cer_halved <= cer_constant && secs <= TOY_BUDGET_S,
        format!(
            "held-out CER {:.2}% after {epochs} epochs with halving, {:.2}% at constant LR (need < {:.0}% and halved <= constant)",
            100.0 * cer_halved,
            100.0 * cer_constant,
            100.0 * TOY_CER
        ),
    )
}

/// Artifacts and results of the desk-scale decoder comparison.
struct TrendRun {
    _dir: tempfile::TempDir,
    config: PathBuf,
    output: PathBuf,
    table: ExperimentTable,
}

fn wide_jitter() -> JitterConfig {
    let d = JitterConfig::default();
    JitterConfig {
        scale: d.scale * 2.5,
        rotate_deg: d.rotate_deg * 2.5,
        shear_deg: d.shear_deg * 2.5,
        offset_px: d.offset_px * 2.5,
        point_noise_px: 2.0,
        ..d
    }
}

fn priors_for(train_set: &[TrainSample], alphabet: &LabelAlphabet) -> Result<SymbolPriors, String> {
    let labels: Vec<Vec<usize>> = train_set.iter().map(|s| alphabet.encode(&s.transcript)).collect::<Result<_, _>>().map_err(err)?;
    let frames = train_set.iter().map(|s| s.features.len()).sum();
    estimate_priors(&labels, alphabet.num_classes(), frames).map_err(err)
}

struct Corpus {
    train_text: Vec<String>,
    test_text: Vec<String>,
    jitter: JitterConfig,
    feature_dim: usize,
    topology_cells: usize,
    train: TrainConfig,
    char_orders: Vec<usize>,
    word_order: usize,
    search: &'static str,
}

/// Synthesizes, trains and writes every artifact plus an experiment config
/// into `dir`; returns the config path.
fn build_experiment(dir: &Path, c: &Corpus) -> Result<PathBuf, String> {
    let grammar_chars: BTreeSet<char> = c.train_text.iter().chain(&c.test_text).flat_map(|l| l.chars()).collect();
    let alphabet = LabelAlphabet::new(grammar_chars).map_err(err)?;
    let bank = default_glyph_bank();
    let synth = SynthConfig::default();
    let train_ink = synth_corpus(&c.train_text, &bank, 20, &c.jitter, &synth).map_err(err)?;
    let test_ink = synth_corpus(&c.test_text, &bank, 21, &c.jitter, &synth).map_err(err)?;
    let pre = PreprocessConfig::default();
    let images = prepare_lines(&train_ink, &pre).map_err(err)?;
    let feature_cfg = FeatureConfig { output_dim: c.feature_dim, ..Default::default() };
    let (features, _) = FeaturePipeline::fit(&images, &feature_cfg).map_err(err)?;
    let train_set = samples(&images, &c.train_text, &features).map_err(err)?;
    drop(images);
    let topology = Topology { input_dim: c.feature_dim, cells: vec![c.topology_cells] };
    let model = DblstmModel::init(topology, alphabet.clone(), 1).map_err(err)?;
    let outcome = train(model, &train_set, &[], &c.train, |_| {}).map_err(err)?;
    if outcome.diverged {
        return Err("training diverged".into());
    }
    let priors = priors_for(&train_set, &alphabet)?;

    let mut f = std::fs::File::create(dir.join("test.jsonl")).map_err(err)?;
    write_ink_file(&mut f, &test_ink).map_err(err)?;
    std::fs::write(dir.join("features.cspc"), features.to_bytes()).map_err(err)?;
    std::fs::write(dir.join("model.csnn"), outcome.model.to_bytes()).map_err(err)?;
    std::fs::write(dir.join("priors.json"), serde_json::to_string(&priors).map_err(err)?).map_err(err)?;
    let mut config = String::from(
        "seed = 7\noutput = \"out/results\"\ntest_ink = \"test.jsonl\"\nfeatures = \"features.cspc\"\nmodel = \"model.csnn\"\npriors = \"priors.json\"\n\n[[decoder]]\nname = \"no-LM\"\nmode = \"best-path\"\n",
    );
    for &n in &c.char_orders {
        let (lm, _) = build_char_lm(&c.train_text, n, &alphabet).map_err(err)?;
        std::fs::write(dir.join(format!("char{n}.arpa")), lm.to_arpa()).map_err(err)?;
        config += &format!("\n[[decoder]]\nname = \"char-{n}g\"\nmode = \"wfst\"\nlm = \"char{n}.arpa\"\n{}\n", c.search);
    }
    let (lm, _) = build_word_lm(&c.train_text, c.word_order, None).map_err(err)?;
    std::fs::write(dir.join("word.arpa"), lm.to_arpa()).map_err(err)?;
    config += &format!("\n[[decoder]]\nname = \"word-{}g\"\nmode = \"wfst\"\nlm = \"word.arpa\"\n{}\n", c.word_order, c.search);
    let path = dir.join("experiment.toml");
    std::fs::write(&path, config).map_err(err)?;
    Ok(path)
}

fn trend_run() -> &'static Result<TrendRun, String> {
    static RUN: OnceLock<Result<TrendRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let grammar = TextGrammar::english_like(1);
        let corpus = Corpus {
            train_text: grammar.sample_lines(2000, 10),
            test_text: grammar.sample_lines(200, 11),
            jitter: wide_jitter(),
            feature_dim: 30,
            topology_cells: 48,
            train: TrainConfig {
                initial_lr: 1e-3,
                first_stage_epochs: 6,
                lr_reductions: Some(0),
                batch_size: 8,
                ..Default::default()
            },
            char_orders: vec![3, 4, 5],
            word_order: 3,
            search: "alpha = 0.2\nlm_weight = 0.7\nbeam = 16.0\nmax_active = 3000",
        };
        let dir = tempfile::tempdir().map_err(err)?;
        let config = build_experiment(dir.path(), &corpus)?;
        let table = run_experiment(&config).map_err(err)?;
        let output = dir.path().join("out/results");
        Ok(TrendRun { _dir: dir, config, output, table })
    })
}

fn trend() -> Outcome {
    let run = trend_run().as_ref().map_err(String::clone)?;
    let row = |name: &str| run.table.rows.iter().find(|r| r.name == name).ok_or(format!("no {name} row"));
    let (none, c3, c4, c5, w3) = (row("no-LM")?, row("char-3g")?, row("char-4g")?, row("char-5g")?, row("word-3g")?);
    let pct = |r: f64| 100.0 * r;
    let wers = [pct(none.wer.rate), pct(c5.wer.rate), pct(w3.wer.rate)];
    let cers = [pct(c3.cer.rate), pct(c4.cer.rate), pct(c5.cer.rate)];
    let detail = format!(
        "{} lines; WER no-LM {:.2} > char-5g {:.2} > word-3g {:.2} (gaps >= {TREND_GAP}); CER char-3g {:.2} > 4g {:.2} > 5g {:.2}; no-LM CER {:.2}",
        run.table.lines,
        wers[0],
        wers[1],
        wers[2],
        cers[0],
        cers[1],
        cers[2],
        pct(none.cer.rate)
    );
    let ok = wers[0] - wers[1] >= TREND_GAP && wers[1] - wers[2] >= TREND_GAP && cers[0] > cers[1] && cers[1] > cers[2];
    ensure(ok && run.table.rows.len() == 5, detail)
}

/// Best cost and output per state, with ε moves closed.
type Lattice = Vec<Option<(f64, Vec<u32>)>>;

fn eps_close(g: &Wfst, lattice: &mut Lattice, lm_weight: f64) {
    loop {
        let mut changed = false;
        for s in 0..g.num_states() {
            let Some((c, out)) = lattice[s].clone() else { continue };
            for a in g.arcs(s as u32).iter().filter(|a| a.ilabel == EPS) {
                let nc = c + lm_weight * a.weight;
                let t = a.next as usize;
                if lattice[t].as_ref().is_none_or(|(b, _)| nc < *b) {
                    let mut o = out.clone();
                    if a.olabel != EPS {
                        o.push(a.olabel);
                    }
                    lattice[t] = Some((nc, o));
                    changed = true;
                }
            }
        }
        if !changed {
            return;
        }
    }
}

/// Exhaustive state-by-time Viterbi: the cheapest complete path and its output.
fn viterbi_oracle(g: &Wfst, rows: &[Vec<f64>], prior: &[f64], alpha: f64, lm_weight: f64) -> Option<(f64, Vec<u32>)> {
    let n = g.num_states();
    let mut cur: Lattice = vec![None; n];
    cur[g.start()? as usize] = Some((0.0, Vec::new()));
    eps_close(g, &mut cur, lm_weight);
    for row in rows {
        let mut next: Lattice = vec![None; n];
        for s in 0..n {
            let Some((c, out)) = &cur[s] else { continue };
            for a in g.arcs(s as u32).iter().filter(|a| a.ilabel != EPS) {
                let k = (a.ilabel - 1) as usize;
                let emit = (-row[k].ln() + alpha * prior[k].ln()).min(1e9);
                let nc = c + emit + lm_weight * a.weight;
                let t = a.next as usize;
                if next[t].as_ref().is_none_or(|(b, _)| nc < *b) {
                    let mut o = out.clone();
                    if a.olabel != EPS {
                        o.push(a.olabel);
                    }
                    next[t] = Some((nc, o));
                }
            }
        }
        eps_close(g, &mut next, lm_weight);
        cur = next;
    }
    (0..n)
        .filter_map(|s| cur[s].as_ref().map(|(c, o)| (c + lm_weight * g.final_weight(s as u32), o.clone())))
        .filter(|(c, _)| c.is_finite())
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

fn random_graph(rng: &mut impl Rng, classes: usize) -> Result<Wfst, String> {
    let mut g = Wfst::new(LabelSpace::Classes(classes), LabelSpace::Generic(6));
    let n = rng.random_range(2..=50);
    for _ in 0..n {
        g.add_state();
    }
    g.set_start(0).map_err(err)?;
    for s in 0..n as u32 {
        for _ in 0..rng.random_range(1..=4) {
            let ilabel = if rng.random_bool(0.15) { EPS } else { rng.random_range(1..=classes as u32) };
            let arc = Arc {
                ilabel,
                olabel: rng.random_range(0..6),
                weight: rng.random_range(0.0..2.0),
                next: rng.random_range(0..n as u32),
            };
            g.add_arc(s, arc).map_err(err)?;
        }
        if rng.random_bool(0.3) {
            g.set_final(s, rng.random_range(0.0..1.0)).map_err(err)?;
        }
    }
    Ok(g)
}

fn decode_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (mut compared, mut partial, mut worst) = (0usize, 0usize, 0.0f64);
    while compared < 50 {
        let classes = rng.random_range(2..=5);
        let g = random_graph(&mut rng, classes)?;
        let frames = rng.random_range(1..=8);
        let rows: Vec<Vec<f64>> = (0..frames)
            .map(|_| {
                let r: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
                let z: f64 = r.iter().sum();
                r.into_iter().map(|v| v / z).collect()
            })
            .collect();
        let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.1..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let priors = SymbolPriors { prior: raw.into_iter().map(|v| v / z).collect() };
        let alpha = if rng.random_bool(0.5) { 0.0 } else { 0.3 };
        let lm_weight = if rng.random_bool(0.5) { 1.0 } else { 0.6 };
        let cfg = DecodeConfig { lm_weight, ..DecodeConfig::exhaustive(alpha) };
        let post = PosteriorSequence::new(rows.concat(), classes).map_err(err)?;
        let got = decode(&g, &post, &priors, &cfg).map_err(err)?;
        match viterbi_oracle(&g, &rows, &priors.prior, alpha, lm_weight) {
            None => {
                if got.reached_final {
                    return Err("decoder reached a final state the oracle cannot".into());
                }
                partial += 1;
            }
            Some((cost, out)) => {
                let deviation = (got.cost - cost).abs();
                if !got.reached_final || deviation > DECODE_TOL || got.olabels != out {
                    return Err(format!(
                        "cost {} vs oracle {cost}, output {:?} vs {out:?}",
                        got.cost, got.olabels
                    ));
                }
                worst = worst.max(deviation);
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} sequences match the DP (max cost deviation {worst:.2e}, tol {DECODE_TOL:e}); {partial} without complete paths"))
}

/// Output sequences of every accepting path reading `input`.
fn transduce(l: &Wfst, input: &[u32]) -> BTreeSet<Vec<u32>> {
    fn walk(l: &Wfst, s: u32, input: &[u32], out: &mut Vec<u32>, found: &mut BTreeSet<Vec<u32>>, depth: usize) {
        if depth > 64 {
            return;
        }
        if input.is_empty() && l.is_final(s) {
            found.insert(out.clone());
        }
        for a in l.arcs(s) {
            let rest = if a.ilabel == EPS {
                input
            } else if input.first() == Some(&a.ilabel) {
                &input[1..]
            } else {
                continue;
            };
            if a.olabel != EPS {
                out.push(a.olabel);
            }
            walk(l, a.next, rest, out, found, depth + 1);
            if a.olabel != EPS {
                out.pop();
            }
        }
    }
    let mut found = BTreeSet::new();
    if let Some(s) = l.start() {
        walk(l, s, input, &mut Vec::new(), &mut found, 0);
    }
    found
}

fn lexicon_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let letters = ['a', 'b', 'c', 'd', 'e'];
    let mut words = BTreeSet::new();
    while words.len() < 100 {
        let n = rng.random_range(1..=7);
        let mut w = String::new();
        for _ in 0..n {
            let c = match w.chars().last() {
                Some(p) if rng.random_bool(0.25) => p,
                _ => letters[rng.random_range(0..letters.len())],
            };
            w.push(c);
        }
        words.insert(w);
    }
    let words: Vec<String> = words.into_iter().collect();
    let alphabet = LabelAlphabet::new(letters.iter().copied().chain([' '])).map_err(err)?;
    let tokens: Vec<String> = [BOS, EOS, UNK].iter().map(|s| s.to_string()).chain(words.iter().cloned()).collect();
    let l = build_l(&Lexicon::from_words(&words), &alphabet, &tokens).map_err(err)?;
    let blank = class_label(alphabet.blank_index());
    let (mut repeated, mut plain) = (0usize, 0usize);
    for (i, w) in words.iter().enumerate() {
        let expected = vec![token_label(i as u32 + 3)];
        let classes: Vec<u32> = w.chars().map(|c| class_label(alphabet.class_of(c).expect("in alphabet"))).collect();
        let separated: Vec<u32> = std::iter::once(blank).chain(classes.iter().flat_map(|&c| [c, blank])).collect();
        if !transduce(&l, &separated).contains(&expected) {
            return Err(format!("{w:?} with blanks everywhere is not read as itself"));
        }
        let has_repeat = classes.windows(2).any(|p| p[0] == p[1]);
        let bare = transduce(&l, &classes).contains(&expected);
        if has_repeat {
            repeated += 1;
            if bare {
                return Err(format!("{w:?} is accepted without the blank between its repeated characters"));
            }
            let mut minimal = Vec::new();
            for (j, &c) in classes.iter().enumerate() {
                if j > 0 && classes[j - 1] == c {
                    minimal.push(blank);
                }
                minimal.push(c);
            }
            if !transduce(&l, &minimal).contains(&expected) {
                return Err(format!("{w:?} with only the compulsory blanks is rejected"));
            }
        } else {
            plain += 1;
            if !bare {
                return Err(format!("{w:?} without blanks is rejected"));
            }
        }
    }
    Ok(format!("100 words: blank-separated spellings accepted; {repeated} words with repeats need the blank, {plain} without repeats read bare"))
}

/// Textbook Katz backoff over explicit count tables, kept independent of the
/// model's own ARPA entries.
struct KatzOracle {
    order: usize,
    predicted: Vec<String>,
    /// counts[n-1][context] = continuation counts
    counts: Vec<BTreeMap<Vec<String>, BTreeMap<String, u64>>>,
    ratios: Vec<Vec<f64>>,
}

impl KatzOracle {
    fn new(sentences: &[Vec<String>], order: usize, vocab: &BTreeSet<String>) -> Self {
        let mut counts = vec![BTreeMap::<Vec<String>, BTreeMap<String, u64>>::new(); order];
        for n in 1..=order {
            for s in sentences {
                let mut padded: Vec<String> = vec![BOS.to_string(); n - 1];
                padded.extend(s.iter().map(|t| if vocab.contains(t) { t.clone() } else { UNK.to_string() }));
                padded.push(EOS.to_string());
                for win in padded.windows(n) {
                    *counts[n - 1].entry(win[..n - 1].to_vec()).or_default().entry(win[n - 1].clone()).or_default() += 1;
                }
            }
        }
        let k = 5u64;
        let ratios = counts
            .iter()
            .map(|table| {
                let mut nr: BTreeMap<u64, f64> = BTreeMap::new();
                for cont in table.values() {
                    for &c in cont.values() {
                        *nr.entry(c).or_default() += 1.0;
                    }
                }
                let get = |r: u64| nr.get(&r).copied().unwrap_or(0.0);
                let a = (k + 1) as f64 * get(k + 1) / get(1);
                (1..=k)
                    .map(|r| {
                        let rstar = (r + 1) as f64 * get(r + 1) / get(r);
                        let d = (rstar / r as f64 - a) / (1.0 - a);
                        if get(r) > 0.0 && a < 1.0 && d > 0.0 && d <= 1.0 { d } else { 1.0 }
                    })
                    .collect()
            })
            .collect();
        let mut predicted: Vec<String> = vocab.iter().cloned().collect();
        predicted.extend([EOS.to_string(), UNK.to_string()]);
        KatzOracle { order, predicted, counts, ratios }
    }

    fn ratio(&self, n: usize, r: u64) -> f64 {
        if r as usize > self.ratios[n - 1].len() { 1.0 } else { self.ratios[n - 1][r as usize - 1] }
    }

    /// Discounted seen probabilities and leftover mass for a context.
    fn seen(&self, ctx: &[String]) -> Option<(BTreeMap<String, f64>, f64)> {
        let n = ctx.len() + 1;
        let cont = self.counts[n - 1].get(ctx)?;
        let total: u64 = cont.values().sum();
        let mut p: BTreeMap<String, f64> =
            cont.iter().map(|(w, &c)| (w.clone(), self.ratio(n, c) * c as f64 / total as f64)).collect();
        let unseen = self.predicted.len() - cont.len();
        let mass: f64 = p.values().sum();
        let mut left = 1.0 - mass;
        if unseen == 0 {
            p.values_mut().for_each(|v| *v /= mass);
            left = 0.0;
        } else if left <= 1e-12 {
            let reserve = if n == 1 { unseen as f64 } else { 1.0 };
            let t = total as f64;
            p.values_mut().for_each(|v| *v = *v / mass * t / (t + reserve));
            left = reserve / (t + reserve);
        }
        Some((p, left))
    }

    fn prob(&self, ctx: &[String], w: &str) -> f64 {
        let ctx = &ctx[ctx.len().saturating_sub(self.order - 1)..];
        let Some((seen, left)) = self.seen(ctx) else {
            return if ctx.is_empty() { 0.0 } else { self.prob(&ctx[1..], w) };
        };
        if let Some(&p) = seen.get(w) {
            return p;
        }
        if ctx.is_empty() {
            let unseen = self.predicted.len() - seen.len();
            return left / unseen as f64;
        }
        let lower = &ctx[1..];
        let mut denom = 1.0 - seen.keys().map(|v| self.prob(lower, v)).sum::<f64>();
        if denom < 1e-6 {
            denom = self.predicted.iter().filter(|v| !seen.contains_key(*v)).map(|v| self.prob(lower, v)).sum();
        }
        left / denom * self.prob(lower, w)
    }
}

fn compare_lm(lm: &NgramLm, oracle: &KatzOracle, rng: &mut impl Rng) -> Result<(usize, f64, f64), String> {
    let mut contexts: BTreeSet<Vec<String>> = BTreeSet::new();
    for table in &oracle.counts {
        contexts.extend(table.keys().cloned());
    }
    let pool: Vec<String> = std::iter::once(BOS.to_string()).chain(oracle.predicted.iter().cloned()).filter(|t| t != EOS).collect();
    for _ in 0..20 {
        let len = rng.random_range(0..oracle.order);
        contexts.insert((0..len).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect());
    }
    let (mut checked, mut worst, mut worst_sum) = (0usize, 0.0f64, 0.0f64);
    for ctx in &contexts {
        let refs: Vec<&str> = ctx.iter().map(String::as_str).collect();
        let mut sum = 0.0;
        for w in &oracle.predicted {
            let got = 10f64.powf(lm.logprob(&refs, w));
            let want = oracle.prob(ctx, w);
            worst = worst.max((got - want).abs());
            sum += got;
            checked += 1;
        }
        worst_sum = worst_sum.max((sum - 1.0).abs());
    }
    Ok((checked, worst, worst_sum))
}

fn lm_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (mut checked, mut worst, mut worst_sum, mut models) = (0usize, 0.0f64, 0.0f64, 0usize);
    for trial in 0..40 {
        let vocab_size = rng.random_range(2..=8);
        let words: Vec<String> = (0..vocab_size).map(|i| format!("w{i}")).collect();
        let mut tokens = 0;
        let mut lines = Vec::new();
        let budget = rng.random_range(10..=200);
        while tokens < budget {
            let n = rng.random_range(1..=8).min(budget - tokens);
            // skewed so counts of counts vary
            let line: Vec<String> =
                (0..n).map(|_| words[(rng.random_range(0.0f64..1.0).powi(2) * vocab_size as f64) as usize].clone()).collect();
            tokens += n;
            lines.push(line.join(" "));
        }
        let order = 1 + trial % 3;
        let (lm, _) = build_word_lm(&lines, order, None).map_err(err)?;
        let sentences: Vec<Vec<String>> = lines.iter().map(|l| l.split(' ').map(str::to_owned).collect()).collect();
        let vocab: BTreeSet<String> = sentences.iter().flatten().cloned().collect();
        let oracle = KatzOracle::new(&sentences, order, &vocab);
        let (c, w, s) = compare_lm(&lm, &oracle, &mut rng)?;
        checked += c;
        worst = worst.max(w);
        worst_sum = worst_sum.max(s);
        let arpa = lm.to_arpa();
        if NgramLm::from_arpa(&arpa).map_err(err)?.to_arpa() != arpa {
            return Err(format!("trial {trial}: ARPA round trip changed the text"));
        }
        models += 1;
    }
    // character models go through the same estimator
    let alphabet = LabelAlphabet::new(['a', 'b', 'c', ' ']).map_err(err)?;
    for trial in 0..10 {
        let lines: Vec<String> = (0..rng.random_range(2..=12))
            .map(|_| (0..rng.random_range(1..=10)).map(|_| ['a', 'b', 'c', ' ', 'a'][rng.random_range(0..5)]).collect())
            .collect();
        let order = 1 + trial % 3;
        let (lm, _) = build_char_lm(&lines, order, &alphabet).map_err(err)?;
        let sentences: Vec<Vec<String>> = lines.iter().map(|l| tokenize_char(l, &alphabet).0).collect();
        let vocab: BTreeSet<String> = alphabet.symbols().iter().map(|&c| inkscribe::lm::char_token(c)).collect();
        let oracle = KatzOracle::new(&sentences, order, &vocab);
        let (c, w, s) = compare_lm(&lm, &oracle, &mut rng)?;
        checked += c;
        worst = worst.max(w);
        worst_sum = worst_sum.max(s);
        let arpa = lm.to_arpa();
        if NgramLm::from_arpa(&arpa).map_err(err)?.to_arpa() != arpa {
            return Err(format!("char trial {trial}: ARPA round trip changed the text"));
        }
        models += 1;
    }
    ensure(
        worst <= LM_TOL && worst_sum <= LM_SUM_TOL,
        format!(
            "{models} models, {checked} probabilities, max |P - oracle| = {worst:.2e} (tol {LM_TOL:e}), max |sum - 1| = {worst_sum:.2e}; ARPA byte-stable"
        ),
    )
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn determinism() -> Outcome {
    // rerun of the comparison experiment on its artifacts
    let run = trend_run().as_ref().map_err(String::clone)?;
    let json = read(&run.output.with_extension("json"))?;
    let text = read(&run.output.with_extension("txt"))?;
    let again = run_experiment(&run.config).map_err(err)?;
    if again.to_json() != run.table.to_json()
        || read(&run.output.with_extension("json"))? != json
        || read(&run.output.with_extension("txt"))? != text
    {
        return Err("rerunning the comparison experiment changed its table".into());
    }
    // small pipeline rebuilt from scratch twice
    let grammar = TextGrammar::english_like(2);
    let corpus = Corpus {
        train_text: grammar.sample_lines(120, 30),
        test_text: grammar.sample_lines(30, 31),
        jitter: JitterConfig::default(),
        feature_dim: 20,
        topology_cells: 16,
        train: TrainConfig { initial_lr: 1e-3, first_stage_epochs: 2, lr_reductions: Some(0), ..Default::default() },
        char_orders: vec![3],
        word_order: 2,
        search: "alpha = 0.2\nbeam = 12.0",
    };
    let mut builds = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(err)?;
        let config = build_experiment(dir.path(), &corpus)?;
        run_experiment(&config).map_err(err)?;
        let out = dir.path().join("out/results");
        let names = ["features.cspc", "model.csnn", "priors.json", "char3.arpa", "word.arpa", "test.jsonl"];
        let artifacts: Vec<Option<Vec<u8>>> = names.iter().map(|n| std::fs::read(dir.path().join(n)).ok()).collect();
        builds.push((artifacts, read(&out.with_extension("json"))?, read(&out.with_extension("txt"))?));
    }
    ensure(
        builds[0] == builds[1],
        format!("comparison rerun identical ({} rows); rebuilt 3-decoder pipeline identical in artifacts and table", run.table.rows.len()),
    )
}

fn preprocess_recovery() -> Outcome {
    let grammar = TextGrammar::english_like(5);
    let texts = grammar.sample_lines(100, 50);
    // no per-glyph slant, so the applied shear is the whole slant of the line
    let jitter = JitterConfig { shear_deg: 0.0, ..JitterConfig::default() };
    let ink = synth_corpus(&texts, &default_glyph_bank(), 51, &jitter, &SynthConfig::default()).map_err(err)?;
    let cfg = PreprocessConfig::default();
    let rotation_tol = ROTATION_TOL.max(cfg.baseline_step);
    let images: Vec<_> = ink
        .iter()
        .map(|l| render_line(l, 3.0).and_then(|(img, _)| binarize(&img, 0.5)))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let angles = [5.0, -5.0, 10.0, -10.0];
    let mut rot_ok = HashMap::new();
    let mut shear_ok = 0usize;
    let mut worst_rot = 0.0f64;
    let mut worst_shear = 0.0f64;
    for (i, img) in images.iter().enumerate() {
        let angle = angles[i % 4];
        let tilted = rotate(img, angle).map_err(err)?;
        let found = preprocess_line(&tilted, &cfg).map_err(err)?.1.baseline.best_angle;
        let e = (found + angle).abs();
        worst_rot = worst_rot.max(e);
        if e <= rotation_tol {
            *rot_ok.entry(angle as i32).or_insert(0usize) += 1;
        }
        let shear = if i % 2 == 0 { 10.0 } else { -10.0 };
        let sheared = shear_horizontal(img, shear).map_err(err)?;
        let found = preprocess_line(&sheared, &cfg).map_err(err)?.1.slant.best_angle;
        let e = (found + shear).abs();
        worst_shear = worst_shear.max(e);
        if e <= SLANT_TOL {
            shear_ok += 1;
        }
    }
    let rot_total: usize = rot_ok.values().sum();
    let need = (RECOVERY_SHARE * images.len() as f64).ceil() as usize;
    ensure(
        rot_total >= need && shear_ok >= need,
        format!(
            "rotation +-5/+-10 within {rotation_tol} deg on {rot_total}/100 (worst {worst_rot:.1}), shear +-10 within {SLANT_TOL} deg on {shear_ok}/100 (worst {worst_shear:.1}); need {need}"
        ),
    )
}
