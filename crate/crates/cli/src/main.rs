//! `inkscribe` command line: synthesis, rendering, preprocessing, features,
//! training, decoding, language models, scoring and experiments.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use inkscribe::ctc::ctc_loss_grad;
use inkscribe::eval::{cer, wer};
use inkscribe::experiment::{run_and_write, ExperimentConfig};
use inkscribe::features::FeatureConfig;
use inkscribe::ink::{default_glyph_bank, render_line, synth_corpus, write_ink_file, InkLine, JitterConfig, SynthConfig};
use inkscribe::ink::{write_pgm, PgmEncoding};
use inkscribe::lm::{build_char_lm, build_word_lm, tokenize_char, tokenize_word, LmMode, NgramLm};
use inkscribe::net::{train, TrainSample};
use inkscribe::pipeline::{posteriors, prepare_lines, read_file, read_ink_path, read_text, samples, Decoder};
use inkscribe::preprocess::{preprocess_line, PreprocessConfig};
use inkscribe::wfst::{estimate_priors, DecodeConfig, Lexicon, SymbolPriors};
use inkscribe::{DblstmModel, Error, FeaturePipeline, LabelAlphabet, Result, Topology, TrainConfig};
use serde::Deserialize;

#[derive(Parser, Debug)]
#[command(name = "inkscribe", version, about = "Handwriting line recognition toolkit")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Log progress (-v) or details (-vv) to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize ink lines from a text file, one line per transcript.
    Synth {
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Multiplier on the default glyph jitter.
        #[arg(long, default_value_t = 1.0)]
        jitter: f64,
    },
    /// Render ink lines to PGM images.
    Render {
        #[arg(long)]
        ink: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = inkscribe::ink::DEFAULT_THICKNESS)]
        thickness: f64,
        /// Write ASCII P2 instead of binary P5.
        #[arg(long)]
        plain: bool,
    },
    /// Baseline/slant correction and height normalization.
    Preprocess {
        #[arg(long)]
        ink: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write per-line angle searches as JSON lines.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        prep: PrepArgs,
    },
    /// Fit or apply the feature pipeline.
    #[command(subcommand)]
    Features(FeaturesCommand),
    /// Train a BLSTM recognizer under CTC.
    Train(TrainArgs),
    /// Transcribe ink lines.
    Decode(DecodeArgs),
    /// Build or query n-gram language models.
    #[command(subcommand)]
    Lm(LmCommand),
    /// CER and WER of hypotheses against references, one line each.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run a decoder comparison described by a TOML config.
    Experiment { config: PathBuf },
}

#[derive(Args, Debug, Clone)]
struct PrepArgs {
    /// TOML file with preprocessing keys (baseline_range, slant_step, ...).
    #[arg(long = "preprocess-config")]
    preprocess_config: Option<PathBuf>,
}

impl PrepArgs {
    fn load(&self) -> Result<PreprocessConfig> {
        match &self.preprocess_config {
            Some(p) => parse_toml(p),
            None => Ok(PreprocessConfig::default()),
        }
    }
}

#[derive(Subcommand, Debug)]
enum FeaturesCommand {
    /// Fit PCA and standardization on training ink.
    Fit {
        #[arg(long)]
        ink: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = inkscribe::features::PCA_DIM)]
        dim: usize,
        #[command(flatten)]
        prep: PrepArgs,
    },
    /// Write one feature text file per line.
    Apply {
        #[arg(long)]
        ink: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        prep: PrepArgs,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    ink: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Where to write symbol priors estimated from the training set.
    #[arg(long)]
    priors: Option<PathBuf>,
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// TOML with `cells`, `alphabet` and a `[train]` table.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cells per layer, comma separated.
    #[arg(long, value_delimiter = ',')]
    cells: Option<Vec<usize>>,
    /// Output symbols; `corpus` uses the characters of the transcripts.
    #[arg(long)]
    alphabet: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    /// Epochs at the initial learning rate.
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    prep: PrepArgs,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    cells: Option<Vec<usize>>,
    alphabet: Option<String>,
    train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    BestPath,
    Wfst,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    ink: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::BestPath)]
    mode: Mode,
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Symbol priors JSON; uniform when absent.
    #[arg(long)]
    priors: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beam: Option<f64>,
    #[arg(long)]
    max_active: Option<usize>,
    #[arg(long)]
    lm_weight: Option<f64>,
    /// Hypotheses file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write CTC occupancy matrices against the ink transcripts.
    #[arg(long)]
    dump_occupancy: Option<PathBuf>,
    #[command(flatten)]
    prep: PrepArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LmKind {
    Char,
    Word,
}

#[derive(Subcommand, Debug)]
enum LmCommand {
    /// Estimate a Katz backoff model and write ARPA.
    Build {
        #[arg(long)]
        text: PathBuf,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long, value_enum)]
        mode: LmKind,
        #[arg(long)]
        out: PathBuf,
        /// Character models: take the alphabet from this model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Character models: explicit symbols (default alphabet otherwise).
        #[arg(long)]
        alphabet: Option<String>,
        /// Word models: keep the most frequent words only.
        #[arg(long)]
        vocab_cap: Option<usize>,
    },
    /// log10 probability and perplexity of each line of a text file.
    Query {
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        text: PathBuf,
    },
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let f = File::create(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(BufWriter::new(f))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

fn text_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
}

fn nonempty_ink(path: &Path) -> Result<Vec<InkLine>> {
    let ink = read_ink_path(path)?;
    if ink.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no ink lines", path.display())));
    }
    Ok(ink)
}

fn line_file(dir: &Path, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("line_{i:05}.{ext}"))
}

fn synth(text: &Path, out: &Path, jitter: f64, seed: u64) -> Result<()> {
    let lines: Vec<String> = text_lines(text)?.into_iter().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no text lines", text.display())));
    }
    let d = JitterConfig::default();
    let j = JitterConfig {
        scale: d.scale * jitter,
        rotate_deg: d.rotate_deg * jitter,
        shear_deg: d.shear_deg * jitter,
        offset_px: d.offset_px * jitter,
        point_noise_px: d.point_noise_px * jitter,
        ..d
    };
    let ink = synth_corpus(&lines, &default_glyph_bank(), seed, &j, &SynthConfig::default())?;
    let mut w = create(out)?;
    write_ink_file(&mut w, &ink)?;
    w.flush()?;
    log::info!("wrote {} lines to {}", ink.len(), out.display());
    Ok(())
}

fn render(ink: &Path, out: &Path, thickness: f64, plain: bool) -> Result<()> {
    let enc = if plain { PgmEncoding::Plain } else { PgmEncoding::Binary };
    std::fs::create_dir_all(out)?;
    for (i, line) in nonempty_ink(ink)?.iter().enumerate() {
        let (image, report) = render_line(line, thickness)?;
        log::debug!("line {i}: {report:?}");
        write_bytes(&line_file(out, i, "pgm"), &write_pgm(&image, enc))?;
    }
    Ok(())
}

fn preprocess(ink: &Path, out: &Path, report: Option<&Path>, cfg: &PreprocessConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut rep = report.map(create).transpose()?;
    for (i, line) in nonempty_ink(ink)?.iter().enumerate() {
        let (image, _) = render_line(line, inkscribe::ink::DEFAULT_THICKNESS)?;
        let (res, r) = preprocess_line(&image, cfg)?;
        write_bytes(&line_file(out, i, "pgm"), &write_pgm(&res.image, PgmEncoding::Binary))?;
        if let Some(w) = rep.as_mut() {
            let json = serde_json::to_string(&r).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{json}")?;
        }
    }
    if let Some(mut w) = rep {
        w.flush()?;
    }
    Ok(())
}

fn load_samples(ink: &Path, features: &FeaturePipeline, prep: &PreprocessConfig) -> Result<Vec<TrainSample>> {
    let ink = nonempty_ink(ink)?;
    let transcripts: Vec<String> = ink.iter().map(|l| l.transcript.clone()).collect();
    let images = prepare_lines(&ink, prep)?;
    samples(&images, &transcripts, features)
}

fn features(cmd: &FeaturesCommand, seed: u64) -> Result<()> {
    match cmd {
        FeaturesCommand::Fit { ink, out, dim, prep } => {
            let images = prepare_lines(&nonempty_ink(ink)?, &prep.load()?)?;
            let cfg = FeatureConfig { output_dim: *dim, seed, ..Default::default() };
            let (pipeline, report) = FeaturePipeline::fit(&images, &cfg)?;
            log::info!("fit on {} frames ({} sampled for PCA)", report.training_frames, report.pca_samples);
            write_bytes(out, &pipeline.to_bytes())
        }
        FeaturesCommand::Apply { ink, features, out, prep } => {
            let pipeline = FeaturePipeline::from_bytes(&read_file(features)?)?;
            let samples = load_samples(ink, &pipeline, &prep.load()?)?;
            std::fs::create_dir_all(out)?;
            for (i, s) in samples.iter().enumerate() {
                write_bytes(&line_file(out, i, "txt"), s.features.to_text().as_bytes())?;
            }
            Ok(())
        }
    }
}

fn run_train(a: &TrainArgs, seed: u64) -> Result<()> {
    let file: TrainFile = match &a.config {
        Some(p) => parse_toml(p)?,
        None => TrainFile::default(),
    };
    let mut cfg = TrainConfig { seed, ..file.train };
    if let Some(lr) = a.lr {
        cfg.initial_lr = lr;
        cfg.final_lr = cfg.final_lr.min(lr);
    }
    if let Some(e) = a.epochs {
        cfg.first_stage_epochs = e;
    }
    cfg.validate()?;
    let prep = a.prep.load()?;
    let pipeline = FeaturePipeline::from_bytes(&read_file(&a.features)?)?;
    let corpus = load_samples(&a.ink, &pipeline, &prep)?;
    let heldout = match &a.heldout {
        Some(h) => load_samples(h, &pipeline, &prep)?,
        None => Vec::new(),
    };
    let alphabet = match a.alphabet.as_deref().or(file.alphabet.as_deref()) {
        None => LabelAlphabet::default(),
        Some("corpus") => {
            let chars: std::collections::BTreeSet<char> = corpus.iter().flat_map(|s| s.transcript.chars()).collect();
            LabelAlphabet::new(chars)?
        }
        Some(s) => LabelAlphabet::new(s.chars())?,
    };
    let cells = a.cells.clone().or(file.cells).unwrap_or_else(|| Topology::small(1).cells);
    let topology = Topology { input_dim: pipeline.output_dim(), cells };
    let model = DblstmModel::init(topology, alphabet, seed)?;
    let outcome = train(model, &corpus, &heldout, &cfg, |r| {
        let cer = r.heldout_cer.map(|c| format!(" held-out CER {:.2}%", 100.0 * c)).unwrap_or_default();
        eprintln!("epoch {} lr {:.2e} loss {:.4}{cer}", r.epoch, r.lr, r.mean_loss);
    })?;
    write_bytes(&a.out, &outcome.model.to_bytes())?;
    if let Some(p) = &a.priors {
        let model = &outcome.model;
        let labels: Vec<Vec<usize>> = corpus.iter().map(|s| model.alphabet().encode(&s.transcript)).collect::<Result<_>>()?;
        let frames = corpus.iter().map(|s| s.features.len()).sum();
        let priors = estimate_priors(&labels, model.num_classes(), frames)?;
        let json = serde_json::to_string_pretty(&priors).map_err(|e| Error::Format(e.to_string()))?;
        write_bytes(p, json.as_bytes())?;
    }
    if outcome.diverged {
        return Err(Error::Numerical("training diverged; wrote the last finite parameters".into()));
    }
    Ok(())
}

fn run_decode(a: &DecodeArgs) -> Result<()> {
    let pipeline = FeaturePipeline::from_bytes(&read_file(&a.features)?)?;
    let model = DblstmModel::from_bytes(&read_file(&a.model)?)?;
    if pipeline.output_dim() != model.input_dim() {
        return Err(Error::Config(format!(
            "feature dim {} does not match model input dim {}",
            pipeline.output_dim(),
            model.input_dim()
        )));
    }
    let decoder = match a.mode {
        Mode::BestPath => {
            if a.lm.is_some() || a.lexicon.is_some() {
                log::warn!("--lm and --lexicon are ignored in best-path mode");
            }
            Decoder::BestPath
        }
        Mode::Wfst => {
            let lm_path = a.lm.as_ref().ok_or_else(|| Error::Config("--mode wfst needs --lm".into()))?;
            let lm = NgramLm::from_arpa(&read_text(lm_path)?)?;
            let lexicon = match (&a.lexicon, lm.mode()) {
                (Some(p), _) => Some(Lexicon::parse(&read_text(p)?)?),
                (None, LmMode::Word) => Some(inkscribe::experiment::vocabulary_lexicon(&lm)),
                (None, LmMode::Char) => None,
            };
            let priors = match &a.priors {
                Some(p) => read_json(p)?,
                None => SymbolPriors::uniform(model.num_classes()),
            };
            let d = DecodeConfig::default();
            let cfg = DecodeConfig {
                alpha: a.alpha.unwrap_or(d.alpha),
                beam: a.beam.unwrap_or(d.beam),
                max_active: a.max_active.unwrap_or(d.max_active),
                lm_weight: a.lm_weight.unwrap_or(d.lm_weight),
            };
            Decoder::graph(&lm, &model, lexicon.as_ref(), priors, cfg)?
        }
    };
    let test = load_samples(&a.ink, &pipeline, &a.prep.load()?)?;
    let post = posteriors(&model, &test)?;
    if let Some(dir) = &a.dump_occupancy {
        std::fs::create_dir_all(dir)?;
        for (i, (p, s)) in post.iter().zip(&test).enumerate() {
            let labels = model.alphabet().encode(&s.transcript)?;
            let logp: Vec<f64> = p.rows().iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
            let out = ctc_loss_grad(&logp, p.len(), p.num_classes(), &labels)?;
            let text: String = out
                .occupancy
                .chunks(p.num_classes())
                .map(|r| r.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" ") + "\n")
                .collect();
            write_bytes(&line_file(dir, i, "txt"), text.as_bytes())?;
        }
    }
    let hyps: Vec<String> = inkscribe::pipeline::par_map(&post, |p| decoder.decode(&model, p)).into_iter().collect::<Result<_>>()?;
    let mut text = hyps.join("\n");
    text.push('\n');
    match &a.out {
        Some(p) => write_bytes(p, text.as_bytes()),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn lm(cmd: &LmCommand) -> Result<()> {
    match cmd {
        LmCommand::Build { text, order, mode, out, model, alphabet, vocab_cap } => {
            let corpus: Vec<String> = text_lines(text)?.into_iter().filter(|l| !l.trim().is_empty()).collect();
            let (lm, report) = match mode {
                LmKind::Char => {
                    let alphabet = match (model, alphabet) {
                        (Some(m), _) => DblstmModel::from_bytes(&read_file(m)?)?.alphabet().clone(),
                        (None, Some(s)) => LabelAlphabet::new(s.chars())?,
                        (None, None) => LabelAlphabet::default(),
                    };
                    build_char_lm(&corpus, *order, &alphabet)?
                }
                LmKind::Word => build_word_lm(&corpus, *order, *vocab_cap)?,
            };
            if report.filtered_chars > 0 {
                log::warn!("{} characters outside the alphabet were mapped to <unk>", report.filtered_chars);
            }
            write_bytes(out, lm.to_arpa().as_bytes())
        }
        LmCommand::Query { lm, text } => {
            let lm = NgramLm::from_arpa(&read_text(lm)?)?;
            let alphabet = match lm.mode() {
                LmMode::Char => Some(LabelAlphabet::new(lm.tokens()[3..].iter().filter_map(|t| inkscribe::lm::token_char(t)))?),
                LmMode::Word => None,
            };
            let mut out = std::io::stdout().lock();
            let (mut total, mut count) = (0.0, 0usize);
            for line in text_lines(text)? {
                let tokens = match &alphabet {
                    Some(a) => tokenize_char(&line, a).0,
                    None => tokenize_word(&line),
                };
                let refs: Vec<&str> = tokens.iter().map(String::as_str).collect();
                let lp = lm.sentence_logprob(&refs);
                total += lp;
                count += refs.len() + 1;
                writeln!(out, "{lp:.6}\t{line}")?;
            }
            writeln!(out, "perplexity {:.4}", 10f64.powf(-total / count.max(1) as f64))?;
            Ok(())
        }
    }
}

fn score(reference: &Path, hyp: &Path, json: bool) -> Result<()> {
    let refs = text_lines(reference)?;
    let hyps = text_lines(hyp)?;
    let (c, w) = (cer(&refs, &hyps)?, wer(&refs, &hyps)?);
    if json {
        let v = serde_json::json!({ "lines": refs.len(), "cer": c, "wer": w });
        println!("{v}");
    } else {
        println!("lines {}", refs.len());
        println!("CER {:.2}% (S {} I {} D {} / {})", 100.0 * c.rate, c.substitutions, c.insertions, c.deletions, c.ref_len);
        println!("WER {:.2}% (S {} I {} D {} / {})", 100.0 * w.rate, w.substitutions, w.insertions, w.deletions, w.ref_len);
    }
    Ok(())
}

fn experiment(config: &Path, seed: Option<u64>) -> Result<()> {
    let base = config.parent().unwrap_or(Path::new("."));
    let mut cfg = ExperimentConfig::parse(&read_text(config)?)?.resolve(base);
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let table = run_and_write(&cfg)?;
    print!("{}", table.to_text());
    Ok(())
}

fn run(cli: Cli, seed_given: bool) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::Synth { text, out, jitter } => synth(text, out, *jitter, seed),
        Command::Render { ink, out, thickness, plain } => render(ink, out, *thickness, *plain),
        Command::Preprocess { ink, out, report, prep } => preprocess(ink, out, report.as_deref(), &prep.load()?),
        Command::Features(cmd) => features(cmd, seed),
        Command::Train(a) => run_train(a, seed),
        Command::Decode(a) => run_decode(a),
        Command::Lm(cmd) => lm(cmd),
        Command::Score { reference, hyp, json } => score(reference, hyp, *json),
        Command::Experiment { config } => experiment(config, seed_given.then_some(seed)),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let matches = <Cli as clap::CommandFactory>::command().try_get_matches();
    let cli = match matches.and_then(|m| <Cli as clap::FromArgMatches>::from_arg_matches(&m).map(|c| (c, m))) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let (cli, matches) = cli;
    let seed_given = matches.value_source("seed") == Some(clap::parser::ValueSource::CommandLine)
        || matches.subcommand().and_then(|(_, m)| m.value_source("seed")) == Some(clap::parser::ValueSource::CommandLine);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli, seed_given) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
