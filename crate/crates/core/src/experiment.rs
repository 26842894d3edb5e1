//! Decoder comparison harness: one TOML file names the test ink, the frozen
//! feature and network models, and a list of decoders; the result is one
//! CER/WER row per decoder.
//!
//! ```toml
//! seed = 0
//! output = "results"          # writes results.json and results.txt
//! test_ink = "test.jsonl"
//! features = "features.cspc"
//! model = "model.csnn"
//! priors = "priors.json"      # needed by wfst decoders
//!
//! [[decoder]]
//! name = "no-LM"
//! mode = "best-path"
//!
//! [[decoder]]
//! name = "word-3g"
//! mode = "wfst"
//! lm = "word3.arpa"
//! lexicon = "words.lex"       # optional for word models
//! alpha = 0.2
//! beam = 16.0
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{cer, wer, ErrorReport};
use crate::features::FeaturePipeline;
use crate::lm::{tokenize_word, LmMode, NgramLm, BOS, EOS, UNK};
use crate::net::DblstmModel;
use crate::pipeline::{par_map, posteriors, prepare_lines, read_file, read_ink_path, read_text, samples, Decoder};
use crate::preprocess::PreprocessConfig;
use crate::wfst::{DecodeConfig, Lexicon, SymbolPriors};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderMode {
    BestPath,
    Wfst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub name: String,
    pub mode: DecoderMode,
    pub lm: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub beam: Option<f64>,
    pub max_active: Option<usize>,
    pub lm_weight: Option<f64>,
}

impl DecoderSpec {
    pub fn search(&self) -> DecodeConfig {
        let d = DecodeConfig::default();
        DecodeConfig {
            alpha: self.alpha.unwrap_or(d.alpha),
            beam: self.beam.unwrap_or(d.beam),
            max_active: self.max_active.unwrap_or(d.max_active),
            lm_weight: self.lm_weight.unwrap_or(d.lm_weight),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
    pub test_ink: PathBuf,
    pub features: PathBuf,
    pub model: PathBuf,
    pub priors: Option<PathBuf>,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(rename = "decoder")]
    pub decoders: Vec<DecoderSpec>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("experiment config: {e}")))
    }

    /// Makes every relative path relative to `base`.
    pub fn resolve(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        fix(&mut self.test_ink);
        fix(&mut self.features);
        fix(&mut self.model);
        if let Some(p) = self.priors.as_mut() {
            fix(p);
        }
        for d in &mut self.decoders {
            d.lm.iter_mut().chain(d.lexicon.iter_mut()).for_each(fix);
        }
        self
    }

    /// Structural checks and the existence of every input, before any work.
    pub fn validate(&self) -> Result<()> {
        if self.decoders.is_empty() {
            return Err(Error::config("experiment lists no decoders"));
        }
        let mut names: Vec<&str> = self.decoders.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("decoder names must be unique"));
        }
        let mut needed: Vec<(&str, &Path)> =
            vec![("test_ink", &self.test_ink), ("features", &self.features), ("model", &self.model)];
        for d in &self.decoders {
            match d.mode {
                DecoderMode::BestPath => {
                    if d.lm.is_some() || d.lexicon.is_some() {
                        return Err(Error::config(format!("decoder {:?}: best-path takes no lm or lexicon", d.name)));
                    }
                }
                DecoderMode::Wfst => {
                    let lm = d.lm.as_deref().ok_or_else(|| Error::config(format!("decoder {:?} needs an lm", d.name)))?;
                    needed.push(("lm", lm));
                    if let Some(l) = &d.lexicon {
                        needed.push(("lexicon", l));
                    }
                    let priors = self
                        .priors
                        .as_deref()
                        .ok_or_else(|| Error::config(format!("decoder {:?} needs a priors file", d.name)))?;
                    needed.push(("priors", priors));
                    d.search().validate()?;
                }
            }
        }
        for (what, path) in needed {
            if !path.is_file() {
                return Err(Error::config(format!("{what} file {} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub name: String,
    pub mode: DecoderMode,
    pub lm_order: Option<usize>,
    pub lm_mode: Option<LmMode>,
    pub cer: ErrorReport,
    pub wer: ErrorReport,
    /// Test-set word OOV rate against the decoder vocabulary (word models).
    pub oov_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub seed: u64,
    pub lines: usize,
    pub rows: Vec<ResultRow>,
}

impl ExperimentTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max("decoder".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>6}", "decoder", "CER(%)", "WER(%)", "OOV(%)");
        for r in &self.rows {
            let oov = r.oov_rate.map_or("-".to_string(), |o| format!("{:.2}", 100.0 * o));
            let _ = writeln!(out, "{:<width$}  {:>8.2}  {:>8.2}  {:>6}", r.name, 100.0 * r.cer.rate, 100.0 * r.wer.rate, oov);
        }
        let _ = writeln!(out, "{} test lines, seed {}", self.lines, self.seed);
        out
    }
}

/// Lexicon for a word model without one: every vocabulary word spelled as itself.
pub fn vocabulary_lexicon(lm: &NgramLm) -> Lexicon {
    let words: Vec<&str> = lm.tokens().iter().map(String::as_str).filter(|t| ![BOS, EOS, UNK].contains(t)).collect();
    Lexicon::from_words(&words)
}

/// Runs an already resolved config without writing anything.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentTable> {
    cfg.validate()?;
    let features = FeaturePipeline::from_bytes(&read_file(&cfg.features)?)?;
    let model = DblstmModel::from_bytes(&read_file(&cfg.model)?)?;
    if features.output_dim() != model.input_dim() {
        return Err(Error::config(format!(
            "feature dim {} does not match model input dim {}",
            features.output_dim(),
            model.input_dim()
        )));
    }
    let priors: Option<SymbolPriors> = match &cfg.priors {
        Some(p) => Some(serde_json::from_str(&read_text(p)?).map_err(|e| Error::format(format!("priors: {e}")))?),
        None => None,
    };
    let ink = read_ink_path(&cfg.test_ink)?;
    if ink.is_empty() {
        return Err(Error::EmptyInput("test ink file has no lines".into()));
    }
    let refs: Vec<String> = ink.iter().map(|l| l.transcript.clone()).collect();
    let images = prepare_lines(&ink, &cfg.preprocess)?;
    let test = samples(&images, &refs, &features)?;
    let post = posteriors(&model, &test)?;

    let mut rows = Vec::new();
    for spec in &cfg.decoders {
        let (decoder, lm) = match spec.mode {
            DecoderMode::BestPath => (Decoder::BestPath, None),
            DecoderMode::Wfst => {
                let lm = NgramLm::from_arpa(&read_text(spec.lm.as_ref().expect("validated"))?)?;
                let lexicon = match (&spec.lexicon, lm.mode()) {
                    (Some(p), _) => Some(Lexicon::parse(&read_text(p)?)?),
                    (None, LmMode::Word) => Some(vocabulary_lexicon(&lm)),
                    (None, LmMode::Char) => None,
                };
                let priors = priors.clone().expect("validated");
                (Decoder::graph(&lm, &model, lexicon.as_ref(), priors, spec.search())?, Some(lm))
            }
        };
        let hyps: Vec<String> = par_map(&post, |p| decoder.decode(&model, p)).into_iter().collect::<Result<_>>()?;
        let oov_rate = match &lm {
            Some(lm) if lm.mode() == LmMode::Word => {
                let words: Vec<String> = refs.iter().flat_map(|r| tokenize_word(r)).collect();
                let words: Vec<&str> = words.iter().map(String::as_str).collect();
                Some(lm.oov_rate(&words)?)
            }
            _ => None,
        };
        let row = ResultRow {
            name: spec.name.clone(),
            mode: spec.mode,
            lm_order: lm.as_ref().map(NgramLm::order),
            lm_mode: lm.as_ref().map(NgramLm::mode),
            cer: cer(&refs, &hyps)?,
            wer: wer(&refs, &hyps)?,
            oov_rate,
        };
        log::info!("{}: CER {:.4} WER {:.4}", row.name, row.cer.rate, row.wer.rate);
        rows.push(row);
    }
    Ok(ExperimentTable { seed: cfg.seed, lines: refs.len(), rows })
}

/// Reads, resolves and runs a config file, then writes `<output>.json` and
/// `<output>.txt`.
pub fn run_experiment(config_path: &Path) -> Result<ExperimentTable> {
    let text = read_text(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let cfg = ExperimentConfig::parse(&text)?.resolve(base);
    run_and_write(&cfg)
}

/// Runs a resolved config and writes `<output>.json` and `<output>.txt`.
pub fn run_and_write(cfg: &ExperimentConfig) -> Result<ExperimentTable> {
    let table = run(cfg)?;
    if let Some(dir) = cfg.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(cfg.output.with_extension("json"), table.to_json())?;
    std::fs::write(cfg.output.with_extension("txt"), table.to_text())?;
    Ok(table)
}
