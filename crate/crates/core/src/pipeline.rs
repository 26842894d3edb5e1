//! End-to-end glue: ink → image → preprocessed image → features →
//! posteriors → text, plus file helpers shared by the CLI and experiments.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{FeaturePipeline, FeatureSequence};
use crate::ink::{read_ink_file, render_line, InkLine, LineImage, DEFAULT_THICKNESS};
use crate::lm::{token_char, LmMode, NgramLm};
use crate::net::{forward, DblstmModel, PosteriorSequence, TrainSample};
use crate::preprocess::{preprocess_line, PreprocessConfig};
use crate::wfst::{build_lm_graph, decode, DecodeConfig, Lexicon, SymbolPriors, Wfst};

/// Maps `f` over `items` on all available cores, keeping order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

pub fn read_ink_path(path: &Path) -> Result<Vec<InkLine>> {
    let file = File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_ink_file(BufReader::new(file))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|_| Error::format(format!("{} is not UTF-8", path.display())))
}

/// Render and preprocess one ink line.
pub fn prepare_line(line: &InkLine, cfg: &PreprocessConfig) -> Result<LineImage> {
    let (image, _) = render_line(line, DEFAULT_THICKNESS)?;
    Ok(preprocess_line(&image, cfg)?.0.image)
}

pub fn prepare_lines(lines: &[InkLine], cfg: &PreprocessConfig) -> Result<Vec<LineImage>> {
    par_map(lines, |l| prepare_line(l, cfg)).into_iter().collect()
}

/// Features and transcripts for training or evaluation.
pub fn samples(images: &[LineImage], transcripts: &[String], features: &FeaturePipeline) -> Result<Vec<TrainSample>> {
    if images.len() != transcripts.len() {
        return Err(Error::contract("image and transcript counts differ"));
    }
    let feats: Vec<FeatureSequence> = par_map(images, |i| features.apply(i)).into_iter().collect::<Result<_>>()?;
    Ok(feats.into_iter().zip(transcripts).map(|(features, t)| TrainSample { features, transcript: t.clone() }).collect())
}

pub fn posteriors(model: &DblstmModel, samples: &[TrainSample]) -> Result<Vec<PosteriorSequence>> {
    par_map(samples, |s| forward(model, &s.features)).into_iter().collect()
}

/// How posteriors become text.
#[derive(Clone, Debug)]
pub enum Decoder {
    BestPath,
    Graph { graph: Wfst, mode: LmMode, priors: SymbolPriors, config: DecodeConfig },
}

impl Decoder {
    /// Compiles the search graph for an n-gram model.
    pub fn graph(
        lm: &NgramLm,
        model: &DblstmModel,
        lexicon: Option<&Lexicon>,
        priors: SymbolPriors,
        config: DecodeConfig,
    ) -> Result<Self> {
        config.validate()?;
        priors.validate()?;
        if priors.prior.len() != model.num_classes() {
            return Err(Error::config(format!(
                "{} priors for a model with {} classes",
                priors.prior.len(),
                model.num_classes()
            )));
        }
        let graph = build_lm_graph(lm, model.alphabet(), lexicon)?;
        Ok(Decoder::Graph { graph, mode: lm.mode(), priors, config })
    }

    pub fn decode(&self, model: &DblstmModel, post: &PosteriorSequence) -> Result<String> {
        match self {
            Decoder::BestPath => Ok(model.alphabet().decode(&crate::ctc::best_path_decode(post))),
            Decoder::Graph { graph, mode, priors, config } => {
                let r = decode(graph, post, priors, config)?;
                Ok(graph_text(&r.tokens(graph), *mode))
            }
        }
    }
}

/// Joins graph output tokens: words with spaces, characters directly.
pub fn graph_text(tokens: &[&str], mode: LmMode) -> String {
    match mode {
        LmMode::Word => tokens.join(" "),
        LmMode::Char => tokens.iter().filter_map(|t| token_char(t)).collect(),
    }
}
