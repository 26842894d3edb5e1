use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lstm::{backward_pass, forward_pass};
use super::model::{DblstmModel, PosteriorSequence};
use crate::ctc::{best_path_decode, ctc_loss_grad};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub momentum: f64,
    pub final_lr: f64,
    /// Epochs at the initial learning rate.
    pub first_stage_epochs: usize,
    /// Epochs after each halving.
    pub later_stage_epochs: usize,
    /// Maximum number of halvings; `None` halves until `final_lr` is crossed.
    pub lr_reductions: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub gradient_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-4,
            momentum: 0.9,
            final_lr: 1e-6,
            first_stage_epochs: 10,
            later_stage_epochs: 2,
            lr_reductions: None,
            batch_size: 8,
            seed: 0,
            gradient_clip: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.final_lr > 0.0 && self.final_lr <= self.initial_lr) {
            return Err(Error::config("need 0 < final_lr <= initial_lr"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.first_stage_epochs == 0 {
            return Err(Error::config("batch_size and first_stage_epochs must be positive"));
        }
        if matches!(self.gradient_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::config("gradient_clip must be positive"));
        }
        Ok(())
    }

    /// Epoch budget of the whole schedule.
    pub fn total_epochs(&self) -> usize {
        let mut stage = 1;
        let mut total = self.first_stage_epochs;
        while lr_schedule(stage, self).is_some() {
            total += self.later_stage_epochs;
            stage += 1;
        }
        total
    }
}

/// `initial_lr · 0.5^stage`, or `None` once the schedule has ended.
pub fn lr_schedule(stage: usize, cfg: &TrainConfig) -> Option<f64> {
    if cfg.lr_reductions.is_some_and(|n| stage > n) {
        return None;
    }
    let lr = cfg.initial_lr * 0.5f64.powi(stage as i32);
    (lr >= cfg.final_lr).then_some(lr)
}

/// Momentum buffer, zero at the start of training.
#[derive(Clone, Debug)]
pub struct SgdState {
    velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(num_params: usize) -> Self {
        SgdState { velocity: vec![0.0; num_params] }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}

/// `v ← m·v − lr·clip(g)`, `θ ← θ + v`. Returns the pre-clip gradient norm.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    clip: Option<f64>,
) -> Result<f64> {
    if params.len() != grads.len() || state.velocity.len() != grads.len() {
        return Err(Error::contract("parameter, gradient and velocity sizes differ"));
    }
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::Numerical(format!("gradient norm is {norm}")));
    }
    let scale = match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    for ((p, v), g) in params.iter_mut().zip(&mut state.velocity).zip(grads) {
        *v = momentum * *v - lr * scale * g;
        *p += *v;
    }
    Ok(norm)
}

/// One training line: features and its transcript.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub features: FeatureSequence,
    pub transcript: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Pooled best-path CER on the held-out split, when one is given.
    pub heldout_cer: Option<f64>,
    /// Lines skipped because they are too short for their transcript.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DblstmModel,
    pub log: Vec<EpochRecord>,
    /// Training stopped early on a non-finite loss or gradient; `model` holds
    /// the parameters from the start of the failing epoch.
    pub diverged: bool,
}

fn encode_all(model: &DblstmModel, samples: &[TrainSample]) -> Result<Vec<Vec<usize>>> {
    samples
        .iter()
        .map(|s| {
            if s.features.dim() != model.input_dim() {
                return Err(Error::contract(format!(
                    "feature dim {} does not match model input dim {}",
                    s.features.dim(),
                    model.input_dim()
                )));
            }
            model.alphabet().encode(&s.transcript)
        })
        .collect()
}

/// Best-path transcription of one line.
pub fn recognize(model: &DblstmModel, x: &FeatureSequence) -> Result<String> {
    let post: PosteriorSequence = super::lstm::forward(model, x)?;
    Ok(model.alphabet().decode(&best_path_decode(&post)))
}

/// Pooled best-path CER over a labelled set.
pub fn evaluate_cer(model: &DblstmModel, samples: &[TrainSample]) -> Result<f64> {
    let hyps = samples.iter().map(|s| recognize(model, &s.features)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&str> = samples.iter().map(|s| s.transcript.as_str()).collect();
    Ok(crate::eval::cer(&refs, &hyps)?.rate)
}

/// Epochwise mini-batch training under the CTC objective with the halving
/// schedule. `on_epoch` sees each record as it is produced.
pub fn train(
    model: DblstmModel,
    corpus: &[TrainSample],
    heldout: &[TrainSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::config("training corpus is empty"));
    }
    let labels = encode_all(&model, corpus)?;
    encode_all(&model, heldout)?;
    let mut model = model;
    let classes = model.num_classes();
    let mut state = SgdState::new(model.num_params());
    let mut grad = vec![0.0; model.num_params()];
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = Vec::new();
    let mut epoch = 0;
    let mut stage = 0;
    while let Some(lr) = lr_schedule(stage, cfg) {
        let epochs = if stage == 0 { cfg.first_stage_epochs } else { cfg.later_stage_epochs };
        for _ in 0..epochs {
            let snapshot = model.params().to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(epoch as u64);
            order.sort_unstable();
            order.shuffle(&mut rng);
            let (mut total, mut used, mut skipped) = (0.0, 0usize, 0usize);
            let mut failed = None;
            for batch in order.chunks(cfg.batch_size) {
                grad.fill(0.0);
                let step = (|| -> Result<()> {
                    for &n in batch {
                        let x = &corpus[n].features;
                        let pass = forward_pass(&model, x.data(), x.len())?;
                        let out = match ctc_loss_grad(pass.logits(), x.len(), classes, &labels[n]) {
                            Ok(out) => out,
                            Err(Error::InfeasibleAlignment { .. }) => {
                                skipped += 1;
                                continue;
                            }
                            Err(e) => return Err(e),
                        };
                        total += out.loss;
                        used += 1;
                        backward_pass(&model, &pass, &out.grad, &mut grad)?;
                    }
                    if !total.is_finite() {
                        return Err(Error::Numerical(format!("loss became {total}")));
                    }
                    sgd_step(model.params_mut(), &grad, &mut state, lr, cfg.momentum, cfg.gradient_clip)?;
                    if model.params().iter().any(|p| !p.is_finite()) {
                        return Err(Error::Numerical("parameters became non-finite".into()));
                    }
                    Ok(())
                })();
                match step {
                    Ok(()) => {}
                    Err(e @ Error::Numerical(_)) => {
                        failed = Some(e);
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if let Some(e) = failed {
                log::warn!("epoch {epoch} diverged: {e}; keeping the epoch-start parameters");
                model.params_mut().copy_from_slice(&snapshot);
                return Ok(TrainOutcome { model, log, diverged: true });
            }
            if used == 0 {
                return Err(Error::config("no training line can be aligned with its transcript"));
            }
            let heldout_cer = if heldout.is_empty() { None } else { Some(evaluate_cer(&model, heldout)?) };
            let record = EpochRecord { epoch, stage, lr, mean_loss: total / used as f64, heldout_cer, skipped };
            log::info!("{}", serde_json::to_string(&record).unwrap_or_default());
            on_epoch(&record);
            log.push(record);
            epoch += 1;
        }
        stage += 1;
    }
    Ok(TrainOutcome { model, log, diverged: false })
}
