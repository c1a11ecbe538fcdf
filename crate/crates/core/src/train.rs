//! Mini-batch Adam training with validation-loss early stopping, and batched
//! evaluation-mode prediction.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Window};
use crate::error::{Error, Result};
use crate::losses::align_loss;
use crate::model::{joint_loss, video_forward, video_input, ModelConfig};
use crate::numerics::{adam_step, AdamConfig, AdamState, Mode, ParamStore, Tape};
use crate::video::{FrameRenderer, LEVELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Training subjects held back for early stopping.
    pub validation_subjects: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 50, batch_size: 16, lr: 2e-3, weight_decay: 1e-4, patience: 10, seed: 0, validation_subjects: 1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be positive"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch, or of the last finite epoch
    /// when training diverged.
    pub store: ParamStore<f32>,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub diverged: Option<String>,
}

fn batches<'a>(windows: &'a [Window], order: &[usize], size: usize) -> impl Iterator<Item = Vec<&'a Window>> + 'a {
    let order = order.to_vec();
    (0..order.len().div_ceil(size)).map(move |b| order[b * size..((b + 1) * size).min(order.len())].iter().map(|&i| &windows[i]).collect())
}

/// Mean video-path cross entropy in evaluation mode, the quantity early
/// stopping watches.
pub fn evaluate_loss(store: &ParamStore<f32>, cfg: &ModelConfig, renderer: Option<&FrameRenderer>, windows: &[Window], batch_size: usize) -> Result<f64> {
    let order: Vec<usize> = (0..windows.len()).collect();
    let mut total = 0.0;
    for chunk in batches(windows, &order, batch_size) {
        let batch = Batch::<f32>::from_windows(&chunk, cfg.video.segments)?;
        let mut tape = Tape::new(Mode::Eval, 0);
        let input = video_input(cfg, renderer, &batch.clip)?;
        let out = video_forward(&mut tape, store, cfg, &input)?;
        let ce = tape.cross_entropy(out.logits, &batch.labels)?;
        total += tape.value(ce).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(total / windows.len().max(1) as f64)
}

/// Trains a fresh model. Falls back to training loss for early stopping when
/// `val` is empty. Per-step losses go to `log` as `step key=value ...` lines.
pub fn train(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    train: &[Window],
    val: &[Window],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tc.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let renderer = cfg.renderer();
    let mut store = crate::model::init_model::<f32>(cfg, tc.seed)?;
    let mut adam = AdamState::default();
    let adam_cfg = tc.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, store.clone());
    let mut step = 0u64;
    let mut diverged = None;

    'epochs: for epoch in 1..=tc.epochs {
        let last_stable = store.clone();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in batches(train, &order, tc.batch_size) {
            step += 1;
            let batch = Batch::<f32>::from_windows(&chunk, cfg.video.segments)?;
            let mut tape = Tape::new(Mode::Train, tc.seed.wrapping_mul(1_000_003).wrapping_add(step));
            let out = joint_loss(&mut tape, &store, cfg, renderer.as_ref(), &batch)?;
            let loss = tape.value(out.loss).data()[0] as f64;
            if !loss.is_finite() {
                diverged = Some(format!("loss at epoch {epoch}, step {step}"));
                store = last_stable;
                break 'epochs;
            }
            if let Some(w) = log.as_deref_mut() {
                let ce = tape.cross_entropy(out.video.logits, &batch.labels)?;
                let probe = tape.cross_entropy(out.sensor.probe_logits, &batch.labels)?;
                let align = align_loss(&mut tape, out.video.z_v, out.sensor.z_p, false)?;
                let v = |x| tape.value(x).data()[0];
                writeln!(w, "{step} total={loss:.6} video_ce={:.6} probe_ce={:.6} align={:.6}", v(ce), v(probe), v(align))
                    .map_err(|e| Error::io("metrics log", e))?;
            }
            tape.backward(out.loss)?;
            let grads = store.gradients(&tape);
            store.apply_buffer_updates(tape.take_buffer_updates())?;
            match adam_step(&mut store, &grads, &mut adam, &adam_cfg) {
                Ok(()) => {}
                Err(Error::Numeric { location }) => {
                    diverged = Some(format!("{location} at epoch {epoch}, step {step}"));
                    store = last_stable;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            sum += loss * chunk.len() as f64;
        }
        let train_loss = sum / train.len() as f64;
        let val_loss = if val.is_empty() { evaluate_loss(&store, cfg, renderer.as_ref(), train, tc.batch_size.max(32))? } else { evaluate_loss(&store, cfg, renderer.as_ref(), val, tc.batch_size.max(32))? };
        history.push(EpochLog { epoch, train_loss, val_loss });
        if !val_loss.is_finite() {
            diverged = Some(format!("validation loss at epoch {epoch}"));
            break;
        }
        if val_loss < best.0 {
            best = (val_loss, epoch, store.clone());
        } else if epoch - best.1 >= tc.patience {
            break;
        }
    }
    let (store, best_epoch) = match diverged {
        Some(_) => (store, history.last().map_or(0, |h| h.epoch)),
        None => (best.2, best.1),
    };
    Ok(TrainOutcome { store, history, best_epoch, diverged })
}

/// Evaluation-mode outputs, one row per window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    pub video_logits: Vec<Vec<f32>>,
    pub probe_logits: Vec<Vec<f32>>,
    pub z_v: Vec<Vec<f32>>,
    pub z_p: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub subjects: Vec<u32>,
}

fn rows(t: &crate::numerics::Tensor<f32>) -> Vec<Vec<f32>> {
    let w = t.shape()[1];
    t.data().chunks(w).map(<[f32]>::to_vec).collect()
}

pub fn predict(store: &ParamStore<f32>, cfg: &ModelConfig, windows: &[Window], batch_size: usize) -> Result<Predictions> {
    let renderer = cfg.renderer();
    let mut p = Predictions::default();
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&Window> = chunk.iter().collect();
        let batch = Batch::<f32>::from_windows(&refs, cfg.video.segments)?;
        let mut tape = Tape::new(Mode::Eval, 0);
        let out = joint_loss(&mut tape, store, cfg, renderer.as_ref(), &batch)?;
        p.video_logits.extend(rows(tape.value(out.video.logits)));
        p.probe_logits.extend(rows(tape.value(out.sensor.probe_logits)));
        p.z_v.extend(rows(tape.value(out.video.z_v)));
        p.z_p.extend(rows(tape.value(out.sensor.z_p)));
        p.labels.extend(&batch.labels);
        p.subjects.extend(chunk.iter().map(|w| w.subject_id));
    }
    debug_assert!(p.video_logits.iter().all(|r| r.len() == LEVELS));
    Ok(p)
}
