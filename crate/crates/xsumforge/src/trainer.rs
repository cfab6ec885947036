//! Optimization loop: Nesterov momentum with global gradient renormalization,
//! per-token loss normalization, and validation-perplexity-driven
//! learning-rate annealing with early stop.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convs2s::{bind, forward_loss, ModelConfig, ModelError, ModelParams};
use crate::corpus::{EncodedPair, PAD};
use crate::diffcore::Tape;
use crate::threads;

pub const STOP_LR: f64 = 1e-4;
pub const ANNEAL_FACTOR: f64 = 0.1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("batch contains no unpadded target tokens")]
    DegenerateBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.10
}
fn default_momentum() -> f64 {
    0.99
}
fn default_renorm() -> f64 {
    0.1
}
fn default_max_epochs() -> usize {
    30
}
fn default_window() -> usize {
    1024
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Global L2 gradient norm above which the whole set is scaled down.
    #[serde(default = "default_renorm")]
    pub renorm_threshold: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Pairs are shuffled, then sorted by source length within windows of
    /// this size to keep batches length-homogeneous.
    #[serde(default = "default_window")]
    pub shuffle_window: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

/// One training example: the encoded pair plus its topic conditioning.
/// Topic fields stay empty for the plain variant.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub pair: EncodedPair,
    pub word_topics: Vec<Vec<f64>>,
    pub doc_topic: Vec<f64>,
}

impl TrainPair {
    pub fn topics(&self) -> crate::convs2s::TopicVectors<'_> {
        crate::convs2s::TopicVectors {
            word_topics: &self.word_topics,
            doc_topic: &self.doc_topic,
        }
    }

    pub fn live_target_tokens(&self) -> usize {
        self.pair.target_ids.iter().filter(|&&t| t != PAD).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ppl: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub velocity: BTreeMap<String, Vec<f64>>,
    pub lr: f64,
    pub epoch: usize,
    pub best_val_ppl: f64,
    pub annealing: bool,
    pub history: Vec<EpochStats>,
}

impl TrainState {
    pub fn new(params: ModelParams, lr: f64) -> Self {
        let velocity = params
            .tensors()
            .iter()
            .map(|(name, t)| (name.clone(), vec![0.0; t.numel()]))
            .collect();
        TrainState {
            params,
            velocity,
            lr,
            epoch: 0,
            best_val_ppl: f64::INFINITY,
            annealing: false,
            history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Continue,
    Stop,
}

/// Scales every gradient by `threshold / norm` when the global L2 norm across
/// all parameters exceeds `threshold`. Returns the pre-scaling norm.
pub fn renorm_grads(grads: &mut BTreeMap<String, Vec<f64>>, threshold: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > threshold {
        let scale = threshold / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// One Nesterov update: v <- mu*v - lr*g, then theta <- theta + mu*v - lr*g
/// with the fresh velocity.
pub fn nesterov_step(
    params: &mut ModelParams,
    velocity: &mut BTreeMap<String, Vec<f64>>,
    grads: &BTreeMap<String, Vec<f64>>,
    lr: f64,
    momentum: f64,
) {
    for (name, g) in grads {
        let v = velocity.get_mut(name).expect("velocity mirrors params");
        let theta = params.tensors_mut().get_mut(name).expect("gradient names a parameter");
        for ((vi, ti), gi) in v.iter_mut().zip(theta.values_mut()).zip(g) {
            *vi = momentum * *vi - lr * gi;
            *ti += momentum * *vi - lr * gi;
        }
    }
}

/// exp(mean token NLL) over every unpadded target token in the set,
/// evaluated without dropout.
pub fn validation_perplexity(
    params: &ModelParams,
    val: &[TrainPair],
) -> Result<f64, TrainError> {
    if val.is_empty() {
        return Err(TrainError::EmptyValidationSet);
    }
    let config = *params.config();
    let per_pair: Result<Vec<(f64, usize)>, ModelError> = threads::pool().install(|| {
        val.par_iter()
            .map(|tp| {
                let mut tape = Tape::new();
                let bound = bind(&mut tape, params)?;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let loss =
                    forward_loss(&mut tape, &bound, &config, &tp.pair, tp.topics(), false, &mut rng)?;
                Ok((tape.scalar_value(loss), tp.live_target_tokens()))
            })
            .collect()
    });
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for (mean_nll, n) in per_pair? {
        nll += mean_nll * n as f64;
        tokens += n;
    }
    Ok((nll / tokens as f64).exp())
}

/// Records one epoch's validation perplexity. The first epoch that fails to
/// strictly improve on the best seen latches the annealing phase; from then
/// on the learning rate decays by an order of magnitude per epoch, and
/// training stops once it falls below `STOP_LR`.
pub fn anneal_and_stop(state: &mut TrainState, new_val_ppl: f64) -> Verdict {
    if new_val_ppl < state.best_val_ppl {
        state.best_val_ppl = new_val_ppl;
    } else {
        state.annealing = true;
    }
    if state.annealing {
        state.lr *= ANNEAL_FACTOR;
    }
    if state.lr < STOP_LR {
        Verdict::Stop
    } else {
        Verdict::Continue
    }
}

fn epoch_batches(
    pairs: &[TrainPair],
    tc: &TrainerConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    for window in order.chunks_mut(tc.shuffle_window.max(1)) {
        window.sort_by_key(|&i| pairs[i].pair.source_ids.len());
    }
    order.chunks(tc.batch_size.max(1)).map(|c| c.to_vec()).collect()
}

pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "epoch,train_loss,val_ppl,lr")?;
    for s in history {
        writeln!(out, "{},{},{},{}", s.epoch, s.train_loss, s.val_ppl, s.lr)?;
    }
    out.flush()
}

/// Trains a fresh model. Each batch builds one graph whose loss is the
/// token-count-weighted mean of per-pair losses (the batch mean NLL per
/// unpadded token), then backpropagates, renormalizes, and steps. After each
/// epoch: validation, an optional checkpoint `ckpt-epochN` plus
/// `training_log.csv` under `out_dir`, then the annealing decision.
pub fn train(
    config: &ModelConfig,
    tc: &TrainerConfig,
    train_pairs: &[TrainPair],
    val_pairs: &[TrainPair],
    out_dir: Option<&Path>,
) -> Result<TrainState, TrainError> {
    if train_pairs.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if val_pairs.is_empty() {
        return Err(TrainError::EmptyValidationSet);
    }
    config.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let params = ModelParams::new(*config, tc.seed)?;
    let mut state = TrainState::new(params, tc.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    for epoch in 1..=tc.max_epochs {
        state.epoch = epoch;
        let lr_used = state.lr;
        let mut epoch_nll = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in epoch_batches(train_pairs, tc, &mut rng) {
            let total: usize =
                batch.iter().map(|&i| train_pairs[i].live_target_tokens()).sum();
            if total == 0 {
                return Err(TrainError::DegenerateBatch);
            }
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &state.params)?;
            let mut batch_loss = None;
            for &i in &batch {
                let tp = &train_pairs[i];
                let live = tp.live_target_tokens();
                if live == 0 {
                    continue;
                }
                let loss =
                    forward_loss(&mut tape, &bound, config, &tp.pair, tp.topics(), true, &mut rng)?;
                let scaled = tape
                    .scale(loss, live as f64 / total as f64)
                    .map_err(ModelError::from)?;
                batch_loss = Some(match batch_loss {
                    None => scaled,
                    Some(acc) => tape.add(acc, scaled).map_err(ModelError::from)?,
                });
            }
            let batch_loss = batch_loss.expect("batch has live tokens");
            let loss_value = tape.scalar_value(batch_loss);
            tape.backward(batch_loss).map_err(ModelError::from)?;
            let mut grads: BTreeMap<String, Vec<f64>> = bound
                .leaves()
                .iter()
                .map(|(name, &id)| {
                    let g = tape
                        .grad(id)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; state.params.get(name).numel()]);
                    (name.clone(), g)
                })
                .collect();
            renorm_grads(&mut grads, tc.renorm_threshold);
            nesterov_step(&mut state.params, &mut state.velocity, &grads, state.lr, tc.momentum);
            epoch_nll += loss_value * total as f64;
            epoch_tokens += total;
        }
        let train_loss = epoch_nll / epoch_tokens as f64;
        let val_ppl = validation_perplexity(&state.params, val_pairs)?;
        state.history.push(EpochStats { epoch, train_loss, val_ppl, lr: lr_used });
        if let Some(dir) = out_dir {
            state.params.save(&dir.join(format!("ckpt-epoch{epoch}")))?;
            write_history_csv(&dir.join("training_log.csv"), &state.history)?;
        }
        if anneal_and_stop(&mut state, val_ppl) == Verdict::Stop {
            break;
        }
    }
    Ok(state)
}
