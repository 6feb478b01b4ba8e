//! Mini-batch training of the dual encoder with in-batch negatives, the
//! global-local loss, a per-epoch temperature, Adam and global-norm clipping.
//!
//! Within a step the per-sequence forward and backward passes run in parallel;
//! gradients are reduced in a fixed order so a seed fixes the whole trajectory.

mod batch;
mod checkpoint;
mod optim;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{DualEncoder, EncoderGrad, ForwardPass};
use crate::error::{MvrError, Result};
use crate::scoring::{query_loss, LossConfig};
use crate::text::Vocab;

pub use batch::{TrainBatch, TrainData};
pub use checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use optim::{clip_global_norm, OptimizerConfig, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub in_batch_negatives: bool,
    pub hard_negatives_per_query: usize,
    pub seed: u64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 40,
            learning_rate: 1e-3,
            optimizer: OptimizerConfig::default(),
            in_batch_negatives: true,
            hard_negatives_per_query: 0,
            seed: 0,
            grad_clip: 1.0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MvrError::config("batch_size must be at least 1"));
        }
        if self.in_batch_negatives && self.batch_size < 2 {
            return Err(MvrError::config("in-batch negatives need batch_size >= 2"));
        }
        if !self.in_batch_negatives && self.hard_negatives_per_query == 0 {
            return Err(MvrError::config("no negatives: enable in-batch negatives or request hard negatives"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(MvrError::config("learning_rate must be finite and >= 0"));
        }
        self.loss.validate()
    }
}

/// Running sums for the epoch in progress.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochAccumulator {
    pub loss_sum: f64,
    pub local_sum: f64,
    pub queries: usize,
}

/// Everything needed to resume training exactly.
///
/// Batch order is a pure function of (seed, epoch), so the position inside
/// the epoch stands in for the sampler's RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub model: DualEncoder,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
    pub tau: f64,
    pub accum: EpochAccumulator,
}

impl TrainState {
    pub fn new(config: TrainConfig, vocab: Vocab, model: DualEncoder) -> Result<Self> {
        config.validate()?;
        if model.config.vocab_size != vocab.len() {
            return Err(MvrError::DimensionMismatch {
                expected: vocab.len(),
                actual: model.config.vocab_size,
            });
        }
        let optimizer = OptimizerState::new(config.optimizer, &model);
        let tau = config.loss.schedule().temperature_at(0);
        Ok(TrainState {
            config,
            vocab,
            model,
            optimizer,
            epoch: 0,
            step_in_epoch: 0,
            global_step: 0,
            tau,
            accum: EpochAccumulator::default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: u64,
    pub tau: f64,
    pub loss: f64,
    pub local_loss: f64,
    pub grad_norm: f64,
}

/// One record of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub tau: f64,
    pub mean_loss: f64,
    pub mean_local_loss: f64,
}

/// Loss and gradients of one batch, before clipping.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: f64,
    pub local_loss: f64,
    pub grads: DualEncoder,
}

/// Mean global-local loss over the batch and its gradient w.r.t. both encoders.
pub fn batch_gradient(model: &DualEncoder, data: &TrainData, batch: &TrainBatch, tau: f64, lambda: f64) -> Result<BatchGradient> {
    let cfg = &model.config;
    let q_params = model.query_params();
    let q_passes: Vec<ForwardPass> = batch
        .examples
        .par_iter()
        .map(|&e| q_params.forward_query(cfg, &data.queries[e]))
        .collect::<Result<_>>()?;
    let d_passes: Vec<ForwardPass> = batch
        .docs
        .par_iter()
        .map(|&d| model.doc.forward_doc(cfg, &data.docs[d]))
        .collect::<Result<_>>()?;

    let n = batch.examples.len() as f64;
    let mut d_queries: Vec<Array2<f64>> = Vec::with_capacity(batch.examples.len());
    let mut d_docs: Vec<Array2<f64>> = d_passes
        .iter()
        .map(|p| Array2::zeros(p.embedding.views.raw_dim()))
        .collect();
    let (mut loss, mut local) = (0.0, 0.0);
    for (qi, qp) in q_passes.iter().enumerate() {
        let pos = batch.positive[qi];
        let negs: Vec<ArrayView2<f64>> = batch.negatives[qi]
            .iter()
            .map(|&j| d_passes[j].embedding.views.view())
            .collect();
        let ql = query_loss(
            qp.embedding.query_vector(),
            d_passes[pos].embedding.views.view(),
            &negs,
            tau,
            lambda,
        )?;
        loss += ql.total;
        local += ql.local;
        d_queries.push((ql.d_query / n).insert_axis(ndarray::Axis(0)));
        d_docs[pos].scaled_add(1.0 / n, &ql.d_pos);
        for (&j, g) in batch.negatives[qi].iter().zip(&ql.d_negs) {
            d_docs[j].scaled_add(1.0 / n, g);
        }
    }

    let q_grads: Vec<EncoderGrad> = q_passes
        .par_iter()
        .zip(d_queries.par_iter())
        .map(|(p, g)| p.backward(q_params, g))
        .collect::<Result<_>>()?;
    let d_grads: Vec<EncoderGrad> = d_passes
        .par_iter()
        .zip(d_docs.par_iter())
        .map(|(p, g)| p.backward(&model.doc, g))
        .collect::<Result<_>>()?;

    let mut grads = model.zeros_like();
    {
        let q_target = if cfg.tied { &mut grads.doc } else { &mut grads.query };
        for g in &q_grads {
            g.accumulate_into(q_target);
        }
    }
    for g in &d_grads {
        g.accumulate_into(&mut grads.doc);
    }
    Ok(BatchGradient {
        loss: loss / n,
        local_loss: local / n,
        grads,
    })
}

/// Drives training over a fixed dataset.
pub struct Trainer<'a> {
    pub data: &'a TrainData,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a TrainData) -> Self {
        Trainer { data }
    }

    pub fn steps_per_epoch(&self, cfg: &TrainConfig) -> usize {
        self.data.n_examples().div_ceil(cfg.batch_size)
    }

    /// Runs the next step. Returns the step metrics, plus the epoch metrics if
    /// this step finished an epoch.
    pub fn step(&self, state: &mut TrainState) -> Result<(StepMetrics, Option<EpochMetrics>)> {
        let cfg = state.config.clone();
        if state.step_in_epoch == 0 {
            state.tau = cfg.loss.schedule().temperature_at(state.epoch);
        }
        let batches = self.data.epoch_batches(&cfg, state.epoch);
        let batch = TrainBatch::build(self.data, &batches[state.step_in_epoch], &cfg)?;
        let mut bg = batch_gradient(&state.model, self.data, &batch, state.tau, cfg.loss.lambda)?;
        if !bg.loss.is_finite() || !bg.grads.tensors().iter().all(|t| t.iter().all(|x| x.is_finite())) {
            let queries: Vec<String> = batch
                .examples
                .iter()
                .map(|&e| format!("{:?}", self.data.queries[e].ids))
                .collect();
            let docs: Vec<&str> = batch.docs.iter().map(|&d| self.data.doc_ids[d].as_str()).collect();
            return Err(MvrError::NonFiniteLoss {
                epoch: state.epoch,
                step: state.step_in_epoch,
                detail: format!("loss={} tau={} docs={docs:?} queries={queries:?}", bg.loss, state.tau),
            });
        }
        let grad_norm = if cfg.grad_clip > 0.0 {
            clip_global_norm(&mut bg.grads, cfg.grad_clip)
        } else {
            clip_global_norm(&mut bg.grads, f64::INFINITY)
        };
        state
            .optimizer
            .update(&mut state.model, &bg.grads, cfg.learning_rate);

        let n = batch.examples.len();
        state.accum.loss_sum += bg.loss * n as f64;
        state.accum.local_sum += bg.local_loss * n as f64;
        state.accum.queries += n;
        state.global_step += 1;
        state.step_in_epoch += 1;
        let step = StepMetrics {
            epoch: state.epoch,
            step: state.global_step,
            tau: state.tau,
            loss: bg.loss,
            local_loss: bg.local_loss,
            grad_norm,
        };
        let mut finished = None;
        if state.step_in_epoch == batches.len() {
            let q = state.accum.queries.max(1) as f64;
            finished = Some(EpochMetrics {
                epoch: state.epoch,
                tau: state.tau,
                mean_loss: state.accum.loss_sum / q,
                mean_local_loss: state.accum.local_sum / q,
            });
            state.accum = EpochAccumulator::default();
            state.epoch += 1;
            state.step_in_epoch = 0;
            state.tau = cfg.loss.schedule().temperature_at(state.epoch);
        }
        Ok((step, finished))
    }

    /// Runs steps until the current epoch completes.
    pub fn train_epoch(&self, state: &mut TrainState) -> Result<EpochMetrics> {
        loop {
            if let (_, Some(m)) = self.step(state)? {
                return Ok(m);
            }
        }
    }

    /// Trains until `state.epoch == state.config.epochs`, passing each epoch's
    /// metrics to `on_epoch`.
    pub fn train(&self, state: &mut TrainState, mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::new();
        while state.epoch < state.config.epochs {
            let m = self.train_epoch(state)?;
            log::info!(
                "epoch {} tau {:.4} loss {:.5} local {:.5}",
                m.epoch,
                m.tau,
                m.mean_loss,
                m.mean_local_loss
            );
            on_epoch(&m)?;
            out.push(m);
        }
        Ok(out)
    }

    /// Mean loss over one pass of the given epoch's batches, without updating.
    pub fn evaluate_loss(&self, state: &TrainState, epoch: usize) -> Result<f64> {
        let cfg = &state.config;
        let tau = cfg.loss.schedule().temperature_at(epoch);
        let mut total = 0.0;
        let mut count = 0usize;
        for ex in self.data.epoch_batches(cfg, epoch) {
            let batch = TrainBatch::build(self.data, &ex, cfg)?;
            let bg = batch_gradient(&state.model, self.data, &batch, tau, cfg.loss.lambda)?;
            total += bg.loss * ex.len() as f64;
            count += ex.len();
        }
        Ok(total / count.max(1) as f64)
    }
}

#[cfg(test)]
mod tests;
