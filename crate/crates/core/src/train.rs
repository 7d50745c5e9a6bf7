//! Training loops and evaluation.

use serde::{Deserialize, Serialize};

use crate::adversarial::{self, AdvConfig};
use crate::data::{epoch_order, Dataset, PretextCorpus, TaskDataset};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::{Model, PretextTerms};
use crate::optim::{Optimizer, Sgd};
use crate::params::ParamStore;
use crate::rng::{derive_indexed, derive_seed};
use crate::tape::Tape;

/// Optimization budget for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Budget {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be positive and finite, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Loss minimized at each step.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// `ce_weight · CE(f(x), y)`
    Standard { ce_weight: f64 },
    Pretext(PretextTerms),
    /// Clean CE + adversarial CE + weighted symmetric KL, with PGD inner steps.
    Adversarial(&'a AdvConfig),
}

impl Objective<'_> {
    pub const STANDARD: Objective<'static> = Objective::Standard { ce_weight: 1.0 };
}

/// Per-step training losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
}

impl TrainTrace {
    /// Mean of the last `n` recorded losses.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Example indices of global step `step` in the seeded data stream.
///
/// The stream is a pure function of `(seed, step)`, so a run resumed at
/// step `i` sees exactly the batches an uninterrupted run would.
pub fn stream_batch(len: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let per_epoch = len.div_ceil(batch_size);
    let (epoch, pos) = (step / per_epoch, step % per_epoch);
    let order = epoch_order(len, derive_indexed(seed, "epoch", epoch as u64));
    order[pos * batch_size..((pos + 1) * batch_size).min(len)].to_vec()
}

/// Train `params` in place over global steps `[start, end)`.
///
/// `on_step` runs after every update with the number of completed steps.
#[allow(clippy::too_many_arguments)]
pub fn train<D: Dataset + ?Sized>(
    model: &Model,
    params: &mut ParamStore,
    mask: Option<&Mask>,
    data: &D,
    objective: Objective<'_>,
    budget: &Budget,
    seed: u64,
    start: usize,
    end: usize,
    mut on_step: impl FnMut(usize, &ParamStore) -> Result<()>,
) -> Result<TrainTrace> {
    budget.validate()?;
    if budget.batch_size > data.len() {
        return Err(Error::config(
            "batch_size",
            format!("{} exceeds dataset size {}", budget.batch_size, data.len()),
        ));
    }
    if let Some(m) = mask {
        m.apply(params)?;
    }
    let order_seed = derive_seed(seed, "data-order");
    let mut opt = Sgd { lr: budget.lr };
    let mut trace = TrainTrace::default();
    let enc = model.encoding();
    let mut cached_epoch = usize::MAX;
    let mut order = Vec::new();
    let per_epoch = data.len().div_ceil(budget.batch_size);
    for step in start..end {
        let epoch = step / per_epoch;
        if epoch != cached_epoch {
            order = epoch_order(data.len(), derive_indexed(order_seed, "epoch", epoch as u64));
            cached_epoch = epoch;
        }
        let pos = step % per_epoch;
        let idx = &order[pos * budget.batch_size..((pos + 1) * budget.batch_size).min(data.len())];
        let batch = data.batch(idx, enc);

        let delta = match objective {
            Objective::Adversarial(cfg) => Some(adversarial::pgd_perturb(model, params, mask, &batch, cfg)?),
            _ => None,
        };
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, params, mask)?;
        let loss = match objective {
            Objective::Standard { ce_weight } => {
                let ce = model.std_loss_on(&mut tape, &bound, &batch, None)?;
                if ce_weight == 1.0 {
                    ce
                } else {
                    tape.scale(ce, ce_weight)?
                }
            }
            Objective::Pretext(terms) => {
                let b = if terms.mrm || terms.itm { batch } else { batch.without_image() };
                model.pretext_loss_on(&mut tape, &bound, &b, terms)?.total
            }
            Objective::Adversarial(cfg) => {
                adversarial::adv_loss_on(model, &mut tape, &bound, &batch, delta.as_ref().unwrap(), cfg)?.total
            }
        };
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::training("loss", format!("non-finite loss {value} at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let grads = bound.grads(&grads)?;
        opt.step(params, &grads, mask)?;
        trace.losses.push(value);
        on_step(step + 1, params)?;
    }
    Ok(trace)
}

/// Percentage of `dataset` examples classified correctly.
pub fn accuracy(model: &Model, params: &ParamStore, mask: Option<&Mask>, dataset: &TaskDataset) -> Result<f64> {
    const CHUNK: usize = 256;
    let mut correct = 0usize;
    let all: Vec<usize> = (0..dataset.len()).collect();
    for idx in all.chunks(CHUNK) {
        let batch = dataset.batch(idx, model.encoding());
        let logits = model.forward(params, mask, &batch)?;
        let c = logits.shape()[1];
        for (row, &y) in logits.data().chunks(c).zip(&batch.labels) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0;
            correct += usize::from(pred == y);
        }
    }
    Ok(100.0 * correct as f64 / dataset.len() as f64)
}

/// Pre-train a fresh pretext model; returns trunk and pretext heads.
pub fn pretrain(model: &Model, corpus: &PretextCorpus, terms: PretextTerms, budget: &Budget, seed: u64) -> Result<(ParamStore, TrainTrace)> {
    let mut params = model.build(seed);
    let trace = train(
        model,
        &mut params,
        None,
        corpus,
        Objective::Pretext(terms),
        budget,
        seed,
        0,
        budget.steps,
        |_, _| Ok(()),
    )?;
    Ok((params, trace))
}

/// Downstream starting point: trunk from `init`, fresh head from `seed`.
pub fn with_fresh_head(model: &Model, init: &ParamStore, seed: u64) -> ParamStore {
    init.with_head_from(&model.init_head(seed))
}
