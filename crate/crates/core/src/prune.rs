//! Global magnitude pruning, iterative magnitude pruning, and baseline tickets.

use std::cmp::Ordering;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointStore;
use crate::data::{Dataset, TaskDataset};
use crate::error::{Error, Result};
use crate::mask::{Layout, Mask};
use crate::model::Model;
use crate::params::ParamStore;
use crate::rng::substream;
use crate::train::{self, Budget, Objective, TrainTrace};

/// Slack for `1 − (1−r)^k ≥ s` comparisons (0.1 is not exactly representable).
const SPARSITY_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub rate_per_round: f64,
    pub rounds: usize,
    pub rewind_step: usize,
    pub steps_per_round: usize,
    pub target_sparsity: Option<f64>,
}

impl PruneConfig {
    pub fn new(rate_per_round: f64, rounds: usize, steps_per_round: usize) -> Self {
        Self {
            rate_per_round,
            rounds,
            rewind_step: 0,
            steps_per_round,
            target_sparsity: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.rate_per_round, "rate_per_round")?;
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be positive"));
        }
        if self.steps_per_round == 0 {
            return Err(Error::config("steps_per_round", "must be positive"));
        }
        if self.rewind_step >= self.steps_per_round {
            return Err(Error::config(
                "rewind_step",
                format!("{} must be below steps_per_round {}", self.rewind_step, self.steps_per_round),
            ));
        }
        if let Some(s) = self.target_sparsity {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::config("target_sparsity", format!("must lie in [0, 1), got {s}")));
            }
            let k = rounds_for_sparsity(self.rate_per_round, s);
            if k != self.rounds {
                return Err(Error::config(
                    "rounds",
                    format!("target_sparsity {s} at rate {} needs {k} rounds, got {}", self.rate_per_round, self.rounds),
                ));
            }
        }
        Ok(())
    }
}

fn check_rate(rate: f64, field: &str) -> Result<()> {
    if rate > 0.0 && rate < 1.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("must lie in (0, 1), got {rate}")))
    }
}

/// Nominal sparsity after `k` rounds at `rate`.
pub fn nominal_sparsity(rate: f64, k: usize) -> f64 {
    1.0 - (1.0 - rate).powi(k as i32)
}

/// Smallest `k` with `1 − (1−rate)^k ≥ target`.
pub fn rounds_for_sparsity(rate: f64, target: f64) -> usize {
    let mut k = 0;
    while nominal_sparsity(rate, k) < target - SPARSITY_SLACK {
        k += 1;
    }
    k
}

/// Mask out `⌊rate · kept⌋` more weights, smallest magnitude first across all tensors.
///
/// Ties break by tensor name, then flat index.
pub fn global_magnitude_prune(params: &ParamStore, mask: &Mask, rate: f64) -> Result<Mask> {
    check_rate(rate, "rate")?;
    mask.check_params(params)?;
    let names: Vec<String> = mask.iter().map(|(n, _)| n.clone()).collect();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(mask.kept());
    for (ni, (name, entry)) in mask.iter().enumerate() {
        let values = params.get(name)?.data();
        for (i, (&k, &v)) in entry.keep().iter().zip(values).enumerate() {
            if k {
                candidates.push((v.abs(), ni, i));
            }
        }
    }
    let count = (rate * candidates.len() as f64).floor() as usize;
    let mut out = mask.clone();
    if count == 0 {
        return Ok(out);
    }
    let order = |a: &(f64, usize, usize), b: &(f64, usize, usize)| -> Ordering {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    };
    candidates.select_nth_unstable_by(count - 1, order);
    for &(_, ni, i) in &candidates[..count] {
        out.keep_mut(&names[ni]).expect("name taken from mask")[i] = false;
    }
    Ok(out)
}

/// Mask exactly `zeros` positions chosen uniformly from the whole layout.
pub fn random_prune_count(layout: &Layout, zeros: usize, seed: u64) -> Result<Mask> {
    let mut mask = Mask::ones(layout);
    let total = mask.total();
    if zeros > total {
        return Err(Error::Mask(format!("cannot mask {zeros} of {total} positions")));
    }
    let mut rng = substream(seed, "random-prune");
    let mut picked = index::sample(&mut rng, total, zeros).into_vec();
    picked.sort_unstable();
    let mut offset = 0;
    let mut it = picked.into_iter().peekable();
    for (name, shape) in layout {
        let len: usize = shape.iter().product();
        let keep = mask.keep_mut(name).expect("layout entry present");
        while let Some(&p) = it.peek() {
            if p >= offset + len {
                break;
            }
            keep[p - offset] = false;
            it.next();
        }
        offset += len;
    }
    Ok(mask)
}

/// Mask `⌊s · total⌋` positions uniformly at random.
pub fn random_prune(layout: &Layout, sparsity: f64, seed: u64) -> Result<Mask> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::config("sparsity", format!("must lie in [0, 1), got {sparsity}")));
    }
    let total: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    random_prune_count(layout, (sparsity * total as f64).floor() as usize, seed)
}

/// Permute every prunable tensor's entries within that tensor.
pub fn shuffle_weights_within_layer(params: &ParamStore, seed: u64) -> ParamStore {
    let mut out = params.clone();
    for (name, value) in out.iter_mut() {
        if ParamStore::is_prunable(name, value) {
            let mut rng = substream(seed, &format!("shuffle/{name}"));
            value.data_mut().shuffle(&mut rng);
        }
    }
    out
}

/// Exact copy of the snapshot taken after `step` updates.
pub fn rewind(ckpts: &CheckpointStore, step: u64) -> Result<ParamStore> {
    ckpts.get(step)
}

/// Outcome of one iterative magnitude pruning run.
#[derive(Clone, Debug)]
pub struct ImpRun {
    pub mask: Mask,
    /// Mask after each round; `round_masks[k-1]` has nominal sparsity `1 − (1−r)^k`.
    pub round_masks: Vec<Mask>,
    pub checkpoints: CheckpointStore,
    /// Mean loss over the last tenth of each round.
    pub round_losses: Vec<f64>,
}

/// Train → prune → rewind for `config.rounds` rounds.
///
/// `init` holds the starting trunk and head. Each round trains global steps
/// `[rewind_step, steps_per_round)`; round 1 starts from step 0 and records
/// the rewind snapshot on the way.
pub fn imp<D: Dataset + ?Sized>(
    model: &Model,
    init: &ParamStore,
    data: &D,
    objective: Objective<'_>,
    config: &PruneConfig,
    budget: &Budget,
    seed: u64,
) -> Result<ImpRun> {
    config.validate()?;
    let mut ckpts = CheckpointStore::new(init);
    let mut mask = Mask::ones(&init.prunable_layout());
    let mut round_masks = Vec::with_capacity(config.rounds);
    let mut round_losses = Vec::with_capacity(config.rounds);
    let rewind_step = config.rewind_step as u64;
    let wrap = |round: usize| move |e: Error| Error::Round { round, source: Box::new(e) };

    for round in 1..=config.rounds {
        let (mut params, start) = if round == 1 {
            (init.clone(), 0)
        } else {
            (rewind(&ckpts, rewind_step).map_err(wrap(round))?, config.rewind_step)
        };
        let mut pending = None;
        let trace: TrainTrace = train::train(
            model,
            &mut params,
            Some(&mask),
            data,
            objective,
            budget,
            seed,
            start,
            config.steps_per_round,
            |done, p| {
                if round == 1 && done as u64 == rewind_step && rewind_step > 0 {
                    pending = Some(p.clone());
                }
                Ok(())
            },
        )
        .map_err(wrap(round))?;
        if let Some(p) = pending {
            ckpts.insert(rewind_step, &p).map_err(wrap(round))?;
        }
        if round == 1 {
            ckpts.insert(config.steps_per_round as u64, &params).map_err(wrap(round))?;
        }
        round_losses.push(trace.tail_mean((trace.losses.len() / 10).max(1)));
        mask = global_magnitude_prune(&params, &mask, config.rate_per_round).map_err(wrap(round))?;
        round_masks.push(mask.clone());
    }
    Ok(ImpRun {
        mask,
        round_masks,
        checkpoints: ckpts,
        round_losses,
    })
}

/// Retrained subnetwork and its dev accuracy.
#[derive(Clone, Debug)]
pub struct TicketEval {
    pub accuracy: f64,
    pub final_loss: f64,
    pub params: ParamStore,
}

/// Retrain `mask ⊙ init` with a fresh head for the full budget and score it on `dev`.
pub fn evaluate_ticket(
    model: &Model,
    mask: &Mask,
    init: &ParamStore,
    train_set: &TaskDataset,
    dev: &TaskDataset,
    budget: &Budget,
    seed: u64,
) -> Result<TicketEval> {
    let mut params = train::with_fresh_head(model, init, seed);
    mask.check_params(&params)?;
    let trace = train::train(
        model,
        &mut params,
        Some(mask),
        train_set,
        Objective::STANDARD,
        budget,
        seed,
        0,
        budget.steps,
        |_, _| Ok(()),
    )?;
    let accuracy = train::accuracy(model, &params, Some(mask), dev)?;
    Ok(TicketEval {
        accuracy,
        final_loss: trace.tail_mean(10),
        params,
    })
}
