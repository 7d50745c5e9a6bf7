//! PGD adversarial training in the embedding space.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::{BoundParams, Injection, Model};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{self, Budget, Objective, TrainTrace};

fn default_pgd_steps() -> usize {
    3
}

fn default_targets() -> Vec<PerturbTarget> {
    vec![PerturbTarget::TextEmbeddings, PerturbTarget::ImageFeatures]
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbTarget {
    TextEmbeddings,
    ImageFeatures,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvConfig {
    /// Radius of the per-example, per-modality Frobenius ball.
    pub epsilon: f64,
    /// PGD ascent step.
    pub step_size: f64,
    #[serde(default = "default_pgd_steps")]
    pub pgd_steps: usize,
    /// Weight on the symmetric KL consistency term.
    pub kl_weight: f64,
    #[serde(default = "default_targets")]
    pub perturb_targets: Vec<PerturbTarget>,
    /// Update every target at each PGD iteration; otherwise alternate between them.
    #[serde(default = "default_true")]
    pub simultaneous: bool,
    /// Let gradient flow through the clean branch of the KL term.
    #[serde(default)]
    pub kl_full_gradient: bool,
}

impl AdvConfig {
    pub fn new(epsilon: f64, step_size: f64, kl_weight: f64) -> Self {
        Self {
            epsilon,
            step_size,
            pgd_steps: default_pgd_steps(),
            kl_weight,
            perturb_targets: default_targets(),
            simultaneous: true,
            kl_full_gradient: false,
        }
    }

    /// Full validation, including the `step_size ≤ 2ε` rule for configured runs.
    pub fn validate(&self) -> Result<()> {
        self.check_values()?;
        if self.epsilon > 0.0 && self.step_size > 2.0 * self.epsilon {
            return Err(Error::config(
                "step_size",
                format!("{} exceeds 2 * epsilon = {}", self.step_size, 2.0 * self.epsilon),
            ));
        }
        Ok(())
    }

    /// Range checks needed for PGD to be well defined.
    pub fn check_values(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", format!("must be non-negative and finite, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("step_size", format!("must be positive, got {}", self.step_size)));
        }
        if self.pgd_steps == 0 {
            return Err(Error::config("pgd_steps", "must be positive"));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::config("kl_weight", format!("must be non-negative, got {}", self.kl_weight)));
        }
        if self.perturb_targets.is_empty() {
            return Err(Error::config("perturb_targets", "must name at least one target"));
        }
        Ok(())
    }

    fn targets(&self, iteration: usize) -> (bool, bool) {
        let has = |t| self.perturb_targets.contains(&t);
        let (txt, img) = (has(PerturbTarget::TextEmbeddings), has(PerturbTarget::ImageFeatures));
        if self.simultaneous || !(txt && img) {
            (txt, img)
        } else {
            (iteration.is_multiple_of(2), !iteration.is_multiple_of(2))
        }
    }
}

/// Additive perturbation of the embedded inputs: `[b, T, H]` and `[b, N, H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub txt: Option<Tensor>,
    pub img: Option<Tensor>,
}

impl Perturbation {
    pub fn zeros(model: &Model, batch_size: usize, cfg: &AdvConfig) -> Self {
        let a = &model.arch;
        let (txt, img) = (
            cfg.perturb_targets.contains(&PerturbTarget::TextEmbeddings),
            cfg.perturb_targets.contains(&PerturbTarget::ImageFeatures),
        );
        Self {
            txt: txt.then(|| Tensor::zeros(&[batch_size, a.txt_seq_len, a.hidden])),
            img: img.then(|| Tensor::zeros(&[batch_size, a.img_seq_len, a.hidden])),
        }
    }

    /// Frobenius norm of every per-example block, text blocks first.
    pub fn block_norms(&self) -> Vec<f64> {
        [&self.txt, &self.img]
            .into_iter()
            .flatten()
            .flat_map(|t| {
                let block = t.len() / t.shape()[0];
                t.data()
                    .chunks(block)
                    .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        [&self.txt, &self.img].into_iter().flatten().all(|t| t.data().iter().all(|&v| v == 0.0))
    }

    fn inject(&self, tape: &mut Tape) -> Injection {
        Injection {
            txt: self.txt.as_ref().map(|t| tape.constant(t.clone())),
            img: self.img.as_ref().map(|t| tape.constant(t.clone())),
        }
    }
}

/// One projected ascent update on a single block: `δ ← Π(δ + α g/‖g‖)`.
pub fn pgd_block_update(delta: &mut [f64], grad: &[f64], step_size: f64, epsilon: f64) {
    let g_norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    if g_norm > 0.0 {
        let s = step_size / g_norm;
        for (d, g) in delta.iter_mut().zip(grad) {
            *d += s * g;
        }
    }
    let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > epsilon {
        let s = epsilon / norm;
        delta.iter_mut().for_each(|d| *d *= s);
        // Rounding can leave the rescaled norm a hair above epsilon.
        while delta.iter().map(|v| v * v).sum::<f64>().sqrt() > epsilon {
            delta.iter_mut().for_each(|d| *d *= 1.0 - f64::EPSILON);
        }
    }
}

/// PGD maximization of the clean cross-entropy over the ε-ball.
pub fn pgd_perturb(model: &Model, params: &ParamStore, mask: Option<&Mask>, batch: &Batch, cfg: &AdvConfig) -> Result<Perturbation> {
    cfg.check_values()?;
    let mut delta = Perturbation::zeros(model, batch.size(), cfg);
    if cfg.epsilon == 0.0 {
        return Ok(delta);
    }
    for it in 0..cfg.pgd_steps {
        let (upd_txt, upd_img) = cfg.targets(it);
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape, params, mask)?;
        let txt = delta.txt.as_ref().map(|t| tape.leaf(t.clone()));
        let img = delta.img.as_ref().map(|t| tape.leaf(t.clone()));
        let loss = model.std_loss_on(&mut tape, &bound, batch, Some(Injection { txt, img }))?;
        let grads = tape.backward(loss)?;
        for (slot, var, update) in [(&mut delta.txt, txt, upd_txt), (&mut delta.img, img, upd_img)] {
            let (Some(d), Some(v), true) = (slot.as_mut(), var, update) else {
                continue;
            };
            let g = grads.wrt(v)?;
            if !g.is_finite() {
                return Err(Error::Adversarial(format!("non-finite perturbation gradient at PGD step {it}")));
            }
            let block = d.len() / d.shape()[0];
            for (db, gb) in d.data_mut().chunks_mut(block).zip(g.data().chunks(block)) {
                pgd_block_update(db, gb, cfg.step_size, cfg.epsilon);
            }
        }
    }
    Ok(delta)
}

/// Terms of the adversarial objective.
#[derive(Clone, Copy, Debug)]
pub struct AdvLoss {
    pub std: Var,
    pub at: Var,
    pub kl: Var,
    pub total: Var,
}

/// `L_std(x) + CE(f(x+δ), y) + kl_weight · KLsym(f(x+δ), f(x))` on an existing tape.
pub fn adv_loss_on(model: &Model, tape: &mut Tape, bound: &BoundParams, batch: &Batch, delta: &Perturbation, cfg: &AdvConfig) -> Result<AdvLoss> {
    let clean = model.forward_on(tape, bound, batch, None)?;
    let std = tape.softmax_cross_entropy(clean.logits, &batch.labels)?;
    // A zero perturbation leaves the forward pass unchanged, so the clean logits are reused.
    let adv_logits = if delta.is_zero() {
        clean.logits
    } else {
        let inject = delta.inject(tape);
        model.forward_on(tape, bound, batch, Some(inject))?.logits
    };
    let at = tape.softmax_cross_entropy(adv_logits, &batch.labels)?;
    let reference = if cfg.kl_full_gradient {
        clean.logits
    } else {
        tape.detach(clean.logits)?
    };
    let kl = tape.symmetric_kl(adv_logits, reference)?;
    let sum = tape.add(std, at)?;
    let weighted = tape.scale(kl, cfg.kl_weight)?;
    let total = tape.add(sum, weighted)?;
    Ok(AdvLoss { std, at, kl, total })
}

/// Scalar adversarial objective for a given perturbation.
pub fn adv_loss(model: &Model, params: &ParamStore, mask: Option<&Mask>, batch: &Batch, delta: &Perturbation, cfg: &AdvConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, params, mask)?;
    let loss = adv_loss_on(model, &mut tape, &bound, batch, delta, cfg)?;
    Ok(tape.value(loss.total).item())
}

/// Adversarially finetune `params` in place from step 0 for the whole budget.
pub fn adv_train<D: crate::data::Dataset + ?Sized>(
    model: &Model,
    params: &mut ParamStore,
    mask: Option<&Mask>,
    data: &D,
    cfg: &AdvConfig,
    budget: &Budget,
    seed: u64,
) -> Result<TrainTrace> {
    cfg.validate()?;
    train::train(model, params, mask, data, Objective::Adversarial(cfg), budget, seed, 0, budget.steps, |_, _| Ok(()))
}
