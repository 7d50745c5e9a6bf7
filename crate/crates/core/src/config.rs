//! Run configuration: TOML in, fully resolved config and a stable hash out.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversarial::{AdvConfig, PerturbTarget};
use crate::codec::{sha256, Provenance};
use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::model::{ArchSpec, Family};
use crate::prune::{rounds_for_sparsity, PruneConfig};
use crate::train::Budget;

/// Synthetic data sizes and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    pub pretext_size: usize,
}

/// How θ₀ (and the text-only θ₀′) are pre-trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl PretrainConfig {
    pub fn budget(&self) -> Budget {
        Budget {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }
}

/// Every knob of a run, with defaults resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchSpec,
    pub tasks: Vec<TaskSpec>,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub budget: Budget,
    pub prune: PruneConfig,
    /// IMP round length when pruning on the pretext corpus.
    pub pretext_steps_per_round: usize,
    pub adv: Option<AdvConfig>,
    pub seeds: Vec<u64>,
    /// Sparsity grid for sweeps and transfer.
    pub sparsities: Vec<f64>,
    /// Relaxed-ticket percentage.
    pub p: f64,
}

// Raw file shape: everything optional, unknown keys rejected.

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArch {
    family: Option<Family>,
    layers: Option<usize>,
    stream_layers: Option<usize>,
    cross_layers: Option<usize>,
    hidden: Option<usize>,
    heads: Option<usize>,
    ffn_mult: Option<usize>,
    img_seq_len: Option<usize>,
    txt_seq_len: Option<usize>,
    vocab_size: Option<usize>,
    img_feat_dim: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    seed: Option<u64>,
    train_size: Option<usize>,
    dev_size: Option<usize>,
    pretext_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPretrain {
    seed: Option<u64>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBudget {
    steps: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrune {
    rate_per_round: Option<f64>,
    rounds: Option<usize>,
    rewind_step: Option<usize>,
    steps_per_round: Option<usize>,
    target_sparsity: Option<f64>,
    pretext_steps_per_round: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAdv {
    epsilon: Option<f64>,
    step_size: Option<f64>,
    pgd_steps: Option<usize>,
    kl_weight: Option<f64>,
    perturb_targets: Option<Vec<PerturbTarget>>,
    simultaneous: Option<bool>,
    kl_full_gradient: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    arch: RawArch,
    tasks: Option<Vec<String>>,
    #[serde(default)]
    data: RawData,
    #[serde(default)]
    pretrain: RawPretrain,
    #[serde(default)]
    budget: RawBudget,
    #[serde(default)]
    prune: RawPrune,
    adv: Option<RawAdv>,
    seeds: Option<Vec<u64>>,
    sparsities: Option<Vec<f64>>,
    p: Option<f64>,
}

pub const DEFAULT_BUDGET: Budget = Budget {
    steps: 120,
    batch_size: 32,
    lr: 0.1,
};

pub const DEFAULT_PRETRAIN: PretrainConfig = PretrainConfig {
    seed: 7,
    steps: 1500,
    batch_size: 32,
    lr: 0.1,
};

impl RawConfig {
    fn resolve(self) -> Result<RunConfig> {
        let a = self.arch;
        let family = a.family.unwrap_or(Family::OneStream);
        let d = ArchSpec::for_family(family);
        let arch = ArchSpec {
            family,
            layers: a.layers.unwrap_or(d.layers),
            stream_layers: a.stream_layers.unwrap_or(d.stream_layers),
            cross_layers: a.cross_layers.unwrap_or(d.cross_layers),
            hidden: a.hidden.unwrap_or(d.hidden),
            heads: a.heads.unwrap_or(d.heads),
            ffn_mult: a.ffn_mult.unwrap_or(d.ffn_mult),
            img_seq_len: a.img_seq_len.unwrap_or(d.img_seq_len),
            txt_seq_len: a.txt_seq_len.unwrap_or(d.txt_seq_len),
            vocab_size: a.vocab_size.unwrap_or(d.vocab_size),
            img_feat_dim: a.img_feat_dim.unwrap_or(d.img_feat_dim),
        };

        let tasks = match self.tasks {
            None => TaskSpec::default_suite(),
            Some(ids) => ids.iter().map(|id| TaskSpec::lookup(id)).collect::<Result<_>>()?,
        };

        let data = DataConfig {
            seed: self.data.seed.unwrap_or(0),
            train_size: self.data.train_size.unwrap_or(2000),
            dev_size: self.data.dev_size.unwrap_or(1000),
            pretext_size: self.data.pretext_size.unwrap_or(4000),
        };
        let pretrain = PretrainConfig {
            seed: self.pretrain.seed.unwrap_or(DEFAULT_PRETRAIN.seed),
            steps: self.pretrain.steps.unwrap_or(DEFAULT_PRETRAIN.steps),
            batch_size: self.pretrain.batch_size.unwrap_or(DEFAULT_PRETRAIN.batch_size),
            lr: self.pretrain.lr.unwrap_or(DEFAULT_PRETRAIN.lr),
        };
        let budget = Budget {
            steps: self.budget.steps.unwrap_or(DEFAULT_BUDGET.steps),
            batch_size: self.budget.batch_size.unwrap_or(DEFAULT_BUDGET.batch_size),
            lr: self.budget.lr.unwrap_or(DEFAULT_BUDGET.lr),
        };

        let sparsities = self.sparsities.unwrap_or_else(|| vec![0.1, 0.3, 0.5, 0.6, 0.7]);
        let p = self.prune;
        let rate = p.rate_per_round.unwrap_or(0.1);
        let rate_ok = rate > 0.0 && rate < 1.0;
        let rounds = match (p.rounds, p.target_sparsity) {
            (Some(r), _) => r,
            (None, Some(s)) if rate_ok && (0.0..1.0).contains(&s) => rounds_for_sparsity(rate, s),
            // Nine rounds, or enough to reach the top of the sparsity grid.
            _ => sparsities
                .iter()
                .filter(|s| rate_ok && (0.0..1.0).contains(*s))
                .map(|&s| rounds_for_sparsity(rate, s))
                .fold(9, usize::max),
        };
        let prune = PruneConfig {
            rate_per_round: rate,
            rounds,
            rewind_step: p.rewind_step.unwrap_or(0),
            steps_per_round: p.steps_per_round.unwrap_or(budget.steps),
            target_sparsity: p.target_sparsity,
        };
        let pretext_steps_per_round = p.pretext_steps_per_round.unwrap_or((pretrain.steps / 10).max(1));

        let adv = self.adv.map(|r| {
            let d = AdvConfig::new(0.5, 0.25, 1.0);
            AdvConfig {
                epsilon: r.epsilon.unwrap_or(d.epsilon),
                step_size: r.step_size.unwrap_or(d.step_size),
                pgd_steps: r.pgd_steps.unwrap_or(d.pgd_steps),
                kl_weight: r.kl_weight.unwrap_or(d.kl_weight),
                perturb_targets: r.perturb_targets.unwrap_or(d.perturb_targets),
                simultaneous: r.simultaneous.unwrap_or(d.simultaneous),
                kl_full_gradient: r.kl_full_gradient.unwrap_or(d.kl_full_gradient),
            }
        });

        let cfg = RunConfig {
            arch,
            tasks,
            data,
            pretrain,
            budget,
            prune,
            pretext_steps_per_round,
            adv,
            seeds: self.seeds.unwrap_or_else(|| vec![0, 1, 2]),
            sparsities,
            p: self.p.unwrap_or(99.0),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RawConfig::default().resolve().expect("defaults are valid")
    }
}

impl RunConfig {
    /// Parse either a sparse config with defaults or a fully resolved echo.
    pub fn from_toml(text: &str) -> Result<Self> {
        if let Ok(full) = toml::from_str::<RunConfig>(text) {
            full.validate()?;
            return Ok(full);
        }
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            Error::config(field, e.message().to_string())
        })?;
        raw.resolve()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::config("tasks", "must name at least one task"));
        }
        for t in &self.tasks {
            t.validate()?;
        }
        let d = &self.data;
        for (field, v) in [("train_size", d.train_size), ("dev_size", d.dev_size), ("pretext_size", d.pretext_size)] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        self.pretrain.budget().validate()?;
        self.budget.validate()?;
        self.prune.validate()?;
        if self.pretext_steps_per_round == 0 {
            return Err(Error::config("pretext_steps_per_round", "must be positive"));
        }
        if self.prune.rewind_step >= self.pretext_steps_per_round {
            return Err(Error::config("rewind_step", "must be below pretext_steps_per_round"));
        }
        if let Some(adv) = &self.adv {
            adv.validate()?;
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if let Some(s) = self.sparsities.iter().find(|s| !(0.0..1.0).contains(*s)) {
            return Err(Error::config("sparsities", format!("{s} is outside [0, 1)")));
        }
        if let Some(s) = self
            .sparsities
            .iter()
            .find(|&&s| rounds_for_sparsity(self.prune.rate_per_round, s) > self.prune.rounds)
        {
            return Err(Error::config(
                "sparsities",
                format!("{s} needs more than the configured {} IMP rounds", self.prune.rounds),
            ));
        }
        if !(self.p > 0.0 && self.p <= 100.0) {
            return Err(Error::config("p", format!("must lie in (0, 100], got {}", self.p)));
        }
        Ok(())
    }

    /// Resolved config as TOML; parsing it back gives the same config.
    pub fn echo(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// SHA-256 of the canonical (key-sorted) JSON form.
    pub fn provenance(&self) -> Result<Provenance> {
        let value = serde_json::to_value(self)?;
        Ok(Provenance(sha256(serde_json::to_string(&value)?.as_bytes())))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(self.provenance()?.to_hex())
    }

    pub fn task(&self, id: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.task_id == id)
            .ok_or_else(|| Error::config("task", format!("`{id}` is not in this run's task list")))
    }
}
