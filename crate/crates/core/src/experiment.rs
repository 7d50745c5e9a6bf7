//! In-memory orchestration of the ticket experiments.
//!
//! Holds the resolved config plus lazily built shared state (datasets, the
//! pre-trained trunk θ₀ and its text-only analog θ₀′).

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::cell::RefCell;

use crate::adversarial::{adv_train, AdvConfig};
use crate::analysis::{Method, TicketReport};
use crate::config::RunConfig;
use crate::data::{gen_pretrain_corpus, gen_task, PretextCorpus, Split, TaskDataset, TaskSpec};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::{Model, PretextTerms};
use crate::params::ParamStore;
use crate::prune::{
    evaluate_ticket, imp, random_prune_count, rounds_for_sparsity, shuffle_weights_within_layer, ImpRun, TicketEval,
};
use crate::rng::derive_seed;
use crate::train::{self, Objective};

/// Label used for masks found on the pre-training corpus.
pub const PRETEXT_SOURCE: &str = "pretext";

/// How a ticket is retrained after masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Finetune {
    Standard,
    Adversarial,
}

impl Finetune {
    pub fn as_str(self) -> &'static str {
        match self {
            Finetune::Standard => "standard",
            Finetune::Adversarial => "adversarial",
        }
    }
}

pub struct Experiment {
    pub config: RunConfig,
    config_hash: String,
    datasets: RefCell<BTreeMap<String, (TaskDataset, TaskDataset)>>,
    corpus: OnceCell<PretextCorpus>,
    theta0: OnceCell<ParamStore>,
    textonly: OnceCell<ParamStore>,
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let config_hash = config.hash()?;
        Ok(Self {
            config,
            config_hash,
            datasets: RefCell::new(BTreeMap::new()),
            corpus: OnceCell::new(),
            theta0: OnceCell::new(),
            textonly: OnceCell::new(),
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn new_report(&self) -> TicketReport {
        TicketReport::new(self.config.p, self.config_hash.clone())
    }

    pub fn task(&self, id: &str) -> Result<TaskSpec> {
        self.config.task(id).cloned()
    }

    /// Train and dev splits of `task`.
    pub fn task_data(&self, task: &TaskSpec) -> Result<(TaskDataset, TaskDataset)> {
        if let Some(d) = self.datasets.borrow().get(&task.task_id) {
            return Ok(d.clone());
        }
        let d = &self.config.data;
        let pair = (
            gen_task(task, d.seed, d.train_size, Split::Train)?,
            gen_task(task, d.seed, d.dev_size, Split::Dev)?,
        );
        self.datasets.borrow_mut().insert(task.task_id.clone(), pair.clone());
        Ok(pair)
    }

    pub fn corpus(&self) -> Result<&PretextCorpus> {
        if self.corpus.get().is_none() {
            let c = gen_pretrain_corpus(self.config.data.seed, self.config.data.pretext_size)?;
            let _ = self.corpus.set(c);
        }
        Ok(self.corpus.get().expect("just set"))
    }

    pub fn task_model(&self, task: &TaskSpec) -> Result<Model> {
        Model::for_task(&self.config.arch, task)
    }

    pub fn pretext_model(&self) -> Result<Model> {
        Model::pretext(&self.config.arch)
    }

    fn pretrained(&self, terms: PretextTerms) -> Result<ParamStore> {
        let model = self.pretext_model()?;
        let pt = &self.config.pretrain;
        let (params, _) = train::pretrain(&model, self.corpus()?, terms, &pt.budget(), pt.seed)?;
        Ok(params)
    }

    /// θ₀: trunk and pretext heads after pre-training on every pretext objective.
    pub fn theta0(&self) -> Result<&ParamStore> {
        if self.theta0.get().is_none() {
            let p = self.pretrained(PretextTerms::ALL)?;
            let _ = self.theta0.set(p);
        }
        Ok(self.theta0.get().expect("just set"))
    }

    /// Install an externally loaded θ₀ (e.g. from a cached artifact).
    pub fn set_theta0(&self, params: ParamStore) -> Result<()> {
        self.theta0
            .set(params)
            .map_err(|_| Error::State("θ₀ already initialized".into()))
    }

    /// θ₀′: the same trunk pre-trained with the masked-token objective only.
    pub fn textonly_init(&self) -> Result<&ParamStore> {
        if self.textonly.get().is_none() {
            let p = self.pretrained(PretextTerms::TEXT_ONLY)?;
            let _ = self.textonly.set(p);
        }
        Ok(self.textonly.get().expect("just set"))
    }

    pub fn set_textonly_init(&self, params: ParamStore) -> Result<()> {
        self.textonly
            .set(params)
            .map_err(|_| Error::State("θ₀′ already initialized".into()))
    }

    /// θ₀″: θ₀ with every prunable tensor shuffled in place.
    pub fn shuffled_init(&self, seed: u64) -> Result<ParamStore> {
        Ok(shuffle_weights_within_layer(self.theta0()?, derive_seed(seed, "shuffled-init")))
    }

    pub fn init_for(&self, method: Method, seed: u64) -> Result<ParamStore> {
        match method {
            Method::ShuffledInit => self.shuffled_init(seed),
            Method::TextonlyInit => Ok(self.textonly_init()?.clone()),
            _ => Ok(self.theta0()?.clone()),
        }
    }

    /// IMP on a downstream task, starting from θ₀ with a fresh head.
    pub fn find(&self, task: &TaskSpec, seed: u64, finetune: Finetune) -> Result<ImpRun> {
        let model = self.task_model(task)?;
        let init = train::with_fresh_head(&model, self.theta0()?, seed);
        let (train_set, _) = self.task_data(task)?;
        let adv;
        let objective = match finetune {
            Finetune::Standard => Objective::STANDARD,
            Finetune::Adversarial => {
                adv = self.adv_config()?;
                Objective::Adversarial(&adv)
            }
        };
        imp(&model, &init, &train_set, objective, &self.config.prune, &self.config.budget, seed)
    }

    /// IMP on the pretext corpus, continuing pre-training from θ₀.
    pub fn find_pretext(&self, seed: u64) -> Result<ImpRun> {
        let model = self.pretext_model()?;
        let prune = crate::prune::PruneConfig {
            steps_per_round: self.config.pretext_steps_per_round,
            ..self.config.prune.clone()
        };
        let budget = self.config.pretrain.budget();
        imp(
            &model,
            self.theta0()?,
            self.corpus()?,
            Objective::Pretext(PretextTerms::ALL),
            &prune,
            &budget,
            seed,
        )
    }

    pub fn adv_config(&self) -> Result<AdvConfig> {
        self.config
            .adv
            .clone()
            .ok_or_else(|| Error::config("adv", "adversarial commands need an [adv] section"))
    }

    /// IMP round whose nominal sparsity first reaches `sparsity`.
    pub fn round_for(&self, sparsity: f64) -> usize {
        rounds_for_sparsity(self.config.prune.rate_per_round, sparsity)
    }

    /// Mask of `run` at a grid sparsity (all-ones at 0).
    pub fn mask_at(&self, run: &ImpRun, layout_from: &ParamStore, sparsity: f64) -> Result<Mask> {
        let k = self.round_for(sparsity);
        if k == 0 {
            return Ok(Mask::ones(&layout_from.prunable_layout()));
        }
        run.round_masks.get(k - 1).cloned().ok_or_else(|| {
            Error::config(
                "sparsities",
                format!("sparsity {sparsity} needs {k} IMP rounds, config runs {}", run.round_masks.len()),
            )
        })
    }

    /// Random mask with exactly as many zeros as `like`.
    pub fn random_like(&self, like: &Mask, seed: u64) -> Result<Mask> {
        random_prune_count(&like.layout(), like.zeros(), derive_seed(seed, "random-mask"))
    }

    /// Retrain `mask ⊙ init` on `task` and score it on the dev split.
    pub fn evaluate(&self, mask: &Mask, init: &ParamStore, task: &TaskSpec, seed: u64, finetune: Finetune) -> Result<TicketEval> {
        let model = self.task_model(task)?;
        let (train_set, dev) = self.task_data(task)?;
        match finetune {
            Finetune::Standard => evaluate_ticket(&model, mask, init, &train_set, &dev, &self.config.budget, seed),
            Finetune::Adversarial => {
                let cfg = self.adv_config()?;
                let mut params = train::with_fresh_head(&model, init, seed);
                let trace = adv_train(&model, &mut params, Some(mask), &train_set, &cfg, &self.config.budget, seed)?;
                let accuracy = train::accuracy(&model, &params, Some(mask), &dev)?;
                Ok(TicketEval {
                    accuracy,
                    final_loss: trace.tail_mean(10),
                    params,
                })
            }
        }
    }

    /// Dense reference: the all-ones ticket from θ₀.
    pub fn dense(&self, task: &TaskSpec, seed: u64, finetune: Finetune) -> Result<TicketEval> {
        let ones = Mask::ones(&self.theta0()?.prunable_layout());
        self.evaluate(&ones, self.theta0()?, task, seed, finetune)
    }

    /// Every (source mask, target task, sparsity, seed) cell, plus a random control row.
    ///
    /// `sources` maps a source label and seed to that seed's IMP run.
    pub fn transfer_matrix(
        &self,
        sources: &BTreeMap<(String, u64), ImpRun>,
        targets: &[TaskSpec],
        sparsities: &[f64],
        seeds: &[u64],
    ) -> Result<TicketReport> {
        let mut report = self.new_report();
        let theta0 = self.theta0()?.clone();
        for target in targets {
            for &seed in seeds {
                let dense = self.dense(target, seed, Finetune::Standard)?.accuracy;
                for &s in sparsities {
                    let mut random_done = false;
                    for ((source, _), run) in sources.iter().filter(|((_, sd), _)| *sd == seed) {
                        let mask = self.mask_at(run, &theta0, s)?;
                        let method = if source == PRETEXT_SOURCE { Method::PretextImp } else { Method::Imp };
                        let acc = self.evaluate(&mask, &theta0, target, seed, Finetune::Standard)?.accuracy;
                        report.push(source, &target.task_id, &mask, mask.trunk_sparsity(&theta0), seed, method, "standard", acc, dense);
                        if !random_done {
                            let rand = self.random_like(&mask, seed)?;
                            let acc = self.evaluate(&rand, &theta0, target, seed, Finetune::Standard)?.accuracy;
                            report.push("random", &target.task_id, &rand, rand.trunk_sparsity(&theta0), seed, Method::Random, "standard", acc, dense);
                            random_done = true;
                        }
                    }
                }
            }
        }
        report.sort();
        Ok(report)
    }

    /// Accuracy-vs-sparsity curves for IMP, pretext IMP and random pruning on one task.
    ///
    /// IMP points come from the per-round masks of one run per seed; the 0%
    /// point is the dense baseline for every method.
    pub fn sparsity_sweep(
        &self,
        task: &TaskSpec,
        grid: &[f64],
        task_runs: &BTreeMap<u64, ImpRun>,
        pretext_runs: &BTreeMap<u64, ImpRun>,
        seeds: &[u64],
    ) -> Result<TicketReport> {
        let mut report = self.new_report();
        let theta0 = self.theta0()?.clone();
        let methods = [
            (Method::Imp, task.task_id.as_str(), task_runs),
            (Method::PretextImp, PRETEXT_SOURCE, pretext_runs),
        ];
        for &seed in seeds {
            let dense = self.dense(task, seed, Finetune::Standard)?.accuracy;
            for &s in grid {
                for (method, source, runs) in methods {
                    let run = runs
                        .get(&seed)
                        .ok_or_else(|| Error::State(format!("no {method} run for seed {seed}")))?;
                    let mask = self.mask_at(run, &theta0, s)?;
                    let acc = if mask.zeros() == 0 {
                        dense
                    } else {
                        self.evaluate(&mask, &theta0, task, seed, Finetune::Standard)?.accuracy
                    };
                    report.push(source, &task.task_id, &mask, mask.trunk_sparsity(&theta0), seed, method, "standard", acc, dense);
                    if method == Method::Imp {
                        let rand = self.random_like(&mask, seed)?;
                        let acc = if rand.zeros() == 0 {
                            dense
                        } else {
                            self.evaluate(&rand, &theta0, task, seed, Finetune::Standard)?.accuracy
                        };
                        report.push("random", &task.task_id, &rand, rand.trunk_sparsity(&theta0), seed, Method::Random, "standard", acc, dense);
                    }
                }
            }
        }
        report.sort();
        Ok(report)
    }
}
