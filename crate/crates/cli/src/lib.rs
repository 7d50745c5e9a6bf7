//! Artifact store and command implementations behind the `ticket-forge` binary.
//!
//! Every run lives under `<out>/<config hash>/`. Multi-file results (IMP runs)
//! are written into a directory that gets a `.complete` marker last, so an
//! interrupted run is detected on the next invocation.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ticket_forge::analysis::{Method, OverlapMatrix, TicketReport};
use ticket_forge::artifact::write_atomic;
use ticket_forge::checkpoint::CheckpointStore;
use ticket_forge::codec::{sha256_hex, Provenance};
use ticket_forge::config::RunConfig;
use ticket_forge::experiment::{Experiment, Finetune, PRETEXT_SOURCE};
use ticket_forge::mask::Mask;
use ticket_forge::params::ParamStore;
use ticket_forge::prune::{nominal_sparsity, ImpRun};
use ticket_forge::report::{emit_overlap, emit_ticket_report};

pub const COMPLETE_MARKER: &str = ".complete";
pub const OUT_ENV: &str = "TICKET_FORGE_OUT";

/// Which pre-trained weights a mask is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Init {
    /// θ₀, the trunk pre-trained on every pretext objective.
    Theta0,
    /// θ₀ with each prunable tensor shuffled in place.
    Shuffled,
    /// The trunk pre-trained on masked text only.
    Textonly,
}

impl Init {
    fn method(self) -> Method {
        match self {
            Init::Theta0 => Method::Imp,
            Init::Shuffled => Method::ShuffledInit,
            Init::Textonly => Method::TextonlyInit,
        }
    }
}

pub struct Store {
    root: PathBuf,
    resume: bool,
    provenance: Provenance,
    exp: Experiment,
    theta0_ready: Cell<bool>,
    textonly_ready: Cell<bool>,
}

/// Masks passed on the command line may come from any run.
fn read_mask(path: &Path) -> Result<(Mask, Provenance)> {
    Mask::load(path).with_context(|| format!("reading {}", path.display()))
}

fn seed_tag(seeds: &[u64]) -> String {
    let ids: Vec<String> = seeds.iter().map(u64::to_string).collect();
    format!("seeds-{}", ids.join("-"))
}

fn basis_points(s: f64) -> u64 {
    (s * 1e4).round() as u64
}

impl Store {
    /// Open (or create) the run directory for `config` under `out`.
    pub fn open(config: RunConfig, out: &Path, resume: bool) -> Result<Self> {
        let provenance = config.provenance()?;
        let exp = Experiment::new(config)?;
        let root = out.join(provenance.short());
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        write_atomic(&root.join("config.toml"), exp.config.echo()?.as_bytes())?;
        Ok(Self {
            root,
            resume,
            provenance,
            exp,
            theta0_ready: Cell::new(false),
            textonly_ready: Cell::new(false),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn experiment(&self) -> &Experiment {
        &self.exp
    }

    pub fn config(&self) -> &RunConfig {
        &self.exp.config
    }

    fn check_provenance(&self, found: Provenance, path: &Path) -> Result<()> {
        if found != self.provenance {
            bail!(
                "{} was written by config {}, not {}",
                path.display(),
                found.short(),
                self.provenance.short()
            );
        }
        Ok(())
    }

    fn cached_params(
        &self,
        file: &str,
        ready: &Cell<bool>,
        install: impl FnOnce(&Experiment, ParamStore) -> ticket_forge::Result<()>,
        build: impl FnOnce(&Experiment) -> ticket_forge::Result<&ParamStore>,
    ) -> Result<()> {
        if ready.get() {
            return Ok(());
        }
        let path = self.root.join(file);
        if path.exists() {
            let (params, prov) = ParamStore::load(&path)?;
            self.check_provenance(prov, &path)?;
            install(&self.exp, params)?;
        } else {
            eprintln!("pre-training {file} ...");
            build(&self.exp)?.save(&path, &self.provenance)?;
        }
        ready.set(true);
        Ok(())
    }

    /// Load θ₀ from the run directory, pre-training and caching it on first use.
    pub fn theta0(&self) -> Result<&ParamStore> {
        self.cached_params("theta0.tfps", &self.theta0_ready, Experiment::set_theta0, Experiment::theta0)?;
        Ok(self.exp.theta0()?)
    }

    fn textonly(&self) -> Result<()> {
        self.cached_params(
            "theta0_textonly.tfps",
            &self.textonly_ready,
            Experiment::set_textonly_init,
            Experiment::textonly_init,
        )
    }

    fn init_for(&self, init: Init, seed: u64) -> Result<ParamStore> {
        self.theta0()?;
        if init == Init::Textonly {
            self.textonly()?;
        }
        Ok(self.exp.init_for(init.method(), seed)?)
    }

    /// Build-or-load one multi-file result directory.
    fn unit<T>(
        &self,
        dir: &Path,
        load: impl FnOnce(&Path) -> Result<T>,
        build: impl FnOnce() -> Result<T>,
        save: impl FnOnce(&T, &Path) -> Result<()>,
    ) -> Result<T> {
        if dir.join(COMPLETE_MARKER).exists() {
            return load(dir).with_context(|| format!("loading {}", dir.display()));
        }
        if dir.exists() && !self.resume {
            bail!(
                "{} holds an unfinished run; pass --resume to complete it",
                dir.display()
            );
        }
        fs::create_dir_all(dir)?;
        let value = build()?;
        save(&value, dir)?;
        write_atomic(&dir.join(COMPLETE_MARKER), b"")?;
        Ok(value)
    }

    pub fn run_dir(&self, source: &str, seed: u64, finetune: Finetune) -> PathBuf {
        let kind = match finetune {
            Finetune::Standard => "find",
            Finetune::Adversarial => "adv-find",
        };
        self.root.join(kind).join(source).join(format!("seed-{seed}"))
    }

    /// The IMP run for `source` (a task id or `pretext`) and `seed`.
    pub fn imp_run(&self, source: &str, seed: u64, finetune: Finetune) -> Result<ImpRun> {
        if source == PRETEXT_SOURCE && finetune == Finetune::Adversarial {
            bail!("adversarial IMP runs only on downstream tasks");
        }
        let dir = self.run_dir(source, seed, finetune);
        self.theta0()?;
        self.unit(
            &dir,
            |d| self.load_run(d),
            || {
                eprintln!("IMP on {source} ({}), seed {seed} ...", finetune.as_str());
                let run = if source == PRETEXT_SOURCE {
                    self.exp.find_pretext(seed)?
                } else {
                    self.exp.find(&self.exp.task(source)?, seed, finetune)?
                };
                Ok(run)
            },
            |run, d| self.save_run(run, d),
        )
    }

    fn save_run(&self, run: &ImpRun, dir: &Path) -> Result<()> {
        let rate = self.config().prune.rate_per_round;
        let mut table = String::from("round,nominal_sparsity,sparsity,loss\n");
        for (k, (m, loss)) in run.round_masks.iter().zip(&run.round_losses).enumerate() {
            m.save(&dir.join(format!("round-{:02}.tfmk", k + 1)), &self.provenance)?;
            writeln!(table, "{},{},{},{}", k + 1, nominal_sparsity(rate, k + 1), m.sparsity(), loss)?;
        }
        run.mask.save(&dir.join("mask.tfmk"), &self.provenance)?;
        run.checkpoints.save_dir(dir, &self.provenance)?;
        write_atomic(&dir.join("rounds.csv"), table.as_bytes())?;
        Ok(())
    }

    fn load_mask(&self, path: &Path) -> Result<Mask> {
        let (mask, prov) = read_mask(path)?;
        self.check_provenance(prov, path)?;
        Ok(mask)
    }

    fn load_run(&self, dir: &Path) -> Result<ImpRun> {
        let table = fs::read_to_string(dir.join("rounds.csv"))?;
        let mut round_masks = Vec::new();
        let mut round_losses = Vec::new();
        for (k, line) in table.lines().skip(1).enumerate() {
            let loss = line
                .rsplit(',')
                .next()
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| anyhow!("malformed line `{line}` in rounds.csv"))?;
            round_losses.push(loss);
            round_masks.push(self.load_mask(&dir.join(format!("round-{:02}.tfmk", k + 1)))?);
        }
        Ok(ImpRun {
            mask: self.load_mask(&dir.join("mask.tfmk"))?,
            round_masks,
            checkpoints: CheckpointStore::load_dir(dir)?,
            round_losses,
        })
    }

    fn report_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    fn emit(&self, report: &TicketReport, stem: &str) -> Result<PathBuf> {
        let (csv, _) = emit_ticket_report(report, &self.report_dir(), stem)?;
        Ok(csv)
    }

    fn dense_accuracy(&self, task_id: &str, seed: u64) -> Result<f64> {
        self.theta0()?;
        let task = self.exp.task(task_id)?;
        Ok(self.exp.dense(&task, seed, Finetune::Standard)?.accuracy)
    }

    /// `find`: IMP runs for every source and seed; returns the run directories.
    pub fn find(&self, sources: &[String], seeds: &[u64], finetune: Finetune) -> Result<Vec<PathBuf>> {
        let mut dirs = Vec::new();
        for source in sources {
            for &seed in seeds {
                self.imp_run(source, seed, finetune)?;
                dirs.push(self.run_dir(source, seed, finetune));
            }
        }
        Ok(dirs)
    }

    /// `eval`: retrain `mask` on `task_id` from the chosen init for every seed.
    pub fn eval(
        &self,
        mask_path: &Path,
        source: &str,
        task_id: &str,
        init: Init,
        finetune: Finetune,
        seeds: &[u64],
    ) -> Result<(TicketReport, PathBuf)> {
        let (mask, _) = read_mask(mask_path)?;
        let task = self.exp.task(task_id)?;
        let mut report = self.exp.new_report();
        for &seed in seeds {
            let dense = self.dense_accuracy(task_id, seed)?;
            let init_params = self.init_for(init, seed)?;
            let eval = self.exp.evaluate(&mask, &init_params, &task, seed, finetune)?;
            let trunk = mask.trunk_sparsity(&init_params);
            report.push(source, task_id, &mask, trunk, seed, init.method(), finetune.as_str(), eval.accuracy, dense);
        }
        report.sort();
        let init_name = format!("{init:?}").to_lowercase();
        let stem = format!(
            "eval-{task_id}-{}-{init_name}-{}-{}",
            &mask.content_hash()[..12],
            finetune.as_str(),
            seed_tag(seeds)
        );
        let path = self.emit(&report, &stem)?;
        Ok((report, path))
    }

    fn default_sources(&self) -> Vec<String> {
        let mut s: Vec<String> = self.config().tasks.iter().map(|t| t.task_id.clone()).collect();
        s.push(PRETEXT_SOURCE.to_string());
        s
    }

    /// `transfer`: every source mask on every configured task.
    pub fn transfer(&self, sources: &[String], seeds: &[u64]) -> Result<(TicketReport, PathBuf)> {
        let defaults = self.default_sources();
        let sources = if sources.is_empty() { defaults.clone() } else { sources.to_vec() };
        let mut runs = BTreeMap::new();
        for source in &sources {
            for &seed in seeds {
                runs.insert((source.clone(), seed), self.imp_run(source, seed, Finetune::Standard)?);
            }
        }
        eprintln!("transfer grid ...");
        let sparsities: Vec<f64> = self.config().sparsities.iter().copied().filter(|&s| s > 0.0).collect();
        let report = self.exp.transfer_matrix(&runs, &self.config().tasks, &sparsities, seeds)?;
        let stem = if sources == defaults {
            format!("transfer-{}", seed_tag(seeds))
        } else {
            format!("transfer-{}-{}", sources.join("+"), seed_tag(seeds))
        };
        let path = self.emit(&report, &stem)?;
        Ok((report, path))
    }

    /// `sweep`: accuracy against sparsity for one task, including the dense point.
    pub fn sweep(&self, task_id: &str, seeds: &[u64]) -> Result<(TicketReport, PathBuf)> {
        let task = self.exp.task(task_id)?;
        let mut task_runs = BTreeMap::new();
        let mut pretext_runs = BTreeMap::new();
        for &seed in seeds {
            task_runs.insert(seed, self.imp_run(task_id, seed, Finetune::Standard)?);
            pretext_runs.insert(seed, self.imp_run(PRETEXT_SOURCE, seed, Finetune::Standard)?);
        }
        let mut grid = vec![0.0];
        grid.extend(self.config().sparsities.iter().copied().filter(|&s| s > 0.0));
        eprintln!("sparsity sweep on {task_id} ...");
        let report = self.exp.sparsity_sweep(&task, &grid, &task_runs, &pretext_runs, seeds)?;
        let path = self.emit(&report, &format!("sweep-{task_id}-{}", seed_tag(seeds)))?;
        Ok((report, path))
    }

    /// `overlap` on explicit mask files, labelled by file stem.
    pub fn overlap_files(&self, paths: &[PathBuf]) -> Result<(OverlapMatrix, PathBuf)> {
        let mut masks = Vec::new();
        let mut ids = String::new();
        for p in paths {
            let label = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            let (mask, _) = read_mask(p)?;
            ids.push_str(&mask.content_hash());
            masks.push((label, mask));
        }
        let m = OverlapMatrix::compute(&masks)?;
        let stem = format!("overlap-masks-{}", &sha256_hex(ids.as_bytes())[..12]);
        let (csv, _) = emit_overlap(&m, self.exp.config_hash(), &self.report_dir(), &stem)?;
        Ok((m, csv))
    }

    /// `overlap` across the IMP masks of every configured task and the pretext corpus.
    pub fn overlap_runs(&self, sparsity: f64, seeds: &[u64]) -> Result<Vec<(OverlapMatrix, PathBuf)>> {
        let theta0 = self.theta0()?.clone();
        let mut out = Vec::new();
        for &seed in seeds {
            let mut masks = Vec::new();
            for source in self.default_sources() {
                let run = self.imp_run(&source, seed, Finetune::Standard)?;
                masks.push((source, self.exp.mask_at(&run, &theta0, sparsity)?));
            }
            let m = OverlapMatrix::compute(&masks)?;
            let stem = format!("overlap-s{}-seed-{seed}", basis_points(sparsity));
            let (csv, _) = emit_overlap(&m, self.exp.config_hash(), &self.report_dir(), &stem)?;
            out.push((m, csv));
        }
        Ok(out)
    }

    /// `adv-eval`: standard and adversarial tickets and dense models side by side.
    pub fn adv_eval(&self, tasks: &[String], seeds: &[u64]) -> Result<(TicketReport, PathBuf)> {
        self.exp.adv_config()?;
        let theta0 = self.theta0()?.clone();
        let sparsities: Vec<f64> = self.config().sparsities.iter().copied().filter(|&s| s > 0.0).collect();
        let mut report = self.exp.new_report();
        for task_id in tasks {
            let task = self.exp.task(task_id)?;
            for &seed in seeds {
                eprintln!("adversarial comparison on {task_id}, seed {seed} ...");
                let std_run = self.imp_run(task_id, seed, Finetune::Standard)?;
                let adv_run = self.imp_run(task_id, seed, Finetune::Adversarial)?;
                let ones = Mask::ones(&theta0.prunable_layout());
                let dense = self.exp.dense(&task, seed, Finetune::Standard)?.accuracy;
                let dense_adv = self.exp.dense(&task, seed, Finetune::Adversarial)?.accuracy;
                report.push(task_id, task_id, &ones, 0.0, seed, Method::Dense, "standard", dense, dense);
                report.push(task_id, task_id, &ones, 0.0, seed, Method::Dense, "adversarial", dense_adv, dense);
                for &s in &sparsities {
                    for (run, method, finetune) in [
                        (&std_run, Method::Imp, Finetune::Standard),
                        (&adv_run, Method::AdvImp, Finetune::Adversarial),
                    ] {
                        let mask = self.exp.mask_at(run, &theta0, s)?;
                        let acc = self.exp.evaluate(&mask, &theta0, &task, seed, finetune)?.accuracy;
                        report.push(task_id, task_id, &mask, mask.trunk_sparsity(&theta0), seed, method, finetune.as_str(), acc, dense);
                    }
                }
            }
        }
        report.sort();
        let path = self.emit(&report, &format!("adv-eval-{}-{}", tasks.join("+"), seed_tag(seeds)))?;
        Ok((report, path))
    }
}

/// Plain-text table of per-cell means across seeds.
pub fn format_summary(report: &TicketReport) -> String {
    let mut out = format!(
        "{:<14} {:<14} {:<14} {:<12} {:>8} {:>17} {:>8}  relaxed@{}%\n",
        "target", "source", "method", "training", "sparsity", "accuracy", "dense", report.p
    );
    for c in report.summarize() {
        let _ = writeln!(
            out,
            "{:<14} {:<14} {:<14} {:<12} {:>8.4} {:>8.2} ± {:<6.2} {:>8.2}  {}",
            c.target_task,
            c.source_task,
            c.method.as_str(),
            c.training,
            c.sparsity,
            c.mean_accuracy,
            c.std_accuracy,
            c.dense_reference_accuracy,
            if c.relaxed_verdict { "yes" } else { "no" }
        );
    }
    out
}

pub fn format_overlap(m: &OverlapMatrix) -> String {
    let mut out = format!("{:<14}", format!("s={:.4}", m.sparsity));
    for l in &m.labels {
        let _ = write!(out, " {l:>12}");
    }
    out.push('\n');
    for (l, row) in m.labels.iter().zip(&m.values) {
        let _ = write!(out, "{l:<14}");
        for v in row {
            let _ = write!(out, " {v:>12.2}");
        }
        out.push('\n');
    }
    out
}
