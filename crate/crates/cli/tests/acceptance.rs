//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 1 2 11`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{ensure, Result};
use rand::{Rng, RngCore};
use ticket_forge::adversarial::{adv_train, pgd_block_update, pgd_perturb, AdvConfig};
use ticket_forge::analysis::{overlap_ratio, relaxed_threshold, relaxed_winning, Method, TicketReport};
use ticket_forge::codec::Provenance;
use ticket_forge::config::RunConfig;
use ticket_forge::data::{gen_task, Batch, Dataset, Split, TaskSpec};
use ticket_forge::experiment::{Experiment, Finetune};
use ticket_forge::mask::Mask;
use ticket_forge::model::{ArchSpec, Model};
use ticket_forge::params::ParamStore;
use ticket_forge::prune::{global_magnitude_prune, nominal_sparsity, random_prune, ImpRun};
use ticket_forge::rng::seeded;
use ticket_forge::tape::{Tape, Var};
use ticket_forge::tensor::Tensor;
use ticket_forge::train::{self, Budget, Objective};
use ticket_forge_cli::{format_summary, Store};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// (mask hash, task, init, seed) of one retraining.
type EvalKey = (String, String, &'static str, u64);

/// Shared default-scale experiment with cached IMP runs and evaluations.
struct Ctx {
    exp: Experiment,
    runs: RefCell<BTreeMap<(String, u64), ImpRun>>,
    evals: RefCell<BTreeMap<EvalKey, f64>>,
}

impl Ctx {
    fn new() -> Result<Self> {
        let config = RunConfig {
            seeds: SEEDS.to_vec(),
            ..RunConfig::default()
        };
        Ok(Self {
            exp: Experiment::new(config)?,
            runs: RefCell::new(BTreeMap::new()),
            evals: RefCell::new(BTreeMap::new()),
        })
    }

    fn theta0(&self) -> Result<&ParamStore> {
        Ok(self.exp.theta0()?)
    }

    /// IMP on a task id, or on the pretext corpus for `pretext`.
    fn run(&self, source: &str, seed: u64) -> Result<ImpRun> {
        let key = (source.to_string(), seed);
        if let Some(r) = self.runs.borrow().get(&key) {
            return Ok(r.clone());
        }
        let run = if source == "pretext" {
            self.exp.find_pretext(seed)?
        } else {
            self.exp.find(&self.exp.task(source)?, seed, Finetune::Standard)?
        };
        self.runs.borrow_mut().insert(key, run.clone());
        Ok(run)
    }

    fn mask(&self, source: &str, seed: u64, sparsity: f64) -> Result<Mask> {
        let run = self.run(source, seed)?;
        Ok(self.exp.mask_at(&run, self.theta0()?, sparsity)?)
    }

    /// Dev accuracy of `mask` retrained on `task` from θ₀ or shuffled θ₀.
    fn accuracy(&self, mask: &Mask, task: &str, seed: u64, shuffled: bool) -> Result<f64> {
        let init = if shuffled { "shuffled" } else { "theta0" };
        let key = (mask.content_hash(), task.to_string(), init, seed);
        if let Some(&a) = self.evals.borrow().get(&key) {
            return Ok(a);
        }
        let params = if shuffled {
            self.exp.shuffled_init(seed)?
        } else {
            self.theta0()?.clone()
        };
        let acc = self.exp.evaluate(mask, &params, &self.exp.task(task)?, seed, Finetune::Standard)?.accuracy;
        self.evals.borrow_mut().insert(key, acc);
        Ok(acc)
    }

    fn suite(&self) -> Vec<String> {
        self.exp.config.tasks.iter().map(|t| t.task_id.clone()).collect()
    }
}

// 1. Sparsity arithmetic

fn sparsity_arithmetic(ctx: &Ctx) -> Result<Outcome> {
    let run = ctx.run("color_query", 0)?;
    let rate = ctx.exp.config.prune.rate_per_round;
    let mut pass = true;
    let mut parts = Vec::new();
    for k in [9usize, 12] {
        let mask = &run.round_masks[k - 1];
        let got = mask.sparsity();
        let want = nominal_sparsity(rate, k);
        let tol = k as f64 / mask.total() as f64;
        pass &= (got - want).abs() <= tol;
        parts.push(format!("{k} rounds: {got:.6} vs {want:.6} (tol {tol:.2e})"));
    }
    verdict(pass, parts.join("; "))
}

// 2. Relaxed-ticket arithmetic

fn relaxed_arithmetic() -> Result<Outcome> {
    // columns: VQA, GQA, VCR, NLVR2, SNLI-VE, RefCOCO+, Flickr30k IR, Flickr30k TR
    let full = [70.64, 59.64, 54.37, 76.75, 78.47, 74.73, 71.25, 84.63];
    let printed = ["69.93", "59.04", "53.83", "75.98", "77.69", "73.98", "70.54", "83.78"];
    let ticket = [69.98, 59.26, 53.15, 76.32, 77.69, 74.06, 70.15, 83.77];
    let on_means = [true, true, false, true, true, true, false, false];
    let mut mismatches = Vec::new();
    for i in 0..full.len() {
        let t = format!("{:.2}", relaxed_threshold(full[i], 99.0));
        if t != printed[i] {
            mismatches.push(format!("threshold {t} != {}", printed[i]));
        }
        if relaxed_winning(ticket[i], full[i], 99.0) != on_means[i] {
            mismatches.push(format!("verdict for column {i}"));
        }
    }
    let pass = mismatches.is_empty();
    let detail = if pass {
        "8 thresholds reproduced; mean-based verdicts winning on 5/8 (VCR and both Flickr30k columns below)".to_string()
    } else {
        mismatches.join(", ")
    };
    verdict(pass, detail)
}

// 3. Gradient correctness

type Graph = Box<dyn Fn(&mut Tape, &[Var]) -> ticket_forge::Result<Var>>;
type Case = (Vec<Tensor>, Graph);
type CaseGen = Box<dyn Fn(&mut dyn RngCore) -> Case>;

const FD_STEP: f64 = 1e-5;

fn graph(f: impl Fn(&mut Tape, &[Var]) -> ticket_forge::Result<Var> + 'static) -> Graph {
    Box::new(f)
}

fn random_tensor(rng: &mut dyn RngCore, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dim(rng: &mut dyn RngCore, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..hi)
}

fn weighted_sum(tape: &mut Tape, inputs: &[Var], f: &Graph, w_seed: u64) -> ticket_forge::Result<Var> {
    let out = f(tape, inputs)?;
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(random_tensor(&mut seeded(w_seed), &shape));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn value_at(inputs: &[Tensor], f: &Graph, w_seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = weighted_sum(&mut tape, &vars, f, w_seed).unwrap();
    tape.value(loss).item()
}

fn gradient_error(inputs: &[Tensor], f: &Graph, w_seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = weighted_sum(&mut tape, &vars, f, w_seed)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v)?.data().to_vec();
        let numeric: Vec<f64> = (0..inputs[i].len())
            .map(|j| {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += FD_STEP;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= FD_STEP;
                (value_at(&plus, f, w_seed) - value_at(&minus, f, w_seed)) / (2.0 * FD_STEP)
            })
            .collect();
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nb).max(1e-6));
    }
    Ok(worst)
}

fn op_cases() -> Vec<(&'static str, CaseGen)> {
    fn pair(r: &mut dyn RngCore, a: &[usize], b: &[usize]) -> Vec<Tensor> {
        vec![random_tensor(r, a), random_tensor(r, b)]
    }
    vec![
        ("matmul", Box::new(|r| {
            let (m, k, n) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 5));
            (pair(r, &[m, k], &[k, n]), graph(|t, v| t.matmul(v[0], v[1])))
        })),
        ("batch_matmul", Box::new(|r| {
            let (b, m, k, n) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            (pair(r, &[b, m, k], &[b, k, n]), graph(|t, v| t.batch_matmul(v[0], v[1], false)))
        })),
        ("batch_matmul_nt", Box::new(|r| {
            let (b, m, k, n) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            (pair(r, &[b, m, k], &[b, n, k]), graph(|t, v| t.batch_matmul(v[0], v[1], true)))
        })),
        ("add", Box::new(|r| {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            (pair(r, &[a, b], &[a, b]), graph(|t, v| t.add(v[0], v[1])))
        })),
        ("sub", Box::new(|r| {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            (pair(r, &[a, b], &[a, b]), graph(|t, v| t.sub(v[0], v[1])))
        })),
        ("mul", Box::new(|r| {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            (pair(r, &[a, b], &[a, b]), graph(|t, v| t.mul(v[0], v[1])))
        })),
        ("add_broadcast", Box::new(|r| {
            let (b, m, c) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4));
            (pair(r, &[b, m, c], &[m, c]), graph(|t, v| t.add_broadcast(v[0], v[1])))
        })),
        ("mul_broadcast", Box::new(|r| {
            let (b, m, c) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4));
            (pair(r, &[b, m, c], &[c]), graph(|t, v| t.mul_broadcast(v[0], v[1])))
        })),
        ("scale", Box::new(|r| {
            let f = r.random_range(-3.0..3.0);
            let n = dim(r, 1, 6);
            (vec![random_tensor(r, &[n, 2])], graph(move |t, v| t.scale(v[0], f)))
        })),
        ("sum", Box::new(|r| {
            let n = dim(r, 1, 6);
            (vec![random_tensor(r, &[n, 3])], graph(|t, v| t.sum(v[0])))
        })),
        ("mean", Box::new(|r| {
            let n = dim(r, 1, 6);
            (vec![random_tensor(r, &[n, 3])], graph(|t, v| t.mean(v[0])))
        })),
        ("gelu", Box::new(|r| {
            let spread = r.random_range(0.5..4.0);
            let n = dim(r, 1, 8);
            let mut x = random_tensor(r, &[n]);
            x.data_mut().iter_mut().for_each(|v| *v *= spread);
            (vec![x], graph(|t, v| t.gelu(v[0])))
        })),
        ("softmax", Box::new(|r| {
            let (m, c) = (dim(r, 1, 4), dim(r, 1, 6));
            (vec![random_tensor(r, &[m, c])], graph(|t, v| t.softmax(v[0])))
        })),
        ("layer_norm", Box::new(|r| {
            let (m, c) = (dim(r, 1, 4), dim(r, 2, 6));
            let xs = vec![random_tensor(r, &[m, c]), random_tensor(r, &[c]), random_tensor(r, &[c])];
            (xs, graph(|t, v| t.layer_norm(v[0], v[1], v[2])))
        })),
        ("reshape", Box::new(|r| {
            let (a, b, c) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            (vec![random_tensor(r, &[a, b, c])], graph(move |t, v| t.reshape(v[0], &[a * b, c])))
        })),
        ("permute", Box::new(|r| {
            let perms = [[0, 2, 1], [1, 0, 2], [2, 1, 0], [1, 2, 0], [2, 0, 1]];
            let p = perms[dim(r, 0, perms.len())];
            let shape = [dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4)];
            (vec![random_tensor(r, &shape)], graph(move |t, v| t.permute(v[0], &p)))
        })),
        ("concat", Box::new(|r| {
            let (m, c1, c2, axis) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4), dim(r, 0, 2));
            let (s1, s2) = if axis == 0 { ([c1, m], [c2, m]) } else { ([m, c1], [m, c2]) };
            (pair(r, &s1, &s2), graph(move |t, v| t.concat(&[v[0], v[1]], axis)))
        })),
        ("slice", Box::new(|r| {
            let (m, c, axis) = (dim(r, 1, 4), dim(r, 1, 5), dim(r, 0, 2));
            let len = c.div_ceil(2);
            let shape = if axis == 0 { [c, m] } else { [m, c] };
            (vec![random_tensor(r, &shape)], graph(move |t, v| t.slice(v[0], axis, c - len, len)))
        })),
        ("gather_rows", Box::new(|r| {
            let rows = dim(r, 1, 5);
            let ids: Vec<usize> = (0..dim(r, 1, 6)).map(|_| dim(r, 0, rows)).collect();
            let cols = dim(r, 1, 4);
            (vec![random_tensor(r, &[rows, cols])], graph(move |t, v| t.gather_rows(v[0], &ids)))
        })),
        ("softmax_cross_entropy", Box::new(|r| {
            let (b, c) = (dim(r, 1, 4), dim(r, 2, 6));
            let labels: Vec<usize> = (0..b).map(|_| dim(r, 0, c)).collect();
            (vec![random_tensor(r, &[b, c])], graph(move |t, v| t.softmax_cross_entropy(v[0], &labels)))
        })),
        ("symmetric_kl", Box::new(|r| {
            let (b, c) = (dim(r, 1, 4), dim(r, 2, 6));
            (pair(r, &[b, c], &[b, c]), graph(|t, v| t.symmetric_kl(v[0], v[1])))
        })),
    ]
}

fn gradient_correctness() -> Result<Outcome> {
    const CASES: u64 = 20;
    const TOL: f64 = 1e-4;
    let ops = op_cases();
    let (mut worst, mut worst_op, mut failures) = (0.0f64, "", Vec::new());
    for (i, (name, gen)) in ops.iter().enumerate() {
        for case in 0..CASES {
            let mut rng = seeded(1000 * i as u64 + case);
            let (inputs, graph) = gen(&mut rng);
            let err = gradient_error(&inputs, &graph, 77 + case)?;
            if err > worst {
                worst = err;
                worst_op = name;
            }
            if err.is_nan() || err >= TOL {
                failures.push(format!("{name}#{case}={err:.2e}"));
            }
        }
    }
    let detail = format!(
        "{} ops x {CASES} cases, worst relative error {worst:.2e} ({worst_op}); {} over {TOL:.0e}",
        ops.len(),
        failures.len()
    );
    verdict(failures.is_empty(), detail)
}

// 4. Global-pruning oracle

fn tied_store(rng: &mut dyn RngCore) -> (ParamStore, Mask, f64) {
    let pool = [0.0, 0.1, 0.25, 0.25, 0.5, 1.0];
    let n = dim(rng, 1, 5);
    let mut p = ParamStore::new();
    let mut flags = Vec::new();
    for t in 0..n {
        let shape = vec![dim(rng, 1, 6), dim(rng, 1, 8)];
        let len = shape[0] * shape[1];
        let data = (0..len)
            .map(|_| {
                let m = pool[dim(rng, 0, pool.len())];
                if rng.random_bool(0.5) { -m } else { m }
            })
            .collect();
        let name = format!("t{}", (n - t) * 7 % 11);
        p.insert(name.clone(), Tensor::new(shape.clone(), data).unwrap());
        flags.push((name, shape, (0..len).map(|_| rng.random_bool(0.8)).collect()));
    }
    (p, Mask::from_flags(flags).unwrap(), rng.random_range(0.01..0.99))
}

fn sort_oracle(params: &ParamStore, mask: &Mask, rate: f64) -> Mask {
    let mut cands: Vec<(f64, String, usize)> = Vec::new();
    for (name, e) in mask.iter() {
        for (i, (&k, v)) in e.keep().iter().zip(params.get(name).unwrap().data()).enumerate() {
            if k {
                cands.push((v.abs(), name.clone(), i));
            }
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let count = (rate * cands.len() as f64).floor() as usize;
    let mut want: Vec<(String, Vec<usize>, Vec<bool>)> =
        mask.iter().map(|(n, e)| (n.clone(), e.shape().to_vec(), e.keep().to_vec())).collect();
    for (_, name, i) in &cands[..count] {
        want.iter_mut().find(|(n, _, _)| n == name).unwrap().2[*i] = false;
    }
    Mask::from_flags(want).unwrap()
}

fn pruning_oracle() -> Result<Outcome> {
    let mut rng = seeded(4);
    let (mut agree, mut ties) = (0, 0);
    for _ in 0..50 {
        let (params, mask, rate) = tied_store(&mut rng);
        let got = global_magnitude_prune(&params, &mask, rate)?;
        agree += usize::from(got == sort_oracle(&params, &mask, rate));
        let mags: Vec<u64> = params.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.abs().to_bits())).collect();
        let distinct: std::collections::BTreeSet<_> = mags.iter().collect();
        ties += usize::from(distinct.len() < mags.len());
    }
    verdict(agree == 50, format!("{agree}/50 stores match the full-sort oracle ({ties} with tied magnitudes)"))
}

// 5. IMP beats random pruning

fn imp_beats_random(ctx: &Ctx) -> Result<Outcome> {
    let mut pass = true;
    let mut diffs = Vec::new();
    let mut parts = Vec::new();
    for task in ctx.suite() {
        for s in [0.5, 0.6] {
            let (mut imp, mut rand) = (Vec::new(), Vec::new());
            for &seed in &SEEDS {
                let mask = ctx.mask(&task, seed, s)?;
                let random = ctx.exp.random_like(&mask, seed)?;
                imp.push(ctx.accuracy(&mask, &task, seed, false)?);
                rand.push(ctx.accuracy(&random, &task, seed, false)?);
                diffs.push(imp[imp.len() - 1] - rand[rand.len() - 1]);
            }
            let (mi, mr) = (mean(&imp), mean(&rand));
            pass &= mi > mr;
            parts.push(format!("{task}@{s}: {mi:.1} vs {mr:.1}"));
        }
    }
    let pooled = mean(&diffs);
    pass &= pooled >= 1.0;
    verdict(pass, format!("pooled margin {pooled:.2} points; {}", parts.join(", ")))
}

// 6. Pretext tickets transfer

fn pretext_transfer(ctx: &Ctx) -> Result<Outcome> {
    let mut wins = 0;
    let mut parts = Vec::new();
    let suite = ctx.suite();
    for task in &suite {
        let (mut pre, mut rand) = (Vec::new(), Vec::new());
        for &seed in &SEEDS {
            let mask = ctx.mask("pretext", seed, 0.5)?;
            let random = ctx.exp.random_like(&mask, seed)?;
            pre.push(ctx.accuracy(&mask, task, seed, false)?);
            rand.push(ctx.accuracy(&random, task, seed, false)?);
        }
        let (mp, mr) = (mean(&pre), mean(&rand));
        wins += usize::from(mp > mr);
        parts.push(format!("{task}: {mp:.1} vs {mr:.1}"));
    }
    verdict(wins >= 4, format!("pretext beats random on {wins}/{} tasks; {}", suite.len(), parts.join(", ")))
}

// 7. Shuffled-init degradation

fn shuffled_degradation(ctx: &Ctx) -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for task in ctx.suite() {
        let (mut base, mut shuf) = (Vec::new(), Vec::new());
        for &seed in &SEEDS {
            let mask = ctx.mask(&task, seed, 0.6)?;
            base.push(ctx.accuracy(&mask, &task, seed, false)?);
            shuf.push(ctx.accuracy(&mask, &task, seed, true)?);
        }
        let (mb, ms) = (mean(&base), mean(&shuf));
        pass &= ms < mb;
        parts.push(format!("{task}: {ms:.1} < {mb:.1}"));
    }
    verdict(pass, parts.join(", "))
}

// 8. PGD constraint

fn small_model() -> Model {
    let arch = ArchSpec {
        layers: 1,
        hidden: 16,
        heads: 2,
        ..ArchSpec::default()
    };
    Model::for_task(&arch, &TaskSpec::lookup("shape_query").unwrap()).unwrap()
}

fn small_batch(m: &Model, size: usize) -> Batch {
    let d = gen_task(&TaskSpec::lookup("shape_query").unwrap(), 0, size, Split::Train).unwrap();
    d.batch(&(0..size).collect::<Vec<_>>(), m.encoding())
}

fn pgd_constraint() -> Result<Outcome> {
    let m = small_model();
    let params = m.build(0);
    let b = small_batch(&m, 4);
    let mut rng = seeded(8);
    let (mut iterations, mut violations) = (0usize, 0usize);
    while iterations < 1000 {
        let eps: f64 = rng.random_range(0.0..1.5);
        let mut cfg = AdvConfig::new(eps, rng.random_range(0.01..3.0) * eps.max(0.01), 1.0);
        cfg.simultaneous = rng.random_bool(0.5);
        // Block-level updates with gradients spanning many magnitudes.
        let mut delta = vec![0.0; dim(&mut rng, 1, 40)];
        for _ in 0..5 {
            let scale = 10f64.powf(rng.random_range(-8.0..8.0));
            let g: Vec<f64> = (0..delta.len()).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            pgd_block_update(&mut delta, &g, cfg.step_size, eps);
            violations += usize::from(delta.iter().map(|v| v * v).sum::<f64>().sqrt() > eps);
            iterations += 1;
        }
        // Full model PGD, checked after each iteration count.
        for k in 1..=dim(&mut rng, 1, 5) {
            cfg.pgd_steps = k;
            let d = pgd_perturb(&m, &params, None, &b, &cfg)?;
            violations += d.block_norms().iter().filter(|&&n| n > eps).count().min(1);
            iterations += 1;
        }
    }
    let mut saturation: f64 = 0.0;
    for eps in [1e-3, 0.1, 0.7, 3.0] {
        let mut cfg = AdvConfig::new(eps, 10.0 * eps, 0.0);
        cfg.pgd_steps = 1;
        for n in pgd_perturb(&m, &params, None, &b, &cfg)?.block_norms() {
            saturation = saturation.max((n - eps).abs());
        }
    }
    verdict(
        violations == 0 && saturation <= 1e-12,
        format!("{violations} violations in {iterations} iterations; step 10ε lands on the sphere within {saturation:.1e}"),
    )
}

// 9. Adversarial degenerate equivalence

fn zero_radius_equivalence() -> Result<Outcome> {
    let m = small_model();
    let init = m.build(5);
    let d = gen_task(&TaskSpec::lookup("shape_query")?, 0, 200, Split::Train)?;
    let mask = random_prune(&init.prunable_layout(), 0.3, 1)?;
    let cfg = AdvConfig::new(0.0, 0.1, 1.0);
    let budget = Budget {
        steps: 100,
        batch_size: 16,
        lr: 0.1,
    };
    let trajectory = |objective: Objective| -> Result<Vec<String>> {
        let mut params = init.clone();
        let mut hashes = Vec::new();
        train::train(&m, &mut params, Some(&mask), &d, objective, &budget, 9, 0, budget.steps, |_, p| {
            hashes.push(p.content_hash());
            Ok(())
        })?;
        Ok(hashes)
    };
    let adv = trajectory(Objective::Adversarial(&cfg))?;
    let std = trajectory(Objective::Standard { ce_weight: 2.0 })?;
    let mut via_adv_train = init.clone();
    adv_train(&m, &mut via_adv_train, Some(&mask), &d, &cfg, &budget, 9)?;
    let same_steps = adv.iter().zip(&std).filter(|(a, b)| a == b).count();
    let final_match = via_adv_train.content_hash() == std[std.len() - 1];
    verdict(
        adv.len() == 100 && same_steps == 100 && final_match,
        format!("{same_steps}/100 parameter snapshots bitwise equal; adv_train final state equal: {final_match}"),
    )
}

// 10. Determinism & persistence

const SMALL_RUN: &str = r#"
tasks = ["color_query", "exists"]
seeds = [0]
sparsities = [0.3, 0.5]

[arch]
layers = 1
hidden = 16
heads = 2

[data]
train_size = 96
dev_size = 96
pretext_size = 192

[pretrain]
steps = 40
batch_size = 16

[budget]
steps = 20
batch_size = 16
"#;

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

fn determinism_and_persistence() -> Result<Outcome> {
    let tmp = tempfile::tempdir()?;
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let store = Store::open(RunConfig::from_toml(SMALL_RUN)?, &out, false)?;
        store.transfer(&[], &[0])?;
        store.overlap_runs(0.5, &[0])?;
        trees.push(files(&out));
    }
    let (a, b) = (&trees[0], &trees[1]);
    let count = |ext: &str| a.keys().filter(|k| k.extension().is_some_and(|e| e == ext)).count();
    let (masks, ckpts, reports) = (count("tfmk"), count("tfps"), count("csv") + count("json"));
    ensure!(masks > 0 && ckpts > 0 && reports > 0, "run produced no artifacts");
    let identical = a == b;

    let mut round_trips = 0;
    let mut broken = Vec::new();
    let root = tmp.path().join("a");
    for (rel, bytes) in a {
        let path = root.join(rel);
        let again = match path.extension().and_then(|e| e.to_str()) {
            Some("tfmk") => {
                let (m, prov): (Mask, Provenance) = Mask::load(&path)?;
                m.to_bytes(&prov)
            }
            Some("tfps") => {
                let (p, prov) = ParamStore::load(&path)?;
                p.to_bytes(&prov)
            }
            _ => continue,
        };
        round_trips += 1;
        if &again != bytes {
            broken.push(rel.display().to_string());
        }
    }
    verdict(
        identical && broken.is_empty(),
        format!(
            "two runs byte-identical: {identical} ({masks} masks, {ckpts} param files, {reports} reports); \
             {round_trips} files re-encode exactly, {} differ",
            broken.len()
        ),
    )
}

// 11. Overlap metric

fn overlap_metric() -> Result<Outcome> {
    let flags = |v: [u8; 4]| Mask::from_flags(vec![("w".into(), vec![2, 2], v.iter().map(|&x| x == 1).collect())]).unwrap();
    let a = flags([1, 1, 0, 0]);
    let same = overlap_ratio(&a, &a)?;
    let disjoint = overlap_ratio(&a, &flags([0, 0, 1, 1]))?;
    let third = overlap_ratio(&a, &flags([1, 0, 1, 0]))?;
    let forced = same == 100.0 && disjoint == 0.0 && format!("{third:.2}") == "33.33";

    let mut rng = seeded(11);
    let mut symmetric = 0;
    for _ in 0..100 {
        let layout = [("a".to_string(), vec![3, 5]), ("b".to_string(), vec![7])];
        let random = |rng: &mut dyn RngCore| {
            let p = rng.random_range(0.0..1.0);
            Mask::from_flags(
                layout
                    .iter()
                    .map(|(n, s)| (n.clone(), s.clone(), (0..s.iter().product()).map(|_| rng.random_bool(p)).collect()))
                    .collect(),
            )
            .unwrap()
        };
        let (x, y) = (random(&mut rng), random(&mut rng));
        let (xy, yx) = (overlap_ratio(&x, &y)?, overlap_ratio(&y, &x)?);
        symmetric += usize::from(xy == yx && (0.0..=100.0).contains(&xy));
    }
    verdict(
        forced && symmetric == 100,
        format!("forced examples {same} / {disjoint} / {third:.2}; symmetric and bounded on {symmetric}/100 random pairs"),
    )
}

// 12. Adversarial ticket experiment (report only)

const ADV_RUN: &str = r#"
tasks = ["color_query", "shape_query", "exists"]
seeds = [0]
sparsities = [0.5, 0.6]

[adv]
"#;

fn adversarial_experiment() -> Result<Outcome> {
    let tmp = tempfile::tempdir()?;
    let store = Store::open(RunConfig::from_toml(ADV_RUN)?, tmp.path(), false)?;
    let tasks: Vec<String> = store.config().tasks.iter().map(|t| t.task_id.clone()).collect();
    let seeds = store.config().seeds.clone();
    store.find(&tasks, &seeds, Finetune::Adversarial)?;
    let (report, path) = store.adv_eval(&tasks, &seeds)?;
    println!("{}", format_summary(&report));
    ensure!(path.exists(), "comparison table missing");

    let cell = |r: &TicketReport, task: &str, method: Method, s: f64| {
        let xs: Vec<f64> = r
            .records
            .iter()
            .filter(|x| x.target_task == task && x.method == method && (x.sparsity - s).abs() < 0.05)
            .map(|x| x.accuracy)
            .collect();
        (!xs.is_empty()).then(|| mean(&xs))
    };
    let mut parts = Vec::new();
    let mut complete = true;
    for task in &tasks {
        for s in [0.5, 0.6] {
            match (cell(&report, task, Method::AdvImp, s), cell(&report, task, Method::Imp, s)) {
                (Some(adv), Some(std)) => parts.push(format!("{task}@{s}: {:+.1}", adv - std)),
                _ => complete = false,
            }
        }
    }
    verdict(
        complete,
        format!("adversarial minus standard ticket accuracy (reported, not asserted): {}", parts.join(", ")),
    )
}

fn main() -> ExitCode {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: u32| only.is_empty() || only.contains(&id);

    let ctx = match Ctx::new() {
        Ok(c) => c,
        Err(e) => {
            println!("FAIL  setup: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    type Check<'a> = Box<dyn Fn() -> Result<Outcome> + 'a>;
    let criteria: Vec<(u32, &str, Check)> = vec![
        (1, "sparsity arithmetic", Box::new(|| sparsity_arithmetic(&ctx))),
        (2, "relaxed-ticket arithmetic", Box::new(relaxed_arithmetic)),
        (3, "gradient correctness", Box::new(gradient_correctness)),
        (4, "global-pruning oracle", Box::new(pruning_oracle)),
        (5, "IMP beats random pruning", Box::new(|| imp_beats_random(&ctx))),
        (6, "pretext tickets transfer", Box::new(|| pretext_transfer(&ctx))),
        (7, "shuffled-init degradation", Box::new(|| shuffled_degradation(&ctx))),
        (8, "PGD constraint", Box::new(pgd_constraint)),
        (9, "adversarial degenerate equivalence", Box::new(zero_radius_equivalence)),
        (10, "determinism & persistence", Box::new(determinism_and_persistence)),
        (11, "overlap metric", Box::new(overlap_metric)),
        (12, "adversarial ticket experiment", Box::new(adversarial_experiment)),
    ];

    let mut failed = 0;
    let mut ran = 0;
    for (id, name, check) in &criteria {
        if !wanted(*id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        failed += usize::from(!pass);
        println!(
            "{}  {id:>2}. {name} ({:.1}s): {detail}",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
