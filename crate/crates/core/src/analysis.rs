//! Ticket verdicts, report records, and mask similarity.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// True iff `ticket_acc` reaches `p` percent of `full_acc`.
pub fn relaxed_winning(ticket_acc: f64, full_acc: f64, p: f64) -> bool {
    ticket_acc >= relaxed_threshold(full_acc, p)
}

/// `(p/100) · full_acc`
pub fn relaxed_threshold(full_acc: f64, p: f64) -> f64 {
    p / 100.0 * full_acc
}

/// Percentage of kept weights shared by two masks: `100 · |i ∩ j| / |i ∪ j|`.
///
/// Two all-zero masks count as identical.
pub fn overlap_ratio(a: &Mask, b: &Mask) -> Result<f64> {
    a.check_layout(&b.layout())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.flat().into_iter().zip(b.flat()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * inter as f64 / union as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub labels: Vec<String>,
    pub sparsity: f64,
    pub values: Vec<Vec<f64>>,
}

impl OverlapMatrix {
    /// Pairwise overlap of masks that share one sparsity level.
    pub fn compute(masks: &[(String, Mask)]) -> Result<Self> {
        let Some((_, first)) = masks.first() else {
            return Err(Error::Mask("overlap needs at least one mask".into()));
        };
        let zeros = first.zeros();
        if let Some((name, m)) = masks.iter().find(|(_, m)| m.zeros() != zeros) {
            return Err(Error::Mask(format!(
                "mask `{name}` has {} zeros, expected {zeros}; masks must share one sparsity",
                m.zeros()
            )));
        }
        let n = masks.len();
        let mut values = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let v = overlap_ratio(&masks[i].1, &masks[j].1)?;
                values[i][j] = v;
                values[j][i] = v;
            }
        }
        Ok(Self {
            labels: masks.iter().map(|(n, _)| n.clone()).collect(),
            sparsity: first.sparsity(),
            values,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Imp,
    Random,
    ShuffledInit,
    TextonlyInit,
    PretextImp,
    Dense,
    AdvImp,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Imp,
        Method::Random,
        Method::ShuffledInit,
        Method::TextonlyInit,
        Method::PretextImp,
        Method::Dense,
        Method::AdvImp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Imp => "imp",
            Method::Random => "random",
            Method::ShuffledInit => "shuffled_init",
            Method::TextonlyInit => "textonly_init",
            Method::PretextImp => "pretext_imp",
            Method::Dense => "dense",
            Method::AdvImp => "adv_imp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown method `{s}`")))
    }
}

/// One retrained ticket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TicketRecord {
    pub source_task: String,
    pub target_task: String,
    /// Masked fraction of the prunable set.
    pub sparsity: f64,
    /// Masked fraction of every trunk parameter.
    pub trunk_sparsity: f64,
    pub seed: u64,
    pub method: Method,
    /// Finetuning regime, e.g. `standard` or `adversarial`.
    pub training: String,
    pub accuracy: f64,
    pub dense_reference_accuracy: f64,
    pub relaxed_verdict: bool,
    pub config_hash: String,
    pub mask_hash: String,
}

impl TicketRecord {
    /// Sort key; rows are emitted in this order.
    pub fn key(&self) -> (String, String, String, u64, String, u64) {
        (
            self.target_task.clone(),
            self.method.as_str().to_string(),
            self.source_task.clone(),
            // Nominal sparsity in basis points keeps the key totally ordered.
            (self.sparsity * 1e4).round() as u64,
            self.training.clone(),
            self.seed,
        )
    }
}

/// Records plus the relaxed-ticket percentage they were judged against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TicketReport {
    pub p: f64,
    pub config_hash: String,
    pub records: Vec<TicketRecord>,
}

/// Mean and sample standard deviation of one report cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub source_task: String,
    pub target_task: String,
    pub method: Method,
    pub training: String,
    pub sparsity: f64,
    pub seeds: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub dense_reference_accuracy: f64,
    pub relaxed_verdict: bool,
}

impl TicketReport {
    pub fn new(p: f64, config_hash: impl Into<String>) -> Self {
        Self {
            p,
            config_hash: config_hash.into(),
            records: Vec::new(),
        }
    }

    /// Add a record; the verdict is derived here so it cannot disagree with `p`.
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        source_task: &str,
        target_task: &str,
        mask: &Mask,
        trunk_sparsity: f64,
        seed: u64,
        method: Method,
        training: &str,
        accuracy: f64,
        dense_reference_accuracy: f64,
    ) {
        self.records.push(TicketRecord {
            source_task: source_task.into(),
            target_task: target_task.into(),
            sparsity: mask.sparsity(),
            trunk_sparsity,
            seed,
            method,
            training: training.into(),
            accuracy,
            dense_reference_accuracy,
            relaxed_verdict: relaxed_winning(accuracy, dense_reference_accuracy, self.p),
            config_hash: self.config_hash.clone(),
            mask_hash: mask.content_hash(),
        });
    }

    pub fn sort(&mut self) {
        self.records.sort_by_key(|r| r.key());
    }

    pub fn extend(&mut self, other: TicketReport) {
        self.records.extend(other.records);
    }

    /// Per-cell aggregates across seeds; the verdict applies the rule to the means.
    pub fn summarize(&self) -> Vec<CellSummary> {
        type Key = (String, String, String, String, u64);
        let mut cells: BTreeMap<Key, Vec<&TicketRecord>> = BTreeMap::new();
        for r in &self.records {
            let k = (
                r.target_task.clone(),
                r.method.as_str().to_string(),
                r.source_task.clone(),
                r.training.clone(),
                (r.sparsity * 1e4).round() as u64,
            );
            cells.entry(k).or_default().push(r);
        }
        cells
            .into_values()
            .map(|rs| {
                let acc: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
                let dense: Vec<f64> = rs.iter().map(|r| r.dense_reference_accuracy).collect();
                let (mean, std) = mean_std(&acc);
                let dense_mean = mean_std(&dense).0;
                CellSummary {
                    source_task: rs[0].source_task.clone(),
                    target_task: rs[0].target_task.clone(),
                    method: rs[0].method,
                    training: rs[0].training.clone(),
                    sparsity: rs[0].sparsity,
                    seeds: rs.len(),
                    mean_accuracy: mean,
                    std_accuracy: std,
                    dense_reference_accuracy: dense_mean,
                    relaxed_verdict: relaxed_winning(mean, dense_mean, self.p),
                }
            })
            .collect()
    }

    /// Records matching a predicate.
    pub fn select(&self, f: impl Fn(&TicketRecord) -> bool) -> Vec<&TicketRecord> {
        self.records.iter().filter(|r| f(r)).collect()
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
