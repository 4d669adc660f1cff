//! Acc@q and BLEU with the max-over-candidates protocol.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Fraction of 1-based `ranks` that are `<= q`.
pub fn acc_at_q(ranks: &[usize], q: usize) -> Result<f64> {
    if q == 0 {
        return Err(Error::Contract("q must be >= 1".into()));
    }
    if ranks.is_empty() {
        return Err(Error::Contract("no ranks".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Contract("ranks are 1-based".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= q).count() as f64 / ranks.len() as f64)
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Single-reference BLEU-n without smoothing: any zero precision gives 0.
/// An order for which neither sequence has an n-gram counts as precision 1.
pub fn bleu(candidate: &[u32], reference: &[u32], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Contract(format!("BLEU order must be in 1..=4, got {n}")));
    }
    if reference.is_empty() {
        return Err(Error::Contract("empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let cand = ngram_counts(candidate, order);
        let refc = ngram_counts(reference, order);
        let total: usize = cand.values().sum();
        let clipped: usize = cand
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        if total == 0 && refc.is_empty() {
            // both sequences are shorter than `order`: nothing to mismatch
            continue;
        }
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

/// Best score of any candidate under `metric`.
pub fn oracle_max<C: AsRef<[u32]>>(
    candidates: &[C],
    reference: &[u32],
    metric: impl Fn(&[u32], &[u32]) -> Result<f64>,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Contract("oracle_max needs at least one candidate".into()));
    }
    candidates
        .iter()
        .try_fold(f64::NEG_INFINITY, |best, c| Ok(best.max(metric(c.as_ref(), reference)?)))
}

/// Retrieval and captioning summary written by the `eval` command.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub queries: usize,
    pub gallery: usize,
    /// mode label -> (q -> Acc@q)
    pub acc_at: BTreeMap<String, BTreeMap<usize, f64>>,
    pub caption_records: usize,
    pub caption_samples: usize,
    /// n -> mean oracle-max BLEU-n
    pub bleu: BTreeMap<usize, f64>,
    /// Flat `key = value` echo of the run configuration.
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    /// TOML text with a fixed key order.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[counts]");
        let _ = writeln!(out, "queries = {}", self.queries);
        let _ = writeln!(out, "gallery = {}", self.gallery);
        let _ = writeln!(out, "caption_records = {}", self.caption_records);
        let _ = writeln!(out, "caption_samples = {}", self.caption_samples);
        for (mode, accs) in &self.acc_at {
            let _ = writeln!(out, "\n[acc_at.{mode}]");
            for (q, v) in accs {
                let _ = writeln!(out, "\"{q}\" = {}", toml_float(*v));
            }
        }
        if !self.bleu.is_empty() {
            let _ = writeln!(out, "\n[bleu]");
            for (n, v) in &self.bleu {
                let _ = writeln!(out, "\"{n}\" = {}", toml_float(*v));
            }
        }
        if !self.config.is_empty() {
            let _ = writeln!(out, "\n[config]");
            for (k, v) in &self.config {
                let _ = writeln!(out, "\"{k}\" = {v:?}");
            }
        }
        out
    }
}

fn toml_float(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}
