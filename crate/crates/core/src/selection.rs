//! Gradient-norm based sample selection.
//!
//! The moderate strategy drops samples whose loss lies outside one
//! population standard deviation of the batch mean, then keeps the
//! `floor(rho * batch)` survivors whose gradient norm is closest to the
//! survivors' median. High, low and random are the comparison strategies.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::model::{sample_gradient, ModelParams};
use crate::rng;
use crate::world::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientRecord {
    pub sample_index: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

impl GradientRecord {
    pub fn new(sample_index: usize, loss: f64, grad_norm: f64) -> Result<Self> {
        let r = GradientRecord {
            sample_index,
            loss,
            grad_norm,
        };
        r.check()?;
        Ok(r)
    }

    fn check(&self) -> Result<()> {
        if !(self.loss.is_finite() && self.grad_norm.is_finite()) || self.loss < 0.0 || self.grad_norm < 0.0 {
            return Err(Error::Data(format!(
                "sample {}: loss {} / grad norm {} must be finite and non-negative",
                self.sample_index, self.loss, self.grad_norm
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Moderate,
    High,
    Low,
    Random,
    All,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Moderate => "moderate",
            Strategy::High => "high",
            Strategy::Low => "low",
            Strategy::Random => "random",
            Strategy::All => "all",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "moderate" => Strategy::Moderate,
            "high" => Strategy::High,
            "low" => Strategy::Low,
            "random" => Strategy::Random,
            "all" => Strategy::All,
            _ => return arg(format!("unknown strategy '{s}'")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Batch,
    Dataset,
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Scope::Batch),
            "dataset" => Ok(Scope::Dataset),
            _ => arg(format!("unknown scope '{s}'")),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Batch => "batch",
            Scope::Dataset => "dataset",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub rho: f64,
    pub scope: Scope,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            strategy: Strategy::All,
            rho: 0.2,
            scope: Scope::Batch,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn new(strategy: Strategy, rho: f64, scope: Scope, seed: u64) -> Result<Self> {
        let c = SelectionConfig {
            strategy,
            rho,
            scope,
            seed,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return arg(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        Ok(())
    }

    pub fn k(&self, batch_size: usize) -> usize {
        (self.rho * batch_size as f64).floor() as usize
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Median; an even count averages the two middle values.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn check_records(records: &[GradientRecord]) -> Result<()> {
    if records.is_empty() {
        return arg("no gradient records");
    }
    records.iter().try_for_each(GradientRecord::check)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prefilter {
    pub candidates: Vec<GradientRecord>,
    pub mu: f64,
    pub sigma: f64,
}

/// Keeps records with loss in `[mu - sigma, mu + sigma]`, endpoints included.
pub fn loss_prefilter(records: &[GradientRecord]) -> Result<Prefilter> {
    check_records(records)?;
    let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
    let (mu, sigma) = mean_std(&losses);
    let candidates = if sigma == 0.0 {
        records.to_vec()
    } else {
        let (lo, hi) = (mu - sigma, mu + sigma);
        records
            .iter()
            .filter(|r| r.loss >= lo && r.loss <= hi)
            .copied()
            .collect()
    };
    Ok(Prefilter { candidates, mu, sigma })
}

fn by_index(a: &GradientRecord, b: &GradientRecord) -> Ordering {
    a.sample_index.cmp(&b.sample_index)
}

fn take_sorted(mut picked: Vec<GradientRecord>, k: usize) -> Vec<usize> {
    picked.truncate(k);
    let mut out: Vec<usize> = picked.iter().map(|r| r.sample_index).collect();
    out.sort_unstable();
    out
}

/// Median of the candidates' gradient norms together with the `k` selected
/// sample indices (ascending).
pub fn moderate_select_with_median(
    candidates: &[GradientRecord],
    rho: f64,
    batch_size: usize,
) -> Result<(f64, Vec<usize>)> {
    check_records(candidates)?;
    if !(rho > 0.0 && rho <= 1.0) {
        return arg(format!("rho must lie in (0, 1], got {rho}"));
    }
    let k = (rho * batch_size as f64).floor() as usize;
    if k == 0 {
        return arg(format!("floor({rho} * {batch_size}) selects no samples"));
    }
    let norms: Vec<f64> = candidates.iter().map(|r| r.grad_norm).collect();
    let mu_g = median(&norms);
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| {
        (a.grad_norm - mu_g)
            .abs()
            .total_cmp(&(b.grad_norm - mu_g).abs())
            .then_with(|| by_index(a, b))
    });
    Ok((mu_g, take_sorted(sorted, k)))
}

pub fn moderate_select(candidates: &[GradientRecord], rho: f64, batch_size: usize) -> Result<Vec<usize>> {
    Ok(moderate_select_with_median(candidates, rho, batch_size)?.1)
}

/// Summary of one selection decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub candidate_count: usize,
    pub selected: Vec<usize>,
    pub mu_l: f64,
    pub sigma_l: f64,
    pub mu_g: f64,
    pub selected_stats: GroupStats,
    pub rejected_stats: GroupStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub mean_loss: f64,
    pub mean_grad_norm: f64,
}

impl GroupStats {
    fn of<'a>(records: impl Iterator<Item = &'a GradientRecord>) -> Self {
        let (mut n, mut l, mut g) = (0usize, 0.0, 0.0);
        for r in records {
            n += 1;
            l += r.loss;
            g += r.grad_norm;
        }
        let d = if n == 0 { 1.0 } else { n as f64 };
        GroupStats {
            count: n,
            mean_loss: l / d,
            mean_grad_norm: g / d,
        }
    }
}

/// Runs the configured strategy. `salt` varies the random stream between
/// calls that share a config (batch number, stage, ...).
pub fn select(
    cfg: &SelectionConfig,
    records: &[GradientRecord],
    batch_size: usize,
    salt: u64,
) -> Result<SelectionReport> {
    cfg.validate()?;
    check_records(records)?;
    let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
    let (mu_l, sigma_l) = mean_std(&losses);
    let norms: Vec<f64> = records.iter().map(|r| r.grad_norm).collect();
    let k = cfg.k(batch_size);
    let need_k = |k: usize| -> Result<()> {
        if k == 0 {
            return arg(format!("floor({} * {batch_size}) selects no samples", cfg.rho));
        }
        Ok(())
    };
    let (candidate_count, mu_g, selected) = match cfg.strategy {
        Strategy::Moderate => {
            let pre = loss_prefilter(records)?;
            let (mu_g, sel) = moderate_select_with_median(&pre.candidates, cfg.rho, batch_size)?;
            (pre.candidates.len(), mu_g, sel)
        }
        Strategy::High | Strategy::Low => {
            need_k(k)?;
            let mut sorted = records.to_vec();
            let high = cfg.strategy == Strategy::High;
            sorted.sort_by(|a, b| {
                let o = a.grad_norm.total_cmp(&b.grad_norm);
                if high { o.reverse() } else { o }.then_with(|| by_index(a, b))
            });
            (records.len(), median(&norms), take_sorted(sorted, k))
        }
        Strategy::Random => {
            need_k(k)?;
            let mut ordered = records.to_vec();
            ordered.sort_by(by_index);
            let mut r = rng::stream(cfg.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15), "selection/random");
            let k = k.min(ordered.len());
            let picked: Vec<GradientRecord> = sample_indices(&mut r, ordered.len(), k)
                .into_iter()
                .map(|i| ordered[i])
                .collect();
            (records.len(), median(&norms), take_sorted(picked, k))
        }
        Strategy::All => {
            let mut all: Vec<usize> = records.iter().map(|r| r.sample_index).collect();
            all.sort_unstable();
            (records.len(), median(&norms), all)
        }
    };
    let chosen: std::collections::HashSet<usize> = selected.iter().copied().collect();
    Ok(SelectionReport {
        strategy: cfg.strategy,
        batch_size,
        candidate_count,
        mu_l,
        sigma_l,
        mu_g,
        selected_stats: GroupStats::of(records.iter().filter(|r| chosen.contains(&r.sample_index))),
        rejected_stats: GroupStats::of(records.iter().filter(|r| !chosen.contains(&r.sample_index))),
        selected,
    })
}

pub fn strategy_select(cfg: &SelectionConfig, records: &[GradientRecord], batch_size: usize) -> Result<Vec<usize>> {
    Ok(select(cfg, records, batch_size, 0)?.selected)
}

/// Gradient records for every sample of a dataset at fixed parameters.
pub fn dataset_records(params: &ModelParams, dataset: &Dataset) -> Result<Vec<GradientRecord>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            let g = sample_gradient(params, s)?;
            GradientRecord::new(s.index, g.loss, g.grad_norm)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TercileRow {
    pub group: String,
    pub count: usize,
    pub mean_grad_norm: f64,
    pub mean_loss: f64,
    pub mean_target_tokens: f64,
}

/// Sizes of a low/moderate/high split of `n` items; earlier groups take the
/// remainder.
pub fn tercile_sizes(n: usize) -> [usize; 3] {
    let base = n / 3;
    let rem = n % 3;
    [base + (rem > 0) as usize, base + (rem > 1) as usize, base]
}

/// Splits `(grad_norm, loss, target_len)` triples into gradient terciles.
pub fn tercile_table(rows: &[(usize, f64, f64, usize)]) -> Result<Vec<TercileRow>> {
    if rows.len() < 3 {
        return arg(format!("tercile audit needs at least 3 samples, got {}", rows.len()));
    }
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let sizes = tercile_sizes(rows.len());
    let mut out = Vec::with_capacity(3);
    let mut start = 0;
    for (name, size) in ["low", "moderate", "high"].into_iter().zip(sizes) {
        let group = &sorted[start..start + size];
        let n = size as f64;
        out.push(TercileRow {
            group: name.to_string(),
            count: size,
            mean_grad_norm: group.iter().map(|r| r.1).sum::<f64>() / n,
            mean_loss: group.iter().map(|r| r.2).sum::<f64>() / n,
            mean_target_tokens: group.iter().map(|r| r.3 as f64).sum::<f64>() / n,
        });
        start += size;
    }
    Ok(out)
}

/// Mean gradient norm, loss and target length per gradient tercile.
pub fn audit_by_gradient_tercile(dataset: &Dataset, params: &ModelParams) -> Result<Vec<TercileRow>> {
    if dataset.len() < 3 {
        return arg(format!("tercile audit needs at least 3 samples, got {}", dataset.len()));
    }
    let mut rows = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let g = sample_gradient(params, s)?;
        rows.push((s.index, g.grad_norm, g.loss, s.target().len()));
    }
    tercile_table(&rows)
}
