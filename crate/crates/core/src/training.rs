//! AdamW training with per-batch sample selection, gradient clipping and the
//! EWC / KL regularizers, plus the multi-stage continual runner.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, Array, Graph};
use crate::error::{arg, Error, Result};
use crate::model::{build_logits, log_probs, sample_gradient, ModelParams};
use crate::rng;
use crate::selection::{select, GradientRecord, Scope, SelectionConfig, SelectionReport, Strategy};
use crate::world::{shuffle_indices, Dataset, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One AdamW step with decoupled weight decay and bias correction.
pub fn optimizer_step(state: &mut AdamState, params: &mut [f64], grad: &[f64], cfg: &AdamConfig) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != grad.len() {
        return Err(Error::Shape(format!(
            "gradient has {} values, parameters {}, optimizer state {}",
            grad.len(),
            params.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            node: i,
            op: "gradient",
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
    }
    Ok(())
}

/// Rescales `grad` to L2 norm `c` when it is longer than `c`.
pub fn clip_gradient(grad: &[f64], c: f64) -> Result<Vec<f64>> {
    if !(c > 0.0) {
        return arg(format!("clip threshold must be positive, got {c}"));
    }
    let norm = dot(grad, grad).sqrt();
    if norm <= c {
        return Ok(grad.to_vec());
    }
    let s = c / norm;
    Ok(grad.iter().map(|g| g * s).collect())
}

pub const CLIP_SWEEP: [f64; 3] = [0.1, 0.5, 1.0];

/// Empirical diagonal Fisher: mean of squared per-sample gradients over a
/// seeded draw of `min(n_samples, len)` samples without replacement.
pub fn fisher_diagonal(params: &ModelParams, dataset: &Dataset, n_samples: usize, seed: u64) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return arg("Fisher estimate needs a nonempty dataset");
    }
    if n_samples == 0 {
        return arg("Fisher estimate needs at least one sample");
    }
    let picks = fisher_picks(dataset.len(), n_samples, seed);
    let mut f = vec![0.0; params.n_params()];
    for &i in &picks {
        let g = sample_gradient(params, &dataset.samples[i])?;
        for (a, x) in f.iter_mut().zip(&g.grad) {
            *a += x * x;
        }
    }
    let n = picks.len() as f64;
    f.iter_mut().for_each(|a| *a /= n);
    Ok(f)
}

/// Dataset positions used by [`fisher_diagonal`], in accumulation order.
pub fn fisher_picks(len: usize, n_samples: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, "training/fisher");
    sample_indices(&mut r, len, n_samples.min(len)).into_vec()
}

/// `(lambda/2) * sum F (theta - anchor)^2` and its gradient.
pub fn ewc_penalty_and_grad(params: &[f64], anchor: &[f64], fisher: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    if params.len() != anchor.len() || params.len() != fisher.len() {
        return arg(format!(
            "EWC shapes differ: params {}, anchor {}, fisher {}",
            params.len(),
            anchor.len(),
            fisher.len()
        ));
    }
    if !(lambda >= 0.0) {
        return arg(format!("EWC lambda must be non-negative, got {lambda}"));
    }
    let mut pen = 0.0;
    let mut grad = Vec::with_capacity(params.len());
    for ((&p, &a), &f) in params.iter().zip(anchor).zip(fisher) {
        let d = p - a;
        pen += f * d * d;
        grad.push(lambda * f * d);
    }
    Ok((0.5 * lambda * pen, grad))
}

/// Forward KL `KL(p_theta || p_ref)` averaged over all target positions of
/// the batch, times `beta`, with its gradient (reference held fixed).
pub fn kl_penalty_and_grad(
    params: &ModelParams,
    reference: &ModelParams,
    batch: &[&Sample],
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return arg("KL penalty needs a nonempty batch");
    }
    if !(beta >= 0.0) {
        return arg(format!("KL beta must be non-negative, got {beta}"));
    }
    if !params.config().same_shape(reference.config()) {
        return arg("KL reference has a different model configuration");
    }
    let n = params.n_params();
    if beta == 0.0 {
        return Ok((0.0, vec![0.0; n]));
    }
    let v = params.config().vocab_size;
    let total_positions: usize = batch.iter().map(|s| s.tokens.len() - s.prompt_len).sum();
    let w = beta / total_positions as f64;
    let mut pen = 0.0;
    let mut grad = vec![0.0; n];
    for s in batch {
        let input = &s.tokens[..s.tokens.len() - 1];
        let rows: Vec<usize> = (s.prompt_len - 1..input.len()).collect();
        let ref_lp = log_probs(reference, input)?;
        let mut neg_lq = Vec::with_capacity(rows.len() * v);
        for &r in &rows {
            neg_lq.extend(ref_lp[r * v..(r + 1) * v].iter().map(|x| -x));
        }
        let mut g = Graph::new(params.arrays());
        let logits = build_logits(&mut g, params.config(), input)?;
        let picked = g.gather_rows(logits, &rows)?;
        let lp = g.log_softmax(picked)?;
        let p = g.softmax(picked)?;
        let lq = g.constant(Array::matrix(rows.len(), v, neg_lq)?)?;
        let diff = g.add(lp, lq)?;
        let terms = g.mul(p, diff)?;
        let kl = g.reduce_sum(terms)?;
        pen += g.scalar(kl);
        let mut off = 0;
        for a in g.backward(kl)? {
            for (acc, x) in grad[off..off + a.len()].iter_mut().zip(a.data()) {
                *acc += w * x;
            }
            off += a.len();
        }
    }
    Ok((w * pen, grad))
}

#[derive(Clone, Debug)]
pub enum Regularizer {
    None,
    Ewc {
        lambda: f64,
        anchor: Vec<f64>,
        fisher: Vec<f64>,
    },
    Kl {
        beta: f64,
        reference: ModelParams,
    },
}

impl Regularizer {
    pub fn kind(&self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::Ewc { .. } => "ewc",
            Regularizer::Kl { .. } => "kl",
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            Regularizer::None => Ok(()),
            Regularizer::Ewc { lambda, anchor, fisher } => {
                if !(*lambda >= 0.0) {
                    return arg("EWC lambda must be non-negative");
                }
                if anchor.len() != n || fisher.len() != n {
                    return arg("EWC anchor and Fisher must cover every parameter");
                }
                Ok(())
            }
            Regularizer::Kl { beta, reference } => {
                if !(*beta >= 0.0) {
                    return arg("KL beta must be non-negative");
                }
                if reference.n_params() != n {
                    return arg("KL reference has a different parameter count");
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip: Option<f64>,
    pub selection: SelectionConfig,
    pub regularizer: Regularizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 2,
            clip: None,
            selection: SelectionConfig::default(),
            regularizer: Regularizer::None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.adam.lr > 0.0) {
            bad.push(format!("lr must be positive, got {}", self.adam.lr));
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be at least 1".to_string());
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                bad.push(format!("clip must be positive, got {c}"));
            }
        }
        if let Err(e) = self.selection.validate() {
            bad.push(e.to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }
}

/// Per-stage training record. Contains no timings so that reruns produce
/// identical logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointLog {
    pub stage: usize,
    pub snapshot: String,
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub samples_seen: usize,
    pub selections: Vec<SelectionReport>,
}

impl CheckpointLog {
    /// Appends this log as one JSON line.
    pub fn append_ndjson(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", serde_json::to_string(self)?)?;
        Ok(())
    }
}

struct Step<'a> {
    flat: Vec<f64>,
    state: AdamState,
    cfg: &'a TrainConfig,
}

impl Step<'_> {
    /// Applies one update from the mean of `grads`; returns nothing, the
    /// caller already has the losses.
    fn apply(&mut self, params: &mut ModelParams, batch: &[&Sample], grads: &[&[f64]]) -> Result<()> {
        let n = self.flat.len();
        let mut g = vec![0.0; n];
        for gr in grads {
            for (a, x) in g.iter_mut().zip(gr.iter()) {
                *a += x;
            }
        }
        let inv = 1.0 / grads.len() as f64;
        g.iter_mut().for_each(|a| *a *= inv);
        match &self.cfg.regularizer {
            Regularizer::None => {}
            Regularizer::Ewc { lambda, anchor, fisher } => {
                let (_, rg) = ewc_penalty_and_grad(&self.flat, anchor, fisher, *lambda)?;
                g.iter_mut().zip(&rg).for_each(|(a, x)| *a += x);
            }
            Regularizer::Kl { beta, reference } => {
                let (_, rg) = kl_penalty_and_grad(params, reference, batch, *beta)?;
                g.iter_mut().zip(&rg).for_each(|(a, x)| *a += x);
            }
        }
        if let Some(c) = self.cfg.clip {
            g = clip_gradient(&g, c)?;
        }
        optimizer_step(&mut self.state, &mut self.flat, &g, &self.cfg.adam)?;
        *params = ModelParams::from_flat(params.config(), &self.flat)?;
        Ok(())
    }
}

fn per_sample(params: &ModelParams, samples: &[&Sample]) -> Result<(Vec<GradientRecord>, Vec<Vec<f64>>)> {
    let mut recs = Vec::with_capacity(samples.len());
    let mut grads = Vec::with_capacity(samples.len());
    for s in samples {
        let g = sample_gradient(params, s)?;
        recs.push(GradientRecord::new(s.index, g.loss, g.grad_norm)?);
        grads.push(g.grad);
    }
    Ok((recs, grads))
}

/// Trains on one dataset. With `scope = batch` each shuffled batch is
/// scored at the current parameters and only the selected samples update
/// the model. With `scope = dataset` the whole dataset is scored once at the
/// initial parameters, `floor(rho * N)` samples are kept, and training runs
/// over the kept samples in ordinary batches.
pub fn train_task(params: &ModelParams, train: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, CheckpointLog)> {
    train_task_stage(params, train, cfg, 0)
}

pub fn train_task_stage(
    params: &ModelParams,
    train: &Dataset,
    cfg: &TrainConfig,
    stage: usize,
) -> Result<(ModelParams, CheckpointLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return arg("training dataset is empty");
    }
    cfg.regularizer.validate(params.n_params())?;
    let mut log = CheckpointLog {
        stage,
        snapshot: format!("stage_{stage}.params"),
        epoch_losses: Vec::new(),
        steps: 0,
        samples_seen: 0,
        selections: Vec::new(),
    };
    let mut current = params.clone();
    if cfg.epochs == 0 {
        return Ok((current, log));
    }
    let mut step = Step {
        flat: params.flatten(),
        state: AdamState::new(params.n_params()),
        cfg,
    };
    let by_pos: Vec<&Sample> = train.samples.iter().collect();

    // Pool of dataset positions to train on, and whether batches still need
    // per-batch selection.
    let (pool, per_batch) = match (cfg.selection.strategy, cfg.selection.scope) {
        (Strategy::All, _) => ((0..train.len()).collect::<Vec<_>>(), false),
        (_, Scope::Batch) => ((0..train.len()).collect(), true),
        (_, Scope::Dataset) => {
            let (recs, _) = per_sample(params, &by_pos)?;
            let rep = select(&cfg.selection, &recs, train.len(), cfg.seed)?;
            let pos_of: std::collections::HashMap<usize, usize> =
                train.samples.iter().enumerate().map(|(p, s)| (s.index, p)).collect();
            let pool: Vec<usize> = rep.selected.iter().map(|i| pos_of[i]).collect();
            log.selections.push(rep);
            (pool, false)
        }
    };
    if pool.is_empty() {
        return Err(Error::Run("selection kept no samples".into()));
    }

    let mut batch_no = 0u64;
    for epoch in 0..cfg.epochs {
        let order = shuffle_indices(
            pool.len(),
            rng::derive_seed(cfg.seed, "train/epoch") ^ epoch as u64,
            "train/shuffle",
        );
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| by_pos[pool[i]]).collect();
            let (recs, grads) = per_sample(&current, &batch)?;
            let chosen: Vec<usize> = if per_batch {
                let rep = select(&cfg.selection, &recs, cfg.batch_size, cfg.seed ^ batch_no)
                    .map_err(|e| Error::Run(format!("batch {batch_no}: {e}")))?;
                let keep: Vec<usize> = rep.selected.clone();
                log.selections.push(rep);
                recs.iter()
                    .enumerate()
                    .filter(|(_, r)| keep.contains(&r.sample_index))
                    .map(|(p, _)| p)
                    .collect()
            } else {
                (0..batch.len()).collect()
            };
            if chosen.is_empty() {
                return Err(Error::Run(format!("batch {batch_no}: selection is empty")));
            }
            let sel_batch: Vec<&Sample> = chosen.iter().map(|&p| batch[p]).collect();
            let sel_grads: Vec<&[f64]> = chosen.iter().map(|&p| grads[p].as_slice()).collect();
            for &p in &chosen {
                loss_sum += recs[p].loss;
            }
            loss_n += chosen.len();
            step.apply(&mut current, &sel_batch, &sel_grads)?;
            log.samples_seen += chosen.len();
            batch_no += 1;
        }
        log.epoch_losses.push(loss_sum / loss_n as f64);
    }
    log.steps = step.state.steps();
    Ok((current, log))
}

/// How the regularizer is rebuilt at the start of each continual stage.
#[derive(Clone, Debug)]
pub enum RegularizerPlan {
    None,
    /// Fisher from the previous stage's data (the first stage uses
    /// `initial_data`), anchored at the stage's starting parameters.
    Ewc {
        lambda: f64,
        n_samples: usize,
        initial_data: Dataset,
    },
    /// KL to a fixed reference model.
    Kl {
        beta: f64,
        reference: ModelParams,
    },
}

/// Trains stage after stage, each starting from the previous checkpoint.
/// Returns the initial parameters followed by one checkpoint per stage;
/// `hook` runs after each stage with the stage number (1-based).
pub fn run_continual<F>(
    stages: &[Dataset],
    init: &ModelParams,
    base: &TrainConfig,
    plan: &RegularizerPlan,
    mut hook: F,
) -> Result<(Vec<ModelParams>, Vec<CheckpointLog>)>
where
    F: FnMut(usize, &ModelParams, &CheckpointLog) -> Result<()>,
{
    if stages.is_empty() {
        return arg("continual run needs at least one stage");
    }
    let mut checkpoints = vec![init.clone()];
    let mut logs = Vec::with_capacity(stages.len());
    for (t, data) in stages.iter().enumerate() {
        let start = checkpoints.last().unwrap().clone();
        let mut cfg = base.clone();
        cfg.seed = rng::derive_seed(base.seed, &format!("stage{t}"));
        cfg.regularizer = match plan {
            RegularizerPlan::None => Regularizer::None,
            RegularizerPlan::Ewc {
                lambda,
                n_samples,
                initial_data,
            } => {
                let prev = if t == 0 { initial_data } else { &stages[t - 1] };
                Regularizer::Ewc {
                    lambda: *lambda,
                    anchor: start.flatten(),
                    fisher: fisher_diagonal(&start, prev, *n_samples, cfg.seed)?,
                }
            }
            RegularizerPlan::Kl { beta, reference } => Regularizer::Kl {
                beta: *beta,
                reference: reference.clone(),
            },
        };
        let (next, log) = train_task_stage(&start, data, &cfg, t + 1)?;
        hook(t + 1, &next, &log)?;
        checkpoints.push(next);
        logs.push(log);
    }
    Ok((checkpoints, logs))
}
