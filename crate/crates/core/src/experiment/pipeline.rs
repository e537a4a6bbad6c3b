//! Per-seed preparation (world, pretraining, alignment) and the two
//! fine-tuning protocols.

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method, StageSettings};
use crate::continual::{
    accuracy_matrix, continual_summary, exact_match_accuracy, interference_matrix, AccuracyMatrix, ContinualSummary,
    Interference,
};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::derive_seed;
use crate::safety::{
    attack_success_rate, elastic_force, evaluate_safety, kl_to_reference, LandscapeCurve, SafetyInputs, SafetyReport,
};
use crate::selection::{Scope, SelectionConfig};
use crate::training::{
    fisher_diagonal, run_continual, train_task, AdamConfig, CheckpointLog, Regularizer, RegularizerPlan, TrainConfig,
};
use crate::world::{Dataset, TaskKind, TaskSpec, Token, World};

/// Everything shared by the fine-tuning runs of one seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub seed: u64,
    pub world: World,
    pub pretrained: ModelParams,
    pub aligned: ModelParams,
    pub pretrain_log: Option<CheckpointLog>,
    pub align_log: Option<CheckpointLog>,
    pub align_data: Dataset,
    pub attack: Vec<Vec<Token>>,
    pub kl_prompts: Vec<Vec<Token>>,
    pub mixed_train: Dataset,
    pub mixed_eval: Dataset,
    /// `(name, train, eval)` per continual stage.
    pub stages: Vec<(String, Dataset, Dataset)>,
}

fn stage_config(s: &StageSettings, seed: u64) -> TrainConfig {
    TrainConfig {
        adam: AdamConfig {
            lr: s.lr,
            weight_decay: s.weight_decay,
            ..AdamConfig::default()
        },
        batch_size: s.batch_size,
        epochs: s.epochs,
        seed,
        ..TrainConfig::default()
    }
}

fn task_sets(
    world: &World,
    cfg: &ExperimentConfig,
    kinds: &[TaskKind],
    n_train: usize,
    seed: u64,
) -> Result<Vec<(String, Dataset, Dataset)>> {
    kinds
        .iter()
        .map(|&k| {
            let spec = TaskSpec::new(k, n_train, cfg.world.task_eval).with_sensitive_rate(cfg.world.sensitive_rate);
            let (tr, ev) = world.gen_task(&spec, seed)?;
            Ok((k.to_string(), tr, ev))
        })
        .collect()
}

fn format_only(world: &World, n: usize, seed: u64) -> Result<Vec<Dataset>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    TaskKind::ALL
        .iter()
        .map(|&k| Ok(world.gen_task(&TaskSpec::new(k, n, 1), seed)?.0))
        .collect()
}

/// Generated data for one seed; no training involved.
#[derive(Clone, Debug)]
pub struct WorldData {
    pub world: World,
    pub pretrain: Dataset,
    pub align: Dataset,
    pub attack: Vec<Vec<Token>>,
    pub kl_prompts: Vec<Vec<Token>>,
    pub mixed_train: Dataset,
    pub mixed_eval: Dataset,
    pub stages: Vec<(String, Dataset, Dataset)>,
}

pub fn build_world(cfg: &ExperimentConfig, seed: u64) -> Result<WorldData> {
    let w = &cfg.world;
    let world = World::new(w.vocab_size, w.n_triggers, cfg.context_len, seed)?;

    let mut parts = vec![world.gen_pretrain(w.pretrain_size, w.harmful_rate, derive_seed(seed, "data/pretrain"))?];
    parts.extend(format_only(
        &world,
        w.pretrain_task_size,
        derive_seed(seed, "data/pretrain-tasks"),
    )?);
    let refs: Vec<&Dataset> = parts.iter().collect();
    let pretrain = Dataset::concat(&refs, seed);

    let mut parts = vec![world.gen_alignment(w.align_size, derive_seed(seed, "data/align"))?];
    if w.helpful_size > 0 {
        parts.push(world.gen_helpful(w.helpful_size, derive_seed(seed, "data/helpful"))?);
    }
    parts.extend(format_only(
        &world,
        w.align_task_size,
        derive_seed(seed, "data/align-tasks"),
    )?);
    let refs: Vec<&Dataset> = parts.iter().collect();
    let align = Dataset::concat(&refs, seed);

    let attack = world.gen_attack_set(w.attack_size, derive_seed(seed, "data/attack"))?;
    let kl_prompts = world.gen_attack_set(w.kl_prompt_count, derive_seed(seed, "data/kl-prompts"))?;

    let mixed = task_sets(
        &world,
        cfg,
        &TaskKind::ALL,
        w.task_train,
        derive_seed(seed, "data/mixed"),
    )?;
    let mixed_train = Dataset::concat(&mixed.iter().map(|m| &m.1).collect::<Vec<_>>(), seed);
    let mixed_eval = Dataset::concat(&mixed.iter().map(|m| &m.2).collect::<Vec<_>>(), seed);
    let stages = task_sets(
        &world,
        cfg,
        &cfg.continual_tasks,
        w.task_train,
        derive_seed(seed, "data/continual"),
    )?;
    Ok(WorldData {
        world,
        pretrain,
        align,
        attack,
        kl_prompts,
        mixed_train,
        mixed_eval,
        stages,
    })
}

pub fn pretrain(cfg: &ExperimentConfig, seed: u64, data: &WorldData) -> Result<(ModelParams, CheckpointLog)> {
    let init = ModelParams::init(&cfg.model_config(seed))?;
    train_task(
        &init,
        &data.pretrain,
        &stage_config(&cfg.pretrain, derive_seed(seed, "train/pretrain")),
    )
}

pub fn align(
    cfg: &ExperimentConfig,
    seed: u64,
    pretrained: &ModelParams,
    data: &WorldData,
) -> Result<(ModelParams, CheckpointLog)> {
    train_task(
        pretrained,
        &data.align,
        &stage_config(&cfg.align, derive_seed(seed, "train/align")),
    )
}

fn check_shape(cfg: &ExperimentConfig, seed: u64, p: &ModelParams, what: &str) -> Result<()> {
    if !p.config().same_shape(&cfg.model_config(seed)) {
        return Err(Error::Validation(vec![format!(
            "{what} checkpoint does not match the configured model shape"
        )]));
    }
    Ok(())
}

/// Like [`prepare`], but reuses whichever checkpoints are given instead of
/// training them. Reused stages have no log.
pub fn prepare_with(
    cfg: &ExperimentConfig,
    seed: u64,
    pretrained: Option<ModelParams>,
    aligned: Option<ModelParams>,
) -> Result<Prepared> {
    let data = build_world(cfg, seed)?;
    let (pretrained, pretrain_log) = match pretrained {
        Some(p) => {
            check_shape(cfg, seed, &p, "pretrained")?;
            (p, None)
        }
        None => {
            let (p, log) = pretrain(cfg, seed, &data)?;
            (p, Some(log))
        }
    };
    let (aligned, align_log) = match aligned {
        Some(p) => {
            check_shape(cfg, seed, &p, "aligned")?;
            (p, None)
        }
        None => {
            let (p, log) = align(cfg, seed, &pretrained, &data)?;
            (p, Some(log))
        }
    };
    Ok(Prepared {
        seed,
        world: data.world,
        pretrained,
        aligned,
        pretrain_log,
        align_log,
        align_data: data.align,
        attack: data.attack,
        kl_prompts: data.kl_prompts,
        mixed_train: data.mixed_train,
        mixed_eval: data.mixed_eval,
        stages: data.stages,
    })
}

/// World generation, pretraining and alignment for one seed.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    prepare_with(cfg, seed, None, None)
}

fn method_config(cfg: &ExperimentConfig, method: Method, rho: f64, scope: Scope, seed: u64) -> Result<TrainConfig> {
    let mut tc = stage_config(&cfg.finetune, seed);
    match method {
        Method::Select(s) => tc.selection = SelectionConfig::new(s, rho, scope, derive_seed(seed, "select"))?,
        Method::Clip(c) => tc.clip = Some(c),
        Method::Ewc | Method::Kl => {}
    }
    Ok(tc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentOutcome {
    pub method: String,
    pub rho: f64,
    pub report: SafetyReport,
    /// Exact-match accuracy (0..=100) on the mixed eval split.
    pub accuracy: f64,
    /// Distinct training samples used by the run.
    pub samples_used: usize,
    /// `samples_used * kl_aligned`.
    pub elastic: f64,
}

/// Safety report of the aligned model itself, with its landscape.
pub fn evaluate_aligned(cfg: &ExperimentConfig, prep: &Prepared) -> Result<(SafetyReport, Vec<LandscapeCurve>)> {
    let inputs = SafetyInputs {
        attack: &prep.attack,
        kl_prompts: &prep.kl_prompts,
        pretrained: &prep.pretrained,
        aligned: &prep.aligned,
        visage_aligned: None,
    };
    evaluate_safety(
        &prep.aligned,
        &inputs,
        &cfg.safety_config(derive_seed(prep.seed, "safety")),
    )
}

/// One fine-tuning stage on the mixed task set from the aligned model.
/// `visage_aligned` anchors the drift; `full` toggles the landscape
/// (without it VISAGE and drift are reported as 0).
pub fn run_alignment_method(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    method: Method,
    rho: f64,
    visage_aligned: f64,
    full: bool,
) -> Result<(AlignmentOutcome, ModelParams, CheckpointLog, Vec<LandscapeCurve>)> {
    let seed = derive_seed(prep.seed, "finetune");
    let mut tc = method_config(cfg, method, rho, cfg.alignment_scope, seed)?;
    tc.regularizer = match method {
        Method::Ewc => Regularizer::Ewc {
            lambda: cfg.ewc_lambda,
            anchor: prep.aligned.flatten(),
            fisher: fisher_diagonal(
                &prep.aligned,
                &prep.align_data,
                cfg.ewc_fisher_samples,
                derive_seed(seed, "fisher"),
            )?,
        },
        Method::Kl => Regularizer::Kl {
            beta: cfg.kl_beta,
            reference: prep.aligned.clone(),
        },
        _ => Regularizer::None,
    };
    let (ft, log) = train_task(&prep.aligned, &prep.mixed_train, &tc)?;
    let (report, curves) = if full {
        let inputs = SafetyInputs {
            attack: &prep.attack,
            kl_prompts: &prep.kl_prompts,
            pretrained: &prep.pretrained,
            aligned: &prep.aligned,
            visage_aligned: Some(visage_aligned),
        };
        evaluate_safety(&ft, &inputs, &cfg.safety_config(derive_seed(prep.seed, "safety")))?
    } else {
        let report = SafetyReport {
            asr: attack_success_rate(&ft, &prep.attack)?,
            visage: 0.0,
            drift: 0.0,
            kl_pretrain: kl_to_reference(&ft, &prep.pretrained, &prep.kl_prompts, cfg.kl_positions)?,
            kl_aligned: kl_to_reference(&ft, &prep.aligned, &prep.kl_prompts, cfg.kl_positions)?,
        };
        (report, Vec::new())
    };
    let samples_used = match log.selections.first() {
        Some(s) if cfg.alignment_scope == Scope::Dataset => s.selected.len(),
        _ => prep.mixed_train.len(),
    };
    let outcome = AlignmentOutcome {
        method: method.to_string(),
        rho,
        accuracy: exact_match_accuracy(&ft, &prep.mixed_eval)?,
        samples_used,
        elastic: elastic_force(samples_used as f64, report.kl_aligned)?,
        report,
    };
    Ok((outcome, ft, log, curves))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSafety {
    pub stage: usize,
    pub asr: f64,
    pub kl_pretrain: f64,
    pub kl_aligned: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualOutcome {
    pub method: String,
    pub matrix: AccuracyMatrix,
    /// `None` for a single-stage run.
    pub summary: Option<ContinualSummary>,
    pub interference: Option<Interference>,
    pub safety: Vec<StageSafety>,
}

/// Sequential fine-tuning over the configured stages from the aligned
/// model. Returns the outcome, the stage checkpoints and their logs.
pub fn run_continual_method(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    method: Method,
) -> Result<(ContinualOutcome, Vec<ModelParams>, Vec<CheckpointLog>)> {
    let seed = derive_seed(prep.seed, "continual");
    let tc = method_config(cfg, method, cfg.rho, cfg.continual_scope, seed)?;
    let plan = match method {
        Method::Ewc => RegularizerPlan::Ewc {
            lambda: cfg.ewc_lambda,
            n_samples: cfg.ewc_fisher_samples,
            initial_data: prep.align_data.clone(),
        },
        Method::Kl => RegularizerPlan::Kl {
            beta: cfg.kl_beta,
            reference: prep.aligned.clone(),
        },
        _ => RegularizerPlan::None,
    };
    let train: Vec<Dataset> = prep.stages.iter().map(|s| s.1.clone()).collect();
    let mut safety = Vec::new();
    let (checkpoints, logs) = run_continual(&train, &prep.aligned, &tc, &plan, |stage, p, _| {
        safety.push(StageSafety {
            stage,
            asr: attack_success_rate(p, &prep.attack)?,
            kl_pretrain: kl_to_reference(p, &prep.pretrained, &prep.kl_prompts, cfg.kl_positions)?,
            kl_aligned: kl_to_reference(p, &prep.aligned, &prep.kl_prompts, cfg.kl_positions)?,
        });
        Ok(())
    })?;
    let stage_params: Vec<ModelParams> = checkpoints.into_iter().skip(1).collect();
    let labels: Vec<(String, &ModelParams)> = prep
        .stages
        .iter()
        .zip(&stage_params)
        .map(|(s, p)| (format!("after:{}", s.0), p))
        .collect();
    let tasks: Vec<(String, &Dataset)> = prep.stages.iter().map(|s| (s.0.clone(), &s.2)).collect();
    let matrix = accuracy_matrix(&labels, &tasks)?;
    let diag: Vec<usize> = (0..prep.stages.len()).collect();
    let outcome = ContinualOutcome {
        method: method.to_string(),
        summary: partial(continual_summary(&matrix, &diag))?,
        interference: partial(interference_matrix(&matrix, &diag))?,
        matrix,
        safety,
    };
    Ok((outcome, stage_params, logs))
}

fn partial<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Partial(_)) => Ok(None),
        Err(e) => Err(e),
    }
}
