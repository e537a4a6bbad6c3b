//! Flat `key = value` experiment configuration.
//!
//! Lines are `section.key = value`; `#` starts a comment; lists are
//! comma-separated. Unknown keys and unparsable values are collected and
//! reported together.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::direction::DirectionStudyConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SubsetSpec};
use crate::safety::{unit_grid, SafetyConfig, VisageMode};
use crate::selection::{Scope, Strategy};
use crate::world::TaskKind;

/// A fine-tuning treatment: a selection strategy on plain AdamW, or the
/// full data under one of the baselines.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Method {
    Select(Strategy),
    Ewc,
    Kl,
    Clip(f64),
}

impl Method {
    /// Name usable as a file stem.
    pub fn slug(&self) -> String {
        self.to_string().replace(':', "_")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Select(s) => write!(f, "{s}"),
            Method::Ewc => f.write_str("ewc"),
            Method::Kl => f.write_str("kl"),
            Method::Clip(c) => write!(f, "clip:{c}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ewc" => Ok(Method::Ewc),
            "kl" => Ok(Method::Kl),
            _ => {
                if let Some(c) = s.strip_prefix("clip:") {
                    let c: f64 = c
                        .parse()
                        .map_err(|_| Error::Argument(format!("bad clip value in '{s}'")))?;
                    if !(c > 0.0 && c.is_finite()) {
                        return Err(Error::Argument(format!("clip value must be positive in '{s}'")));
                    }
                    Ok(Method::Clip(c))
                } else {
                    Ok(Method::Select(s.parse()?))
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl StageSettings {
    fn new(epochs: usize, batch_size: usize) -> Self {
        StageSettings {
            epochs,
            lr: 3e-3,
            batch_size,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSettings {
    pub vocab_size: usize,
    pub n_triggers: usize,
    pub pretrain_size: usize,
    pub harmful_rate: f64,
    /// Task-format samples per task kind mixed into pretraining.
    pub pretrain_task_size: usize,
    pub align_size: usize,
    pub helpful_size: usize,
    /// Task-format samples per task kind replayed during alignment.
    pub align_task_size: usize,
    pub attack_size: usize,
    pub kl_prompt_count: usize,
    pub task_train: usize,
    pub task_eval: usize,
    pub sensitive_rate: f64,
}

impl Default for WorldSettings {
    fn default() -> Self {
        WorldSettings {
            vocab_size: 64,
            n_triggers: 4,
            pretrain_size: 6000,
            harmful_rate: 0.2,
            pretrain_task_size: 300,
            align_size: 120,
            helpful_size: 120,
            align_task_size: 30,
            attack_size: 200,
            kl_prompt_count: 50,
            task_train: 200,
            task_eval: 50,
            sensitive_rate: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocols {
    /// One fine-tuning stage on the mixed task set, with full safety
    /// evaluation per method.
    pub alignment: bool,
    /// Sequential stages over `continual.tasks`.
    pub continual: bool,
    pub direction: bool,
    pub audit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub protocols: Protocols,
    pub methods: Vec<Method>,
    pub rho: f64,
    pub rho_sweep: Vec<f64>,
    pub alignment_scope: Scope,
    pub continual_scope: Scope,
    pub continual_tasks: Vec<TaskKind>,
    pub world: WorldSettings,
    pub context_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
    pub pretrain: StageSettings,
    pub align: StageSettings,
    pub finetune: StageSettings,
    pub ewc_lambda: f64,
    pub ewc_fisher_samples: usize,
    pub kl_beta: f64,
    pub n_directions: usize,
    pub alpha_points: usize,
    pub a_scale: f64,
    pub s_max: f64,
    pub visage_mode: VisageMode,
    pub kl_positions: usize,
    pub direction_k: usize,
    pub direction_samples: usize,
    pub direction_subsets: Vec<String>,
    pub direction_permutations: usize,
    pub high_quantile: f64,
    pub mod_band: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2],
            out: PathBuf::from("runs/study"),
            protocols: Protocols {
                alignment: true,
                continual: true,
                direction: true,
                audit: true,
            },
            methods: [
                "all", "random", "high", "low", "moderate", "ewc", "kl", "clip:0.1", "clip:0.5", "clip:1",
            ]
            .iter()
            .map(|m| m.parse().unwrap())
            .collect(),
            rho: 0.2,
            rho_sweep: vec![0.1, 0.2, 0.4, 0.6],
            alignment_scope: Scope::Dataset,
            continual_scope: Scope::Dataset,
            continual_tasks: vec![TaskKind::QaShort, TaskKind::ClassifyShort, TaskKind::ArithMod],
            world: WorldSettings::default(),
            context_len: 32,
            d_model: 32,
            n_heads: 4,
            n_blocks: 3,
            mlp_hidden: 64,
            pretrain: StageSettings::new(2, 32),
            align: StageSettings::new(3, 16),
            finetune: StageSettings::new(2, 32),
            ewc_lambda: 100.0,
            ewc_fisher_samples: 200,
            kl_beta: 0.5,
            n_directions: 100,
            alpha_points: 11,
            a_scale: 1.0,
            s_max: 100.0,
            visage_mode: VisageMode::Include,
            kl_positions: 8,
            direction_k: 1000,
            direction_samples: 500,
            direction_subsets: ["LAST_V", "LAST_O", "LAST_MLP", "LAST_QKVO", "MIDDLE"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            direction_permutations: 10_000,
            high_quantile: 0.2,
            mod_band: 0.2,
        }
    }
}

fn list(v: &str) -> Vec<&str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse '{v}'"))
}

fn nums<T: FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
    list(v).into_iter().map(|x| num(key, x)).collect()
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut bad = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bad.push(format!("line {}: expected 'key = value'", n + 1));
                continue;
            };
            if let Err(e) = cfg.set(k.trim(), v.trim()) {
                bad.push(format!("line {}: {e}", n + 1));
            }
        }
        if let Err(Error::Validation(more)) = cfg.validate() {
            bad.extend(more);
        }
        if bad.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Validation(bad))
        }
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let w = &mut self.world;
        match key {
            "seeds" => self.seeds = nums(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "protocols" => {
                let mut p = Protocols {
                    alignment: false,
                    continual: false,
                    direction: false,
                    audit: false,
                };
                for name in list(v) {
                    match name {
                        "alignment" => p.alignment = true,
                        "continual" => p.continual = true,
                        "direction" => p.direction = true,
                        "audit" => p.audit = true,
                        other => return Err(format!("{key}: unknown protocol '{other}'")),
                    }
                }
                self.protocols = p;
            }
            "methods" => {
                self.methods = list(v)
                    .into_iter()
                    .map(|m| m.parse::<Method>().map_err(|e| format!("{key}: {e}")))
                    .collect::<std::result::Result<_, _>>()?
            }
            "rho" => self.rho = num(key, v)?,
            "rho_sweep" => self.rho_sweep = nums(key, v)?,
            "alignment.scope" => self.alignment_scope = v.parse().map_err(|e| format!("{key}: {e}"))?,
            "continual.scope" => self.continual_scope = v.parse().map_err(|e| format!("{key}: {e}"))?,
            "continual.tasks" => {
                self.continual_tasks = list(v)
                    .into_iter()
                    .map(|t| t.parse::<TaskKind>().map_err(|e| format!("{key}: {e}")))
                    .collect::<std::result::Result<_, _>>()?
            }
            "world.vocab_size" => w.vocab_size = num(key, v)?,
            "world.n_triggers" => w.n_triggers = num(key, v)?,
            "world.pretrain_size" => w.pretrain_size = num(key, v)?,
            "world.harmful_rate" => w.harmful_rate = num(key, v)?,
            "world.pretrain_task_size" => w.pretrain_task_size = num(key, v)?,
            "world.align_size" => w.align_size = num(key, v)?,
            "world.helpful_size" => w.helpful_size = num(key, v)?,
            "world.align_task_size" => w.align_task_size = num(key, v)?,
            "world.attack_size" => w.attack_size = num(key, v)?,
            "world.kl_prompt_count" => w.kl_prompt_count = num(key, v)?,
            "world.task_train" => w.task_train = num(key, v)?,
            "world.task_eval" => w.task_eval = num(key, v)?,
            "world.sensitive_rate" => w.sensitive_rate = num(key, v)?,
            "model.context_len" => self.context_len = num(key, v)?,
            "model.d_model" => self.d_model = num(key, v)?,
            "model.n_heads" => self.n_heads = num(key, v)?,
            "model.n_blocks" => self.n_blocks = num(key, v)?,
            "model.mlp_hidden" => self.mlp_hidden = num(key, v)?,
            "ewc.lambda" => self.ewc_lambda = num(key, v)?,
            "ewc.fisher_samples" => self.ewc_fisher_samples = num(key, v)?,
            "kl.beta" => self.kl_beta = num(key, v)?,
            "safety.n_directions" => self.n_directions = num(key, v)?,
            "safety.alpha_points" => self.alpha_points = num(key, v)?,
            "safety.a_scale" => self.a_scale = num(key, v)?,
            "safety.s_max" => self.s_max = num(key, v)?,
            "safety.visage_mode" => {
                self.visage_mode = match v {
                    "include" => VisageMode::Include,
                    "exclude" => VisageMode::Exclude,
                    _ => return Err(format!("{key}: expected include or exclude, got '{v}'")),
                }
            }
            "safety.kl_positions" => self.kl_positions = num(key, v)?,
            "direction.k" => self.direction_k = num(key, v)?,
            "direction.n_samples" => self.direction_samples = num(key, v)?,
            "direction.subsets" => self.direction_subsets = list(v).into_iter().map(String::from).collect(),
            "direction.permutations" => self.direction_permutations = num(key, v)?,
            "direction.high_quantile" => self.high_quantile = num(key, v)?,
            "direction.mod_band" => self.mod_band = num(key, v)?,
            _ => {
                let Some((section, field)) = key.split_once('.') else {
                    return Err(format!("unknown key '{key}'"));
                };
                let stage = match section {
                    "pretrain" => &mut self.pretrain,
                    "align" => &mut self.align,
                    "finetune" => &mut self.finetune,
                    _ => return Err(format!("unknown key '{key}'")),
                };
                match field {
                    "epochs" => stage.epochs = num(key, v)?,
                    "lr" => stage.lr = num(key, v)?,
                    "batch_size" => stage.batch_size = num(key, v)?,
                    "weight_decay" => stage.weight_decay = num(key, v)?,
                    _ => return Err(format!("unknown key '{key}'")),
                }
            }
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let w = &self.world;
        let p = &self.protocols;
        let protocols: Vec<&str> = [
            (p.alignment, "alignment"),
            (p.continual, "continual"),
            (p.direction, "direction"),
            (p.audit, "audit"),
        ]
        .iter()
        .filter(|x| x.0)
        .map(|x| x.1)
        .collect();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("seeds", join(&self.seeds));
        kv("out", self.out.display().to_string());
        kv("protocols", protocols.join(", "));
        kv("methods", join(&self.methods));
        kv("rho", self.rho.to_string());
        kv("rho_sweep", join(&self.rho_sweep));
        kv("alignment.scope", self.alignment_scope.to_string());
        kv("continual.scope", self.continual_scope.to_string());
        kv("continual.tasks", join(&self.continual_tasks));
        kv("world.vocab_size", w.vocab_size.to_string());
        kv("world.n_triggers", w.n_triggers.to_string());
        kv("world.pretrain_size", w.pretrain_size.to_string());
        kv("world.harmful_rate", w.harmful_rate.to_string());
        kv("world.pretrain_task_size", w.pretrain_task_size.to_string());
        kv("world.align_size", w.align_size.to_string());
        kv("world.helpful_size", w.helpful_size.to_string());
        kv("world.align_task_size", w.align_task_size.to_string());
        kv("world.attack_size", w.attack_size.to_string());
        kv("world.kl_prompt_count", w.kl_prompt_count.to_string());
        kv("world.task_train", w.task_train.to_string());
        kv("world.task_eval", w.task_eval.to_string());
        kv("world.sensitive_rate", w.sensitive_rate.to_string());
        kv("model.context_len", self.context_len.to_string());
        kv("model.d_model", self.d_model.to_string());
        kv("model.n_heads", self.n_heads.to_string());
        kv("model.n_blocks", self.n_blocks.to_string());
        kv("model.mlp_hidden", self.mlp_hidden.to_string());
        for (name, s) in [
            ("pretrain", &self.pretrain),
            ("align", &self.align),
            ("finetune", &self.finetune),
        ] {
            kv(&format!("{name}.epochs"), s.epochs.to_string());
            kv(&format!("{name}.lr"), s.lr.to_string());
            kv(&format!("{name}.batch_size"), s.batch_size.to_string());
            kv(&format!("{name}.weight_decay"), s.weight_decay.to_string());
        }
        kv("ewc.lambda", self.ewc_lambda.to_string());
        kv("ewc.fisher_samples", self.ewc_fisher_samples.to_string());
        kv("kl.beta", self.kl_beta.to_string());
        kv("safety.n_directions", self.n_directions.to_string());
        kv("safety.alpha_points", self.alpha_points.to_string());
        kv("safety.a_scale", self.a_scale.to_string());
        kv("safety.s_max", self.s_max.to_string());
        kv(
            "safety.visage_mode",
            match self.visage_mode {
                VisageMode::Include => "include",
                VisageMode::Exclude => "exclude",
            }
            .to_string(),
        );
        kv("safety.kl_positions", self.kl_positions.to_string());
        kv("direction.k", self.direction_k.to_string());
        kv("direction.n_samples", self.direction_samples.to_string());
        kv("direction.subsets", self.direction_subsets.join(", "));
        kv("direction.permutations", self.direction_permutations.to_string());
        kv("direction.high_quantile", self.high_quantile.to_string());
        kv("direction.mod_band", self.mod_band.to_string());
        o
    }

    /// Canonical text without the `out` line, so that identical studies
    /// written to different places compare equal.
    pub fn portable_text(&self) -> String {
        self.to_text()
            .lines()
            .filter(|l| !l.starts_with("out ="))
            .map(|l| format!("{l}\n"))
            .collect()
    }

    /// SHA-256 of the portable text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.portable_text().as_bytes()))
    }

    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: self.world.vocab_size,
            context_len: self.context_len,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_blocks: self.n_blocks,
            mlp_hidden: self.mlp_hidden,
            seed,
        }
    }

    pub fn safety_config(&self, seed: u64) -> SafetyConfig {
        SafetyConfig {
            n_directions: self.n_directions,
            alpha_grid: unit_grid(self.alpha_points),
            a_scale: self.a_scale,
            s_max: self.s_max,
            visage_mode: self.visage_mode,
            kl_positions: self.kl_positions,
            seed,
        }
    }

    pub fn direction_config(&self, seed: u64) -> DirectionStudyConfig {
        DirectionStudyConfig {
            k: self.direction_k,
            subsets: self.direction_subsets.iter().map(|s| SubsetSpec::one(s)).collect(),
            n_samples: self.direction_samples,
            high_quantile: self.high_quantile,
            mod_band: self.mod_band,
            n_permutations: self.direction_permutations,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut sub = |r: Result<()>, prefix: &str| match r {
            Ok(()) => {}
            Err(Error::Validation(v)) => bad.extend(v.into_iter().map(|m| format!("{prefix}: {m}"))),
            Err(e) => bad.push(format!("{prefix}: {e}")),
        };
        sub(self.model_config(0).validate(), "model");
        sub(self.safety_config(0).validate(), "safety");
        if self.protocols.direction {
            sub(self.direction_config(0).validate(), "direction");
        }
        let w = &self.world;
        if self.seeds.is_empty() {
            bad.push("seeds must not be empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            bad.push("seeds must be distinct".into());
        }
        if self.methods.is_empty() {
            bad.push("methods must not be empty".into());
        }
        for r in std::iter::once(&self.rho).chain(&self.rho_sweep) {
            if !(*r > 0.0 && *r <= 1.0) {
                bad.push(format!("rho values must lie in (0, 1], got {r}"));
            }
        }
        if self.protocols.continual && self.continual_tasks.is_empty() {
            bad.push("continual.tasks must not be empty".into());
        }
        for (k, v) in [
            ("world.harmful_rate", w.harmful_rate),
            ("world.sensitive_rate", w.sensitive_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                bad.push(format!("{k} must lie in [0, 1], got {v}"));
            }
        }
        for (k, v) in [
            ("world.pretrain_size", w.pretrain_size),
            ("world.align_size", w.align_size),
            ("world.attack_size", w.attack_size),
            ("world.kl_prompt_count", w.kl_prompt_count),
            ("world.task_train", w.task_train),
            ("world.task_eval", w.task_eval),
        ] {
            if v == 0 {
                bad.push(format!("{k} must be positive"));
            }
        }
        for (name, s) in [
            ("pretrain", &self.pretrain),
            ("align", &self.align),
            ("finetune", &self.finetune),
        ] {
            if !(s.lr > 0.0) {
                bad.push(format!("{name}.lr must be positive"));
            }
            if s.batch_size == 0 {
                bad.push(format!("{name}.batch_size must be at least 1"));
            }
            if !(s.weight_decay >= 0.0) {
                bad.push(format!("{name}.weight_decay must be non-negative"));
            }
        }
        if !(self.ewc_lambda >= 0.0) || self.ewc_fisher_samples == 0 {
            bad.push("ewc.lambda must be non-negative and ewc.fisher_samples positive".into());
        }
        if !(self.kl_beta >= 0.0) {
            bad.push("kl.beta must be non-negative".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }
}
