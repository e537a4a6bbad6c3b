//! Output tree and manifest for a full study.
//!
//! ```text
//! <out>/config.txt
//! <out>/seed_<s>/manifest.json
//!               checkpoints/{pretrained,aligned}.params
//!               logs/{pretrain,align}.ndjson
//!               world/{mixed_train,mixed_eval,<task>_train,<task>_eval}.tsv
//!               alignment/<method>.{json,ndjson,params}, alignment/aligned.json
//!               landscape/<method>.csv, landscape/aligned.csv
//!               sensitivity/rho_<r>.json
//!               continual/<method>/{outcome.json,matrix.csv,interference.csv,log.ndjson,stage_<t>.params}
//!               direction.{csv,json}, audit.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Method};
use super::pipeline::{
    evaluate_aligned, prepare, run_alignment_method, run_continual_method, AlignmentOutcome, ContinualOutcome, Prepared,
};
use crate::direction::{direction_csv, direction_study, DirectionRow};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::safety::{write_landscape_csv, SafetyReport};
use crate::selection::{audit_by_gradient_tercile, Strategy};
use crate::training::CheckpointLog;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

/// Metric summaries of one seed; reports are reductions of these.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub aligned: Option<SafetyReport>,
    pub pretrained_asr: Option<f64>,
    pub aligned_asr: Option<f64>,
    pub alignment: BTreeMap<String, AlignmentOutcome>,
    pub sensitivity: Vec<AlignmentOutcome>,
    pub continual: BTreeMap<String, ContinualOutcome>,
    pub direction: Vec<DirectionRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub complete: bool,
    /// Last stage that finished; `None` if the run failed before any.
    pub last_good_stage: Option<String>,
    pub error: Option<String>,
    pub files: Vec<FileEntry>,
    pub summary: SeedSummary,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn write_log(path: &Path, log: &CheckpointLog) -> Result<()> {
    if path.exists() {
        fs::remove_file(path)?;
    }
    log.append_ndjson(path)
}

struct SeedRun<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    stage: Option<String>,
    summary: SeedSummary,
}

impl SeedRun<'_> {
    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn done(&mut self, stage: impl Into<String>) {
        self.stage = Some(stage.into());
    }

    fn world_files(&self, prep: &Prepared) -> Result<()> {
        prep.mixed_train.write_tsv(&self.path("world/mixed_train.tsv")?)?;
        prep.mixed_eval.write_tsv(&self.path("world/mixed_eval.tsv")?)?;
        for (name, tr, ev) in &prep.stages {
            tr.write_tsv(&self.path(&format!("world/{name}_train.tsv"))?)?;
            ev.write_tsv(&self.path(&format!("world/{name}_eval.tsv"))?)?;
        }
        let attack: String = prep
            .attack
            .iter()
            .map(|p| p.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ") + "\n")
            .collect();
        fs::write(self.path("world/attack.txt")?, attack)?;
        Ok(())
    }

    fn run(&mut self, seed: u64) -> Result<()> {
        let cfg = self.cfg;
        let prep = prepare(cfg, seed)?;
        self.world_files(&prep)?;
        prep.pretrained.save(&self.path("checkpoints/pretrained.params")?)?;
        prep.aligned.save(&self.path("checkpoints/aligned.params")?)?;
        if let Some(log) = &prep.pretrain_log {
            write_log(&self.path("logs/pretrain.ndjson")?, log)?;
        }
        if let Some(log) = &prep.align_log {
            write_log(&self.path("logs/align.ndjson")?, log)?;
        }
        self.summary.pretrained_asr = Some(crate::safety::attack_success_rate(&prep.pretrained, &prep.attack)?);
        self.summary.aligned_asr = Some(crate::safety::attack_success_rate(&prep.aligned, &prep.attack)?);
        self.done("align");

        if cfg.protocols.alignment {
            let (base, curves) = evaluate_aligned(cfg, &prep)?;
            write_json(&self.path("alignment/aligned.json")?, &base)?;
            write_landscape_csv(&self.path("landscape/aligned.csv")?, &curves)?;
            for &m in &cfg.methods {
                let (out, params, log, curves) = run_alignment_method(cfg, &prep, m, cfg.rho, base.visage, true)?;
                let slug = m.slug();
                write_json(&self.path(&format!("alignment/{slug}.json"))?, &out)?;
                write_log(&self.path(&format!("alignment/{slug}.ndjson"))?, &log)?;
                params.save(&self.path(&format!("alignment/{slug}.params"))?)?;
                write_landscape_csv(&self.path(&format!("landscape/{slug}.csv"))?, &curves)?;
                self.summary.alignment.insert(m.to_string(), out);
                self.done(format!("alignment:{m}"));
            }
            for &rho in &cfg.rho_sweep {
                let (out, _, _, _) =
                    run_alignment_method(cfg, &prep, Method::Select(Strategy::Moderate), rho, base.visage, true)?;
                write_json(&self.path(&format!("sensitivity/rho_{rho}.json"))?, &out)?;
                self.summary.sensitivity.push(out);
                self.done(format!("sensitivity:{rho}"));
            }
            self.summary.aligned = Some(base);
        }

        if cfg.protocols.continual {
            for &m in &cfg.methods {
                let (out, params, logs) = run_continual_method(cfg, &prep, m)?;
                let d = format!("continual/{}", m.slug());
                write_json(&self.path(&format!("{d}/outcome.json"))?, &out)?;
                fs::write(self.path(&format!("{d}/matrix.csv"))?, out.matrix.to_csv())?;
                if let Some(i) = &out.interference {
                    fs::write(self.path(&format!("{d}/interference.csv"))?, i.to_csv(&out.matrix))?;
                }
                let log_path = self.path(&format!("{d}/log.ndjson"))?;
                if log_path.exists() {
                    fs::remove_file(&log_path)?;
                }
                for (t, (p, log)) in params.iter().zip(&logs).enumerate() {
                    p.save(&self.path(&format!("{d}/stage_{}.params", t + 1))?)?;
                    log.append_ndjson(&log_path)?;
                }
                self.summary.continual.insert(m.to_string(), out);
                self.done(format!("continual:{m}"));
            }
        }

        if cfg.protocols.direction {
            let rows = direction_study(
                &prep.aligned,
                &prep.pretrained,
                &prep.mixed_train,
                &cfg.direction_config(derive_seed(seed, "direction")),
            )?;
            fs::write(self.path("direction.csv")?, direction_csv(&rows))?;
            write_json(&self.path("direction.json")?, &rows)?;
            self.summary.direction = rows;
            self.done("direction");
        }

        if cfg.protocols.audit {
            let rows = audit_by_gradient_tercile(&prep.mixed_train, &prep.aligned)?;
            let mut csv = String::from("group,count,mean_grad_norm,mean_loss,mean_target_tokens\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.group, r.count, r.mean_grad_norm, r.mean_loss, r.mean_target_tokens
                ));
            }
            fs::write(self.path("audit.csv")?, csv)?;
            self.done("audit");
        }
        Ok(())
    }
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            list_files(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != "manifest.json") {
            let rel = p.strip_prefix(root).unwrap_or(&p);
            out.push(FileEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_file(&p)?,
            });
        }
    }
    Ok(())
}

/// Runs every protocol for one seed and writes its manifest, marked
/// incomplete on failure.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunManifest> {
    let dir = seed_dir(&cfg.out, seed);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let mut run = SeedRun {
        cfg,
        dir: dir.clone(),
        stage: None,
        summary: SeedSummary::default(),
    };
    let result = run.run(seed);
    let mut files = Vec::new();
    list_files(&dir, &dir, &mut files)?;
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        seed,
        complete: result.is_ok(),
        last_good_stage: run.stage,
        error: result.as_ref().err().map(|e| e.to_string()),
        files,
        summary: run.summary,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    result.map(|_| manifest)
}

/// Runs all seeds, `jobs` at a time. Outputs do not depend on `jobs`.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<RunManifest>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.txt"), cfg.portable_text())?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<RunManifest>)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, cfg.seeds.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = cfg.seeds.get(i) else { break };
                let r = run_seed(cfg, seed);
                results.lock().unwrap().push((i, r));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|r| r.0);
    let mut manifests = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (i, r) in results {
        match r {
            Ok(m) => manifests.push(m),
            Err(e) => failures.push(format!("seed {}: {e}", cfg.seeds[i])),
        }
    }
    if failures.is_empty() {
        Ok(manifests)
    } else {
        Err(Error::Run(failures.join("; ")))
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Checks that every file listed in a manifest exists with its recorded
/// hash.
pub fn verify_manifest(seed_dir: &Path, m: &RunManifest) -> Result<()> {
    for f in &m.files {
        let p = seed_dir.join(&f.path);
        if !p.exists() {
            return Err(Error::Format(format!("{} is listed but missing", f.path)));
        }
        if sha256_file(&p)? != f.sha256 {
            return Err(Error::Format(format!("{} does not match its recorded hash", f.path)));
        }
    }
    Ok(())
}

/// SHA-256 over the sorted relative paths and contents of a directory
/// tree.
pub fn tree_hash(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    list_all(root, root, &mut files)?;
    let mut h = Sha256::new();
    for (rel, digest) in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(digest.as_bytes());
        h.update([0]);
    }
    Ok(hex::encode(h.finalize()))
}

fn list_all(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            list_all(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.push((rel, sha256_file(&p)?));
        }
    }
    Ok(())
}
