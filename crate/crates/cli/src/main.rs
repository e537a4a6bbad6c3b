//! `driftlab` command-line driver.
//!
//! Stage commands (`world`, `pretrain`, `align`, `finetune`, `evaluate`,
//! `landscape`, `direction-study`) work on one seed directory under
//! `--out` and reuse checkpoints already written there. `reproduce` runs
//! every configured seed and then the report.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use driftlab::direction::{direction_csv, direction_study};
use driftlab::experiment::config::{ExperimentConfig, Method};
use driftlab::experiment::pipeline::{
    self, build_world, prepare_with, run_alignment_method, run_continual_method, Prepared,
};
use driftlab::experiment::run::{seed_dir, write_json, write_log};
use driftlab::experiment::{emit_report, run_experiment};
use driftlab::model::ModelParams;
use driftlab::rng::derive_seed;
use driftlab::safety::{evaluate_safety, write_landscape_csv, SafetyInputs};
use driftlab::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "driftlab",
    version,
    about = "Gradient-norm sample selection study on a toy aligned model"
)]
struct Cli {
    /// Configuration file (`key = value` lines); defaults are used if absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seeds run in parallel by `reproduce`.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic datasets and write them as TSV.
    World,
    /// Pretrain from scratch.
    Pretrain,
    /// Align the pretrained checkpoint.
    Align,
    /// Fine-tune the aligned checkpoint with one method.
    Finetune {
        /// all, random, high, low, moderate, ewc, kl or clip:<c>.
        #[arg(long, default_value = "moderate")]
        method: String,
        #[arg(long)]
        rho: Option<f64>,
        /// Run the sequential task stages instead of one mixed stage.
        #[arg(long)]
        continual: bool,
    },
    /// Safety report (ASR, VISAGE, drift, KL) for a checkpoint.
    Evaluate {
        /// Defaults to the aligned checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Safety landscape curves for a checkpoint.
    Landscape {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Gradient norm against reversion-direction alignment.
    DirectionStudy,
    /// Aggregate completed seeds into report tables.
    Report,
    /// Run every protocol for every seed, then the report.
    Reproduce,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if cli.jobs == 0 {
        return Err(Error::Validation(vec!["--jobs must be at least 1".into()]));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_if_present(path: &Path) -> Result<Option<ModelParams>> {
    if path.exists() {
        Ok(Some(ModelParams::load(path)?))
    } else {
        Ok(None)
    }
}

struct Stage {
    cfg: ExperimentConfig,
    seed: u64,
    dir: PathBuf,
}

impl Stage {
    fn file(&self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(format!("{name}.params"))
    }

    /// Loads saved checkpoints, trains the missing ones and saves them.
    fn prepared(&self, need_aligned: bool) -> Result<Prepared> {
        let pre = load_if_present(&self.checkpoint("pretrained"))?;
        let aligned = if need_aligned {
            load_if_present(&self.checkpoint("aligned"))?
        } else {
            None
        };
        let prep = prepare_with(&self.cfg, self.seed, pre, aligned)?;
        if let Some(log) = &prep.pretrain_log {
            prep.pretrained.save(&self.file("checkpoints/pretrained.params")?)?;
            write_log(&self.file("logs/pretrain.ndjson")?, log)?;
        }
        if let Some(log) = &prep.align_log {
            prep.aligned.save(&self.file("checkpoints/aligned.params")?)?;
            write_log(&self.file("logs/align.ndjson")?, log)?;
        }
        Ok(prep)
    }

    fn target(&self, prep: &Prepared, checkpoint: &Option<PathBuf>) -> Result<(String, ModelParams)> {
        match checkpoint {
            Some(p) => {
                let stem = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "checkpoint".into());
                Ok((stem, ModelParams::load(p)?))
            }
            None => Ok(("aligned".into(), prep.aligned.clone())),
        }
    }
}

fn parse_method(s: &str) -> Result<Method> {
    s.parse()
        .map_err(|e: Error| Error::Validation(vec![format!("--method: {e}")]))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let seed = cfg.seeds[0];
    let stage = Stage {
        dir: seed_dir(&cfg.out, seed),
        cfg,
        seed,
    };
    match &cli.command {
        Command::World => {
            let data = build_world(&stage.cfg, seed)?;
            data.pretrain.write_tsv(&stage.file("world/pretrain.tsv")?)?;
            data.align.write_tsv(&stage.file("world/align.tsv")?)?;
            data.mixed_train.write_tsv(&stage.file("world/mixed_train.tsv")?)?;
            data.mixed_eval.write_tsv(&stage.file("world/mixed_eval.tsv")?)?;
            for (name, tr, ev) in &data.stages {
                tr.write_tsv(&stage.file(&format!("world/{name}_train.tsv"))?)?;
                ev.write_tsv(&stage.file(&format!("world/{name}_eval.tsv"))?)?;
            }
            let attack: String = data
                .attack
                .iter()
                .map(|p| p.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ") + "\n")
                .collect();
            fs::write(stage.file("world/attack.txt")?, attack)?;
            println!("world written to {}", stage.dir.join("world").display());
        }
        Command::Pretrain => {
            let data = build_world(&stage.cfg, seed)?;
            let (p, log) = pipeline::pretrain(&stage.cfg, seed, &data)?;
            p.save(&stage.file("checkpoints/pretrained.params")?)?;
            write_log(&stage.file("logs/pretrain.ndjson")?, &log)?;
            println!(
                "pretrained: final epoch loss {:.4}",
                log.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Align => {
            let pre = ModelParams::load(&stage.checkpoint("pretrained"))
                .map_err(|e| Error::Run(format!("no usable pretrained checkpoint (run `pretrain` first): {e}")))?;
            let data = build_world(&stage.cfg, seed)?;
            let (p, log) = pipeline::align(&stage.cfg, seed, &pre, &data)?;
            p.save(&stage.file("checkpoints/aligned.params")?)?;
            write_log(&stage.file("logs/align.ndjson")?, &log)?;
            println!(
                "aligned: final epoch loss {:.4}",
                log.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Finetune { method, rho, continual } => {
            let m = parse_method(method)?;
            let prep = stage.prepared(true)?;
            let slug = m.slug();
            if *continual {
                let (out, params, logs) = run_continual_method(&stage.cfg, &prep, m)?;
                let d = format!("continual/{slug}");
                write_json(&stage.file(&format!("{d}/outcome.json"))?, &out)?;
                fs::write(stage.file(&format!("{d}/matrix.csv"))?, out.matrix.to_csv())?;
                let log_path = stage.file(&format!("{d}/log.ndjson"))?;
                if log_path.exists() {
                    fs::remove_file(&log_path)?;
                }
                for (t, (p, log)) in params.iter().zip(&logs).enumerate() {
                    p.save(&stage.file(&format!("{d}/stage_{}.params", t + 1))?)?;
                    log.append_ndjson(&log_path)?;
                }
                print!("{}", out.matrix.to_csv());
            } else {
                let rho = rho.unwrap_or(stage.cfg.rho);
                let (out, params, log, _) = run_alignment_method(&stage.cfg, &prep, m, rho, 0.0, false)?;
                write_json(&stage.file(&format!("alignment/{slug}.json"))?, &out)?;
                write_log(&stage.file(&format!("alignment/{slug}.ndjson"))?, &log)?;
                params.save(&stage.file(&format!("alignment/{slug}.params"))?)?;
                println!(
                    "{m}: asr {:.4} kl_aligned {:.4} accuracy {:.1}",
                    out.report.asr, out.report.kl_aligned, out.accuracy
                );
            }
        }
        Command::Evaluate { checkpoint } | Command::Landscape { checkpoint } => {
            let prep = stage.prepared(true)?;
            let (name, params) = stage.target(&prep, checkpoint)?;
            let inputs = SafetyInputs {
                attack: &prep.attack,
                kl_prompts: &prep.kl_prompts,
                pretrained: &prep.pretrained,
                aligned: &prep.aligned,
                visage_aligned: None,
            };
            let safety = stage.cfg.safety_config(derive_seed(seed, "safety"));
            let (base, _) = evaluate_safety(&prep.aligned, &inputs, &safety)?;
            let inputs = SafetyInputs {
                visage_aligned: Some(base.visage),
                ..inputs
            };
            let (report, curves) = evaluate_safety(&params, &inputs, &safety)?;
            if matches!(cli.command, Command::Landscape { .. }) {
                let p = stage.file(&format!("eval/{name}_landscape.csv"))?;
                write_landscape_csv(&p, &curves)?;
                println!("landscape written to {}", p.display());
            } else {
                write_json(&stage.file(&format!("eval/{name}.json"))?, &report)?;
                println!(
                    "{name}: asr {:.4} visage {:.4} drift {:.4} kl_pretrain {:.4} kl_aligned {:.4}",
                    report.asr, report.visage, report.drift, report.kl_pretrain, report.kl_aligned
                );
            }
        }
        Command::DirectionStudy => {
            let prep = stage.prepared(true)?;
            let rows = direction_study(
                &prep.aligned,
                &prep.pretrained,
                &prep.mixed_train,
                &stage.cfg.direction_config(derive_seed(seed, "direction")),
            )?;
            let csv = direction_csv(&rows);
            fs::write(stage.file("direction.csv")?, &csv)?;
            print!("{csv}");
        }
        Command::Report => {
            for p in emit_report(&stage.cfg.out)? {
                println!("{}", p.display());
            }
        }
        Command::Reproduce => {
            let manifests = run_experiment(&stage.cfg, cli.jobs)?;
            for m in &manifests {
                println!("seed {} complete ({} files)", m.seed, m.files.len());
            }
            emit_report(&stage.cfg.out)?;
            println!("report written to {}", stage.cfg.out.join("report").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Validation(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
