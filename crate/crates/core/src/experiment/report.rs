//! Cross-seed aggregation of run manifests into report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::run::{read_manifest, RunManifest};
use crate::error::{Error, Result};

/// Mean and sample standard deviation; the deviation is 0 below two
/// values.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

fn cells(out: &mut String, xs: &[f64]) {
    let (m, s) = mean_std(xs);
    let _ = write!(out, ",{m:.4},{s:.4}");
}

fn header(first: &str, cols: &[&str]) -> String {
    let mut h = String::from(first);
    for c in cols {
        let _ = write!(h, ",{c}_mean,{c}_std");
    }
    h.push('\n');
    h
}

/// Seed directories with a manifest, ordered by seed.
pub fn load_manifests(out: &Path) -> Result<Vec<(PathBuf, RunManifest)>> {
    if !out.is_dir() {
        return Err(Error::Format(format!("{} is not a run directory", out.display())));
    }
    let mut found = Vec::new();
    for e in fs::read_dir(out)? {
        let dir = e?.path();
        let is_seed = dir
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("seed_"));
        if is_seed && dir.is_dir() {
            let m = dir.join("manifest.json");
            if !m.exists() {
                return Err(Error::Format(format!("{} has no manifest", dir.display())));
            }
            found.push((dir.clone(), read_manifest(&m)?));
        }
    }
    if found.is_empty() {
        return Err(Error::Format(format!("no manifests under {}", out.display())));
    }
    found.sort_by_key(|(_, m)| m.seed);
    Ok(found)
}

pub fn alignment_table(ms: &[&RunManifest]) -> String {
    let cols = [
        "asr",
        "visage",
        "drift",
        "kl_pretrain",
        "kl_aligned",
        "accuracy",
        "elastic",
    ];
    let mut out = header("method", &cols);
    if ms.iter().all(|m| m.summary.aligned.is_some()) && !ms.is_empty() {
        out.push_str("aligned");
        let reps: Vec<_> = ms.iter().filter_map(|m| m.summary.aligned.as_ref()).collect();
        for f in [
            |r: &crate::safety::SafetyReport| r.asr,
            |r: &crate::safety::SafetyReport| r.visage,
            |r: &crate::safety::SafetyReport| r.drift,
            |r: &crate::safety::SafetyReport| r.kl_pretrain,
            |r: &crate::safety::SafetyReport| r.kl_aligned,
        ] {
            cells(&mut out, &reps.iter().map(|r| f(r)).collect::<Vec<_>>());
        }
        out.push_str(",,,,\n");
    }
    let methods: Vec<String> = ms
        .first()
        .map(|m| m.summary.alignment.keys().cloned().collect())
        .unwrap_or_default();
    let order = method_order(&methods);
    for name in order {
        let rows: Vec<_> = ms.iter().filter_map(|m| m.summary.alignment.get(&name)).collect();
        out.push_str(&name);
        cells(&mut out, &rows.iter().map(|o| o.report.asr).collect::<Vec<_>>());
        cells(&mut out, &rows.iter().map(|o| o.report.visage).collect::<Vec<_>>());
        cells(&mut out, &rows.iter().map(|o| o.report.drift).collect::<Vec<_>>());
        cells(&mut out, &rows.iter().map(|o| o.report.kl_pretrain).collect::<Vec<_>>());
        cells(&mut out, &rows.iter().map(|o| o.report.kl_aligned).collect::<Vec<_>>());
        cells(&mut out, &rows.iter().map(|o| o.accuracy).collect::<Vec<_>>());
        cells(&mut out, &rows.iter().map(|o| o.elastic).collect::<Vec<_>>());
        out.push('\n');
    }
    out
}

/// Fixed display order: selection strategies first, then baselines.
fn method_order(names: &[String]) -> Vec<String> {
    let rank = |n: &str| match n {
        "all" => 0,
        "random" => 1,
        "high" => 2,
        "low" => 3,
        "moderate" => 4,
        "ewc" => 5,
        "kl" => 6,
        _ => 7,
    };
    let mut v = names.to_vec();
    v.sort_by(|a, b| rank(a).cmp(&rank(b)).then(a.cmp(b)));
    v
}

pub fn continual_table(ms: &[&RunManifest]) -> String {
    let mut out = header("method", &["avg_perf", "bwt", "fm", "max_drop"]);
    let methods: Vec<String> = ms
        .first()
        .map(|m| m.summary.continual.keys().cloned().collect())
        .unwrap_or_default();
    for name in method_order(&methods) {
        let sums: Vec<_> = ms
            .iter()
            .filter_map(|m| m.summary.continual.get(&name))
            .filter_map(|o| o.summary.as_ref())
            .collect();
        if sums.is_empty() {
            continue;
        }
        out.push_str(&name);
        cells(&mut out, &sums.iter().map(|s| s.avg_perf).collect::<Vec<_>>());
        cells(&mut out, &sums.iter().map(|s| s.bwt).collect::<Vec<_>>());
        cells(&mut out, &sums.iter().map(|s| s.fm).collect::<Vec<_>>());
        cells(&mut out, &sums.iter().map(|s| s.max_drop).collect::<Vec<_>>());
        out.push('\n');
    }
    out
}

pub fn direction_table(ms: &[&RunManifest]) -> String {
    let mut out = header(
        "subset",
        &["topk_high", "topk_mod", "r", "p", "full_high", "full_mod", "full_r"],
    );
    let mut by: BTreeMap<usize, (String, Vec<&crate::direction::DirectionRow>)> = BTreeMap::new();
    for m in ms {
        for (i, r) in m.summary.direction.iter().enumerate() {
            by.entry(i).or_insert_with(|| (r.subset.clone(), Vec::new())).1.push(r);
        }
    }
    for (_, (name, rows)) in by {
        out.push_str(&name);
        cells(&mut out, &rows.iter().map(|r| r.topk_high).collect::<Vec<_>>());
        cells(&mut out, &rows.iter().map(|r| r.topk_mod).collect::<Vec<_>>());
        cells(&mut out, &rows.iter().map(|r| r.r).collect::<Vec<_>>());
        cells(&mut out, &rows.iter().map(|r| r.p).collect::<Vec<_>>());
        cells(&mut out, &rows.iter().map(|r| r.full_high).collect::<Vec<_>>());
        cells(&mut out, &rows.iter().map(|r| r.full_mod).collect::<Vec<_>>());
        cells(&mut out, &rows.iter().map(|r| r.full_r).collect::<Vec<_>>());
        out.push('\n');
    }
    out
}

pub fn sensitivity_table(ms: &[&RunManifest]) -> String {
    let mut out = header("rho", &["asr", "visage", "kl_aligned", "accuracy"]);
    let n = ms.first().map(|m| m.summary.sensitivity.len()).unwrap_or(0);
    for i in 0..n {
        let rows: Vec<_> = ms.iter().filter_map(|m| m.summary.sensitivity.get(i)).collect();
        let _ = write!(out, "{}", rows[0].rho);
        cells(&mut out, &rows.iter().map(|o| o.report.asr).collect::<Vec<_>>());
        cells(&mut out, &rows.iter().map(|o| o.report.visage).collect::<Vec<_>>());
        cells(&mut out, &rows.iter().map(|o| o.report.kl_aligned).collect::<Vec<_>>());
        cells(&mut out, &rows.iter().map(|o| o.accuracy).collect::<Vec<_>>());
        out.push('\n');
    }
    out
}

/// Long-format per-stage interference: `seed,method,stage,task,delta,self`.
pub fn interference_long(ms: &[&RunManifest]) -> String {
    let mut out = String::from("seed,method,stage,task,delta,self\n");
    for m in ms {
        for (name, o) in &m.summary.continual {
            let Some(i) = &o.interference else { continue };
            for (k, row) in i.cells.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{v:.4},{}",
                        m.seed,
                        name,
                        o.matrix.stages[k + 1],
                        o.matrix.tasks[j],
                        i.is_self[k][j]
                    );
                }
            }
        }
    }
    out
}

/// Writes `<out>/report/*.csv` from the seed manifests and returns the
/// written paths.
pub fn emit_report(out: &Path) -> Result<Vec<PathBuf>> {
    let loaded = load_manifests(out)?;
    let ms: Vec<&RunManifest> = loaded.iter().map(|(_, m)| m).collect();
    let dir = out.join("report");
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(dir.join("landscape"))?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    put("alignment.csv", alignment_table(&ms))?;
    put("continual.csv", continual_table(&ms))?;
    put("direction.csv", direction_table(&ms))?;
    put("sensitivity.csv", sensitivity_table(&ms))?;
    put("interference.csv", interference_long(&ms))?;

    // Landscapes: concatenate the per-seed curves in long format.
    let mut curves: BTreeMap<String, String> = BTreeMap::new();
    for (seed_dir, m) in &loaded {
        let ld = seed_dir.join("landscape");
        if !ld.is_dir() {
            continue;
        }
        let mut files: Vec<_> = fs::read_dir(&ld)?.collect::<std::io::Result<_>>()?;
        files.sort_by_key(|e| e.file_name());
        for f in files {
            let name = f.file_name().to_string_lossy().into_owned();
            let body = fs::read_to_string(f.path())?;
            let acc = curves
                .entry(name)
                .or_insert_with(|| String::from("seed,direction,alpha,S\n"));
            for line in body.lines().skip(1) {
                let _ = writeln!(acc, "{},{line}", m.seed);
            }
        }
    }
    for (name, body) in curves {
        put(&format!("landscape/{name}"), body)?;
    }
    Ok(written)
}
