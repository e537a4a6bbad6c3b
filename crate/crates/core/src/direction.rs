//! Reversion direction and TopK-cosine analysis.
//!
//! `r = theta_pretrain - theta_aligned`. For a sample gradient `g` and a
//! parameter subset `S`, the TopK-cosine is the cosine between `g` and `r`
//! restricted to the `k` coordinates of `S` where `|r_j|` is largest.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index::sample as sample_indices, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::autodiff::dot;
use crate::error::{arg, Error, Result};
use crate::model::{sample_gradient, ModelParams, SubsetSpec};
use crate::rng;
use crate::world::Dataset;

pub fn reversion_direction(pre: &ModelParams, aligned: &ModelParams) -> Result<Vec<f64>> {
    if !pre.config().same_shape(aligned.config()) {
        return arg("pretrained and aligned models have different configurations");
    }
    Ok(pre
        .flatten()
        .iter()
        .zip(aligned.flatten())
        .map(|(a, b)| a - b)
        .collect())
}

/// The `min(k, |subset|)` subset coordinates with largest `|r_j|`; ties go to
/// the lower coordinate.
pub fn topk_coordinates(r: &[f64], subset: &[usize], k: usize) -> Vec<usize> {
    let mut c = subset.to_vec();
    c.sort_by(|&a, &b| r[b].abs().total_cmp(&r[a].abs()).then(a.cmp(&b)));
    c.truncate(k.min(subset.len()));
    c
}

fn restricted_cosine(g: &[f64], r: &[f64], coords: &[usize]) -> f64 {
    let (mut gr, mut gg, mut rr) = (0.0, 0.0, 0.0);
    for &j in coords {
        gr += g[j] * r[j];
        gg += g[j] * g[j];
        rr += r[j] * r[j];
    }
    if gg == 0.0 || rr == 0.0 {
        return 0.0;
    }
    gr / (gg.sqrt() * rr.sqrt())
}

pub fn topk_cosine(g: &[f64], r: &[f64], subset: &[usize], k: usize) -> Result<f64> {
    if g.len() != r.len() {
        return arg(format!("gradient length {} != direction length {}", g.len(), r.len()));
    }
    if subset.is_empty() {
        return arg("empty coordinate subset");
    }
    if k == 0 {
        return arg("k must be at least 1");
    }
    if let Some(&j) = subset.iter().find(|&&j| j >= g.len()) {
        return arg(format!("coordinate {j} out of range"));
    }
    Ok(restricted_cosine(g, r, &topk_coordinates(r, subset, k)))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return arg(format!(
            "pearson needs equal lengths of at least 3, got {} and {}",
            x.len(),
            y.len()
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return arg("pearson correlation undefined for zero variance");
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson `r` with a two-sided permutation p-value,
/// `(1 + #{|r_perm| >= |r|}) / (1 + n_permutations)`.
pub fn pearson_r_p(x: &[f64], y: &[f64], n_permutations: usize, seed: u64) -> Result<(f64, f64)> {
    let r = pearson_r(x, y)?;
    let mut rng = rng::stream(seed, "direction/permutation");
    let mut ys = y.to_vec();
    let mut hits = 0usize;
    for _ in 0..n_permutations {
        ys.shuffle(&mut rng);
        if pearson_r(x, &ys)?.abs() >= r.abs() {
            hits += 1;
        }
    }
    Ok((r, (1 + hits) as f64 / (1 + n_permutations) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionStudyConfig {
    pub k: usize,
    pub subsets: Vec<SubsetSpec>,
    pub n_samples: usize,
    pub high_quantile: f64,
    pub mod_band: f64,
    pub n_permutations: usize,
    pub seed: u64,
}

impl Default for DirectionStudyConfig {
    fn default() -> Self {
        DirectionStudyConfig {
            k: 1000,
            subsets: ["LAST_V", "LAST_O", "LAST_MLP", "LAST_QKVO", "MIDDLE"]
                .iter()
                .map(|s| SubsetSpec::one(s))
                .collect(),
            n_samples: 500,
            high_quantile: 0.2,
            mod_band: 0.2,
            n_permutations: 10_000,
            seed: 0,
        }
    }
}

impl DirectionStudyConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.k == 0 {
            bad.push("direction.k must be at least 1".to_string());
        }
        if self.subsets.is_empty() {
            bad.push("direction.subsets must not be empty".to_string());
        }
        if self.n_samples < 3 {
            bad.push("direction.n_samples must be at least 3".to_string());
        }
        let (h, m) = (self.high_quantile, self.mod_band);
        if !(h > 0.0 && m > 0.0 && h + m / 2.0 <= 0.5) {
            bad.push(format!(
                "direction bands overlap or are empty: high {h}, moderate band {m}"
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    /// Positions (into an ascending-by-G ordering of `n` items) of the HIGH
    /// and MOD bands.
    pub fn bands(&self, n: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let h = ((self.high_quantile * n as f64).floor() as usize).max(1);
        let m = ((self.mod_band * n as f64).floor() as usize).max(1);
        let start = (n - m) / 2;
        (n - h..n, start..start + m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionRow {
    pub subset: String,
    pub topk_high: f64,
    pub topk_mod: f64,
    pub r: f64,
    pub p: f64,
    pub full_high: f64,
    pub full_mod: f64,
    pub full_r: f64,
}

/// Study over precomputed per-sample gradients. `subsets` pairs a label
/// with the coordinates it covers.
pub fn direction_study_from_gradients(
    grads: &[Vec<f64>],
    r: &[f64],
    subsets: &[(String, Vec<usize>)],
    cfg: &DirectionStudyConfig,
) -> Result<Vec<DirectionRow>> {
    cfg.validate()?;
    if grads.len() < 3 {
        return arg("direction study needs at least 3 gradients");
    }
    let norms: Vec<f64> = grads.iter().map(|g| dot(g, g).sqrt()).collect();
    let mut order: Vec<usize> = (0..grads.len()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let (high, moderate) = cfg.bands(grads.len());
    let mean_over = |vals: &[f64], band: &std::ops::Range<usize>| -> f64 {
        band.clone().map(|p| vals[order[p]]).sum::<f64>() / band.len() as f64
    };
    let mut rows = Vec::with_capacity(subsets.len());
    for (t, (name, coords)) in subsets.iter().enumerate() {
        let top = topk_coordinates(r, coords, cfg.k);
        let tk: Vec<f64> = grads.iter().map(|g| restricted_cosine(g, r, &top)).collect();
        let full: Vec<f64> = grads.iter().map(|g| restricted_cosine(g, r, coords)).collect();
        let seed = rng::derive_seed(cfg.seed, &format!("subset{t}"));
        let (rr, p) = pearson_r_p(&norms, &tk, cfg.n_permutations, seed)?;
        let full_r = pearson_r(&norms, &full).unwrap_or(0.0);
        rows.push(DirectionRow {
            subset: name.clone(),
            topk_high: mean_over(&tk, &high),
            topk_mod: mean_over(&tk, &moderate),
            r: rr,
            p,
            full_high: mean_over(&full, &high),
            full_mod: mean_over(&full, &moderate),
            full_r,
        });
    }
    Ok(rows)
}

/// Samples `n_samples` examples, computes their gradients at the aligned
/// model and correlates gradient norm with TopK-cosine to the reversion
/// direction, per subset.
pub fn direction_study(
    aligned: &ModelParams,
    pre: &ModelParams,
    dataset: &Dataset,
    cfg: &DirectionStudyConfig,
) -> Result<Vec<DirectionRow>> {
    cfg.validate()?;
    if dataset.len() < cfg.n_samples {
        return arg(format!(
            "direction study needs {} samples, dataset has {}",
            cfg.n_samples,
            dataset.len()
        ));
    }
    let r = reversion_direction(pre, aligned)?;
    let mut rng = rng::stream(cfg.seed, "direction/samples");
    let mut picks = sample_indices(&mut rng, dataset.len(), cfg.n_samples).into_vec();
    picks.sort_unstable();
    let grads = picks
        .iter()
        .map(|&i| Ok(sample_gradient(aligned, &dataset.samples[i])?.grad))
        .collect::<Result<Vec<_>>>()?;
    let subsets = cfg
        .subsets
        .iter()
        .map(|s| Ok((s.label(), s.coordinates(aligned)?)))
        .collect::<Result<Vec<_>>>()?;
    direction_study_from_gradients(&grads, &r, &subsets, cfg)
}

pub fn direction_csv(rows: &[DirectionRow]) -> String {
    let mut out = String::from("subset,topk_high,topk_mod,r,p,full_high,full_mod,full_r\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.subset, r.topk_high, r.topk_mod, r.r, r.p, r.full_high, r.full_mod, r.full_r
        );
    }
    out
}

pub fn write_direction_csv(path: &Path, rows: &[DirectionRow]) -> Result<()> {
    std::fs::write(path, direction_csv(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn topk_fixtures() {
        let all3 = [0, 1, 2];
        assert!((topk_cosine(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &all3, 3).unwrap() - 1.0).abs() < 1e-12);
        assert!((topk_cosine(&[1.0, 2.0, 3.0], &[0.0, 0.0, 5.0], &all3, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!(topk_cosine(&[3.0, 4.0], &[4.0, -3.0], &[0, 1], 2).unwrap().abs() < 1e-12);
        assert_eq!(topk_cosine(&[0.0, 0.0], &[1.0, 2.0], &[0, 1], 2).unwrap(), 0.0);
        assert!(topk_cosine(&[1.0], &[1.0, 2.0], &[0], 1).is_err());
        assert!(topk_cosine(&[1.0, 2.0], &[1.0, 2.0], &[], 1).is_err());
    }

    #[test]
    fn topk_ties_prefer_low_coordinates() {
        assert_eq!(topk_coordinates(&[1.0, -2.0, 2.0, 0.5], &[0, 1, 2, 3], 2), vec![1, 2]);
        assert_eq!(topk_coordinates(&[3.0, 3.0, 3.0], &[2, 0, 1], 2), vec![0, 1]);
        assert_eq!(topk_coordinates(&[1.0, 2.0], &[0, 1], 10).len(), 2);
    }

    #[test]
    fn topk_scale_sign_and_full_k() {
        let g = [0.3, -1.2, 2.0, 0.7, -0.1];
        let r = [1.0, 0.5, -2.0, 0.0, 3.0];
        let sub = [0, 1, 2, 4];
        let a = topk_cosine(&g, &r, &sub, 2).unwrap();
        let scaled: Vec<f64> = g.iter().map(|x| 3.5 * x).collect();
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        assert!((topk_cosine(&scaled, &r, &sub, 2).unwrap() - a).abs() < 1e-12);
        assert!((topk_cosine(&neg, &r, &sub, 2).unwrap() + a).abs() < 1e-12);
        let gs: Vec<f64> = sub.iter().map(|&j| g[j]).collect();
        let rs: Vec<f64> = sub.iter().map(|&j| r[j]).collect();
        assert!((topk_cosine(&g, &r, &sub, 99).unwrap() - cosine(&gs, &rs)).abs() < 1e-12);
    }

    #[test]
    fn pearson_fixtures() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson_r(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_r(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        // Hand formula: deviations (-1, 0, 1) and (-4/3, -1/3, 5/3).
        let hand = 3.0 / (2.0f64.sqrt() * (42.0f64 / 9.0).sqrt());
        let r = pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - hand).abs() < 1e-12);
        assert!((r - 0.98198).abs() < 1e-5);
        assert!(pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson_r(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn permutation_p_is_reproducible_and_bounded() {
        let x: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64).collect();
        let a = pearson_r_p(&x, &y, 500, 3).unwrap();
        assert_eq!(a, pearson_r_p(&x, &y, 500, 3).unwrap());
        assert!(a.1 > 0.0 && a.1 <= 1.0);
        let (r, p) = pearson_r_p(&x, &x, 200, 1).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert!((p - 1.0 / 201.0).abs() < 1e-12);
    }

    #[test]
    fn reversion_direction_basics() {
        let c = ModelConfig::default();
        let a = ModelParams::init(&c).unwrap();
        let b = ModelParams::init(&ModelConfig { seed: 9, ..c.clone() }).unwrap();
        assert!(reversion_direction(&a, &a).unwrap().iter().all(|x| *x == 0.0));
        let ab = reversion_direction(&a, &b).unwrap();
        let ba = reversion_direction(&b, &a).unwrap();
        assert!(ab.iter().zip(&ba).all(|(x, y)| *x == -y));
        let dist = a
            .flatten()
            .iter()
            .zip(b.flatten())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((dot(&ab, &ab).sqrt() - dist).abs() < 1e-9);
        let other = ModelParams::init(&ModelConfig { d_model: 16, ..c }).unwrap();
        assert!(reversion_direction(&a, &other).is_err());
    }

    #[test]
    fn bands_are_disjoint() {
        let cfg = DirectionStudyConfig::default();
        let (h, m) = cfg.bands(500);
        assert_eq!((h.start, h.end, m.start, m.end), (400, 500, 200, 300));
        let (h, m) = cfg.bands(10);
        assert!(m.end <= h.start);
        assert!(DirectionStudyConfig {
            high_quantile: 0.5,
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn gradient_equal_to_r_scores_one_and_rows_per_subset() {
        let r = vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.7];
        let mut grads: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..6).map(|j| ((i * 5 + j * 3) % 7) as f64 - 3.0).collect())
            .collect();
        grads[2] = r.clone();
        let subsets = vec![
            ("all".to_string(), (0..6).collect()),
            ("first".to_string(), vec![0, 1, 2]),
            ("last".to_string(), vec![3, 4, 5]),
        ];
        let cfg = DirectionStudyConfig {
            k: 6,
            n_samples: 6,
            n_permutations: 50,
            ..DirectionStudyConfig::default()
        };
        let rows = direction_study_from_gradients(&grads, &r, &subsets, &cfg).unwrap();
        assert_eq!(rows.len(), 3);
        let top = topk_coordinates(&r, &subsets[0].1, 6);
        assert!((restricted_cosine(&grads[2], &r, &top) - 1.0).abs() < 1e-12);
        assert!(direction_csv(&rows).starts_with("subset,topk_high,topk_mod,r,p"));
    }
}
