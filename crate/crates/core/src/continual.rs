//! Stage-by-task accuracy grids and the forgetting metrics derived from
//! them.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::model::{greedy_decode, ModelParams};
use crate::world::Dataset;

/// `r[t][i]`: accuracy (0..=100) of the checkpoint after stage `t` on task `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub stages: Vec<String>,
    pub tasks: Vec<String>,
    pub r: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(stages: Vec<String>, tasks: Vec<String>, r: Vec<Vec<f64>>) -> Result<Self> {
        if stages.is_empty() || tasks.is_empty() {
            return arg("accuracy matrix needs at least one stage and one task");
        }
        if r.len() != stages.len() || r.iter().any(|row| row.len() != tasks.len()) {
            return arg("accuracy matrix shape does not match its labels");
        }
        if r.iter().flatten().any(|v| !(0.0..=100.0).contains(v)) {
            return Err(Error::Data("accuracy values must lie in [0, 100]".into()));
        }
        Ok(AccuracyMatrix { stages, tasks, r })
    }

    pub fn n_stages(&self) -> usize {
        self.r.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage");
        for t in &self.tasks {
            out.push(',');
            out.push_str(t);
        }
        out.push('\n');
        for (s, row) in self.stages.iter().zip(&self.r) {
            out.push_str(s);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Percentage of eval samples whose greedy continuation reproduces the
/// target exactly.
pub fn exact_match_accuracy(params: &ModelParams, eval: &Dataset) -> Result<f64> {
    if eval.is_empty() {
        return arg("evaluation split is empty");
    }
    let mut hits = 0usize;
    for s in &eval.samples {
        let want = s.target();
        let out = greedy_decode(params, s.prompt(), want.len())?;
        if &out[s.prompt_len..] == want {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / eval.len() as f64)
}

pub fn accuracy_matrix(checkpoints: &[(String, &ModelParams)], tasks: &[(String, &Dataset)]) -> Result<AccuracyMatrix> {
    if checkpoints.is_empty() || tasks.is_empty() {
        return arg("accuracy matrix needs at least one checkpoint and one task");
    }
    let mut r = Vec::with_capacity(checkpoints.len());
    for (_, p) in checkpoints {
        r.push(
            tasks
                .iter()
                .map(|(_, d)| exact_match_accuracy(p, d))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    AccuracyMatrix::new(
        checkpoints.iter().map(|c| c.0.clone()).collect(),
        tasks.iter().map(|t| t.0.clone()).collect(),
        r,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualSummary {
    pub avg_perf: f64,
    pub bwt: f64,
    pub fm: f64,
    pub max_drop: f64,
    /// True when no task ever lost accuracy between stages, so `max_drop`
    /// is 0 by convention.
    pub no_drop: bool,
}

fn check_diag(m: &AccuracyMatrix, diag_map: &[usize]) -> Result<()> {
    if diag_map.len() != m.n_stages() {
        return arg(format!(
            "diag map has {} entries for {} stages",
            diag_map.len(),
            m.n_stages()
        ));
    }
    let mut seen = vec![false; m.tasks.len()];
    for &i in diag_map {
        if i >= m.tasks.len() || seen[i] {
            return arg("each stage must train a distinct, existing task");
        }
        seen[i] = true;
    }
    Ok(())
}

/// `diag_map[t]` is the column of the task trained at stage `t`.
pub fn continual_summary(m: &AccuracyMatrix, diag_map: &[usize]) -> Result<ContinualSummary> {
    check_diag(m, diag_map)?;
    let t_n = m.n_stages();
    if t_n < 2 {
        return Err(Error::Partial("BWT and FM need at least two stages".into()));
    }
    let last = &m.r[t_n - 1];
    let (mut bwt, mut fm) = (0.0, 0.0);
    for (s, &i) in diag_map[..t_n - 1].iter().enumerate() {
        bwt += last[i] - m.r[s][i];
        let peak = m.r.iter().map(|row| row[i]).fold(f64::NEG_INFINITY, f64::max);
        fm += peak - last[i];
    }
    let denom = (t_n - 1) as f64;
    let mut max_drop: f64 = 0.0;
    for t in 1..t_n {
        for i in 0..m.tasks.len() {
            max_drop = max_drop.max(m.r[t - 1][i] - m.r[t][i]);
        }
    }
    let avg_perf =
        m.r.iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .sum::<f64>()
            / t_n as f64;
    Ok(ContinualSummary {
        avg_perf,
        bwt: bwt / denom,
        fm: fm / denom,
        max_drop,
        no_drop: max_drop == 0.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interference {
    /// Row `t - 1` holds `R[t][i] - R[t-1][i]` for stages `t >= 1`.
    pub cells: Vec<Vec<f64>>,
    /// Cells where `i` is the task trained at that stage.
    pub is_self: Vec<Vec<bool>>,
    /// Sum of all non-self cells.
    pub total: f64,
}

pub fn interference_matrix(m: &AccuracyMatrix, diag_map: &[usize]) -> Result<Interference> {
    check_diag(m, diag_map)?;
    if m.n_stages() < 2 {
        return Err(Error::Partial("interference needs at least two stages".into()));
    }
    let mut cells = Vec::new();
    let mut is_self = Vec::new();
    let mut total = 0.0;
    for t in 1..m.n_stages() {
        let row: Vec<f64> = (0..m.tasks.len()).map(|i| m.r[t][i] - m.r[t - 1][i]).collect();
        let selfs: Vec<bool> = (0..m.tasks.len()).map(|i| diag_map[t] == i).collect();
        for (v, s) in row.iter().zip(&selfs) {
            if !s {
                total += v;
            }
        }
        cells.push(row);
        is_self.push(selfs);
    }
    Ok(Interference { cells, is_self, total })
}

impl Interference {
    pub fn to_csv(&self, m: &AccuracyMatrix) -> String {
        let mut out = String::from("stage");
        for t in &m.tasks {
            out.push(',');
            out.push_str(t);
        }
        out.push('\n');
        for (k, row) in self.cells.iter().enumerate() {
            out.push_str(&m.stages[k + 1]);
            for (v, s) in row.iter().zip(&self.is_self[k]) {
                let _ = write!(out, ",{v}{}", if *s { "*" } else { "" });
            }
            out.push('\n');
        }
        out
    }
}

pub fn write_matrix_csv(path: &Path, m: &AccuracyMatrix) -> Result<()> {
    std::fs::write(path, m.to_csv())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::world::Sample;

    fn mat(r: Vec<Vec<f64>>) -> AccuracyMatrix {
        let s = (1..=r.len()).map(|i| format!("stage{i}")).collect();
        let t = (0..r[0].len()).map(|i| format!("task{i}")).collect();
        AccuracyMatrix::new(s, t, r).unwrap()
    }

    #[test]
    fn hand_matrix() {
        let m = mat(vec![vec![100.0, 0.0], vec![90.0, 100.0]]);
        let s = continual_summary(&m, &[0, 1]).unwrap();
        assert_eq!((s.bwt, s.fm, s.max_drop, s.avg_perf), (-10.0, 10.0, 10.0, 72.5));
        assert!(!s.no_drop);
        let i = interference_matrix(&m, &[0, 1]).unwrap();
        assert_eq!(i.cells, vec![vec![-10.0, 100.0]]);
        assert_eq!(i.is_self, vec![vec![false, true]]);
        assert_eq!(i.total, -10.0);
    }

    #[test]
    fn constant_matrix() {
        let m = mat(vec![vec![40.0; 3]; 3]);
        let s = continual_summary(&m, &[0, 1, 2]).unwrap();
        assert_eq!((s.bwt, s.fm, s.max_drop), (0.0, 0.0, 0.0));
        assert!(s.no_drop);
        let i = interference_matrix(&m, &[0, 1, 2]).unwrap();
        assert!(i.cells.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn peaks_at_own_stage_give_fm_equal_minus_bwt() {
        let m = mat(vec![
            vec![80.0, 10.0, 5.0],
            vec![70.0, 90.0, 5.0],
            vec![65.0, 85.0, 95.0],
        ]);
        let s = continual_summary(&m, &[0, 1, 2]).unwrap();
        assert!((s.fm + s.bwt).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let m = mat(vec![vec![50.0]]);
        assert!(matches!(continual_summary(&m, &[0]), Err(Error::Partial(_))));
        let m2 = mat(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert!(continual_summary(&m2, &[0, 0]).is_err());
        assert!(AccuracyMatrix::new(vec!["a".into()], vec!["x".into()], vec![vec![120.0]]).is_err());
    }

    #[test]
    fn csv_layout() {
        let m = mat(vec![vec![100.0, 0.0], vec![90.0, 100.0]]);
        assert_eq!(m.to_csv(), "stage,task0,task1\nstage1,100,0\nstage2,90,100\n");
        let i = interference_matrix(&m, &[0, 1]).unwrap();
        assert_eq!(i.to_csv(&m), "stage,task0,task1\nstage2,-10,100*\n");
    }

    #[test]
    fn exact_match_on_forced_model() {
        let c = ModelConfig {
            vocab_size: 48,
            context_len: 16,
            d_model: 8,
            n_heads: 2,
            n_blocks: 3,
            mlp_hidden: 8,
            seed: 1,
        };
        let mut p = ModelParams::init(&c).unwrap();
        p.array_mut("head.w").unwrap().data_mut().fill(0.0);
        p.array_mut("head.b").unwrap().data_mut()[30] = 50.0;
        let right = Sample::new(vec![1, 20, 2, 30, 30], 3, "t", 0).unwrap();
        let wrong = Sample::new(vec![1, 21, 2, 31], 3, "t", 1).unwrap();
        let half = Dataset {
            samples: vec![right.clone(), wrong],
            seed: 0,
        };
        assert_eq!(exact_match_accuracy(&p, &half).unwrap(), 50.0);
        let all = Dataset {
            samples: vec![right],
            seed: 0,
        };
        let m = accuracy_matrix(&[("s1".into(), &p)], &[("t".into(), &all)]).unwrap();
        assert_eq!(m.r, vec![vec![100.0]]);
        assert!(exact_match_accuracy(
            &p,
            &Dataset {
                samples: vec![],
                seed: 0
            }
        )
        .is_err());
    }
}
