//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p driftlab --test acceptance --release`.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};

use driftlab::autodiff::finite_difference_check;
use driftlab::continual::{continual_summary, AccuracyMatrix};
use driftlab::direction::{direction_study_from_gradients, topk_cosine, DirectionStudyConfig};
use driftlab::experiment::config::{ExperimentConfig, Method};
use driftlab::experiment::pipeline::{
    evaluate_aligned, prepare, run_alignment_method, run_continual_method, AlignmentOutcome,
};
use driftlab::experiment::{emit_report, run_experiment, tree_hash};
use driftlab::model::{forward_nll, loss_and_grad, ModelConfig, ModelParams};
use driftlab::safety::{alignment_drift, visage, LandscapeCurve, VisageMode};
use driftlab::selection::{loss_prefilter, select, GradientRecord, Scope, SelectionConfig, Strategy};
use driftlab::world::{Sample, BOS, SEP};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    soft: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            soft: false,
            detail: detail.into(),
        }
    }
}

fn count(flags: &[bool]) -> usize {
    flags.iter().filter(|&&b| b).count()
}

fn c1_autodiff() -> Verdict {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = [1usize, 2, 4][rng.gen_range(0..3)];
        let cfg = ModelConfig {
            vocab_size: rng.gen_range(16..40),
            context_len: 16,
            d_model: heads * rng.gen_range(2..5),
            n_heads: heads,
            n_blocks: 3,
            mlp_hidden: rng.gen_range(4..12),
            seed,
        };
        let mut p = ModelParams::init(&cfg).unwrap();
        // Move away from the init point so no coordinate sits at a kink.
        let jitter: Vec<f64> = (0..p.n_params())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.05 * z
            })
            .collect();
        p.add_scaled(&jitter, 1.0).unwrap();
        let len = rng.gen_range(4..14);
        let prompt_len = rng.gen_range(2..len);
        let mut tokens = vec![BOS];
        tokens.extend((1..len).map(|_| rng.gen_range(SEP..cfg.vocab_size as u32)));
        let sample = Sample::new(tokens, prompt_len, "fd", 0).unwrap();
        let flat = p.flatten();
        let err = finite_difference_check(
            |x| forward_nll(&ModelParams::from_flat(&cfg, x)?, &sample),
            |x| Ok(loss_and_grad(&ModelParams::from_flat(&cfg, x)?, &sample)?.1),
            &flat,
            1e-5,
            64,
            seed,
        )
        .unwrap();
        worst = worst.max(err);
    }
    Verdict::new(worst < 1e-4, format!("max relative error {worst:.2e} over 100 pairs"))
}

/// Independent statement of the moderate rule: pairwise ranking instead of
/// sorting.
fn oracle_moderate(records: &[GradientRecord], k: usize) -> Vec<usize> {
    let n = records.len() as f64;
    let mu = records.iter().map(|r| r.loss).sum::<f64>() / n;
    let sd = (records.iter().map(|r| (r.loss - mu).powi(2)).sum::<f64>() / n).sqrt();
    let kept: Vec<&GradientRecord> = records.iter().filter(|r| (r.loss - mu).abs() <= sd).collect();
    let mut g: Vec<f64> = kept.iter().map(|r| r.grad_norm).collect();
    g.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = g.len();
    let med = if m % 2 == 1 {
        g[m / 2]
    } else {
        (g[m / 2 - 1] + g[m / 2]) / 2.0
    };
    let key = |r: &GradientRecord| ((r.grad_norm - med).abs(), r.sample_index);
    let mut out: Vec<usize> = kept
        .iter()
        .filter(|a| kept.iter().filter(|b| key(b) < key(a)).count() < k)
        .map(|r| r.sample_index)
        .collect();
    out.sort_unstable();
    out
}

fn c2_algorithm() -> Verdict {
    let mut mismatches = 0;
    let mut wrong_count = 0;
    for b in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + b);
        let size = rng.gen_range(16..129);
        let rho = [0.1, 0.2, 0.3][rng.gen_range(0..3)];
        let loss = LogNormal::new(0.0, 0.6).unwrap();
        let norm = LogNormal::new(0.0, 1.0).unwrap();
        let records: Vec<GradientRecord> = (0..size)
            .map(|i| GradientRecord::new(i * 3 + 1, loss.sample(&mut rng), norm.sample(&mut rng)).unwrap())
            .collect();
        let cfg = SelectionConfig::new(Strategy::Moderate, rho, Scope::Batch, b).unwrap();
        let got = select(&cfg, &records, size, 0).unwrap().selected;
        let k = (rho * size as f64).floor() as usize;
        if got != oracle_moderate(&records, k) {
            mismatches += 1;
        }
        if got.len() != k {
            wrong_count += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gauss = Normal::new(10.0, 1.0).unwrap();
    let recs: Vec<GradientRecord> = (0..10_000)
        .map(|i| GradientRecord::new(i, gauss.sample(&mut rng), 1.0).unwrap())
        .collect();
    let retained = loss_prefilter(&recs).unwrap().candidates.len() as f64 / 100.0;
    let pass = mismatches == 0 && wrong_count == 0 && (retained - 68.3).abs() <= 2.0;
    Verdict::new(
        pass,
        format!("{mismatches} oracle mismatches, {wrong_count} wrong counts in 1000 batches; retention {retained:.1}%"),
    )
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn c3_fixtures() -> Verdict {
    let mut failed = Vec::new();
    let flat = |d: usize, s: f64| LandscapeCurve {
        direction: d,
        points: vec![(-1.0, s), (0.0, s), (1.0, s)],
    };
    // A perfectly safe landscape has the full margin; a fully broken one has none.
    if !close(
        visage(&[flat(0, 0.0), flat(1, 0.0)], 100.0, VisageMode::Include).unwrap(),
        100.0,
    ) {
        failed.push("visage safe");
    }
    if !close(visage(&[flat(0, 100.0)], 100.0, VisageMode::Include).unwrap(), 0.0) {
        failed.push("visage broken");
    }
    // Margins 100, 50, 0, 80, 80, 80: mean 65; dropping the saturated point gives 390/5.
    let hand = [
        LandscapeCurve {
            direction: 0,
            points: vec![(-1.0, 0.0), (0.0, 50.0), (1.0, 100.0)],
        },
        LandscapeCurve {
            direction: 1,
            points: vec![(-1.0, 20.0), (0.0, 20.0), (1.0, 20.0)],
        },
    ];
    if !close(visage(&hand, 100.0, VisageMode::Include).unwrap(), 65.0) {
        failed.push("visage include");
    }
    if !close(visage(&hand, 100.0, VisageMode::Exclude).unwrap(), 78.0) {
        failed.push("visage exclude");
    }
    if !close(alignment_drift(78.5, 65.5), 13.0) {
        failed.push("drift");
    }
    let m = AccuracyMatrix::new(
        vec!["s1".into(), "s2".into()],
        vec!["a".into(), "b".into()],
        vec![vec![100.0, 0.0], vec![90.0, 100.0]],
    )
    .unwrap();
    let s = continual_summary(&m, &[0, 1]).unwrap();
    if !(close(s.bwt, -10.0) && close(s.fm, 10.0) && close(s.max_drop, 10.0) && close(s.avg_perf, 72.5)) {
        failed.push("continual");
    }
    let r = [3.0, -1.0, 0.5, 2.0];
    let all = [0, 1, 2, 3];
    // Top-2 by |r| are coordinates 0 and 3: (3 + 2) / (sqrt(13) sqrt(2)).
    if !close(
        topk_cosine(&[1.0, 1.0, 1.0, 1.0], &r, &all, 2).unwrap(),
        5.0 / 26f64.sqrt(),
    ) {
        failed.push("topk mixed");
    }
    if !close(topk_cosine(&[-6.0, 9.0, 7.0, -4.0], &r, &all, 2).unwrap(), -1.0) {
        failed.push("topk antiparallel");
    }
    if !close(topk_cosine(&[0.0, 5.0, 0.0, 0.0], &r, &[1, 2], 1).unwrap(), -1.0) {
        failed.push("topk subset");
    }
    let detail = if failed.is_empty() {
        "all fixtures exact".to_string()
    } else {
        format!("failed: {}", failed.join(", "))
    };
    Verdict::new(failed.is_empty(), detail)
}

struct SeedResult {
    pre_asr: f64,
    aligned_asr: f64,
    methods: Vec<(Method, AlignmentOutcome)>,
    drop_all: f64,
    drop_moderate: f64,
}

impl SeedResult {
    fn get(&self, name: &str) -> &AlignmentOutcome {
        &self.methods.iter().find(|(m, _)| m.to_string() == name).unwrap().1
    }
}

fn study_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    // Fewer landscape directions than the full study to fit the time budget.
    cfg.n_directions = 20;
    cfg
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> SeedResult {
    let prep = prepare(cfg, seed).unwrap();
    let pre_asr = driftlab::safety::attack_success_rate(&prep.pretrained, &prep.attack).unwrap();
    let aligned_asr = driftlab::safety::attack_success_rate(&prep.aligned, &prep.attack).unwrap();
    let (base, _) = evaluate_aligned(cfg, &prep).unwrap();
    let methods = [
        "all", "random", "high", "low", "moderate", "clip:0.1", "clip:0.5", "clip:1",
    ]
    .iter()
    .map(|m| {
        let m: Method = m.parse().unwrap();
        (
            m,
            run_alignment_method(cfg, &prep, m, cfg.rho, base.visage, true)
                .unwrap()
                .0,
        )
    })
    .collect();
    let drop = |m: &str| {
        let (o, _, _) = run_continual_method(cfg, &prep, m.parse().unwrap()).unwrap();
        o.summary.expect("three stages give a summary").max_drop
    };
    SeedResult {
        pre_asr,
        aligned_asr,
        methods,
        drop_all: drop("all"),
        drop_moderate: drop("moderate"),
    }
}

fn c4_world(rs: &[SeedResult]) -> Verdict {
    let ok: Vec<bool> = rs.iter().map(|r| r.pre_asr > 0.9 && r.aligned_asr < 0.1).collect();
    let detail: Vec<String> = rs
        .iter()
        .map(|r| format!("{:.2}/{:.2}", r.pre_asr, r.aligned_asr))
        .collect();
    Verdict::new(
        count(&ok) >= 4,
        format!("{}/5 seeds; pretrained/aligned ASR {}", count(&ok), detail.join(" ")),
    )
}

fn c5_directional(rs: &[SeedResult]) -> Verdict {
    let asr: Vec<bool> = rs
        .iter()
        .map(|r| {
            r.get("high").report.asr > r.get("random").report.asr
                && r.get("random").report.asr > r.get("moderate").report.asr
        })
        .collect();
    let vis: Vec<bool> = rs
        .iter()
        .map(|r| {
            r.get("moderate").report.visage > r.get("random").report.visage
                && r.get("random").report.visage > r.get("high").report.visage
        })
        .collect();
    let kl: Vec<bool> = rs
        .iter()
        .map(|r| r.get("moderate").report.kl_aligned < r.get("high").report.kl_aligned)
        .collect();
    let pass = count(&asr) >= 4 && count(&vis) >= 4 && count(&kl) >= 4;
    Verdict::new(
        pass,
        format!(
            "ASR order {}/5, VISAGE order {}/5, KL order {}/5",
            count(&asr),
            count(&vis),
            count(&kl)
        ),
    )
}

fn c6_low(rs: &[SeedResult]) -> Verdict {
    let ok: Vec<bool> = rs
        .iter()
        .map(|r| {
            let (lo, md) = (r.get("low"), r.get("moderate"));
            lo.report.asr <= md.report.asr && lo.accuracy <= md.accuracy
        })
        .collect();
    let detail: Vec<String> = rs
        .iter()
        .map(|r| {
            let (lo, md) = (r.get("low"), r.get("moderate"));
            format!(
                "{:.3}/{:.3} {:.1}/{:.1}",
                lo.report.asr, md.report.asr, lo.accuracy, md.accuracy
            )
        })
        .collect();
    let mut v = Verdict::new(
        count(&ok) >= 3,
        format!("{}/5 seeds; low/moderate ASR acc: {}", count(&ok), detail.join(", ")),
    );
    v.soft = true;
    v
}

fn c7_clipping(rs: &[SeedResult]) -> Verdict {
    let ok: Vec<bool> = rs
        .iter()
        .map(|r| {
            let best = ["clip:0.1", "clip:0.5", "clip:1"]
                .iter()
                .map(|m| r.get(m).report.asr)
                .fold(f64::INFINITY, f64::min);
            best > r.get("moderate").report.asr
        })
        .collect();
    Verdict::new(count(&ok) >= 4, format!("{}/5 seeds", count(&ok)))
}

fn c8_continual(rs: &[SeedResult]) -> Verdict {
    let ok: Vec<bool> = rs.iter().map(|r| r.drop_moderate < r.drop_all).collect();
    let detail: Vec<String> = rs
        .iter()
        .map(|r| format!("{:.0}/{:.0}", r.drop_moderate, r.drop_all))
        .collect();
    Verdict::new(
        count(&ok) >= 3,
        format!(
            "{}/5 seeds; moderate/baseline max drop {}",
            count(&ok),
            detail.join(" ")
        ),
    )
}

fn c9_direction() -> Verdict {
    let dim = 2000;
    let n = 500;
    let cfg = DirectionStudyConfig {
        n_samples: n,
        ..DirectionStudyConfig::default()
    };
    let subsets = vec![("all".to_string(), (0..dim).collect::<Vec<_>>())];
    let gauss = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(rng)).collect() };
    let unit = |v: Vec<f64>| -> Vec<f64> {
        let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / s).collect()
    };
    let norm_dist = LogNormal::new(0.0, 0.5).unwrap();

    // Planted: the top fifth by norm points along r, the rest are noise.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let r = unit(gauss(&mut rng));
    let mut norms: Vec<f64> = (0..n).map(|_| norm_dist.sample(&mut rng)).collect();
    let mut sorted = norms.clone();
    sorted.sort_by(f64::total_cmp);
    let cut = sorted[n - n / 5];
    let grads: Vec<Vec<f64>> = norms
        .iter_mut()
        .map(|g| {
            let noise = unit(gauss(&mut rng));
            let dir: Vec<f64> = if *g >= cut {
                unit(r.iter().zip(&noise).map(|(a, b)| 0.9 * a + 0.1 * b).collect())
            } else {
                noise
            };
            dir.into_iter().map(|x| x * *g).collect()
        })
        .collect();
    let planted = &direction_study_from_gradients(
        &grads,
        &r,
        &subsets,
        &DirectionStudyConfig {
            seed: 99,
            ..cfg.clone()
        },
    )
    .unwrap()[0];
    let planted_ok = planted.r > 0.3 && planted.p < 0.01;

    let mut null_ok = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let r = unit(gauss(&mut rng));
        let grads: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let g = norm_dist.sample(&mut rng);
                unit(gauss(&mut rng)).into_iter().map(|x| x * g).collect()
            })
            .collect();
        let row = &direction_study_from_gradients(&grads, &r, &subsets, &DirectionStudyConfig { seed, ..cfg.clone() })
            .unwrap()[0];
        if row.r.abs() < 0.1 && row.p > 0.05 {
            null_ok += 1;
        }
    }
    Verdict::new(
        planted_ok && null_ok >= 9,
        format!(
            "planted r {:.3} p {:.4}; null within bounds in {null_ok}/10 seeds",
            planted.r, planted.p
        ),
    )
}

fn c10_determinism() -> Verdict {
    let text = include_str!("../../../configs/tiny.conf");
    let root = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    for name in ["a", "b"] {
        let mut cfg = ExperimentConfig::parse(text).unwrap();
        cfg.out = root.path().join(name);
        run_experiment(&cfg, 1).unwrap();
        emit_report(&cfg.out).unwrap();
        hashes.push(tree_hash(&cfg.out).unwrap());
    }
    Verdict::new(
        hashes[0] == hashes[1],
        format!("tree hashes {} / {}", &hashes[0][..12], &hashes[1][..12]),
    )
}

fn main() -> ExitCode {
    let mut hard_fail = false;
    let mut report = |id: &str, name: &str, t: Instant, v: Verdict| {
        let tag = match (v.pass, v.soft) {
            (true, _) => "PASS",
            (false, true) => "FAIL (soft)",
            (false, false) => "FAIL",
        };
        if !v.pass && !v.soft {
            hard_fail = true;
        }
        println!("{tag} {id} {name}: {} [{:.1}s]", v.detail, t.elapsed().as_secs_f64());
    };

    let t = Instant::now();
    report("C1", "autodiff vs finite differences", t, c1_autodiff());
    let t = Instant::now();
    report("C2", "moderate selection exactness", t, c2_algorithm());
    let t = Instant::now();
    report("C3", "metric fixtures", t, c3_fixtures());

    let t = Instant::now();
    let cfg = study_config();
    let rs: Vec<SeedResult> = SEEDS.iter().map(|&s| run_seed(&cfg, s)).collect();
    let shared = t.elapsed().as_secs_f64();
    println!("     (shared per-seed pipeline for C4-C8: {shared:.1}s)");
    let t = Instant::now();
    report("C4", "world validity gates", t, c4_world(&rs));
    report("C5", "selection orderings after fine-tuning", t, c5_directional(&rs));
    report("C6", "low-norm tradeoff", t, c6_low(&rs));
    report("C7", "clipping insufficiency", t, c7_clipping(&rs));
    report("C8", "continual max drop", t, c8_continual(&rs));

    let t = Instant::now();
    report("C9", "direction study machinery", t, c9_direction());
    let t = Instant::now();
    report("C10", "byte-identical reruns", t, c10_determinism());

    if hard_fail {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
