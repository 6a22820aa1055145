//! Acceptance criteria, one pass/fail line each.
//!
//! Runs as a plain binary so the summary lines are printed even when every
//! criterion passes. Exits nonzero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use atskd::harness::{self, Condition, Experiment, ExperimentConfig, Role};
use atskd::kd::{self, LabelMode, LossConfig};
use atskd::metrics;
use atskd::scaling::{self, LogitRecord, Temperature, TemperaturePair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn scaled_normal_record(rng: &mut ChaCha8Rng, c: usize) -> LogitRecord {
    let scale = rng.random_range(0.5..5.0);
    let f = (0..c).map(|_| scale * normal(rng)).collect();
    LogitRecord::new(f, rng.random_range(0..c)).unwrap()
}

fn target_max_record(rng: &mut ChaCha8Rng, c: usize) -> LogitRecord {
    let (mut f, y) = scaled_normal_record(rng, c).into_parts();
    let top = (0..c).fold(0, |b, i| if f[i] > f[b] { i } else { b });
    f.swap(top, y);
    LogitRecord::new(f, y).unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const GRID: [f64; 7] = [0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 10.0];

fn c1_square_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let temps: Vec<Temperature> = [0.5, 1.0, 4.0, 16.0]
        .iter()
        .map(|&t| Temperature::uniform(t).unwrap())
        .chain(harness::default_ats_grid().iter().map(|&[a, b]| Temperature::asymmetric(a, b).unwrap()))
        .collect();
    let mut worst = 0.0f64;
    let mut failures = 0;
    for i in 0..10_000 {
        let c = [3, 10, 100][i % 3];
        let r = scaled_normal_record(&mut rng, c);
        for &t in &temps {
            let s = metrics::decomposition_stats(&r, t).unwrap();
            let k = (c - 1) as f64;
            let rhs = k * k * s.derived_avg * s.derived_avg * s.inherent_var;
            let rel = if s.derived_var == rhs {
                0.0
            } else {
                (s.derived_var - rhs).abs() / s.derived_var.abs().max(rhs.abs())
            };
            worst = worst.max(rel);
            if rel > 1e-10 {
                failures += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        failures == 0 && elapsed < Duration::from_secs(10),
        format!("10000 records x {} temperatures, max rel err {worst:.2e}, {failures} failures, {elapsed:.2?}", temps.len()),
    )
}

fn c2_whole_variance_monotone() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut violations = 0;
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let r = scaled_normal_record(&mut rng, [3, 10, 100][i % 3]);
        let v: Vec<f64> = GRID
            .iter()
            .map(|&t| metrics::whole_variance(&scaling::softmax_ts(&r, t).unwrap()))
            .collect();
        for w in v.windows(2) {
            worst = worst.max(w[1] - w[0]);
            if w[1] > w[0] + 1e-14 {
                violations += 1;
            }
        }
    }
    check(violations == 0, format!("1000 records, {violations} violations, max increase {worst:.2e}"))
}

fn c3_target_prob_and_average() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut py_bad, mut da_bad, mut limit_bad) = (0, 0, 0);
    let mut worst_limit = 0.0f64;
    for i in 0..1000 {
        let c = [3, 10, 100][i % 3];
        let r = target_max_record(&mut rng, c);
        let s: Vec<_> = GRID
            .iter()
            .map(|&t| metrics::decomposition_stats(&r, Temperature::uniform(t).unwrap()).unwrap())
            .collect();
        for w in s.windows(2) {
            if w[1].target_prob > w[0].target_prob + 1e-14 {
                py_bad += 1;
            }
            if w[1].derived_avg < w[0].derived_avg - 1e-14 {
                da_bad += 1;
            }
        }
        let hot = metrics::decomposition_stats(&r, Temperature::uniform(1e6).unwrap()).unwrap();
        let gap = (hot.derived_avg - 1.0 / c as f64).abs();
        worst_limit = worst_limit.max(gap);
        if gap > 1e-4 {
            limit_bad += 1;
        }
    }
    check(
        py_bad + da_bad + limit_bad == 0,
        format!("1000 records: p_y violations {py_bad}, e(q) violations {da_bad}, limit failures {limit_bad} (max gap {worst_limit:.2e})"),
    )
}

fn c4_tau_derivative() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..500 {
        let r = scaled_normal_record(&mut rng, [3, 10, 100][i % 3]);
        let tau = rng.random_range(0.5..10.0);
        let d = scaling::softmax_ts_tau_derivative(&r, tau).unwrap();
        let up = scaling::softmax_ts(&r, tau + h).unwrap();
        let down = scaling::softmax_ts(&r, tau - h).unwrap();
        for (c, dc) in d.iter().enumerate() {
            let fd = (up.probs()[c] - down.probs()[c]) / (2.0 * h);
            worst = worst.max((dc - fd).abs());
        }
    }
    check(worst <= 1e-6, format!("500 records, max abs err {worst:.2e}"))
}

fn c5_kd_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let h = 1e-5;
    let (mut worst, mut worst_sum, mut cases) = (0.0f64, 0.0f64, 0);
    for _ in 0..40 {
        let c = rng.random_range(2..12);
        let y = rng.random_range(0..c);
        let mut draw = || (0..c).map(|_| rng.random_range(-10.0..10.0)).collect::<Vec<f64>>();
        let teacher = LogitRecord::new(draw(), y).unwrap();
        let student = LogitRecord::new(draw(), y).unwrap();
        for lambda in [0.0, 0.5, 1.0] {
            for squared in [false, true] {
                for label_mode in [LabelMode::Full, LabelMode::Flattened] {
                    let configs = [
                        LossConfig::ts(lambda, 4.0).unwrap(),
                        LossConfig::ts(lambda, 2.0).unwrap().with_student_temp(1.0),
                        LossConfig::ats(lambda, TemperaturePair::new(4.0, 2.0).unwrap()).unwrap(),
                        LossConfig::ats(lambda, TemperaturePair::new(1.5, 3.0).unwrap())
                            .unwrap()
                            .with_student_temp(2.5),
                    ];
                    for cfg in configs {
                        let cfg = cfg.with_tau_squared(squared).with_label_mode(label_mode);
                        let g = kd::grad_student_logits(&teacher, &student, &cfg).unwrap();
                        for i in 0..c {
                            let mut up = student.logits().to_vec();
                            let mut down = up.clone();
                            up[i] += h;
                            down[i] -= h;
                            let lu = kd::combined_loss(&teacher, &LogitRecord::new(up, y).unwrap(), &cfg).unwrap();
                            let ld = kd::combined_loss(&teacher, &LogitRecord::new(down, y).unwrap(), &cfg).unwrap();
                            worst = worst.max((g[i] - (lu - ld) / (2.0 * h)).abs());
                        }
                        worst_sum = worst_sum.max(g.iter().sum::<f64>().abs());
                        cases += 1;
                    }
                }
            }
        }
    }
    check(
        worst <= 1e-6 && worst_sum <= 1e-10,
        format!("{cases} cases, max abs err {worst:.2e}, max |sum| {worst_sum:.2e}"),
    )
}

fn c6_decomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let c = rng.random_range(2..20);
        let y = rng.random_range(0..c);
        let t = LogitRecord::new((0..c).map(|_| 3.0 * normal(&mut rng)).collect(), y).unwrap();
        let s = LogitRecord::new((0..c).map(|_| 3.0 * normal(&mut rng)).collect(), y).unwrap();
        let tau = rng.random_range(0.5..8.0);
        let pt = scaling::softmax_ts(&t, tau).unwrap();
        let ps = scaling::softmax_ts(&s, tau).unwrap();
        let terms = kd::kd_decompose(&pt, &ps, y).unwrap();
        let direct: f64 = pt
            .probs()
            .iter()
            .zip(ps.probs())
            .map(|(a, b)| -a * b.ln())
            .sum();
        let sum = terms.correct_guidance + terms.smooth_regularization + terms.class_discriminability;
        worst = worst.max((sum - direct).abs());
    }
    check(worst <= 1e-12, format!("10000 pairs, max abs err {worst:.2e}"))
}

fn c7_constructions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let (mut raise_bad, mut contract_bad) = (0, 0);
    for _ in 0..1000 {
        let c = rng.random_range(3..30);
        let y = rng.random_range(0..c);
        let tau = rng.random_range(0.5..4.0);
        let temp = Temperature::uniform(tau).unwrap();
        let f: Vec<f64> = (0..c).map(|_| 2.0 * normal(&mut rng)).collect();
        let base = metrics::decomposition_stats(&LogitRecord::new(f.clone(), y).unwrap(), temp).unwrap();

        let mut raised = f.clone();
        raised[y] += rng.random_range(0.1..3.0);
        let s = metrics::decomposition_stats(&LogitRecord::new(raised, y).unwrap(), temp).unwrap();
        if s.derived_var >= base.derived_var {
            raise_bad += 1;
        }

        let mean = (f.iter().sum::<f64>() - f[y]) / (c - 1) as f64;
        let shrink = rng.random_range(0.05..0.95);
        let contracted: Vec<f64> = f
            .iter()
            .enumerate()
            .map(|(i, v)| if i == y { *v } else { mean + shrink * (v - mean) })
            .collect();
        let s = metrics::decomposition_stats(&LogitRecord::new(contracted, y).unwrap(), temp).unwrap();
        if s.derived_var >= base.derived_var {
            contract_bad += 1;
        }
    }
    check(
        raise_bad + contract_bad == 0,
        format!("1000 constructions per branch: raise violations {raise_bad}, contraction violations {contract_bad}"),
    )
}

fn desk() -> &'static Experiment {
    static EXP: OnceLock<Experiment> = OnceLock::new();
    EXP.get_or_init(|| {
        let start = Instant::now();
        let exp = harness::run_experiment(&ExperimentConfig::desk_default(), 1).expect("desk experiment runs");
        println!("     desk experiment: {} rows in {:.1?} on one thread", exp.report.rows.len(), start.elapsed());
        exp
    })
}

fn c8_dv_unimodal() -> Outcome {
    let exp = desk();
    let report = &exp.report;
    let mut details = Vec::new();
    let mut ok = true;
    let mut over_confident = 0;
    for t in report.teachers.iter().filter(|t| t.role == Role::Teacher.name()) {
        let flagged = report
            .overconfidence
            .iter()
            .any(|o| o.seed == t.seed && o.over_confident);
        if !flagged {
            continue;
        }
        over_confident += 1;
        let dv: Vec<f64> = t.ts_curve.iter().map(|p| p.dv).collect();
        let peaks = harness::count_local_maxima(&dv, 1e-12);
        ok &= peaks == 1;
        details.push(format!("seed {}: {peaks} max", t.seed));
    }
    check(
        ok && over_confident > 0,
        format!("{over_confident} over-confident teachers; {}", details.join(", ")),
    )
}

fn c9_phenomena() -> Outcome {
    let report = &desk().report;
    let ratios: Vec<f64> = report.overconfidence.iter().map(|o| o.ratio).collect();
    let a = !ratios.is_empty() && ratios.iter().all(|&r| r >= harness::OVERCONFIDENCE_RATIO);
    let best = |c| harness::best_grid_median(report, c).map_or(f64::NAN, |b| b.2);
    let (kd, ils, ats, kd_s1) = (
        best(Condition::Kd),
        best(Condition::Ils),
        best(Condition::Ats),
        best(Condition::KdS1),
    );
    let b = ils < kd;
    let c = ats >= kd;
    check(
        a && b && c,
        format!(
            "(a) f_y ratios {:?} {}; (b) ils {ils:.4} < kd {kd:.4} {}; (c) ats {ats:.4} >= kd {kd:.4} {} [kd-s1 {kd_s1:.4}]",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>(),
            verdict(a),
            verdict(b),
            verdict(c),
        ),
    )
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILS"
    }
}

fn c10_agreement() -> Outcome {
    let exact = metrics::kendall_agreement_probability(0.75) == 0.875;
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut monotone = true;
    for _ in 0..200 {
        let n = rng.random_range(2..40);
        let a: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let b: Vec<f64> = a.iter().map(|x| (2.0 * x).exp() + x.powi(3)).collect();
        monotone &= metrics::spearman(&a, &b).unwrap() == 1.0 && metrics::kendall(&a, &b).unwrap() == 1.0;
    }
    let report = &desk().report;
    let mut separated = !report.agreement.is_empty();
    for g in &report.agreement {
        separated &= g.peer.spearman > g.shuffled_control.spearman
            && g.peer.kendall > g.shuffled_control.kendall
            && g.peer.topk_overlap > g.shuffled_control.topk_overlap
            && g.peer.l1_distance < g.shuffled_control.l1_distance;
    }
    let summary: Vec<String> = report
        .agreement
        .iter()
        .map(|g| format!("seed {} peer kendall {:.3} vs control {:.3}", g.seed, g.peer.kendall, g.shuffled_control.kendall))
        .collect();
    check(
        exact && monotone && separated,
        format!(
            "0.75 -> 0.875 {}; monotone invariance {}; teacher pairs vs control {} ({})",
            verdict(exact),
            verdict(monotone),
            verdict(separated),
            summary.join(", ")
        ),
    )
}

fn c11_determinism() -> Outcome {
    let mut cfg = ExperimentConfig::desk_default();
    cfg.seeds = vec![0, 1];
    cfg.teacher.dims = vec![20, 32, 10];
    cfg.teacher.train.epochs = 4;
    if let Some(s) = cfg.small_teacher.as_mut() {
        s.train.epochs = 4;
    }
    cfg.student.train.epochs = 4;
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (i, jobs) in [1, 2].into_iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let exp = harness::sweep(&cfg, jobs).unwrap();
        let mut files = harness::emit_report(&exp.report, &out).unwrap();
        for t in &exp.teachers {
            t.save(&out.join("teachers")).unwrap();
        }
        let ledger = out.join("ledger.csv");
        harness::write_ledger(&harness::verify_propositions(100, 3).unwrap(), &ledger).unwrap();
        files.push(ledger);
        let mut teacher_files: Vec<_> = std::fs::read_dir(out.join("teachers"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        teacher_files.sort();
        files.extend(teacher_files);
        outputs.push(files);
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    let mut identical = a.len() == b.len();
    for (x, y) in a.iter().zip(b) {
        identical &= x.file_name() == y.file_name() && std::fs::read(x).unwrap() == std::fs::read(y).unwrap();
    }
    check(identical, format!("{} report files compared byte for byte across two runs", a.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("1 variance square identity", c1_square_identity),
        ("2 whole-vector variance falls with tau", c2_whole_variance_monotone),
        ("3 target probability and derived average monotone", c3_target_prob_and_average),
        ("4 temperature derivative", c4_tau_derivative),
        ("5 KD gradient", c5_kd_gradient),
        ("6 decomposition exactness", c6_decomposition),
        ("7 target raise and wrong-logit contraction", c7_constructions),
        ("8 DV curve unimodal", c8_dv_unimodal),
        ("9 desk-scale phenomena", c9_phenomena),
        ("10 agreement metrics", c10_agreement),
        ("11 determinism", c11_determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
