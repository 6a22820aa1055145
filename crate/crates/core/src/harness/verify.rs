//! Randomized numerical checks of the scaling, metrics and loss identities.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kd::{self, LabelMode, LossConfig};
use crate::metrics;
use crate::scaling::{self, LogitRecord, Temperature, TemperaturePair};

/// Outcome of one named check over `total` randomized cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub check_name: String,
    pub passed: usize,
    pub total: usize,
    /// Largest observed amount by which a case exceeded its tolerance
    /// (0 when every case passed with margin).
    pub max_violation: f64,
}

impl LedgerEntry {
    pub fn all_passed(&self) -> bool {
        self.passed == self.total
    }
}

struct Tally {
    name: &'static str,
    passed: usize,
    total: usize,
    max_violation: f64,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            passed: 0,
            total: 0,
            max_violation: 0.0,
        }
    }

    /// Records a case whose error is `err` against tolerance `tol`.
    fn within(&mut self, err: f64, tol: f64) {
        self.total += 1;
        if err <= tol {
            self.passed += 1;
        } else {
            let excess = if err.is_nan() { f64::INFINITY } else { err - tol };
            self.max_violation = self.max_violation.max(excess);
        }
    }

    fn holds(&mut self, ok: bool) {
        self.within(if ok { 0.0 } else { 1.0 }, 0.5);
    }

    fn finish(self) -> LedgerEntry {
        LedgerEntry {
            check_name: self.name.to_string(),
            passed: self.passed,
            total: self.total,
            max_violation: self.max_violation,
        }
    }
}

const CLASS_COUNTS: [usize; 3] = [3, 10, 100];
const TAU_GRID: [f64; 7] = [0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 10.0];

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_record(rng: &mut ChaCha8Rng, max_scale: f64) -> LogitRecord {
    let c = CLASS_COUNTS[rng.random_range(0..CLASS_COUNTS.len())];
    let scale = rng.random_range(0.5..max_scale);
    let logits = (0..c).map(|_| scale * normal(rng)).collect();
    LogitRecord::new(logits, rng.random_range(0..c)).expect("finite logits")
}

/// Moves the largest logit onto the label so the target is the maximum.
fn with_target_max(record: LogitRecord) -> LogitRecord {
    let (mut f, y) = record.into_parts();
    let top = (0..f.len()).fold(0, |b, i| if f[i] > f[b] { i } else { b });
    f.swap(top, y);
    if f.iter().enumerate().any(|(i, v)| i != y && *v == f[y]) {
        f[y] += 1e-3;
    }
    LogitRecord::new(f, y).expect("finite logits")
}

fn random_temperature(rng: &mut ChaCha8Rng) -> Temperature {
    if rng.random_bool(0.5) {
        Temperature::Uniform([0.5, 1.0, 4.0, 16.0][rng.random_range(0..4)])
    } else {
        let a = rng.random_range(0.5..8.0);
        let b = rng.random_range(0.5..8.0);
        Temperature::Asymmetric(TemperaturePair::new(a, b).expect("positive"))
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

/// Runs every check on `sample_count` randomized cases each.
pub fn verify_propositions(sample_count: usize, seed: u64) -> Result<Vec<LedgerEntry>> {
    if sample_count == 0 {
        return Err(Error::contract("sample_count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ledger = Vec::new();

    let mut norm = Tally::new("normalization");
    let mut rank = Tally::new("ts_rank_preservation");
    let mut reduction = Tally::new("ats_reduces_to_ts");
    let mut renorm = Tally::new("ats_wrong_block_is_tau2_softmax");
    let mut identity = Tally::new("dv_square_identity");
    for _ in 0..sample_count {
        let r = random_record(&mut rng, 5.0);
        let t = random_temperature(&mut rng);
        let p = scaling::soften(&r, t)?;
        norm.within((p.probs().iter().sum::<f64>() - 1.0).abs(), 1e-12);

        let tau = rng.random_range(0.1..20.0);
        let ts = scaling::softmax_ts(&r, tau)?;
        let f = r.logits();
        let order_ok = (0..f.len()).all(|i| {
            (0..f.len()).all(|j| f[i] >= f[j] || ts.probs()[i] <= ts.probs()[j])
        });
        rank.holds(order_ok);

        let ats = scaling::softmax_ats(&r, TemperaturePair::new(tau, tau)?)?;
        let diff = ts
            .probs()
            .iter()
            .zip(ats.probs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        reduction.within(diff, 1e-12);

        let y = r.label();
        let wrong = scaling::without_index(p.probs(), y);
        let mass: f64 = wrong.iter().sum();
        let inherent = scaling::renorm_wrong_probs(&r, t.wrong_tau())?;
        let diff = wrong
            .iter()
            .zip(&inherent)
            .map(|(q, qt)| (q / mass - qt).abs())
            .fold(0.0, f64::max);
        renorm.within(diff, 1e-12);

        let s = metrics::decomposition_stats(&r, t)?;
        let c1 = (r.num_classes() - 1) as f64;
        let rhs = c1 * c1 * s.derived_avg * s.derived_avg * s.inherent_var;
        identity.within(rel_err(s.derived_var, rhs), 1e-10);
    }
    ledger.extend([norm, rank, reduction, renorm, identity].map(Tally::finish));

    let mut whole_var = Tally::new("whole_variance_non_increasing_in_tau");
    let mut py = Tally::new("target_prob_non_increasing_in_tau");
    let mut da = Tally::new("derived_average_non_decreasing_in_tau");
    let mut limit = Tally::new("derived_average_high_tau_limit");
    let mut dpy = Tally::new("target_prob_tau_derivative_non_positive");
    for _ in 0..sample_count {
        let r = random_record(&mut rng, 5.0);
        let mut prev: Option<f64> = None;
        let mut worst = 0.0f64;
        for &tau in &TAU_GRID {
            let v = metrics::whole_variance(&scaling::softmax_ts(&r, tau)?);
            if let Some(p) = prev {
                worst = worst.max(v - p);
            }
            prev = Some(v);
        }
        whole_var.within(worst, 1e-14);

        let r = with_target_max(r);
        let (mut worst_py, mut worst_da) = (0.0f64, 0.0f64);
        let mut prev: Option<(f64, f64)> = None;
        for &tau in &TAU_GRID {
            let s = metrics::decomposition_stats(&r, Temperature::uniform(tau)?)?;
            if let Some((p, e)) = prev {
                worst_py = worst_py.max(s.target_prob - p);
                worst_da = worst_da.max(e - s.derived_avg);
            }
            prev = Some((s.target_prob, s.derived_avg));
        }
        py.within(worst_py, 1e-14);
        da.within(worst_da, 1e-14);
        let s = metrics::decomposition_stats(&r, Temperature::uniform(1e6)?)?;
        limit.within((s.derived_avg - 1.0 / r.num_classes() as f64).abs(), 1e-4);
        let tau = rng.random_range(0.2..10.0);
        let d = scaling::softmax_ts_tau_derivative(&r, tau)?;
        dpy.within(d[r.label()], 0.0);
    }
    ledger.extend([whole_var, py, da, limit, dpy].map(Tally::finish));

    let mut deriv = Tally::new("tau_derivative_vs_finite_difference");
    for _ in 0..sample_count {
        let r = random_record(&mut rng, 3.0);
        let tau = rng.random_range(0.5..8.0);
        let h = 1e-5;
        let analytic = scaling::softmax_ts_tau_derivative(&r, tau)?;
        let up = scaling::softmax_ts(&r, tau + h)?;
        let down = scaling::softmax_ts(&r, tau - h)?;
        let err = analytic
            .iter()
            .zip(up.probs().iter().zip(down.probs()))
            .map(|(a, (u, d))| (a - (u - d) / (2.0 * h)).abs())
            .fold(0.0, f64::max);
        deriv.within(err, 1e-6);
    }
    ledger.push(deriv.finish());

    let mut grad = Tally::new("kd_gradient_vs_finite_difference");
    let mut grad_sum = Tally::new("kd_gradient_sums_to_zero");
    let mut decomp = Tally::new("kd_decomposition_exact");
    let mut ils = Tally::new("ils_gap_is_discriminability_term");
    for _ in 0..sample_count {
        let c = rng.random_range(2..12);
        let y = rng.random_range(0..c);
        let mut logits = || (0..c).map(|_| rng.random_range(-10.0..10.0)).collect::<Vec<f64>>();
        let teacher = LogitRecord::new(logits(), y)?;
        let student = LogitRecord::new(logits(), y)?;
        let lambda = [0.0, 0.5, 1.0][rng.random_range(0..3)];
        let base = if rng.random_bool(0.5) {
            LossConfig::ts(lambda, rng.random_range(0.5..8.0))?
        } else {
            LossConfig::ats(lambda, TemperaturePair::new(rng.random_range(0.5..8.0), rng.random_range(0.5..8.0))?)?
        };
        let cfg = base
            .with_tau_squared(rng.random_bool(0.5))
            .with_label_mode(if rng.random_bool(0.5) { LabelMode::Full } else { LabelMode::Flattened });

        let g = kd::grad_student_logits(&teacher, &student, &cfg)?;
        let h = 1e-5;
        let mut err = 0.0f64;
        for i in 0..c {
            let mut up = student.logits().to_vec();
            let mut down = up.clone();
            up[i] += h;
            down[i] -= h;
            let lu = kd::combined_loss(&teacher, &LogitRecord::new(up, y)?, &cfg)?;
            let ld = kd::combined_loss(&teacher, &LogitRecord::new(down, y)?, &cfg)?;
            err = err.max((g[i] - (lu - ld) / (2.0 * h)).abs());
        }
        grad.within(err, 1e-6);
        grad_sum.within(g.iter().sum::<f64>().abs(), 1e-10);

        let pt = scaling::soften(&teacher, cfg.teacher_temps)?;
        let log_ps = scaling::log_soften(&student, Temperature::uniform(cfg.student_temp)?)?;
        let ps = scaling::soften(&student, Temperature::uniform(cfg.student_temp)?)?;
        let terms = kd::kd_decompose(&pt, &ps, y)?;
        let direct: f64 = pt
            .probs()
            .iter()
            .zip(&log_ps)
            .map(|(p, lp)| if *p == 0.0 { 0.0 } else { -p * lp })
            .sum();
        let sum = terms.correct_guidance + terms.smooth_regularization + terms.class_discriminability;
        decomp.within((sum - direct).abs().max((terms.total - direct).abs()), 1e-12);

        let cfg_full = cfg.with_label_mode(LabelMode::Full);
        let gap = kd::kd_loss(&teacher, &student, &cfg_full)? - kd::ils_loss(&teacher, &student, &cfg_full)?;
        ils.within((gap - cfg.lambda * cfg.scale() * terms.class_discriminability).abs(), 1e-12);
    }
    ledger.extend([grad, grad_sum, decomp, ils].map(Tally::finish));

    let mut raise = Tally::new("raising_target_logit_lowers_dv");
    let mut contract = Tally::new("contracting_wrong_logits_lowers_dv");
    let mut remark_da = Tally::new("raising_target_logit_lowers_da");
    let mut remark_iv = Tally::new("contracting_wrong_logits_lowers_iv");
    for _ in 0..sample_count {
        let c = rng.random_range(3..20);
        let y = rng.random_range(0..c);
        let tau = rng.random_range(0.5..4.0);
        let temp = Temperature::uniform(tau)?;
        let mut f: Vec<f64> = (0..c).map(|_| 2.0 * normal(&mut rng)).collect();
        let base = LogitRecord::new(f.clone(), y)?;
        let s0 = metrics::decomposition_stats(&base, temp)?;

        f[y] += rng.random_range(0.1..2.0);
        let raised = metrics::decomposition_stats(&LogitRecord::new(f.clone(), y)?, temp)?;
        raise.holds(raised.derived_var < s0.derived_var);
        remark_da.holds(raised.derived_avg < s0.derived_avg);

        let mut f = base.logits().to_vec();
        let wrong_mean = (f.iter().sum::<f64>() - f[y]) / (c - 1) as f64;
        let shrink = rng.random_range(0.1..0.9);
        for (i, v) in f.iter_mut().enumerate() {
            if i != y {
                *v = wrong_mean + shrink * (*v - wrong_mean);
            }
        }
        let contracted = metrics::decomposition_stats(&LogitRecord::new(f, y)?, temp)?;
        contract.holds(contracted.derived_var < s0.derived_var);
        remark_iv.holds(contracted.inherent_var < s0.inherent_var);
    }
    ledger.extend([raise, contract, remark_da, remark_iv].map(Tally::finish));

    let mut rank_metrics = Tally::new("rank_correlations_invariant_to_monotone_maps");
    for _ in 0..sample_count {
        let n = rng.random_range(2..30);
        let a: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let b: Vec<f64> = a.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
        let sp = metrics::spearman(&a, &b)?;
        let kt = metrics::kendall(&a, &b)?;
        rank_metrics.within((sp - 1.0).abs().max((kt - 1.0).abs()), 1e-12);
    }
    ledger.push(rank_metrics.finish());

    let mut agree = Tally::new("kendall_agreement_probability");
    agree.within((metrics::kendall_agreement_probability(0.75) - 0.875).abs(), 0.0);
    ledger.push(agree.finish());
    Ok(ledger)
}

pub const LEDGER_HEADER: &str = "check_name,passed,total,max_violation";

pub fn format_ledger(entries: &[LedgerEntry]) -> String {
    let mut out = String::from(LEDGER_HEADER);
    out.push('\n');
    for e in entries {
        let _ = writeln!(out, "{},{},{},{}", e.check_name, e.passed, e.total, e.max_violation);
    }
    out
}

pub fn write_ledger(entries: &[LedgerEntry], path: &Path) -> Result<()> {
    fs::write(path, format_ledger(entries)).map_err(|e| Error::io(path, e))
}
