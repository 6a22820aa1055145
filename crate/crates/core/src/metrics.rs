//! Estimators of the three KD terms and cross-teacher agreement statistics.
//!
//! Wrong-class statistics divide by the number of wrong classes (`C - 1`),
//! whole-vector variance divides by `C`. Nothing is Bessel-corrected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scaling::{self, LogitRecord, ProbVector, Temperature};

/// Per-sample decomposition estimators of a softened label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionStats {
    /// `p_y`
    pub target_prob: f64,
    /// `e(q)`, mean wrong-class probability.
    pub derived_avg: f64,
    /// `v(q)`, variance of wrong-class probabilities.
    pub derived_var: f64,
    /// `v(q~)`, variance of the softmax over wrong logits alone.
    pub inherent_var: f64,
    pub derived_std: f64,
    pub inherent_std: f64,
}

/// Agreement between two teachers' probability vectors for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub spearman: f64,
    pub kendall: f64,
    pub topk_overlap: f64,
    pub l1_distance: f64,
}

/// Mean wrong-class probability.
pub fn derived_average(q: &[f64]) -> Result<f64> {
    if q.is_empty() {
        return Err(Error::EmptyInput("derived_average"));
    }
    Ok(q.iter().sum::<f64>() / q.len() as f64)
}

/// Population variance of `q` (divisor `len(q) = C - 1`).
pub fn derived_variance(q: &[f64]) -> Result<f64> {
    let mean = derived_average(q)?;
    Ok(q.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / q.len() as f64)
}

/// Variance of `softmax(g / tau)`, which ignores the target logit entirely.
pub fn inherent_variance(record: &LogitRecord, tau: f64) -> Result<f64> {
    derived_variance(&scaling::renorm_wrong_probs(record, tau)?)
}

/// Variance over all `C` entries with divisor `C`.
pub fn whole_variance(p: &ProbVector) -> f64 {
    let n = p.len() as f64;
    let mean = 1.0 / n;
    p.probs().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// All decomposition estimators for one record under one temperature
/// descriptor.
///
/// The inherent distribution uses the wrong-class temperature (`tau2` under
/// asymmetric scaling), since that is what the renormalized wrong block of
/// the softened label equals.
pub fn decomposition_stats(
    record: &LogitRecord,
    temperature: Temperature,
) -> Result<DecompositionStats> {
    let p = scaling::soften(record, temperature)?;
    let y = record.label();
    let q = scaling::without_index(p.probs(), y);
    let derived_avg = derived_average(&q)?;
    let derived_var = derived_variance(&q)?;
    let inherent_var = inherent_variance(record, temperature.wrong_tau())?;
    Ok(DecompositionStats {
        target_prob: p.probs()[y],
        derived_avg,
        derived_var,
        inherent_var,
        derived_std: derived_var.sqrt(),
        inherent_std: inherent_var.sqrt(),
    })
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::contract("rank correlation needs at least 2 entries"));
    }
    Ok(())
}

/// 1-based ranks, ties sharing the average of the positions they span.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
///
/// Returns 0 when either input is constant, since there is no ordering to
/// correlate.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    if ra == rb && ra.iter().any(|&r| r != ra[0]) {
        return Ok(1.0);
    }
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Kendall's tau-a: `(concordant - discordant) / (n (n - 1) / 2)`.
///
/// `(tau + 1) / 2` is the probability that a random pair of classes is
/// ordered the same way by both vectors (exact when there are no ties).
pub fn kendall(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len();
    let mut score: i64 = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let s = (a[i] - a[j]).signum() * (b[i] - b[j]).signum();
            if a[i] != a[j] && b[i] != b[j] {
                score += s as i64;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(score as f64 / pairs)
}

/// Pairwise ordering agreement implied by a Kendall tau-a value.
pub fn kendall_agreement_probability(tau: f64) -> f64 {
    (tau + 1.0) / 2.0
}

/// Indices of the `k` largest entries; ties prefer the smaller index.
pub fn top_k_indices(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[j].total_cmp(&v[i]).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}

/// Jaccard ratio of the two top-`k` index sets.
pub fn topk_overlap(a: &[f64], b: &[f64], k: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if k == 0 || k > a.len() {
        return Err(Error::contract(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            a.len()
        )));
    }
    let ta = top_k_indices(a, k);
    let tb = top_k_indices(b, k);
    let inter = ta.iter().filter(|i| tb.contains(i)).count();
    let union = 2 * k - inter;
    Ok(inter as f64 / union as f64)
}

/// `sum_c |p1_c - p2_c|`, in `[0, 2]`.
pub fn l1_distance(p1: &ProbVector, p2: &ProbVector) -> Result<f64> {
    if p1.len() != p2.len() {
        return Err(Error::LengthMismatch {
            expected: p1.len(),
            got: p2.len(),
        });
    }
    Ok(p1
        .probs()
        .iter()
        .zip(p2.probs())
        .map(|(a, b)| (a - b).abs())
        .sum())
}

/// All four agreement statistics for one pair of vectors.
pub fn agreement(p1: &ProbVector, p2: &ProbVector, k: usize) -> Result<AgreementStats> {
    Ok(AgreementStats {
        spearman: spearman(p1.probs(), p2.probs())?,
        kendall: kendall(p1.probs(), p2.probs())?,
        topk_overlap: topk_overlap(p1.probs(), p2.probs(), k)?,
        l1_distance: l1_distance(p1, p2)?,
    })
}

/// Field-wise mean of per-sample agreement statistics.
pub fn mean_agreement(stats: &[AgreementStats]) -> Result<AgreementStats> {
    if stats.is_empty() {
        return Err(Error::EmptyInput("mean_agreement"));
    }
    let n = stats.len() as f64;
    let sum = |f: fn(&AgreementStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
    Ok(AgreementStats {
        spearman: sum(|s| s.spearman),
        kendall: sum(|s| s.kendall),
        topk_overlap: sum(|s| s.topk_overlap),
        l1_distance: sum(|s| s.l1_distance),
    })
}

/// Mean and population standard deviation of one field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldSummary {
    pub mean: f64,
    pub std: f64,
}

/// Across-sample summary of [`DecompositionStats`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub count: usize,
    pub target_prob: FieldSummary,
    pub derived_avg: FieldSummary,
    pub derived_var: FieldSummary,
    pub inherent_var: FieldSummary,
    pub derived_std: FieldSummary,
    pub inherent_std: FieldSummary,
}

fn summarize(values: impl Iterator<Item = f64> + Clone, n: f64) -> FieldSummary {
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    FieldSummary {
        mean,
        std: var.sqrt(),
    }
}

/// Per-field mean and population standard deviation (two-pass).
pub fn aggregate(stats: &[DecompositionStats]) -> Result<StatsSummary> {
    if stats.is_empty() {
        return Err(Error::EmptyInput("aggregate"));
    }
    let n = stats.len() as f64;
    let field = |f: fn(&DecompositionStats) -> f64| summarize(stats.iter().map(f), n);
    Ok(StatsSummary {
        count: stats.len(),
        target_prob: field(|s| s.target_prob),
        derived_avg: field(|s| s.derived_avg),
        derived_var: field(|s| s.derived_var),
        inherent_var: field(|s| s.inherent_var),
        derived_std: field(|s| s.derived_std),
        inherent_std: field(|s| s.inherent_std),
    })
}
