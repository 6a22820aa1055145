//! Softmax under uniform and asymmetric temperature scaling.
//!
//! Uniform scaling divides every logit by one temperature. Asymmetric scaling
//! divides the target-class logit by `tau1` and every wrong-class logit by
//! `tau2` before a single shared softmax, so the wrong-class block keeps the
//! shape of `softmax(g / tau2)` no matter how large the target logit is.
//!
//! Everything here is computed in `f64` with max-subtraction.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `sum(probs) == 1` accepted by [`ProbVector::new`].
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// One sample's logit vector together with its correct-class index.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRecord {
    logits: Vec<f64>,
    label: usize,
}

impl LogitRecord {
    pub fn new(logits: Vec<f64>, label: usize) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::InvalidRecord(format!(
                "need at least 2 classes, got {}",
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidRecord(format!(
                "logit {i} is not finite ({})",
                logits[i]
            )));
        }
        if label >= logits.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: logits.len(),
            });
        }
        Ok(Self { logits, label })
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }

    pub fn target_logit(&self) -> f64 {
        self.logits[self.label]
    }

    /// True when the target logit is at least every wrong logit.
    pub fn target_is_max(&self) -> bool {
        let fy = self.target_logit();
        self.logits.iter().all(|&f| f <= fy)
    }

    pub fn into_parts(self) -> (Vec<f64>, usize) {
        (self.logits, self.label)
    }
}

/// Target-class temperature `tau1` and wrong-class temperature `tau2`.
///
/// Any positive pair is accepted; `tau1 > tau2` is only the recommended
/// regime, ablation grids need the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPair", deny_unknown_fields)]
pub struct TemperaturePair {
    tau1: f64,
    tau2: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPair {
    tau1: f64,
    tau2: f64,
}

impl TryFrom<RawPair> for TemperaturePair {
    type Error = Error;

    fn try_from(raw: RawPair) -> Result<Self> {
        TemperaturePair::new(raw.tau1, raw.tau2)
    }
}

impl TemperaturePair {
    pub fn new(tau1: f64, tau2: f64) -> Result<Self> {
        check_tau(tau1)?;
        check_tau(tau2)?;
        Ok(Self { tau1, tau2 })
    }

    pub fn tau1(&self) -> f64 {
        self.tau1
    }

    pub fn tau2(&self) -> f64 {
        self.tau2
    }
}

/// Temperature descriptor applied to a teacher's logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Temperature {
    Uniform(f64),
    Asymmetric(TemperaturePair),
}

impl Temperature {
    pub fn uniform(tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(Temperature::Uniform(tau))
    }

    pub fn asymmetric(tau1: f64, tau2: f64) -> Result<Self> {
        Ok(Temperature::Asymmetric(TemperaturePair::new(tau1, tau2)?))
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Temperature::Uniform(t) => check_tau(t),
            Temperature::Asymmetric(p) => {
                check_tau(p.tau1)?;
                check_tau(p.tau2)
            }
        }
    }

    /// Temperature applied to the target logit.
    pub fn target_tau(&self) -> f64 {
        match *self {
            Temperature::Uniform(t) => t,
            Temperature::Asymmetric(p) => p.tau1,
        }
    }

    /// Temperature applied to every wrong-class logit.
    pub fn wrong_tau(&self) -> f64 {
        match *self {
            Temperature::Uniform(t) => t,
            Temperature::Asymmetric(p) => p.tau2,
        }
    }
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Temperature::Uniform(t) => write!(f, "ts({t})"),
            Temperature::Asymmetric(p) => write!(f, "ats({},{})", p.tau1, p.tau2),
        }
    }
}

/// A normalized probability vector, optionally tagged with how it was made.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f64>,
    temperature: Option<Temperature>,
    target: Option<usize>,
}

impl ProbVector {
    /// Wraps an externally produced probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput("probability vector"));
        }
        if let Some(p) = probs
            .iter()
            .find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(Error::contract(format!("probability {p} outside [0, 1]")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::contract(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self {
            probs,
            temperature: None,
            target: None,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn temperature(&self) -> Option<Temperature> {
        self.temperature
    }

    /// Target index the asymmetric temperature was keyed on.
    pub fn target(&self) -> Option<usize> {
        self.target
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(tau))
    }
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `ln(sum(exp(v)))` with max-subtraction.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("log_sum_exp"));
    }
    Ok(lse_unchecked(values))
}

pub(crate) fn lse_unchecked(values: &[f64]) -> f64 {
    let m = max_of(values);
    if values.len() == 1 {
        return m;
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

/// Plain stable softmax of already-scaled scores.
pub(crate) fn softmax_slice(scores: &[f64]) -> Vec<f64> {
    let m = max_of(scores);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

/// Stable log-softmax of already-scaled scores.
pub(crate) fn log_softmax_slice(scores: &[f64]) -> Vec<f64> {
    let lse = lse_unchecked(scores);
    scores.iter().map(|s| s - lse).collect()
}

/// `softmax(f / tau)` over all classes.
pub fn softmax_ts(record: &LogitRecord, tau: f64) -> Result<ProbVector> {
    check_tau(tau)?;
    let scaled: Vec<f64> = record.logits.iter().map(|f| f / tau).collect();
    Ok(ProbVector {
        probs: softmax_slice(&scaled),
        temperature: Some(Temperature::Uniform(tau)),
        target: None,
    })
}

/// Asymmetric softmax: target logit over `tau1`, wrong logits over `tau2`,
/// one shared normalizer.
pub fn softmax_ats(record: &LogitRecord, temps: TemperaturePair) -> Result<ProbVector> {
    check_tau(temps.tau1)?;
    check_tau(temps.tau2)?;
    let y = record.label;
    if y >= record.num_classes() {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: record.num_classes(),
        });
    }
    let scaled = ats_scaled_logits(record.logits(), y, temps);
    Ok(ProbVector {
        probs: softmax_slice(&scaled),
        temperature: Some(Temperature::Asymmetric(temps)),
        target: Some(y),
    })
}

pub(crate) fn ats_scaled_logits(logits: &[f64], label: usize, temps: TemperaturePair) -> Vec<f64> {
    logits
        .iter()
        .enumerate()
        .map(|(c, f)| if c == label { f / temps.tau1 } else { f / temps.tau2 })
        .collect()
}

/// Dispatches to [`softmax_ts`] or [`softmax_ats`].
pub fn soften(record: &LogitRecord, temperature: Temperature) -> Result<ProbVector> {
    match temperature {
        Temperature::Uniform(tau) => softmax_ts(record, tau),
        Temperature::Asymmetric(pair) => softmax_ats(record, pair),
    }
}

/// Log-probabilities under `temperature`, without the round trip through
/// `exp`/`ln`.
pub fn log_soften(record: &LogitRecord, temperature: Temperature) -> Result<Vec<f64>> {
    temperature.validate()?;
    let scaled = match temperature {
        Temperature::Uniform(tau) => record.logits.iter().map(|f| f / tau).collect(),
        Temperature::Asymmetric(pair) => ats_scaled_logits(&record.logits, record.label, pair),
    };
    Ok(log_softmax_slice(&scaled))
}

/// The logit vector with the target entry removed, order preserved.
pub fn wrong_logits(record: &LogitRecord) -> Vec<f64> {
    without_index(&record.logits, record.label)
}

pub(crate) fn without_index(values: &[f64], skip: usize) -> Vec<f64> {
    values
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != skip)
        .map(|(_, v)| *v)
        .collect()
}

/// `softmax(g / tau)` over the wrong logits only.
pub fn renorm_wrong_probs(record: &LogitRecord, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let scaled: Vec<f64> = wrong_logits(record).iter().map(|g| g / tau).collect();
    Ok(softmax_slice(&scaled))
}

/// Analytic `d p_c / d tau = (p_c / tau^2) (sum_j p_j f_j - f_c)` for uniform
/// scaling.
pub fn softmax_ts_tau_derivative(record: &LogitRecord, tau: f64) -> Result<Vec<f64>> {
    let p = softmax_ts(record, tau)?;
    let mean_logit: f64 = p
        .probs
        .iter()
        .zip(&record.logits)
        .map(|(p, f)| p * f)
        .sum();
    Ok(p
        .probs
        .iter()
        .zip(&record.logits)
        .map(|(p, f)| p / (tau * tau) * (mean_logit - f))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(logits: &[f64], y: usize) -> LogitRecord {
        LogitRecord::new(logits.to_vec(), y).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    fn argsort(v: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap().then(i.cmp(&j)));
        idx
    }

    #[test]
    fn record_validation() {
        assert!(LogitRecord::new(vec![1.0], 0).is_err());
        assert!(LogitRecord::new(vec![1.0, f64::NAN], 0).is_err());
        assert!(matches!(
            LogitRecord::new(vec![1.0, 2.0], 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn log_sum_exp_cases() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        for x in [-1e300, -3.5, 0.0, 7.25, 1e300] {
            assert_eq!(log_sum_exp(&[x]).unwrap(), x);
        }
        // mpmath: 1000.693147180559945309...
        let v = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((v - 1000.693_147_180_559_9).abs() < 1e-12);
        assert!(matches!(log_sum_exp(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn softmax_ts_examples() {
        let p = softmax_ts(&rec(&[3.0; 4], 0), 0.7).unwrap();
        assert_close(p.probs(), &[0.25; 4], 1e-15);

        // mpmath oracle
        let p = softmax_ts(&rec(&[2.0, 0.0, 0.0], 0), 2.0).unwrap();
        assert_close(
            p.probs(),
            &[0.576_116_884_765_829_1, 0.211_941_557_617_085_4, 0.211_941_557_617_085_4],
            1e-15,
        );

        let p = softmax_ts(&rec(&[5.0, 1.0, 0.0, 0.0, -1.0], 0), 1e9).unwrap();
        assert_close(p.probs(), &[0.2; 5], 1e-8);

        assert!(matches!(
            softmax_ts(&rec(&[1.0, 2.0], 0), 0.0),
            Err(Error::InvalidTemperature(_))
        ));
        assert!(softmax_ts(&rec(&[1.0, 2.0], 0), -1.0).is_err());
    }

    #[test]
    fn softmax_ats_examples() {
        let r = rec(&[4.0, 2.0, 1.0], 0);
        let p = softmax_ats(&r, TemperaturePair::new(2.0, 1.0).unwrap()).unwrap();
        assert_close(
            p.probs(),
            &[0.422_318_798_251_518_2, 0.422_318_798_251_518_2, 0.155_362_403_496_963_6],
            1e-15,
        );
        assert_eq!(p.target(), Some(0));

        let ts = softmax_ts(&r, 3.0).unwrap();
        let ats = softmax_ats(&r, TemperaturePair::new(3.0, 3.0).unwrap()).unwrap();
        assert_close(ts.probs(), ats.probs(), 1e-12);
    }

    #[test]
    fn pair_accepts_inverted_order() {
        assert!(TemperaturePair::new(1.0, 4.0).is_ok());
        assert!(TemperaturePair::new(0.0, 4.0).is_err());
        assert!(TemperaturePair::new(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn wrong_logits_examples() {
        assert_eq!(wrong_logits(&rec(&[1.0, 2.0, 3.0], 1)), vec![1.0, 3.0]);
        assert_eq!(wrong_logits(&rec(&[7.0, 4.0], 0)), vec![4.0]);
        assert_eq!(wrong_logits(&rec(&[7.0, 4.0, 5.0], 2)), vec![7.0, 4.0]);
    }

    #[test]
    fn renorm_examples() {
        let q = renorm_wrong_probs(&rec(&[9.0, 1.5, 1.5], 0), 2.0).unwrap();
        assert_close(&q, &[0.5, 0.5], 1e-15);
        let q = renorm_wrong_probs(&rec(&[4.0, 2.0, 1.0], 0), 1.0).unwrap();
        assert_close(&q, &[0.731_058_578_630_004_9, 0.268_941_421_369_995_1], 1e-15);
        assert!(renorm_wrong_probs(&rec(&[4.0, 2.0, 1.0], 0), 0.0).is_err());
    }

    #[test]
    fn overflow_safety() {
        let r = rec(&[1e4, -1e4, 5e3, 0.0], 1);
        for tau in [0.01, 1.0, 100.0] {
            let p = softmax_ts(&r, tau).unwrap();
            assert!(p.probs().iter().all(|v| v.is_finite()));
            assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let p = softmax_ats(&r, TemperaturePair::new(0.05, 3.0).unwrap()).unwrap();
        assert!(p.probs().iter().all(|v| v.is_finite()));
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
    }

    fn record_strategy() -> impl Strategy<Value = LogitRecord> {
        (2usize..40)
            .prop_flat_map(|c| (prop::collection::vec(-20.0f64..20.0, c), 0..c))
            .prop_map(|(f, y)| LogitRecord::new(f, y).unwrap())
    }

    proptest! {
        #[test]
        fn ts_normalized_and_rank_preserving(r in record_strategy(), tau in 0.1f64..50.0) {
            let p = softmax_ts(&r, tau).unwrap();
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.probs().iter().all(|&v| v > 0.0 && v <= 1.0));
            // Beyond a scaled spread of about 36, 1 - exp(-spread) rounds to 1.
            let hi = r.logits().iter().cloned().fold(f64::MIN, f64::max);
            let lo = r.logits().iter().cloned().fold(f64::MAX, f64::min);
            if (hi - lo) / tau < 30.0 {
                prop_assert!(p.probs().iter().all(|&v| v < 1.0));
            }
            // Ties in probability can only come from ties in logits.
            let a = argsort(r.logits());
            let b = argsort(p.probs());
            for w in a.windows(2) {
                prop_assert!(p.probs()[w[0]] <= p.probs()[w[1]]);
            }
            for w in b.windows(2) {
                prop_assert!(r.logits()[w[0]] <= r.logits()[w[1]]);
            }
        }

        #[test]
        fn ats_wrong_block_depends_only_on_tau2(
            r in record_strategy(), t1 in 0.2f64..20.0, t1b in 0.2f64..20.0, t2 in 0.2f64..20.0,
        ) {
            let y = r.label();
            let a = softmax_ats(&r, TemperaturePair::new(t1, t2).unwrap()).unwrap();
            let b = softmax_ats(&r, TemperaturePair::new(t1b, t2).unwrap()).unwrap();
            let inherent = renorm_wrong_probs(&r, t2).unwrap();
            for p in [&a, &b] {
                prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                let block = without_index(p.probs(), y);
                let s: f64 = block.iter().sum();
                for (x, q) in block.iter().zip(&inherent) {
                    prop_assert!((x / s - q).abs() <= 1e-12);
                }
            }
            // Rank order within the wrong block follows the wrong logits.
            let g = wrong_logits(&r);
            let block = without_index(a.probs(), y);
            for i in 0..g.len() {
                for j in 0..g.len() {
                    if g[i] < g[j] {
                        prop_assert!(block[i] <= block[j]);
                    }
                }
            }
        }

        #[test]
        fn ats_reduces_to_ts(r in record_strategy(), tau in 0.1f64..30.0) {
            let ts = softmax_ts(&r, tau).unwrap();
            let ats = softmax_ats(&r, TemperaturePair::new(tau, tau).unwrap()).unwrap();
            for (a, b) in ts.probs().iter().zip(ats.probs()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn raising_tau1_lowers_target_prob(
            r in record_strategy(), t1 in 0.2f64..10.0, bump in 0.1f64..10.0, t2 in 0.2f64..10.0,
        ) {
            // Only meaningful when the scaled target logit is positive relative
            // to the normalizer's dependence; restrict to positive f_y.
            prop_assume!(r.target_logit() > 1e-3);
            let lo = softmax_ats(&r, TemperaturePair::new(t1, t2).unwrap()).unwrap();
            let hi = softmax_ats(&r, TemperaturePair::new(t1 + bump, t2).unwrap()).unwrap();
            let y = r.label();
            prop_assert!(hi.probs()[y] <= lo.probs()[y]);
        }

        #[test]
        fn renorm_matches_ratio_identity(r in record_strategy(), tau in 0.2f64..20.0) {
            let p = softmax_ts(&r, tau).unwrap();
            let py = p.probs()[r.label()];
            let q = without_index(p.probs(), r.label());
            let qt = renorm_wrong_probs(&r, tau).unwrap();
            prop_assume!(1.0 - py > 1e-6);
            for (a, b) in q.iter().zip(&qt) {
                prop_assert!((a / (1.0 - py) - b).abs() <= 1e-10);
            }
            prop_assert!((qt.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn wrong_logits_is_multiset_minus_target(r in record_strategy()) {
            let g = wrong_logits(&r);
            prop_assert_eq!(g.len(), r.num_classes() - 1);
            let mut all = r.logits().to_vec();
            all.remove(r.label());
            prop_assert_eq!(g, all);
        }
    }
}
