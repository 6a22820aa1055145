//! Distillation objectives and their gradients with respect to student logits.
//!
//! The combined objective for one sample is
//!
//! ```text
//! (1 - lambda) * CE(y, softmax(z_s))
//!     + lambda * scale * sum_c pT_c * -log softmax(z_s / T_s)_c
//! ```
//!
//! where `pT` is the teacher label (uniform or asymmetric temperature), `T_s`
//! the student temperature and `scale = T_s^2` when `multiply_tau_squared`
//! is set. The teacher label is a constant: no gradient flows to the teacher.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scaling::{self, LogitRecord, ProbVector, Temperature, TemperaturePair};

/// The three additive terms of the teacher-student cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdTerms {
    pub correct_guidance: f64,
    pub smooth_regularization: f64,
    pub class_discriminability: f64,
    pub total: f64,
}

/// Which teacher label the student is trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// The softened teacher probabilities as-is.
    #[default]
    Full,
    /// Target probability kept, wrong classes flattened to their mean
    /// (instance-specific label smoothing). Drops class discriminability.
    Flattened,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub teacher_temps: Temperature,
    pub student_temp: f64,
    #[serde(default = "default_true")]
    pub multiply_tau_squared: bool,
    #[serde(default)]
    pub label_mode: LabelMode,
}

fn default_true() -> bool {
    true
}

pub const DEFAULT_LAMBDA: f64 = 0.5;

impl LossConfig {
    /// Uniform teacher temperature; the student uses the same temperature.
    pub fn ts(lambda: f64, tau: f64) -> Result<Self> {
        let cfg = Self {
            lambda,
            teacher_temps: Temperature::uniform(tau)?,
            student_temp: tau,
            multiply_tau_squared: true,
            label_mode: LabelMode::Full,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Asymmetric teacher temperatures; the student stays at temperature 1.
    pub fn ats(lambda: f64, temps: TemperaturePair) -> Result<Self> {
        let cfg = Self {
            lambda,
            teacher_temps: Temperature::Asymmetric(temps),
            student_temp: 1.0,
            multiply_tau_squared: true,
            label_mode: LabelMode::Full,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_student_temp(mut self, t: f64) -> Self {
        self.student_temp = t;
        self
    }

    pub fn with_label_mode(mut self, mode: LabelMode) -> Self {
        self.label_mode = mode;
        self
    }

    pub fn with_tau_squared(mut self, on: bool) -> Self {
        self.multiply_tau_squared = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::contract(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        self.teacher_temps.validate()?;
        if !(self.student_temp.is_finite() && self.student_temp > 0.0) {
            return Err(Error::InvalidTemperature(self.student_temp));
        }
        Ok(())
    }

    /// Multiplier on the KD term: `student_temp^2` or 1.
    pub fn scale(&self) -> f64 {
        if self.multiply_tau_squared {
            self.student_temp * self.student_temp
        } else {
            1.0
        }
    }
}

/// `-log softmax(z)_y` at temperature 1.
pub fn ce_loss(student: &LogitRecord) -> f64 {
    scaling::lse_unchecked(student.logits()) - student.target_logit()
}

fn check_same_task(teacher: &LogitRecord, student: &LogitRecord) -> Result<()> {
    if teacher.num_classes() != student.num_classes() {
        return Err(Error::LengthMismatch {
            expected: teacher.num_classes(),
            got: student.num_classes(),
        });
    }
    if teacher.label() != student.label() {
        return Err(Error::contract(format!(
            "teacher label {} differs from student label {}",
            teacher.label(),
            student.label()
        )));
    }
    Ok(())
}

/// Splits `-sum_c pT_c log pS_c` into correct guidance, smooth
/// regularization and class discriminability.
pub fn kd_decompose(teacher: &ProbVector, student: &ProbVector, label: usize) -> Result<KdTerms> {
    if teacher.len() != student.len() {
        return Err(Error::LengthMismatch {
            expected: teacher.len(),
            got: student.len(),
        });
    }
    if label >= teacher.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: teacher.len(),
        });
    }
    let pt = teacher.probs();
    let log_ps: Vec<f64> = student.probs().iter().map(|p| p.ln()).collect();
    Ok(decompose_logs(pt, &log_ps, label))
}

fn decompose_logs(pt: &[f64], log_ps: &[f64], y: usize) -> KdTerms {
    let c = pt.len();
    let wrong_mean = (0..c).filter(|&i| i != y).map(|i| pt[i]).sum::<f64>() / (c - 1) as f64;
    let xlogy = |p: f64, lp: f64| if p == 0.0 { 0.0 } else { -p * lp };
    let correct_guidance = xlogy(pt[y], log_ps[y]);
    let mut smooth = 0.0;
    let mut discrim = 0.0;
    let mut total = correct_guidance;
    for i in (0..c).filter(|&i| i != y) {
        smooth += xlogy(wrong_mean, log_ps[i]);
        discrim += -(pt[i] - wrong_mean) * log_ps[i];
        total += xlogy(pt[i], log_ps[i]);
    }
    KdTerms {
        correct_guidance,
        smooth_regularization: smooth,
        class_discriminability: discrim,
        total,
    }
}

/// Instance-specific smoothed label: `p_y` kept, every wrong class set to
/// the wrong-class mean.
pub fn flatten_label(probs: &[f64], label: usize) -> Vec<f64> {
    let c = probs.len();
    // Average the actual wrong mass rather than 1 - p_y, which loses all
    // precision when p_y is close to 1.
    let wrong_sum: f64 = (0..c).filter(|&i| i != label).map(|i| probs[i]).sum();
    let wrong_mean = wrong_sum / (c - 1) as f64;
    (0..c)
        .map(|i| if i == label { probs[label] } else { wrong_mean })
        .collect()
}

/// The probability vector the student is trained to match.
pub fn teacher_target(teacher: &LogitRecord, cfg: &LossConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let p = scaling::soften(teacher, cfg.teacher_temps)?.into_vec();
    Ok(match cfg.label_mode {
        LabelMode::Full => p,
        LabelMode::Flattened => flatten_label(&p, teacher.label()),
    })
}

fn soft_ce(target: &[f64], student: &LogitRecord, student_temp: f64) -> f64 {
    let scaled: Vec<f64> = student.logits().iter().map(|z| z / student_temp).collect();
    let log_ps = scaling::log_softmax_slice(&scaled);
    target
        .iter()
        .zip(&log_ps)
        .map(|(p, lp)| if *p == 0.0 { 0.0 } else { -p * lp })
        .sum()
}

/// KD term against the full teacher label.
pub fn kd_loss(teacher: &LogitRecord, student: &LogitRecord, cfg: &LossConfig) -> Result<f64> {
    check_same_task(teacher, student)?;
    let target = teacher_target(teacher, &cfg.with_label_mode(LabelMode::Full))?;
    Ok(cfg.lambda * cfg.scale() * soft_ce(&target, student, cfg.student_temp))
}

/// KD term against the flattened (ILS) teacher label.
pub fn ils_loss(teacher: &LogitRecord, student: &LogitRecord, cfg: &LossConfig) -> Result<f64> {
    check_same_task(teacher, student)?;
    let target = teacher_target(teacher, &cfg.with_label_mode(LabelMode::Flattened))?;
    Ok(cfg.lambda * cfg.scale() * soft_ce(&target, student, cfg.student_temp))
}

/// `(1 - lambda) * CE + KD`, with the KD label chosen by `cfg.label_mode`.
pub fn combined_loss(
    teacher: &LogitRecord,
    student: &LogitRecord,
    cfg: &LossConfig,
) -> Result<f64> {
    check_same_task(teacher, student)?;
    let target = teacher_target(teacher, cfg)?;
    Ok(loss_against_target(&target, student, cfg))
}

/// Exact gradient of [`combined_loss`] with respect to the student logits.
pub fn grad_student_logits(
    teacher: &LogitRecord,
    student: &LogitRecord,
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    check_same_task(teacher, student)?;
    let target = teacher_target(teacher, cfg)?;
    Ok(loss_and_grad_against_target(&target, student.logits(), student.label(), cfg).1)
}

/// Combined loss against a precomputed teacher target.
pub fn loss_against_target(target: &[f64], student: &LogitRecord, cfg: &LossConfig) -> f64 {
    let kd = if cfg.lambda == 0.0 {
        0.0
    } else {
        cfg.lambda * cfg.scale() * soft_ce(target, student, cfg.student_temp)
    };
    (1.0 - cfg.lambda) * ce_loss(student) + kd
}

/// Loss and gradient for one sample against a precomputed teacher target.
///
/// `target` may be empty when `lambda == 0`.
pub fn loss_and_grad_against_target(
    target: &[f64],
    logits: &[f64],
    label: usize,
    cfg: &LossConfig,
) -> (f64, Vec<f64>) {
    let p1 = scaling::softmax_slice(logits);
    let ce = scaling::lse_unchecked(logits) - logits[label];
    let mut grad: Vec<f64> = p1.iter().map(|p| (1.0 - cfg.lambda) * p).collect();
    grad[label] -= 1.0 - cfg.lambda;
    let mut loss = (1.0 - cfg.lambda) * ce;
    if cfg.lambda > 0.0 {
        let t = cfg.student_temp;
        let scaled: Vec<f64> = logits.iter().map(|z| z / t).collect();
        let log_ps = scaling::log_softmax_slice(&scaled);
        let w = cfg.lambda * cfg.scale();
        let mut soft = 0.0;
        for (i, (pt, lp)) in target.iter().zip(&log_ps).enumerate() {
            if *pt != 0.0 {
                soft -= pt * lp;
            }
            grad[i] += w / t * (lp.exp() - pt);
        }
        loss += w * soft;
    }
    (loss, grad)
}
