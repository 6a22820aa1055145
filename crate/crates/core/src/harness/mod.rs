//! Declarative experiment runner: teacher training, distillation under
//! uniform or asymmetric teacher temperatures, sweeps and report emission.
//!
//! Every run seed fixes the initialization and shuffle order of every model
//! trained under it. Students share one initialization per seed across all
//! conditions, so conditions that reduce to the same loss give identical
//! students.

mod report;
mod verify;

pub use report::{emit_analysis, emit_report, format_results_csv, line_chart_svg, Series};
pub use verify::{format_ledger, verify_propositions, write_ledger, LedgerEntry};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, LabeledData, LogitDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::kd::{self, LabelMode, LossConfig};
use crate::metrics::{self, AgreementStats, StatsSummary};
use crate::nn::{self, MlpModel, SampleObjective, TrainConfig};
use crate::scaling::{self, LogitRecord, Temperature, TemperaturePair};

/// Where the experiment's samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Precomputed logits; usable for analysis only.
    LogitFile(PathBuf),
}

/// Architecture plus optimizer settings for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub dims: Vec<usize>,
    /// `train.seed` is added to the shuffle seed derived from the run seed.
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_ts_grid")]
    pub ts_grid: Vec<f64>,
    #[serde(default = "default_ats_grid")]
    pub ats_grid: Vec<[f64; 2]>,
}

pub fn default_ts_grid() -> Vec<f64> {
    vec![1.0, 2.0, 4.0, 8.0, 12.0, 16.0]
}

pub fn default_ats_grid() -> Vec<[f64; 2]> {
    vec![[2.0, 1.0], [3.0, 1.0], [3.0, 2.0], [4.0, 2.0], [4.0, 3.0], [5.0, 2.0]]
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ts_grid: default_ts_grid(),
            ats_grid: default_ats_grid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Temperatures at which teacher DA/DV/IV curves are tabulated.
    #[serde(default = "default_curve_taus")]
    pub curve_taus: Vec<f64>,
    /// `k` for the top-k overlap agreement statistic.
    #[serde(default = "default_topk")]
    pub topk: usize,
    /// Also train a second large teacher and a label-shuffled control and
    /// report their agreement with the first.
    #[serde(default)]
    pub agreement: bool,
}

pub fn default_curve_taus() -> Vec<f64> {
    vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0]
}

fn default_topk() -> usize {
    5
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            curve_taus: default_curve_taus(),
            topk: default_topk(),
            agreement: false,
        }
    }
}

/// Student training conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    /// Cross-entropy only.
    Nokd,
    /// Uniform temperature, distilled from the small teacher.
    StKd,
    /// Uniform temperature, student at the teacher's temperature.
    Kd,
    /// Uniform temperature, student at temperature 1.
    KdS1,
    /// Uniform temperature with the wrong-class block flattened.
    Ils,
    /// Asymmetric teacher temperatures, student at temperature 1.
    Ats,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Nokd => "nokd",
            Condition::StKd => "st-kd",
            Condition::Kd => "kd",
            Condition::KdS1 => "kd-s1",
            Condition::Ils => "ils",
            Condition::Ats => "ats",
        }
    }

    fn uses_small_teacher(self) -> bool {
        self == Condition::StKd
    }
}

fn default_conditions() -> Vec<Condition> {
    vec![Condition::Nokd, Condition::Kd]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub teacher: ModelSpec,
    #[serde(default)]
    pub small_teacher: Option<ModelSpec>,
    pub student: ModelSpec,
    /// Loss used when no sweep is configured. Under a sweep only `lambda`
    /// and `multiply_tau_squared` are taken from here.
    pub loss: LossConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default = "default_conditions")]
    pub conditions: Vec<Condition>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    pub output_dir: PathBuf,
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn check_model(key: &str, spec: &ModelSpec, input_dim: usize, classes: usize) -> Result<()> {
    let dims = &spec.dims;
    if dims.len() < 2 || dims.contains(&0) {
        return Err(config_err(
            &format!("{key}.dims"),
            "need at least input and output sizes, all positive",
        ));
    }
    if dims[0] != input_dim || dims[dims.len() - 1] != classes {
        return Err(config_err(
            &format!("{key}.dims"),
            format!("must start at {input_dim} inputs and end at {classes} classes"),
        ));
    }
    spec.train
        .validate()
        .map_err(|e| config_err(&format!("{key}.train"), e.to_string()))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let key = e
                .span()
                .map(|s| format!("line {}", text[..s.start].matches('\n').count() + 1))
                .unwrap_or_else(|| "<root>".into());
            config_err(&key, e.message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { key, message } => Error::Config {
                key: format!("{}: {key}", path.display()),
                message,
            },
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        if self.conditions.is_empty() {
            return Err(config_err("conditions", "at least one condition is required"));
        }
        self.loss
            .validate()
            .map_err(|e| config_err("loss", e.to_string()))?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            check_model("teacher", &self.teacher, spec.input_dim, spec.num_classes)?;
            check_model("student", &self.student, spec.input_dim, spec.num_classes)?;
            if let Some(small) = &self.small_teacher {
                check_model("small_teacher", small, spec.input_dim, spec.num_classes)?;
            }
        }
        if self.conditions.contains(&Condition::StKd) && self.small_teacher.is_none() {
            return Err(config_err("small_teacher", "condition st-kd needs a small teacher"));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.ts_grid.is_empty() || sweep.ats_grid.is_empty() {
                return Err(config_err("sweep", "grids must be nonempty"));
            }
            for &t in &sweep.ts_grid {
                Temperature::uniform(t).map_err(|e| config_err("sweep.ts_grid", e.to_string()))?;
            }
            for &[a, b] in &sweep.ats_grid {
                TemperaturePair::new(a, b)
                    .map_err(|e| config_err("sweep.ats_grid", e.to_string()))?;
            }
        } else if self.conditions.contains(&Condition::Ats)
            && matches!(self.loss.teacher_temps, Temperature::Uniform(_))
        {
            return Err(config_err(
                "loss.teacher_temps",
                "condition ats without a sweep needs a temperature pair",
            ));
        }
        let curve = &self.analysis.curve_taus;
        if curve.is_empty() || curve.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("analysis.curve_taus", "must be nonempty and increasing"));
        }
        for &t in curve {
            Temperature::uniform(t).map_err(|e| config_err("analysis.curve_taus", e.to_string()))?;
        }
        if self.analysis.topk == 0 {
            return Err(config_err("analysis.topk", "must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config is always serializable");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn synthetic(&self) -> Result<&SyntheticSpec> {
        match &self.data {
            DataSource::Synthetic(s) => Ok(s),
            DataSource::LogitFile(_) => Err(config_err(
                "data",
                "training runs need synthetic data; logit files are analysis-only",
            )),
        }
    }

    /// The desk-scale experiment on the default synthetic task.
    pub fn desk_default() -> Self {
        let spec = SyntheticSpec {
            train_per_class: 100,
            test_per_class: 500,
            cluster_spread: 1.2,
            ..SyntheticSpec::default()
        };
        let d = spec.input_dim;
        let c = spec.num_classes;
        let train = |epochs: usize, lr: f64| TrainConfig {
            epochs,
            batch_size: 32,
            learning_rate: lr,
            momentum: 0.9,
            lr_decay: nn::LrDecay {
                gamma: 0.1,
                milestones: vec![epochs / 2, epochs * 3 / 4],
            },
            seed: 0,
        };
        Self {
            data: DataSource::Synthetic(spec),
            teacher: ModelSpec {
                dims: vec![d, 256, 256, c],
                train: train(60, 0.05),
            },
            small_teacher: Some(ModelSpec {
                dims: vec![d, 8, c],
                train: train(60, 0.05),
            }),
            student: ModelSpec {
                dims: vec![d, 16, c],
                train: train(40, 0.05),
            },
            loss: LossConfig::ts(kd::DEFAULT_LAMBDA, 4.0).expect("valid default loss"),
            sweep: Some(SweepConfig::default()),
            conditions: vec![
                Condition::Nokd,
                Condition::StKd,
                Condition::Kd,
                Condition::KdS1,
                Condition::Ils,
                Condition::Ats,
            ],
            seeds: vec![0, 1, 2],
            analysis: AnalysisConfig {
                agreement: true,
                ..AnalysisConfig::default()
            },
            output_dir: PathBuf::from("atskd-out"),
        }
    }
}

/// Which model a derived seed belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    SmallTeacher,
    PeerTeacher,
    ShuffledControl,
    Student,
}

impl Role {
    fn tag(self) -> u64 {
        match self {
            Role::Teacher => 1,
            Role::SmallTeacher => 2,
            Role::PeerTeacher => 3,
            Role::ShuffledControl => 4,
            Role::Student => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::SmallTeacher => "small-teacher",
            Role::PeerTeacher => "peer-teacher",
            Role::ShuffledControl => "shuffled-control",
            Role::Student => "student",
        }
    }
}

/// Independent 64-bit seeds for initialization and shuffling of one role.
pub fn derive_seeds(run_seed: u64, role: Role) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(role.tag());
    (rng.next_u64(), rng.next_u64())
}

/// A trained teacher and its logits over the training set.
#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub seed: u64,
    pub role: Role,
    pub model: MlpModel,
    pub train_logits: LogitDataset,
    pub train_acc: f64,
    pub test_acc: f64,
}

impl TeacherRun {
    pub fn mean_target_logit(&self) -> f64 {
        let recs = self.train_logits.records();
        recs.iter().map(LogitRecord::target_logit).sum::<f64>() / recs.len() as f64
    }

    /// Checkpoint and training-set logit file, named after role and seed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = format!("{}-seed{}", self.role.name(), self.seed);
        nn::save_checkpoint(&self.model, &dir.join(format!("{stem}.json")))?;
        data::write_logit_file(&self.train_logits, &dir.join(format!("{stem}.logits")))
    }
}

fn train_model(
    spec: &ModelSpec,
    run_seed: u64,
    role: Role,
    train: &LabeledData,
    test: Option<&LabeledData>,
    objective: &dyn SampleObjective,
) -> Result<MlpModel> {
    let (init_seed, shuffle_seed) = derive_seeds(run_seed, role);
    let model = MlpModel::init(&spec.dims, init_seed)?;
    let cfg = TrainConfig {
        seed: shuffle_seed.wrapping_add(spec.train.seed),
        ..spec.train.clone()
    };
    Ok(nn::train(model, train, test, objective, &cfg)?.0)
}

/// Labels permuted by a seeded shuffle.
pub fn shuffled_labels(data: &LabeledData, seed: u64) -> Result<LabeledData> {
    let mut labels = data.labels().to_vec();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    data.with_labels(labels)
}

fn teacher_spec(config: &ExperimentConfig, role: Role) -> Result<&ModelSpec> {
    match role {
        Role::SmallTeacher => config
            .small_teacher
            .as_ref()
            .ok_or_else(|| config_err("small_teacher", "not configured")),
        Role::Student => Err(Error::contract("students are not teachers")),
        _ => Ok(&config.teacher),
    }
}

/// Trains the teacher for `role` under `seed` with cross-entropy.
///
/// The shuffled control is trained on permuted labels, but its logits are
/// recorded against the true labels.
pub fn run_teacher_on(
    config: &ExperimentConfig,
    seed: u64,
    role: Role,
    train: &LabeledData,
    test: &LabeledData,
) -> Result<TeacherRun> {
    let spec = teacher_spec(config, role)?;
    let model = if role == Role::ShuffledControl {
        let shuffled = shuffled_labels(train, derive_seeds(seed, role).1 ^ 0x5eed)?;
        train_model(spec, seed, role, &shuffled, None, &nn::CrossEntropy)?
    } else {
        train_model(spec, seed, role, train, None, &nn::CrossEntropy)?
    };
    let train_logits = LogitDataset::new(
        train.num_classes(),
        nn::collect_logits(&model, train)?,
        format!("{}-seed{seed}", role.name()),
    )?;
    Ok(TeacherRun {
        seed,
        role,
        train_acc: nn::accuracy(&model, train),
        test_acc: nn::accuracy(&model, test),
        model,
        train_logits,
    })
}

/// Generates the configured data and trains the large teacher for `seed`.
pub fn run_teacher(config: &ExperimentConfig, seed: u64) -> Result<TeacherRun> {
    config.validate()?;
    let (train, test) = data::generate(config.synthetic()?)?;
    run_teacher_on(config, seed, Role::Teacher, &train, &test)
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub condition: Condition,
    pub tau1: f64,
    pub tau2: f64,
    pub seed: u64,
    /// `None` for conditions without a teacher.
    pub teacher_train_acc: Option<f64>,
    pub teacher_test_acc: Option<f64>,
    pub student_test_acc: f64,
    /// Means over training samples of the teacher label's DA/DV/IV at this
    /// grid point.
    pub da_mean: Option<f64>,
    pub dv_mean: Option<f64>,
    pub iv_mean: Option<f64>,
}

/// A grid point: teacher temperatures plus the loss used for the student.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub condition: Condition,
    pub loss: LossConfig,
}

impl GridPoint {
    pub fn temps(&self) -> (f64, f64) {
        (
            self.loss.teacher_temps.target_tau(),
            self.loss.teacher_temps.wrong_tau(),
        )
    }
}

/// Grid points in report order for `condition`.
pub fn grid_points(config: &ExperimentConfig, condition: Condition) -> Result<Vec<GridPoint>> {
    let base = config.loss;
    let point = |loss: LossConfig| GridPoint { condition, loss };
    let uniform = |tau: f64, student: f64| -> Result<LossConfig> {
        Ok(LossConfig {
            teacher_temps: Temperature::uniform(tau)?,
            student_temp: student,
            ..base
        })
    };
    let out = match (condition, &config.sweep) {
        (Condition::Nokd, _) => vec![point(LossConfig {
            lambda: 0.0,
            teacher_temps: Temperature::Uniform(1.0),
            student_temp: 1.0,
            ..base
        })],
        (Condition::Kd | Condition::StKd, Some(s)) => s
            .ts_grid
            .iter()
            .map(|&t| uniform(t, t).map(point))
            .collect::<Result<_>>()?,
        (Condition::KdS1, Some(s)) => s
            .ts_grid
            .iter()
            .map(|&t| uniform(t, 1.0).map(point))
            .collect::<Result<_>>()?,
        (Condition::Ils, Some(s)) => s
            .ts_grid
            .iter()
            .map(|&t| uniform(t, t).map(|l| point(l.with_label_mode(LabelMode::Flattened))))
            .collect::<Result<_>>()?,
        (Condition::Ats, Some(s)) => s
            .ats_grid
            .iter()
            .map(|&[a, b]| {
                Ok(point(LossConfig {
                    teacher_temps: Temperature::asymmetric(a, b)?,
                    student_temp: 1.0,
                    ..base
                }))
            })
            .collect::<Result<_>>()?,
        (Condition::KdS1, None) => vec![point(base.with_student_temp(1.0))],
        (Condition::Ils, None) => vec![point(base.with_label_mode(LabelMode::Flattened))],
        (_, None) => vec![point(base)],
    };
    Ok(out)
}

struct TargetObjective {
    targets: Vec<Vec<f64>>,
    loss: LossConfig,
}

impl SampleObjective for TargetObjective {
    fn loss_and_grad(&self, index: usize, logits: &[f64], label: usize) -> (f64, Vec<f64>) {
        let target = self.targets.get(index).map_or(&[][..], Vec::as_slice);
        kd::loss_and_grad_against_target(target, logits, label, &self.loss)
    }
}

/// Mean DA/DV/IV of the teacher's labels under `temperature`.
pub fn label_summary(teacher: &LogitDataset, temperature: Temperature) -> Result<StatsSummary> {
    let stats = teacher
        .records()
        .iter()
        .map(|r| metrics::decomposition_stats(r, temperature))
        .collect::<Result<Vec<_>>>()?;
    metrics::aggregate(&stats)
}

/// Trains a student at one grid point and reports it.
pub fn run_distillation(
    config: &ExperimentConfig,
    point: &GridPoint,
    teacher: Option<&TeacherRun>,
    seed: u64,
    train: &LabeledData,
    test: &LabeledData,
) -> Result<ResultRow> {
    let targets = if point.loss.lambda == 0.0 {
        Vec::new()
    } else {
        let t = teacher.ok_or_else(|| Error::contract("distillation needs a teacher"))?;
        t.train_logits
            .records()
            .iter()
            .map(|r| kd::teacher_target(r, &point.loss))
            .collect::<Result<_>>()?
    };
    let objective = TargetObjective {
        targets,
        loss: point.loss,
    };
    let student = train_model(&config.student, seed, Role::Student, train, None, &objective)?;
    let (tau1, tau2) = point.temps();
    let mut row = ResultRow {
        condition: point.condition,
        tau1,
        tau2,
        seed,
        teacher_train_acc: None,
        teacher_test_acc: None,
        student_test_acc: nn::accuracy(&student, test),
        da_mean: None,
        dv_mean: None,
        iv_mean: None,
    };
    if let (Some(t), true) = (teacher, point.condition != Condition::Nokd) {
        let s = label_summary(&t.train_logits, point.loss.teacher_temps)?;
        row.teacher_train_acc = Some(t.train_acc);
        row.teacher_test_acc = Some(t.test_acc);
        row.da_mean = Some(s.derived_avg.mean);
        row.dv_mean = Some(s.derived_var.mean);
        row.iv_mean = Some(s.inherent_var.mean);
    }
    Ok(row)
}

/// Mean DA/DV/IV of a teacher's labels at one temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tau: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub da: f64,
    pub dv: f64,
    pub iv: f64,
}

/// Teacher-level diagnostics for one seed and role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub seed: u64,
    pub role: String,
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_target_logit: f64,
    /// Training samples whose target logit is not the maximum.
    pub assumption_violations: usize,
    /// Same-block wrong-class probability mass at temperature 1, averaged
    /// over samples; `None` without affinity blocks.
    pub same_block_mass: Option<f64>,
    pub cross_block_mass: Option<f64>,
    /// Uniform temperature at each curve point.
    pub ts_curve: Vec<CurvePoint>,
    /// `tau1 = 1.25 tau`, `tau2 = 0.75 tau` at each curve point.
    pub ats_curve: Vec<CurvePoint>,
}

/// Mean DA/DV/IV of a teacher's labels over `taus`, either uniform or
/// with the asymmetric `(1.25 tau, 0.75 tau)` parameterization.
pub fn decomposition_curve(
    teacher: &LogitDataset,
    taus: &[f64],
    asymmetric: bool,
) -> Result<Vec<CurvePoint>> {
    taus.iter()
        .map(|&tau| {
            let temperature = if asymmetric {
                Temperature::asymmetric(1.25 * tau, 0.75 * tau)?
            } else {
                Temperature::uniform(tau)?
            };
            let s = label_summary(teacher, temperature)?;
            Ok(CurvePoint {
                tau,
                tau1: temperature.target_tau(),
                tau2: temperature.wrong_tau(),
                da: s.derived_avg.mean,
                dv: s.derived_var.mean,
                iv: s.inherent_var.mean,
            })
        })
        .collect()
}

/// Number of local maxima after merging neighbors within `tol` into
/// plateaus. Endpoints count when they exceed their single neighbor.
pub fn count_local_maxima(values: &[f64], tol: f64) -> usize {
    let mut levels: Vec<f64> = Vec::new();
    for &v in values {
        match levels.last() {
            Some(&last) if (v - last).abs() <= tol => {}
            _ => levels.push(v),
        }
    }
    if levels.len() <= 1 {
        return levels.len();
    }
    let n = levels.len();
    (0..n)
        .filter(|&i| {
            let left = i == 0 || levels[i] > levels[i - 1];
            let right = i == n - 1 || levels[i] > levels[i + 1];
            left && right
        })
        .count()
}

pub fn is_non_decreasing(values: &[f64], tol: f64) -> bool {
    values.windows(2).all(|w| w[1] >= w[0] - tol)
}

fn block_masses(teacher: &LogitDataset, blocks: &[usize]) -> Result<(f64, f64)> {
    let (mut same, mut cross) = (0.0, 0.0);
    for r in teacher.records() {
        let p = scaling::softmax_ts(r, 1.0)?;
        let y = r.label();
        for (c, pc) in p.probs().iter().enumerate() {
            if c == y {
                continue;
            }
            if blocks[c] == blocks[y] {
                same += pc;
            } else {
                cross += pc;
            }
        }
    }
    let n = teacher.len() as f64;
    Ok((same / n, cross / n))
}

fn summarize_teacher(
    run: &TeacherRun,
    taus: &[f64],
    blocks: Option<&[usize]>,
) -> Result<TeacherSummary> {
    let (same, cross) = match blocks {
        Some(b) if b.iter().any(|&x| x != b[0]) => {
            let (s, c) = block_masses(&run.train_logits, b)?;
            (Some(s), Some(c))
        }
        _ => (None, None),
    };
    Ok(TeacherSummary {
        seed: run.seed,
        role: run.role.name().to_string(),
        train_acc: run.train_acc,
        test_acc: run.test_acc,
        mean_target_logit: run.mean_target_logit(),
        assumption_violations: count_assumption_violations(&run.train_logits),
        same_block_mass: same,
        cross_block_mass: cross,
        ts_curve: decomposition_curve(&run.train_logits, taus, false)?,
        ats_curve: decomposition_curve(&run.train_logits, taus, true)?,
    })
}

/// Records whose target logit is not the strict maximum.
pub fn count_assumption_violations(dataset: &LogitDataset) -> usize {
    dataset
        .records()
        .iter()
        .filter(|r| !r.target_is_max())
        .count()
}

/// Ratio of the large teacher's mean target logit to the small teacher's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverconfidenceFlag {
    pub seed: u64,
    pub teacher_mean_target_logit: f64,
    pub small_teacher_mean_target_logit: f64,
    pub ratio: f64,
    pub over_confident: bool,
}

pub const OVERCONFIDENCE_RATIO: f64 = 1.5;

pub fn overconfidence(seed: u64, large: &TeacherRun, small: &TeacherRun) -> OverconfidenceFlag {
    let a = large.mean_target_logit();
    let b = small.mean_target_logit();
    let ratio = a / b;
    OverconfidenceFlag {
        seed,
        teacher_mean_target_logit: a,
        small_teacher_mean_target_logit: b,
        ratio,
        over_confident: b > 0.0 && ratio >= OVERCONFIDENCE_RATIO,
    }
}

/// Mean per-sample agreement between two equally sized logit corpora at
/// temperature 1.
pub fn dataset_agreement(a: &LogitDataset, b: &LogitDataset, k: usize) -> Result<AgreementStats> {
    dataset_agreement_at(a, b, Temperature::Uniform(1.0), k)
}

pub fn dataset_agreement_at(
    a: &LogitDataset,
    b: &LogitDataset,
    temperature: Temperature,
    k: usize,
) -> Result<AgreementStats> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.num_classes() != b.num_classes() {
        return Err(Error::LengthMismatch {
            expected: a.num_classes(),
            got: b.num_classes(),
        });
    }
    let per = a
        .records()
        .iter()
        .zip(b.records())
        .map(|(ra, rb)| {
            let pa = scaling::soften(ra, temperature)?;
            let pb = scaling::soften(rb, temperature)?;
            metrics::agreement(&pa, &pb, k)
        })
        .collect::<Result<Vec<_>>>()?;
    metrics::mean_agreement(&per)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub seed: u64,
    /// Teacher vs an independently seeded teacher of the same size.
    pub peer: AgreementStats,
    /// Teacher vs a same-size model trained on shuffled labels.
    pub shuffled_control: AgreementStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ResultRow>,
    pub teachers: Vec<TeacherSummary>,
    pub overconfidence: Vec<OverconfidenceFlag>,
    pub agreement: Vec<AgreementReport>,
}

impl RunReport {
    pub fn rows_for(&self, condition: Condition) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(move |r| r.condition == condition)
    }
}

fn par_map<T, R, F>(jobs: usize, items: Vec<T>, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync + Send,
{
    if jobs <= 1 {
        return items.into_iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
    pool.install(|| items.into_par_iter().map(f).collect())
}

/// Everything a sweep produced, including the trained teachers.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub report: RunReport,
    pub teachers: Vec<TeacherRun>,
}

/// Runs every configured condition over its grid points and seeds.
///
/// Without a `sweep` section each condition runs at the single point given
/// by `loss`. Rows are ordered by condition, then grid point, then seed.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize) -> Result<Experiment> {
    config.validate()?;
    let spec = config.synthetic()?;
    let (train, test) = data::generate(spec)?;

    let mut roles = vec![Role::Teacher];
    let wants_small = config.small_teacher.is_some();
    if wants_small {
        roles.push(Role::SmallTeacher);
    }
    if config.analysis.agreement {
        roles.extend([Role::PeerTeacher, Role::ShuffledControl]);
    }
    let needs_teacher = config.conditions.iter().any(|c| *c != Condition::Nokd)
        || wants_small
        || config.analysis.agreement;
    let teacher_jobs: Vec<(u64, Role)> = if needs_teacher {
        config
            .seeds
            .iter()
            .flat_map(|&s| roles.iter().map(move |&r| (s, r)))
            .collect()
    } else {
        Vec::new()
    };
    let teachers = par_map(jobs, teacher_jobs, |(s, r)| {
        run_teacher_on(config, s, r, &train, &test)
    })?;
    let find = |seed: u64, role: Role| {
        teachers
            .iter()
            .find(|t| t.seed == seed && t.role == role)
    };

    let mut student_jobs = Vec::new();
    for &condition in &config.conditions {
        for point in grid_points(config, condition)? {
            for &seed in &config.seeds {
                student_jobs.push((point, seed));
            }
        }
    }
    let rows = par_map(jobs, student_jobs, |(point, seed)| {
        let role = if point.condition.uses_small_teacher() {
            Role::SmallTeacher
        } else {
            Role::Teacher
        };
        run_distillation(config, &point, find(seed, role), seed, &train, &test)
    })?;

    let blocks = spec.block_of();
    let summaries = par_map(jobs, teachers.iter().collect(), |t| {
        summarize_teacher(t, &config.analysis.curve_taus, Some(&blocks))
    })?;

    let mut over = Vec::new();
    let mut agreement = Vec::new();
    for &seed in &config.seeds {
        if let (Some(large), Some(small)) = (find(seed, Role::Teacher), find(seed, Role::SmallTeacher)) {
            over.push(overconfidence(seed, large, small));
        }
        if let (Some(t), Some(peer), Some(ctrl)) = (
            find(seed, Role::Teacher),
            find(seed, Role::PeerTeacher),
            find(seed, Role::ShuffledControl),
        ) {
            let k = config.analysis.topk;
            agreement.push(AgreementReport {
                seed,
                peer: dataset_agreement(&t.train_logits, &peer.train_logits, k)?,
                shuffled_control: dataset_agreement(&t.train_logits, &ctrl.train_logits, k)?,
            });
        }
    }

    Ok(Experiment {
        report: RunReport {
            config_hash: config.hash(),
            seeds: config.seeds.clone(),
            rows,
            teachers: summaries,
            overconfidence: over,
            agreement,
        },
        teachers,
    })
}

/// [`run_experiment`] requiring a sweep section.
pub fn sweep(config: &ExperimentConfig, jobs: usize) -> Result<Experiment> {
    if config.sweep.is_none() {
        return Err(config_err("sweep", "a sweep run needs a [sweep] section"));
    }
    run_experiment(config, jobs)
}

/// Best grid point's median student accuracy across seeds for `condition`.
///
/// Returns `(tau1, tau2, median)`; `None` when the condition has no rows.
pub fn best_grid_median(report: &RunReport, condition: Condition) -> Option<(f64, f64, f64)> {
    let mut points: Vec<(f64, f64, Vec<f64>)> = Vec::new();
    for r in report.rows_for(condition) {
        match points.iter_mut().find(|p| p.0 == r.tau1 && p.1 == r.tau2) {
            Some(p) => p.2.push(r.student_test_acc),
            None => points.push((r.tau1, r.tau2, vec![r.student_test_acc])),
        }
    }
    points
        .into_iter()
        .map(|(a, b, accs)| (a, b, median(&accs)))
        .fold(None, |best: Option<(f64, f64, f64)>, p| match best {
            Some(b) if b.2 >= p.2 => Some(b),
            _ => Some(p),
        })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// DA/DV/IV aggregates of one logit corpus at one temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub source: String,
    pub temperature: Temperature,
    pub assumption_violations: usize,
    pub summary: StatsSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub temperature: Temperature,
    pub stats: AgreementStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub rows: Vec<AnalysisRow>,
    /// Present when exactly two corpora were analyzed.
    pub agreement: Vec<AgreementRow>,
}

/// Decomposition aggregates of each corpus at each temperature, plus
/// agreement between the first two corpora when two are given.
pub fn analyze_logits(
    datasets: &[LogitDataset],
    temperatures: &[Temperature],
    k: usize,
) -> Result<AnalysisReport> {
    if datasets.is_empty() || temperatures.is_empty() {
        return Err(Error::EmptyInput("datasets and temperatures"));
    }
    let mut rows = Vec::new();
    for ds in datasets {
        if ds.is_empty() {
            return Err(Error::EmptyInput("logit dataset"));
        }
        let violations = count_assumption_violations(ds);
        for &t in temperatures {
            rows.push(AnalysisRow {
                source: ds.source().to_string(),
                temperature: t,
                assumption_violations: violations,
                summary: label_summary(ds, t)?,
            });
        }
    }
    let mut agreement = Vec::new();
    if let [a, b] = datasets {
        for &t in temperatures {
            agreement.push(AgreementRow {
                temperature: t,
                stats: dataset_agreement_at(a, b, t, k)?,
            });
        }
    }
    Ok(AnalysisReport { rows, agreement })
}
