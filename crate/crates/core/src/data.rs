//! Synthetic classification data with block-structured class affinities, and
//! the plain-text logit file format.
//!
//! Logit files look like
//!
//! ```text
//! #logits v1 classes=3
//! 0,1.0,2.0,3.0
//! 2,-0.5,0.25,4
//! ```
//!
//! Line 1 is the header; every other non-empty line not starting with `#` is
//! `label,f_1,...,f_C`. Values are written in shortest round-trip decimal
//! form, so a write/read cycle is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseErrorKind, Result};
use crate::scaling::LogitRecord;

/// Feature vectors with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
    input_dim: usize,
}

impl LabeledData {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::LengthMismatch {
                expected: inputs.len(),
                got: labels.len(),
            });
        }
        let input_dim = inputs.first().map_or(0, Vec::len);
        if inputs.iter().any(|x| x.len() != input_dim) {
            return Err(Error::contract("inputs have inconsistent dimensions"));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            input_dim,
        })
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same inputs with labels replaced, e.g. for a shuffled-label control.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.inputs.clone(), labels, self.num_classes)
    }
}

/// Gaussian clusters whose means are grouped into affinity blocks.
///
/// Each block gets a random center; each class mean is its block center plus
/// `(1 - block_tightness)` times a random class offset, so classes in one
/// block sit closer together than classes in different blocks. Samples are
/// the class mean plus isotropic noise of scale `cluster_spread`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub cluster_spread: f64,
    /// Standard deviation of block centers and class offsets.
    #[serde(default = "default_mean_scale")]
    pub mean_scale: f64,
    pub affinity_groups: Vec<Vec<usize>>,
    pub block_tightness: f64,
    pub seed: u64,
}

fn default_mean_scale() -> f64 {
    1.0
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            input_dim: 20,
            train_per_class: 200,
            test_per_class: 200,
            cluster_spread: 1.0,
            mean_scale: 1.0,
            affinity_groups: vec![(0..5).collect(), (5..10).collect()],
            block_tightness: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Error::Config {
            key: format!("data.synthetic.{key}"),
            message,
        };
        if self.num_classes < 2 {
            return Err(bad("num_classes", "need at least 2 classes".into()));
        }
        if self.input_dim == 0 || self.train_per_class == 0 {
            return Err(bad("input_dim", "dimensions and counts must be positive".into()));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(bad("cluster_spread", "must be positive".into()));
        }
        if !(self.mean_scale > 0.0 && self.mean_scale.is_finite()) {
            return Err(bad("mean_scale", "must be positive".into()));
        }
        if !(self.block_tightness > 0.0 && self.block_tightness < 1.0) {
            return Err(bad("block_tightness", "must lie strictly in (0, 1)".into()));
        }
        let mut seen = vec![false; self.num_classes];
        for &c in self.affinity_groups.iter().flatten() {
            if c >= self.num_classes || seen[c] {
                return Err(bad(
                    "affinity_groups",
                    format!("class {c} is out of range or listed twice"),
                ));
            }
            seen[c] = true;
        }
        if seen.iter().any(|s| !s) || self.affinity_groups.iter().any(Vec::is_empty) {
            return Err(bad(
                "affinity_groups",
                "groups must partition every class into nonempty blocks".into(),
            ));
        }
        Ok(())
    }

    /// Block index of every class.
    pub fn block_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_classes];
        for (b, group) in self.affinity_groups.iter().enumerate() {
            for &c in group {
                out[c] = b;
            }
        }
        out
    }

    /// The class means, one per class.
    pub fn class_means(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut rng = stream(self.seed, 0);
        let d = self.input_dim;
        let mut gauss = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    self.mean_scale * z
                })
                .collect::<Vec<f64>>()
        };
        let centers: Vec<Vec<f64>> = self.affinity_groups.iter().map(|_| gauss(d)).collect();
        let offsets: Vec<Vec<f64>> = (0..self.num_classes).map(|_| gauss(d)).collect();
        let shrink = 1.0 - self.block_tightness;
        let blocks = self.block_of();
        Ok((0..self.num_classes)
            .map(|c| {
                centers[blocks[c]]
                    .iter()
                    .zip(&offsets[c])
                    .map(|(m, o)| m + shrink * o)
                    .collect()
            })
            .collect())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Train and test sets drawn from independent RNG streams. Samples are
/// interleaved by class: `0, 1, ..., C-1, 0, 1, ...`.
pub fn generate(spec: &SyntheticSpec) -> Result<(LabeledData, LabeledData)> {
    let means = spec.class_means()?;
    let draw = |count: usize, id: u64| -> Result<LabeledData> {
        let mut rng = stream(spec.seed, id);
        let mut inputs = Vec::with_capacity(count * spec.num_classes);
        let mut labels = Vec::with_capacity(count * spec.num_classes);
        for _ in 0..count {
            for (c, mean) in means.iter().enumerate() {
                inputs.push(
                    mean.iter()
                        .map(|m| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            m + spec.cluster_spread * z
                        })
                        .collect(),
                );
                labels.push(c);
            }
        }
        LabeledData::new(inputs, labels, spec.num_classes)
    };
    Ok((draw(spec.train_per_class, 1)?, draw(spec.test_per_class, 2)?))
}

/// A corpus of per-sample logits sharing one class count.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitDataset {
    num_classes: usize,
    records: Vec<LogitRecord>,
    source: String,
}

impl LogitDataset {
    pub fn new(num_classes: usize, records: Vec<LogitRecord>, source: impl Into<String>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::contract("a logit dataset needs at least 2 classes"));
        }
        if let Some(r) = records.iter().find(|r| r.num_classes() != num_classes) {
            return Err(Error::LengthMismatch {
                expected: num_classes,
                got: r.num_classes(),
            });
        }
        Ok(Self {
            num_classes,
            records,
            source: source.into(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn records(&self) -> &[LogitRecord] {
        &self.records
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

const LOGIT_MAGIC: &str = "#logits v1 classes=";

/// Renders a dataset in the logit file format.
pub fn format_logit_file(dataset: &LogitDataset) -> String {
    let mut out = format!("{LOGIT_MAGIC}{}\n", dataset.num_classes);
    for r in &dataset.records {
        let _ = write!(out, "{}", r.label());
        for f in r.logits() {
            let _ = write!(out, ",{f:?}");
        }
        out.push('\n');
    }
    out
}

pub fn write_logit_file(dataset: &LogitDataset, path: &Path) -> Result<()> {
    fs::write(path, format_logit_file(dataset)).map_err(|e| Error::io(path, e))
}

pub fn read_logit_file(path: &Path) -> Result<LogitDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        kind: ParseErrorKind::Encoding,
    })?;
    parse_logit_str(&text, path)
}

/// Parses logit-file text; `origin` only labels errors and provenance.
pub fn parse_logit_str(text: &str, origin: &Path) -> Result<LogitDataset> {
    let err = |line: usize, kind: ParseErrorKind| Error::Parse {
        path: origin.to_path_buf(),
        line,
        kind,
    };
    let mut lines = text.split('\n').enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, ParseErrorKind::MalformedHeader("missing header".into())))?;
    let classes: usize = header
        .strip_prefix(LOGIT_MAGIC)
        .and_then(|c| c.trim_end_matches('\r').parse().ok())
        .filter(|&c| c >= 2)
        .ok_or_else(|| err(1, ParseErrorKind::MalformedHeader(header.to_string())))?;

    let mut records = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != classes + 1 {
            return Err(err(
                lineno,
                ParseErrorKind::Arity {
                    expected: classes + 1,
                    got: fields.len(),
                },
            ));
        }
        let label: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| err(lineno, ParseErrorKind::BadNumber(fields[0].to_string())))?;
        if label >= classes {
            return Err(err(lineno, ParseErrorKind::LabelOutOfRange { label, classes }));
        }
        let mut logits = Vec::with_capacity(classes);
        for f in &fields[1..] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| err(lineno, ParseErrorKind::BadNumber(f.to_string())))?;
            if !v.is_finite() {
                return Err(err(lineno, ParseErrorKind::NonFinite(f.to_string())));
            }
            logits.push(v);
        }
        records.push(LogitRecord::new(logits, label)?);
    }
    LogitDataset::new(classes, records, origin.display().to_string())
}

/// Writes labeled features as `#data v1 classes=<C> dim=<D>` followed by
/// `label,x_1,...,x_D` rows.
pub fn write_labeled_data(data: &LabeledData, path: &Path) -> Result<()> {
    let mut out = format!("#data v1 classes={} dim={}\n", data.num_classes, data.input_dim);
    for (x, y) in data.inputs.iter().zip(&data.labels) {
        let _ = write!(out, "{y}");
        for v in x {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
