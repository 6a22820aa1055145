//! Knowledge-distillation numerics with asymmetric temperature scaling.
//!
//! * [`scaling`]: stable softmax under uniform and asymmetric temperatures.
//! * [`metrics`]: derived average / derived variance / inherent variance and
//!   cross-teacher agreement statistics.
//! * [`kd`]: the combined CE + KD objective, its three-term decomposition, the
//!   flattened-label ablation and exact student-logit gradients.
//! * [`nn`]: a small MLP with backprop and SGD with momentum.
//! * [`data`]: synthetic affinity-structured classification data and the
//!   logit file format.
//! * [`harness`]: teacher training, distillation runs, temperature sweeps,
//!   numerical proposition checks and report emission.

pub mod data;
pub mod error;
pub mod harness;
pub mod kd;
pub mod metrics;
pub mod nn;
pub mod scaling;

pub use error::{Error, Result};
