//! Quality-diversity environment generation with a deep surrogate model of
//! agent behavior, over 16x16 mazes.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod dsage;
pub mod error;
pub mod experiment;
pub mod latent;
pub mod maze;
pub mod nn;
pub mod qd_opt;
pub mod surrogate;

pub use archive::{AddOutcome, AddStatus, Archive, Elite, MeasureSpec};
pub use error::{Error, Result};
pub use qd_opt::{GenotypeSpace, Optimizer, OptimizerKind};
