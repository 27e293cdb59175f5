//! Minimal dense tensor arithmetic with reverse-mode differentiation.
//!
//! The operator set is deliberately small: exactly what the embedding model
//! needs, double precision throughout, no broadcasting beyond the feature-map
//! by part-map weighting. Tapes are rebuilt per step and consumed by a single
//! backward pass.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, relative_error, EntryCheck, GradCheckReport, REL_FLOOR};
pub use params::ModelParams;
pub use tape::{Tape, ValueId};
pub use tensor::Tensor;
