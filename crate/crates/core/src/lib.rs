//! Catastrophic-forgetting dissection for convolutional encoder-decoder
//! captioners, and the continual-learning strategies it drives.
//!
//! The numeric core is generic over [`Scalar`] (`f32` and `f64`); the
//! aliases at the crate root pick `f32` for training and inference.

pub mod archive;
pub mod data;
pub mod dissect;
pub mod error;
pub mod evidence;
pub mod harness;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod scalar;
pub mod strategies;

pub use error::{CfdError, Result};
pub use masks::{BinaryMask, EvidenceMap, RepresentativeSelection, ThresholdPolicy};
pub use model::{ArchitectureDescriptor, Caption, ModelSnapshot, Vocabulary};
pub use scalar::Scalar;

/// Default scalar for training and inference.
pub type Real = f32;
pub type Snapshot = ModelSnapshot<Real>;
pub type Snapshot64 = ModelSnapshot<f64>;
pub type Evidence = EvidenceMap<Real>;
