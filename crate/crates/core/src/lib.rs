//! Multi-modal deformable registration of 3D volumes.
//!
//! The engine optimizes a dense displacement field per image pair against a
//! composite objective: a local-gradient similarity that ignores contrast
//! polarity, a windowed cross-correlation against an intensity-translated
//! floating image, and a smoothness penalty. A small parametric translator
//! is trained alternately with the field.

pub mod adam;
pub mod error;
pub mod eval;
pub mod field;
pub mod filters;
pub mod gradcheck;
pub mod io;
pub mod registration;
pub mod similarity;
pub mod synth;
pub mod translator;
pub mod volume;

pub use error::{Error, Result};
pub use field::{DisplacementField, JacobianStats, VectorField};
pub use registration::{register, RegistrationConfig, RegistrationMode, RegistrationReport};
pub use similarity::LossConfig;
pub use translator::{TranslatorKind, TranslatorModel, TranslatorTrainState};
pub use volume::{normalize_intensity, Dims, LabelMask, Volume3D};
