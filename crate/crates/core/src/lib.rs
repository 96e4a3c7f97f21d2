//! Unsupervised artifact detection for volumetric scans.
//!
//! Slices are embedded into a 2-D artifact space by a contrastively trained
//! convolutional encoder, a normalizing flow models the density of the
//! volume-level embeddings, and volumes falling below a calibrated density
//! quantile are flagged. [`artsim`] corrupts images with seeded artifacts
//! and [`phantom`] generates synthetic volumes to train and test on.

pub mod artsim;
pub mod diffnet;
pub mod encoder;
pub mod flow;
pub mod phantom;
pub mod qc;
pub mod volio;

pub use artsim::{CorruptionKind, CorruptionSpec};
pub use encoder::{Embedding, EncoderConfig};
pub use flow::{FlowModel, FlowTrainConfig};
pub use qc::{Label, QcRecord, ThresholdCalibration, Verdict};
pub use volio::{Orientation, SliceImage, Volume};
