//! Cone-beam CT reconstruction with a variable-view transformer and triplane
//! decoder, plus the simulation and evaluation tooling around it.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod projector;
pub mod selftest;
pub mod tensor;
pub mod trainer;
pub mod volume;
pub mod xformer;
pub mod xtriplane;

pub use dataset::{DatasetManifest, LoadedSample};
pub use error::{Error, Result};
pub use eval::{MetricReport, Reconstructor};
pub use geometry::{GeometryPerturbation, ScannerGeometry};
pub use model::{Ablation, ModelConfig, XLrm};
pub use projector::{NoiseModel, ProjectionSet};
pub use tensor::Mat;
pub use trainer::{TrainConfig, Trainer};
pub use volume::VolumeGrid;
pub use xformer::EncoderConfig;
pub use xtriplane::{DecoderConfig, Triplane};
