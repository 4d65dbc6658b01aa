//! Activity-specific feature head for multi-label activity recognition.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and tape-based reverse-mode autodiff
//! - [`nn`]: grouped linear projections, attention rows, dropout, init
//! - [`head`]: observations, activity-specific features, the correlation
//!   map, dual predictions, parameter counting and map export
//! - [`dataset`]: synthetic multi-label videos, the frozen backbone stub,
//!   clip sampling and the on-disk tensor format
//! - [`train`]: loss, SGD, the two-phase schedule, multi-view inference
//!   and mAP evaluation

mod codec;
pub mod dataset;
pub mod error;
pub mod head;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{grad_check, DType, Scalar, Tape, Tensor, Var};
pub use dataset::{BackboneStub, DatasetSpec, SyntheticVideo};
pub use head::{FeatureVolume, HeadConfig, HeadParams};
pub use train::{EvalReport, TrainConfig, ViewPlan};
