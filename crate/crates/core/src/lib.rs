// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod config;
pub mod container;
pub mod cost;
pub mod error;
pub mod eval;
pub mod global;
pub mod local;
pub mod loss;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod pretrain;
pub mod report;
pub mod rng;
pub mod roi;
pub mod training;
mod scalar;

pub use error::{Error, Result};
pub use scalar::{sigmoid, Scalar};

pub type Gmic3d32 = model::Gmic3d<f32>;
pub type Gmic3d64 = model::Gmic3d<f64>;
pub type Checkpoint32 = training::Checkpoint<f32>;
pub type Checkpoint64 = training::Checkpoint<f64>;
