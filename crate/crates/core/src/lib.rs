//! Skeleton-based gait recognition: a residual graph convolutional network
//! that maps 2D pose sequences to unit-norm gait embeddings, trained with a
//! supervised contrastive loss.

pub mod augment;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod skeleton;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
