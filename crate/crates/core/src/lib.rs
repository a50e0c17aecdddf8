//! Annotation-efficient training for image segmentation and classification.
//!
//! The crate covers the full desk-scale pipeline: preprocessing and seeded
//! splits ([`data`]), class-imbalance weights ([`class_weights`]), training
//! losses ([`losses`]), a small reverse-mode autodiff engine ([`autograd`])
//! with micro reference networks ([`models`]), supervised and cross-teaching
//! segmentation trainers ([`seg`]), joint-embedding pretraining ([`selfsup`]),
//! clustering-based unsupervised segmentation ([`picie`]), scoring and
//! saliency ([`metrics`]), and the experiment harness ([`harness`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod class_weights;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod picie;
pub mod seg;
pub mod selfsup;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
