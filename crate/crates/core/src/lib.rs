//! Source-free object-detection adaptation lab.
//!
//! A desk-scale two-stage anchor detector with batch normalization, a
//! procedurally generated domain-shifted detection benchmark, and the
//! self-training adaptation strategies that run on top of them (statistics
//! adaptation, pseudo-labelling, mean teacher, fixed pseudo-labels,
//! weak/strong augmentation, mosaic).

pub mod adabn;
pub mod adapt;
pub mod augment;
pub mod batchnorm;
pub mod boxes;
pub mod detector;
pub mod ops;
pub mod optim;
pub mod real;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use real::Real;
pub use tensor::{Tensor, TensorError};
