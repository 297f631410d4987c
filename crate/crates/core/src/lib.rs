//! Program synthesis with discrete latent codes.
//!
//! A program encoder compresses a program into a short sequence of codebook tokens, a latent
//! predictor proposes such codes from input/output examples, and a decoder writes the program
//! conditioned on both. Search runs at both levels.

pub mod dsl;
pub mod eval;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod search;
pub mod taskgen;
pub mod train;
pub mod vq;

pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Codebook32 = vq::Codebook<f32>;
pub type Codebook64 = vq::Codebook<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
