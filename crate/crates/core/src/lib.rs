//! Caption models constrained by a knowledge base of bias-prone token sets.
//!
//! A small Elman RNN captions synthetic scenes. Training adds two terms to
//! cross-entropy: a confidence penalty on bias-prone tokens given the full
//! scene, and a confusion penalty that pushes the model towards a uniform
//! choice inside a bias-prone set when the visual evidence is masked. The
//! [`reasoner`] turns the trained model's behaviour into per-scene
//! explanations and a dataset-level bias report.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what training uses.

pub mod datagen;
pub mod kb;
pub mod losses;
pub mod model;
pub mod reasoner;
pub mod scalar;
pub mod train;

pub use scalar::Scalar;

pub type Params = model::ModelParams<f64>;
pub type Params32 = model::ModelParams<f32>;
pub type Distribution = model::TokenDistribution<f64>;
pub type Breakdown = losses::LossBreakdown<f64>;
