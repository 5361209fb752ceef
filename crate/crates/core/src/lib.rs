//! Model-agnostic variable importance with targeted-learning confidence intervals.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the estimators and CLI use.

pub mod cli;
pub mod conddens;
pub mod data;
pub mod eif;
pub mod error;
pub mod estimators;
pub mod law;
pub mod learners;
pub mod linalg;
pub mod real;
pub mod sim;
pub mod targeting;
pub mod verify;

pub use eif::{Estimand, EstimandKind, LearnerMode};
pub use error::{Result, VitlError};
pub use real::Real;

pub type Dataset = data::Dataset<f64>;
pub type FittedLearner = learners::FittedLearner<f64>;
pub type CondDensityModel = conddens::CondDensityModel<f64>;
pub type WeightedLaw = law::WeightedLaw<f64>;
pub type WeightedSample = law::WeightedSample<f64>;



pub type DiscreteJoint = verify::DiscreteJoint<f64>;
pub type FluctuationSupport = targeting::FluctuationSupport<f64>;
pub type EstimateReport = estimators::EstimateReport<f64>;
