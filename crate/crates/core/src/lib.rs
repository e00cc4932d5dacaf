//! Data model, preference losses, pairing and evaluation for counterfactual
//! video preference data.

pub mod evalharness;
pub mod manifest;
pub mod mixdpo;
pub mod model;
pub mod pairing;

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the loss kernels are generic over.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub type ToyPolicyF64 = mixdpo::ToyPolicy<f64>;
pub type ToyPolicyF32 = mixdpo::ToyPolicy<f32>;
pub type LossConfigF64 = mixdpo::LossConfig<f64>;
pub type LossConfigF32 = mixdpo::LossConfig<f32>;
pub type MixLossF64 = mixdpo::MixLoss<f64>;
pub type TrainOptionsF64 = mixdpo::TrainOptions<f64>;
