//! Desk-scale adversarial robustness distillation: autodiff tensors, small
//! models, the ARD family of min-max objectives, attacks, a deterministic trainer
//! and the evaluation protocols.

pub mod attacks;
pub mod cli;
mod codec;
pub mod datasets;
pub mod evalbench;
pub mod losses;
pub mod models;
pub mod scalar;
pub mod tensorcore;
pub mod trainer;

pub use scalar::Scalar;

pub type Tensor = tensorcore::Tensor<f64>;
pub type TensorF32 = tensorcore::Tensor<f32>;
pub type Graph = tensorcore::Graph<f64>;
pub type GraphF32 = tensorcore::Graph<f32>;
pub type Model = models::Model<f64>;
pub type ModelF32 = models::Model<f32>;
pub type MethodSpec = losses::MethodSpec<f64>;
pub type AttackSpec = attacks::AttackSpec<f64>;
pub type TrainConfig = trainer::TrainConfig<f64>;
