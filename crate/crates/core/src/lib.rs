pub mod checkpoint;
pub mod container;
pub mod encoders;
pub mod expert;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod plan;
pub mod runtime;
pub mod scalar;
pub mod sim;
pub mod tensor;

pub type Model32 = expert::Model<f32>;
pub type Model64 = expert::Model<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
pub type LearnedPolicy32 = runtime::LearnedPolicy<f32>;
pub type LearnedPolicy64 = runtime::LearnedPolicy<f64>;
