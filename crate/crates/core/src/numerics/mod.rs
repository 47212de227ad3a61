//! Dense CPU tensor engine: forward kernels, a gradient tape, deterministic
//! initialization, allocation accounting and the weight container.

pub mod container;
pub mod conv;
mod element;
pub mod gradcheck;
pub mod meter;
pub mod ops;
mod rng;
mod store;
mod tape;
mod tensor;

pub use conv::{conv2d, conv_out_extent, Conv2dSpec};
pub use element::{DType, Element};
pub use gradcheck::{grad, gradcheck, GradcheckConfig, GradcheckReport};
pub use meter::AllocationMeter;
pub use ops::{gelu, layernorm, matmul, softmax};
pub use rng::CounterRng;
pub use store::ParamStore;
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::Tensor;
