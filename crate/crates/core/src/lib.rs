pub mod cli;
pub mod compare;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod loss;
pub mod norm;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use generator::{Generator, GeneratorConfig, NormKind};
pub use rng::RngStream;
pub use tensor::{Axes, BinaryOp, IntoShape, ReduceKind, Shape, Tensor4};
