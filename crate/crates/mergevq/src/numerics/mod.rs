//! Dense-matrix kernels and the seeded random stream.

mod kernels;
mod matrix;
mod rng;
mod scalar;

pub use kernels::{attention, softmax};
pub use matrix::Matrix;
pub use rng::{rng_normal, RandomStream};
pub use scalar::Scalar;
