//! Tensor substrate, RNG, activations and the gradient oracle.

mod container;
mod grad_check;
pub mod ops;
mod rng;
mod tensor;

pub use container::{read_tensor, write_tensor, DType, TENSOR_MAGIC};
pub use grad_check::{finite_diff_grad, grad_rel_error};
pub use ops::{silu, softplus};
pub use rng::{rand_uniform, randn, randn_scaled, Rng, RngState};
pub use tensor::Tensor;
