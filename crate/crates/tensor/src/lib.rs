//! Minimal dense `f64` tensors with a reverse-mode gradient graph.
//!
//! Every operation eagerly computes its result. When at least one input
//! requires a gradient, the result also records its inputs and a backward
//! rule, so calling [`Tensor::backward`] on a scalar loss populates the
//! gradients of every leaf that asked for one.
//!
//! Activations are laid out as `[batch, channel, height, width]` and all
//! data is stored row-major.
//!
//! ```
//! use pmsr_tensor::Tensor;
//!
//! let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap().with_grad();
//! let loss = x.mul(&x).unwrap().sum();
//! loss.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
//! ```

mod error;
mod gemm;
pub mod gradcheck;
mod ops;
pub mod rng;
mod shape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::conv::Conv2dSpec;
pub use ops::scalar;
pub use rng::SplitMix64;
pub use shape::{broadcast_shape, numel};
pub use tensor::{BackwardFn, Tensor};
