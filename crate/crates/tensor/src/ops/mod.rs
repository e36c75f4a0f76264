pub mod conv;
mod attention;
mod elementwise;
mod layout;
mod linalg;
mod norm;
mod reduce;
mod resample;

/// Scalar versions of the nonlinearities, for fused kernels built on top.
pub mod scalar {
    pub use super::elementwise::{sigmoid_f as sigmoid, softplus_f as softplus};
}
