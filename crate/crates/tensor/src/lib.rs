//! Minimal dense tensors over `f64` with a reverse-mode autodiff tape.
//!
//! Every value is row-major. Binary elementwise ops broadcast along trailing
//! axes: shapes are right-aligned and each pair of extents must be equal or
//! one of them must be 1.
//!
//! ```
//! use spt_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).data(), &[2.0, 4.0]);
//! ```

mod error;
mod gradcheck;
mod kernels;
mod spatial;
mod tape;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport, Probe, ProbeResult};
pub use kernels::{gelu, gelu_grad, gemm, sigmoid};
pub use spatial::bilinear_weights;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
