//! Dense-tensor reverse-mode automatic differentiation with the operator set
//! needed by small convolutional and recurrent regression networks, plus the
//! AdamW optimizer.
//!
//! ```
//! use omoq_autograd::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::scalar(3.0f64));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().item(), Some(6.0));
//! ```

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use error::{Error, Result};
pub use graph::{BatchNormState, Conv2dOptions, Graph, Var, LAYER_NORM_EPS};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Gradients, ParamId, ParamStore};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
