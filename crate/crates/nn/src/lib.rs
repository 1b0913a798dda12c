//! A small dense-tensor engine with reverse-mode differentiation.
//!
//! Everything the HiSGT decoder and the hierarchy GNN need lives here:
//! row-major [`Tensor`]s, a per-step [`Graph`] that records operations and
//! replays their gradient rules backwards, a named [`ParamStore`] with an
//! Adam optimizer, and a central-difference [`grad_check`].
//!
//! The engine is generic over [`Scalar`] so that training runs in `f32`
//! while gradient checks run the exact same code in `f64`.
//!
//! ```
//! use hisgt_nn::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::<f64>::new();
//! store.insert("w", Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap()).unwrap();
//! let mut g = Graph::new(false);
//! let x = g.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
//! let w = g.param(&store, "w").unwrap();
//! let y = g.matmul(x, w).unwrap();
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0]);
//! ```

mod error;
mod gradcheck;
mod graph;
mod params;
pub mod rng;
mod scalar;
mod tensor;

pub use error::NnError;
pub use gradcheck::{grad_check, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{DropoutKey, Gradients, Graph, Var};
pub use params::{AdamConfig, Param, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, NnError>;
