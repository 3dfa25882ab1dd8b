//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! The crate provides exactly the pieces a correlation tracker needs and no
//! more: rank 1 to 4 row-major tensors, a Wengert-list gradient tape, the
//! convolutional and attention primitives, finite-difference gradient
//! checking, seeded initialization, and a binary weight container.
//!
//! Operators are methods on [`Ctx`]. A context created with
//! [`Ctx::inference`] just computes values; one created over a [`GradGraph`]
//! additionally records each op so [`GradGraph::backward`] can accumulate
//! gradients for every leaf. Forward values and gradients are bitwise
//! reproducible for identical inputs: no op depends on iteration order of a
//! hash map, thread scheduling, or time.
//!
//! ```
//! use prl_tensor::{Ctx, GradGraph, Tensor};
//!
//! let graph = GradGraph::new();
//! let cx = Ctx::traced(&graph);
//! let x = cx.input(Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap());
//! let y = cx.mul(&x, &x).unwrap();
//! let loss = cx.sum_all(&y).unwrap();
//! let grads = graph.backward(&loss).unwrap();
//! assert_eq!(grads.grad_of(&x).unwrap().as_slice(), &[2.0, -4.0, 6.0]);
//! ```

mod error;
mod graph;
mod ops;
mod param;
mod tensor;

pub mod gradcheck;
pub mod init;
pub mod io;

pub use error::{Result, TensorError};
pub use graph::{value_and_grad, Ctx, GradGraph, GradStore, Var};
pub use ops::BatchNormOutput;
pub use param::Parameter;
pub use tensor::{Tensor, MAX_RANK};
