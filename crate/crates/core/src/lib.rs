//! Differentiable operation search for spatio-temporal multi-task forecasting.
//!
//! A shared bottom feeds a stack of hidden layers. Each layer holds one
//! task-specific module per task plus shared modules whose parameters are
//! reused by every task stream. During search each module carries five
//! candidate spatio-temporal operations and a Gumbel-relaxed selector;
//! after search the argmax operation is kept and the model is retrained.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod ops;
pub mod params;
pub mod rng;
pub mod search;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
