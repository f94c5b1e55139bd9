//! Cross-view feature transport: a differentiable Sinkhorn layer that
//! rearranges ground-view feature grids onto the aerial layout, trained for
//! cross-view retrieval.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod grid;
pub mod io;
pub mod metric;
pub mod model;
pub mod optim;
pub mod params;
pub mod retrieval;
pub mod sinkhorn;
pub mod tensor;
pub mod train;
pub mod transport;

pub use error::{Error, Result};
