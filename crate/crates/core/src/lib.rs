//! RDRSR: a sequential recommender that encodes a click window with
//! self-attention, predicts how many interests the window holds, and
//! allocates the clicks to that many interest representations with a
//! policy trained by REINFORCE.

pub mod allocator;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diff;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod interest;
pub mod model;
pub mod objective;
pub mod seed;
pub mod train;
pub mod window;

pub use config::{EvalMode, Pooling, RunConfig};
pub use error::{Error, Result};
pub use model::{Model, ModelDims, ModelOptions};
