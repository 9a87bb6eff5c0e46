pub mod diagnostics;
pub mod error;
pub mod fitting;
pub mod forward_model;
pub mod io;
pub mod model_selection;
pub mod pipeline;
pub mod reduction;
pub mod sampling;
pub mod statistics;

pub use error::{Error, Result};
