pub mod error;
pub mod executor;
pub mod ir;
pub mod bcrc;
pub mod pruner;
pub mod reorder;
pub mod tensor;
pub mod tuner;

pub use error::{GrimError, Result};
