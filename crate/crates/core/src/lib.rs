pub mod blocks;
pub mod cli;
pub mod connectivity;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
