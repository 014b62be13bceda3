pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod inference;
pub mod nn;
pub mod orchestrator;
pub mod replay;
pub mod solver;
pub mod streams;

pub use error::{Error, Result};
