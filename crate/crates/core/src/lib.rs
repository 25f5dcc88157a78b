pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod seeds;
pub mod sparse;
pub mod synth;
pub mod train;

pub use error::{Error, ErrorClass, Result};
