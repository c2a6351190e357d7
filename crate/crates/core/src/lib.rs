pub mod cli;
pub mod cohort;
pub mod config;
pub mod diffengine;
pub mod encoder;
pub mod error;
pub mod maskext;
pub mod predictor;
pub mod signal;
pub mod streams;
pub mod toppe;
pub mod training;

pub use error::{Error, Result};
