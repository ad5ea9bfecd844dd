pub mod cli;
pub mod colearning;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evalcli;
pub mod masking;
pub mod numerics;
pub mod objectives;

pub use error::{Error, Result};
