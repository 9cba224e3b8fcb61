pub mod commands;
pub mod data;
pub mod error;
pub mod features;
pub mod harness;
pub mod inference;
pub mod io;
pub mod learning;
pub mod model;
pub mod oracle;
pub mod quantum;

pub use error::{Error, Result};
