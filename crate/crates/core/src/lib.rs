pub mod bench;
pub mod cee;
pub mod dweights;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod nuisance;
pub mod panel;
pub mod simgen;
pub mod zestim;

pub use error::{Error, Result};
