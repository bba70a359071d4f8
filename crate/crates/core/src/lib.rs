pub mod autodiff;
pub mod cli;
pub mod dataforge;
pub mod error;
pub mod losses;
pub mod model;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
