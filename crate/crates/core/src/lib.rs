pub mod approx;
pub mod distributions;
pub mod error;
pub mod hmc;
pub mod model;
pub mod modelselect;
pub mod smc;

pub use error::{Error, Result};
