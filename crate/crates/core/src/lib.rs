//! Binomial pricing of exotic options with matrix product states.

pub mod asian;
pub mod basket;
pub mod binomial;
pub mod error;
pub mod report;
pub mod tensor;
pub mod ttcross;

pub use error::{Error, Result};
pub use report::{Method, PriceReport};
