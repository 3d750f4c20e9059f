pub mod autodiff;
pub mod darcy;
pub mod data;
pub mod error;
pub mod estimator;
pub mod functional;
pub mod grid;
pub mod operators;
pub mod pk;
pub mod riesz;
pub mod rng;

pub use error::{DopeError, Result};
