//! Graph neural ODEs for learning continuous-time dynamics on networks.

pub mod autodiff;
pub mod datasets;
pub mod dynamics;
pub mod error;
pub mod graphgen;
pub mod matrix;
pub mod models;
pub mod odeint;
pub mod operators;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
