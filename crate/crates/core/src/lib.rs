//! Operator learning with neural controlled differential equations.

pub mod autodiff;
pub mod config;
pub mod container;
pub mod error;
pub mod evaluation;
pub mod ncde;
pub mod nn;
pub mod ode;
pub mod operator;
pub mod path;
pub mod pde_data;
pub mod training;

pub use error::{Error, Result};
