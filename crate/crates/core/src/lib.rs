//! Physics-informed policy iteration for discounted stochastic optimal
//! control, with Riccati and finite-difference reference solvers.

pub mod domain;
pub mod driver;
pub mod error;
pub mod evaluate;
pub mod improve;
pub mod net;
pub mod optim;
pub mod oracle;
pub mod problems;
pub mod sim;

pub use error::{Error, Result};
