pub mod bsde;
pub mod catalog;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod feynman_kac;
pub mod galerkin;
pub mod interp;
pub mod inverse_flow;
pub mod ito_wentzell;
pub mod model;
pub mod noise;
pub mod regression;
pub mod sde_flow;
pub mod stats;

pub use error::{Error, Result};
