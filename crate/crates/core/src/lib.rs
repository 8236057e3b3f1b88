pub mod error;
pub mod exactquantum;
pub mod fluctuations;
pub mod lattice;
pub mod linalg;
pub mod measures;
pub mod meanfield;
pub mod ode;
pub mod phasespace;
pub mod runner;
pub mod spectral;

pub use error::{Error, Result};
