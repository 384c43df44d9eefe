pub mod checks;
pub mod controller;
pub mod dynamics;
pub mod entropy;
pub mod error;
pub mod gp;
pub mod qp;
pub mod rhalc;
pub mod runner;
pub mod scenario;
pub mod scp;
pub mod track;
pub mod vehicle;

pub use error::{Error, Result};
