pub mod analysis;
pub mod config;
pub mod error;
pub mod io;
pub mod ipc;
pub mod loops;
pub mod pam;
pub mod readout;
pub mod rng;
pub mod scenario;
pub mod reservoir;
pub mod signals;

pub use error::{Error, Result};
