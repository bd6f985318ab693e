pub mod controller;
pub mod env;
pub mod error;
pub mod harness;
pub mod ledger;
pub mod memory;
pub mod observer;
pub mod policy;
pub mod rng;
pub mod state;
pub mod verifier;

pub use error::{Error, Result};
