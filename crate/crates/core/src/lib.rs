pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod seed;
pub mod trainers;
pub mod vmf;

pub use error::{Error, Result};
