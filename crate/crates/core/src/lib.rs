//! Ground states, rotation barriers and orientational-melting analysis for
//! planar crystals of trapped ions.

pub mod analysis;
pub mod barrier;
pub mod cli;
pub mod constants;
pub mod energy;
pub mod error;
pub mod groundstate;
pub mod imaging;
pub mod melting;
pub mod numeric;
pub mod trap;

pub use error::{Error, Result};
