//! LinGlo: key-only attention, residual parallel conditional positional
//! encoding and the four-stage hierarchical backbone built on them.

pub mod attention;
pub mod backbone;
pub mod bench;
pub mod error;
pub mod numerics;
pub mod posenc;
pub mod reference;
pub mod verify;

pub use error::{Error, Result};
