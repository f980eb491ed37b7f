//! Joint training of per-phase segmentation networks and bidirectional phase
//! translators on two-phase contrast imaging.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod io;
pub mod manifest;
pub mod nn;
pub mod objective;
pub mod phantom;
pub mod plot;
pub mod seed;
pub mod seg;
pub mod trainer;
pub mod translate;
pub mod types;

pub use error::{PcnError, Result};
pub use types::*;
