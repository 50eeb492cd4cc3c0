//! Feature decomposition and relation-weighted reconstruction head for
//! expression recognition on precomputed basic features.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fdn;
pub mod gradcheck;
pub mod inspect;
pub mod inter_rm;
pub mod intra_rm;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod sweep;
pub mod trainer;

pub use error::{FdrlError, Result};
