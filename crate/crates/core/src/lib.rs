pub mod backbone;
pub mod config;
pub mod error;
pub mod eval;
pub mod gem;
pub mod geometry;
pub mod gim;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod refine;
pub mod sem;
pub mod synth;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
