pub mod conv;
pub mod counters;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod mstfm;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod sparsevox;
pub mod ssm;
pub mod tfm;
pub mod verify;
pub mod volume;
pub mod vsg;

pub use error::{Error, Result};
