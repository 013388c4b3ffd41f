//! Conditional flow-matching dubbing model with a three-phase transformer
//! backbone, alignment regularizers and dual-scale guidance.

pub mod backbone;
pub mod conditioning;
pub mod config;
pub mod data_io;
pub mod error;
pub mod flow;
pub mod jsar;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod trainer;
pub mod verify;

pub use cosync_autograd as autograd;
pub use error::{Error, Result};
