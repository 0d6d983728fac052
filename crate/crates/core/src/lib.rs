//! Feed-forward image immunization against diffusion-based editing.
//!
//! A UNet++ generator produces bounded noise that is added only inside a
//! protected mask. It is trained end to end through a frozen, differentiable
//! editor so that edits of the unprotected background collapse. The crate
//! also ships per-image optimization baselines, counter-attacks, image
//! quality metrics and the experiment pipeline used by the `immunity` CLI.

pub mod attacks;
pub mod config;
pub mod data;
pub mod editors;
pub mod error;
pub mod eval;
pub mod immunizer;
pub mod pipeline;
pub mod profile;
pub mod training;

pub use error::{Error, Result};
