//! Anchor-based natural language query localization over untrimmed video.
//!
//! Given per-frame video features and per-token query embeddings, the model
//! scores a multi-scale anchor lattice over `T` sampled frames and regresses
//! span boundaries; the top proposals are evaluated with `R@n, IoU@m`.

pub mod anchors;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod losses;
pub mod nn;
pub mod span;
pub mod trainer;

pub use error::{Error, Result};
