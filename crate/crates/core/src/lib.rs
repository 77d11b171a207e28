//! Self-supervised cycle-consistent visual tracking with dual-mode
//! contextual tokens.
//!
//! A toy joint template/search transformer is trained on videos labeled only
//! in their first frame: it tracks forward through unlabeled frames, crops a
//! new reference from its own last prediction, and tracks back to the labeled
//! frame where the known box supervises the whole cycle.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod cycle;
pub mod data;
pub mod dca;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod heads;
pub mod imaging;
pub mod instrument;
pub mod model;
pub mod nn;
pub mod plot;

pub use error::{Error, Result};
pub use geometry::{BBox, CropTransform, Space};
pub use imaging::Image;
