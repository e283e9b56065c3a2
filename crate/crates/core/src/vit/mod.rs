//! Vision-transformer feature extractor.
//!
//! Images are cut into non-overlapping patches, linearly projected, prefixed
//! with a learned CLS token, offset by a learned positional table and run
//! through a stack of pre-norm transformer blocks. The final-layer CLS state
//! is the image embedding.

mod config;
mod forward;
mod params;

pub use config::{ConfigError, ViTConfig};
pub use forward::{Mode, LN_EPS};
pub use params::{trunc_normal, BlockParams, ParamsError, ViTParams, INIT_STD};
