//! Segmentation kernels for curvilinear structures: morph-offset sampling,
//! selective state-space fusion along morphed scan orders, reverse guidance,
//! and the U-shaped network and training harness built on them.

pub mod error;
pub mod guidance;
pub mod harness;
pub mod mm_unet;
pub mod morph_conv;
pub mod ndgrad;
pub mod params;
pub mod selective_state;
pub mod verify;

pub use error::{Error, Result};
