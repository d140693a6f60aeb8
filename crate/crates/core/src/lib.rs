//! Speech-driven talking faces through a segmentation intermediate.
//!
//! Speech and a pair of masks drive a U-Net that predicts a talking mask
//! sequence ([`tsg`]); a region-aware encoder and a mask-guided style
//! generator turn each mask plus a reference image into a frame ([`sgi`]).
//! A segmentation-domain sync expert ([`sync_expert`]) supervises lip
//! motion and doubles as an evaluation metric ([`metrics`]).

pub mod audio;
pub mod error;
pub mod frame;
pub mod harness;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod sgi;
pub mod sync_expert;
pub mod tsg;

pub use error::{Error, Result};
