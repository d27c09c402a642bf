//! Multi-view skin-lesion mapping engine.
//!
//! Maps 2D lesion detections from a cylindrical camera rig onto a body mesh,
//! fuses multi-view sightings into unique 3D lesions and tracks them across
//! scans. A rig simulator produces synthetic sessions with ground truth.

// `!(x > 0.0)` style checks are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camgeom;
pub mod detect;
pub mod error;
pub mod fuse3d;
pub mod io;
pub mod meshops;
pub mod render;
pub mod rigsim;
pub mod session;
pub mod track;

pub use error::{Error, Result};
