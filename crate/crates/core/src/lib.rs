//! Region-of-interest driven deformable registration of 3D volumes.
//!
//! Both images are segmented jointly into intensity classes with a Gaussian
//! mixture, each class is registered as its own channel under a local
//! normalized cross-correlation loss, and the per-class fields are fused and
//! refined on the full images. A diffeomorphic variant optimizes a
//! stationary velocity integrated by scaling and squaring.

pub mod easr;
pub mod engine;
pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod par;
pub mod phantom;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Dims, VectorField, Volume};
