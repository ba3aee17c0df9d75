//! Controllable category diversity for recommendation.
//!
//! Stage I scores every category for a user with a wide & deep model over the
//! user's recent items and picks the top `K`. Stage II retrieves items from a
//! per-category inverted index of posterior-weighted top-N items, restricted to
//! those `K` categories. `K` is the diversity knob: more trigger categories,
//! more distinct categories exposed.
//!
//! Modules follow the pipeline order: [`ingest`] → [`samples`] → [`model`] →
//! [`train`] → [`eval`] / [`itemmatch`].

pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod ingest;
pub mod itemmatch;
pub mod model;
pub mod samples;
pub mod synth;
pub mod train;

pub use dataset::Dataset;
pub use error::{Error, ErrorClass, Result};
