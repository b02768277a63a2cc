//! Reversible, attribute-preserving face de-identification at desk scale.
//!
//! The pipeline encodes an image into a three-level latent pyramid plus
//! spatial feature maps, splits each latent level into attribute and
//! identity codes with shared multi-head attention, rewrites the identity
//! codes under a key, reweights the feature maps with channel/spatial
//! attention, and decodes with a style-modulated generator. The same keyed
//! mapping anonymizes and recovers; only the matching key restores the
//! original identity.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cid;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod kria;
pub mod losses;
pub mod maar;
pub mod model;
pub mod nn;
pub mod synthetic;
pub mod training;
pub mod types;

pub use error::{DbafError, Result};
