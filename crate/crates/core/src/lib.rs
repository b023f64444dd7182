//! Edge-based circuit discovery for small vision transformers.
//!
//! The crate builds a reduced residual-stream computation graph over a
//! hookable transformer, records clean/corrupted activation caches, prunes
//! edges by sequential activation patching (with gradient-attribution
//! baselines), analyzes the structure of the recovered circuits, and uses
//! them for directional-ablation steering against typographic attacks.

pub mod analysis;
pub mod archive;
pub mod backward;
pub mod data;
pub mod discovery;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod patching;
pub mod planted;
pub mod rng;
pub mod steering;

pub use error::{Error, Result};
