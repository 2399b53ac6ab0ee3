//! Conditional adversarial autoencoder for small labeled grayscale mass
//! images.
//!
//! The system learns a latent manifold of 64x64 masses conditioned on two
//! categorical descriptors (margin and shape). New labeled images are
//! produced by processing visual features in the latent space: convex
//! interpolation between encoded seed images, and category-constrained
//! mixing of randomly weighted seed features.
//!
//! Module map:
//! - [`datamodel`]: core value types, taxonomy, dataset ingestion
//! - [`nn`]: minimal tensor layers with explicit forward/backward passes
//! - [`networks`]: embedding modules, generator, dual-head discriminators
//! - [`losses`]: the three adversarial objectives and their pieces
//! - [`feature_processing`]: latent interpolation, simplex sampling, rank
//! - [`synthdata`]: deterministic synthetic labeled mass generator + oracle
//! - [`training`]: alternating adversarial training loop
//! - [`checkpoint`]: versioned model state archive (`F2M-CKPT-1`)
//! - [`evaluation`]: reconstruction reports, interpolation grids, label
//!   consistency

pub mod checkpoint;
pub mod datamodel;
pub mod evaluation;
pub mod feature_processing;
pub mod imageops;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod synthdata;
pub mod training;

pub use datamodel::{BiradsDescription, DatasetRecord, LatentFeature, MassImage, Taxonomy};
