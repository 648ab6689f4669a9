//! Synthetic fMRI decoding and reconstruction-enhancement pipeline.
//!
//! The pipeline simulates voxel responses to procedurally generated stimulus
//! images, decodes image features and categories back out of the voxels,
//! produces a class-conditional image for the decoded category, reconstructs
//! a blurry baseline image from the voxels, and merges the two by style
//! transfer. Everything is seeded and reproducible: a run directory with a
//! checksummed manifest is the unit of experiment.

pub mod category;
pub mod dataio;
pub mod decoder;
pub mod evalx;
pub mod featurenet;
pub mod generator;
pub mod pipeline;
pub mod reconstructor;
pub mod simulator;
pub mod styletransfer;
pub mod util;
