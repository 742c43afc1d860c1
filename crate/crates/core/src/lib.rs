//! Sparse-view ADF-STEM tomography with scattering-aware Gaussian splatting.
//!
//! Pipeline: a classical filtered-backprojection volume seeds a cloud of 3D
//! Gaussians, each carrying a positive scattering strength (denza). The cloud
//! is rendered by additive splatting with a per-view line-integral
//! normalisation and fitted to the measured tilt series by gradient descent
//! on pixel, Fourier-amplitude, SSIM and 3D total-variation terms.

pub mod classical;
pub mod cli;
mod dual;
pub mod error;
pub mod gaussians;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod splatter;
pub mod ssim;
pub mod synthdata;
pub mod trainer;
pub mod volume;
pub mod voxelizer;

pub use dual::{sigmoid, softplus};
pub use error::{Error, Result};
pub use gaussians::GaussianCloud;
pub use geometry::{BeamKind, BeamModel, DetectorGrid, TiltGeometry};
pub use splatter::CloudGradients;
pub use volume::{GridSpec, ProjectionImage, ProjectionStack, Volume};
