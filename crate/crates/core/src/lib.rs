//! Upscaling of hydraulic conductivity in 3D fractured media.
//!
//! The crate covers the full pipeline: stochastic discrete fracture networks
//! ([`dfn`]), correlated tensor conductivity fields ([`field`]), projection of
//! fractures onto voxel grids ([`voxel`]), a full-tensor finite-volume Darcy
//! solver ([`solver`]), block numerical homogenization ([`homog`]), a
//! from-scratch 3D convolutional surrogate ([`net`]), and dataset tooling
//! ([`dataset`]).

pub mod dataset;
pub mod dfn;
pub mod error;
pub mod field;
pub mod homog;
pub mod net;
pub mod solver;
pub mod voxel;

pub use dfn::{Box3, DfnSpec, Fracture, FractureSetSpec, PhysicalConstants};
pub use error::{Error, Result};
pub use field::{CovarianceSpec, GridSpec, ScalarField, TensorFieldParams, TensorGrid};
pub use dataset::{DatasetSample, NormalizationStats, SampleConfig};
pub use homog::{BlockLayout, CoarseField, EquivalentTensor, PhaseTiming};
pub use net::{Network, NetworkConfig, SurrogateModel, TrainConfig};
pub use solver::{BoundaryCondition, FaceBc, HeadSolution};
