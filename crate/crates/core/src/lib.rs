//! Monte-Carlo toolkit for a Yosida-regularized reaction–diffusion equation on
//! `(0, 1)` with Dirichlet boundary conditions and coloured noise:
//! spectral Galerkin dynamics, tangent flows and gradient weights, invariant
//! measure sampling, integration-by-parts certification and surface measures.

pub mod config;
pub mod cylinder;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod invariant;
pub mod malliavin;
pub mod noise;
pub mod oracles;
pub mod reaction;
pub mod spectral;
pub mod stats;

pub use config::ModelConfig;
pub use cylinder::{CylinderField, CylinderFunction};
pub use dynamics::{BelWeight, Integrator, PathDiagnostics, PathSpec, PathState};
pub use error::{Error, Result};
pub use invariant::{EnsembleMeta, SampleEnsemble};
pub use noise::{NoiseIncrement, NoiseSource};
pub use reaction::{Drift, OddPolynomial, YosidaParam};
pub use spectral::{Collocation, GridField, SobolevIndex, SpectralVector};
pub use stats::FunctionalEstimate;
