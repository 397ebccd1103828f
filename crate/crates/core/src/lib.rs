//! Stochastic reduced-order models with model-form uncertainty.
//!
//! Operator-inference ROMs on polynomial manifolds are learned for many
//! training scenarios; a few anchor bases are selected by clustering on the
//! Stiefel manifold, and random projection bases are drawn as Dirichlet
//! combinations of the anchors in the tangent space of a global basis.
//! [`pipeline::run_pipeline`] runs the whole procedure on the viscous
//! Burgers equation.

pub mod config;
pub mod ensemble;
pub mod error;
pub mod fom;
pub mod io;
pub mod latent;
pub mod linalg;
pub mod ode;
pub mod opinf;
pub mod pipeline;
pub mod sampler;
pub mod stiefel;
pub mod uq;

pub use config::{PipelineConfig, RankChoice};
pub use ensemble::{AnchorEnsemble, ClusterCount, ClusterStrategy, CombinationSpec, GlobalBasis, Scenario};
pub use error::{Result, SromError};
pub use fom::{FomConfig, SnapshotMatrix};
pub use latent::{PolyRepresentation, ProjectionBasis, RankRule};
pub use ode::OdeOptions;
pub use opinf::{FeatureSpecGhat, GhatDictionary, ReducedOperators};
pub use pipeline::{run_pipeline, PipelineRun, RunManifest, RunSummary};
pub use sampler::{DirichletModel, StochasticSample};
pub use stiefel::{ConstraintMatrix, StiefelPoint, TangentVector};
pub use uq::{CiDeviation, UqEnsembleResult};
