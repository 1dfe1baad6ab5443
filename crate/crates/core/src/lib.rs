pub mod em;
pub mod error;
pub mod eval;
pub mod forward;
pub mod geometry;
pub mod inversion;
pub mod io;
pub mod learn;
pub mod linalg;
pub mod methods;
pub mod scalar;
pub mod scene;
pub mod xpra;

pub use error::{Error, Result};
pub use scalar::{Cplx, Scalar};

/// Double-precision instantiations of the generic core.
pub type SceneConfigF64 = scene::SceneConfig<f64>;
pub type DatasetF64 = scene::Dataset<f64>;
pub type GroundTruthMapF64 = scene::GroundTruthMap<f64>;
pub type ForwardSolverF64 = forward::ForwardSolver<f64>;
pub type XpraOperatorF64 = xpra::XpraOperator<f64>;
pub type InversionSystemF64 = inversion::InversionSystem<f64>;
pub type ContextF64 = learn::Context<f64>;
pub type UnrolledModelF64 = learn::UnrolledModel<f64>;
pub type ModelF64 = methods::Model<f64>;
