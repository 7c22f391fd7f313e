//! Post-training weight pruning driven by second-order output-distortion
//! curves and a dynamic-programming sparsity allocator.
//!
//! Stages, in pipeline order: [`scoring`] orders weights by Taylor saliency,
//! [`hessian`] builds the empirical Fisher, [`distortion`] evaluates the
//! per-layer curves, [`allocator`] picks one grid point per layer, and
//! [`pipeline`] ties them together. [`refnet`] is a small network with exact
//! gradients that serves as ground truth; [`dmb`] is the on-disk format.

pub mod allocator;
pub mod distortion;
pub mod dmb;
pub mod error;
pub mod hessian;
pub mod model_ir;
pub mod pipeline;
pub mod refnet;
pub mod scoring;
pub mod sparse;
pub mod stats;
pub mod verify;

pub use allocator::{AllocLayer, AllocationResult, Budget, BudgetMode, LayerAllocation, Solver};
pub use distortion::{CurveMethod, DeltaMode, DistortionCurve};
pub use dmb::{load_bundle, save_bundle, Bundle, BundleKind};
pub use error::{Error, Result};
pub use hessian::{FisherMatrix, FisherMode, Kappa};
pub use model_ir::{
    GradientBundle, LayerGradient, LayerKind, LayerRecord, ModelBundle, PruneMask, SampleMatrix,
    Tensor,
};
pub use pipeline::{PruneConfig, PruneContext, PruneOutcome, PruneReport};
pub use refnet::{CalibrationSet, LambdaWeights, RefNet, RefNetSpec};
