//! Learning off-the-grid k-space sampling patterns.
//!
//! Sample locations are optimized by L-BFGS on the reconstruction error of
//! training images, with gradients obtained by reverse-mode differentiation
//! through a fixed number of iterations of the reconstructor (Tikhonov
//! conjugate gradient or l1-wavelet FISTA) and an exact direct NUFT.

pub mod error;
pub mod experiment;
pub mod frame;
pub mod grad;
pub mod io;
pub mod metrics;
pub mod nuft;
pub mod optim;
pub mod parallel;
pub mod patterns;
pub mod phantoms;
pub mod recon;
pub mod tape;
pub mod types;

mod engine;

pub use error::{Error, Result};
pub use frame::{CoefficientVector, WaveletFrame};
pub use nuft::{estimate_opnorm, NuftOperator};
pub use parallel::Threading;
pub use recon::{ReconConfig, ReconKind, ReconTrace, StepRule};
pub use types::{wrap_pattern, ComplexImage, ImageGrid, KSpaceVector, SamplingPattern, C64};
