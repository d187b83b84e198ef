//! Physics-guided forecasting of gridded scalar fields.
//!
//! The pipeline advances the most recent observed frame of a sequence under
//! an advection-diffusion transport model:
//!
//! 1. a motion stage estimates one displacement field per future interval
//!    (either by direct variational fitting or with a convolutional network),
//! 2. per-interval displacements are composed into a single flow so that
//!    every horizon frame is warped directly from the last observed frame —
//!    one interpolation per prediction, however deep the horizon,
//! 3. a forward-splat energy pass marks pixels whose prediction is
//!    untrustworthy (source collisions or vacated gaps) as a binary mask,
//! 4. a refinement stage fills or corrects the flagged pixels (discrete
//!    harmonic inpainting or a learned generator network).
//!
//! Training couples both learned stages with a mask-weighted data term and
//! divergence/smoothness penalties that keep the estimated motion physically
//! plausible.

pub mod dataset;
pub mod diff;
pub mod error;
pub mod estimate;
pub mod evolve;
pub mod field;
pub mod io;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod net;
pub mod refine;
pub mod synth;
pub mod tape;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
pub use field::{ScalarField, Sequence, VectorField};
