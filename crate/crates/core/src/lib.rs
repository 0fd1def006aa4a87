//! Modality Integration Rate (MIR): a layer-wise measure of how far a
//! vision-language model's vision tokens sit from its text tokens, computed
//! from dumped per-layer activations.
//!
//! The pipeline for one layer is: scale both modalities by the text-centric
//! factor, drop tokens outside the 3σ band of ℓ2 norms, estimate means and
//! covariances, and take the Fréchet distance. MIR is the natural log of the
//! sum over layers. [`moca`] fits per-layer scale-and-shift vectors that
//! shrink that distance.

pub mod cli;
pub mod gapstats;
pub mod matsqrt;
pub mod metric;
pub mod moca;
pub mod synth;
pub mod tensor_io;

pub use gapstats::{ModalityMoments, OutlierRule, OutlierSide, PrepareOptions};
pub use matsqrt::{SqrtConfig, SqrtMethod};
pub use metric::{compute_mir, compute_mir_layers, fid_layer, GapProfile, MirOptions};
pub use moca::CalibrationParams;
pub use tensor_io::{read_manifest, LayerActivations, RunManifest, Tensor2};
