//! Transferable forgery detection with a split-latent residual autoencoder.
//!
//! Images are high-pass filtered into residuals, encoded into a latent code
//! whose first half responds to real images and second half to manipulated
//! ones, and classified by comparing the mean activation of the two halves.
//! A detector trained on one manipulation can be fine-tuned to a related one
//! from a handful of labelled examples.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod residual;
pub mod runtime;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use data::{DatasetManifest, Manipulation, SampleSet, Split, SynthSpec};
pub use error::{Error, Result};
pub use eval::{EvalReport, ShotCurve};
pub use losses::{Head, LossConfig};
pub use model::{ArchConfig, ClassLabel, LatentCode, ModelParams};
pub use optim::{AdamConfig, AdamState, Param};
pub use residual::ResidualConfig;
pub use tensor::Tensor;
pub use trainer::{FewShotSpec, TrainConfig, TrainReport};
