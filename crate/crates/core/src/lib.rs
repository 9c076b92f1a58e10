//! Self-supervised reconstruction of binary quanta image stacks.
//!
//! Photon detections are split into input and target volumes by binomial
//! thinning; a hybrid 3D/2D residual U-Net is trained to predict where the
//! target photons land, with input-active voxels masked out of the loss.

pub mod error;
pub mod infer;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod simulate;
pub mod stats;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use nn::{ModelConfig, ModelState, Tensor5};
pub use rng::RandomSource;
pub use sampler::{SamplerConfig, SplitTriple};
pub use simulate::{SimConfig, ToySceneConfig};
pub use volume::{BitVolume, CropSpec, DenseVolume, Shape3};
pub use train::{train_loop, PairMode, TrainConfig, TrainOutcome};
pub use infer::{multi_shot, predict, InferConfig};
pub use metrics::{metric_report, MetricReport};
