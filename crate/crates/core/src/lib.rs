//! Invertible neural network classifier trained with an information
//! bottleneck objective.
//!
//! A [`FlowNetwork`] maps inputs bijectively to a latent space where a
//! class-conditional Gaussian mixture ([`GmmLatent`]) gives both a density
//! and a classifier. Training, evaluation, synthetic data and checkpoints are
//! all in this crate; the `ibinn` binary wraps them.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flow;
pub mod grad;
pub mod latent;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod rng;
pub mod train;

pub use checkpoint::{Checkpoint, TrainerState};
pub use data::{DatasetSpec, Generator, LabeledSet, OodKind};
pub use error::{Error, Result};
pub use flow::{FlowMode, FlowNetwork, ImageShape, Layer};
pub use grad::{backward, grad_check, GradCheckReport, GradientSet};
pub use latent::GmmLatent;
pub use metrics::{CalibrationBins, CalibrationReport, MetricsReport};
pub use model::IbInn;
pub use objective::{LossBreakdown, LossConfig, NoiseSpec, Objective};
pub use rng::{substream, StreamRng};
pub use train::{TrainConfig, Trainer};
