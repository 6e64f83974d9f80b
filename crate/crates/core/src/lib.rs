//! Meta-learned kernels from variational random Fourier features.
//!
//! An inference network maps each task's support set to a Gaussian posterior
//! over random-feature frequencies, a cross-attention prior network conditions
//! on the query, and kernel ridge regression on the sampled features makes the
//! predictions. Everything is trained end to end on the evidence lower bound.

pub mod autodiff;
pub mod elbo;
pub mod error;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rff;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use elbo::{gaussian_kl, ElboTerms, ObjectiveConfig, PriorAggregation};
pub use error::{Error, Result};
pub use model::{MetaKernelModel, ModelConfig};
pub use nn::InferenceMode;
pub use rff::{BasisNoise, FixedPriorRff, FrequencyPosterior};
pub use tasks::{Task, TaskGenerator};
pub use tensor::Tensor;
pub use train::{evaluate, meta_train, EvalMetrics, EvalMode, EvalSettings, IterationRecord, Seeds, TrainConfig, Trainer};
