//! Binary codes for person re-identification learned with a triplet objective
//! and an adversarial push toward a Bernoulli code prior.
//!
//! Modules, bottom-up:
//! - [`codespace`]: packed codes, the prior and its normalization, binarization, Hamming distance.
//! - [`nn`]: dense networks with manual backprop, optimizers and checkpoints.
//! - [`losses`]: triplet, Wasserstein critic/generator and cross-entropy objectives.
//! - [`dataset`]: identity/view-labelled features, synthetic data, splits and samplers.
//! - [`trainer`]: pretraining and joint adversarial training.
//! - [`retrieval`]: linear-scan search, CMC/mAP and scan benchmarks.
//! - [`config`]: the flat experiment configuration shared by the command line.

pub mod codespace;
pub mod config;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod nn;
pub mod retrieval;
pub mod trainer;

pub use codespace::{
    binarize, hamming, normalization_factor, normalize_l2, normalize_uniform, sample_codes, BinaryCode,
    BinaryCodeBatch, CodePrior, LambdaMode,
};
pub use config::ExperimentConfig;
pub use dataset::{generate_synthetic, IdentityDataset, Label, Split, SplitProtocol, SynthConfig};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use nn::{DenseNetSpec, ModelParams, Network};
pub use retrieval::{build_index, query_euclidean, query_hamming, EvalReport, HammingIndex, RealIndex};
pub use trainer::{encode_dataset, pretrain, train_joint, TrainConfig, TrainReport};
