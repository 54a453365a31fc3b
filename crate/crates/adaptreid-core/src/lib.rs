//! Attention-guided unpaired image translation between two camera domains,
//! jointly trained with a discriminative person re-identification head.
//!
//! The crate covers the whole desk-scale pipeline: a synthetic two-domain
//! re-ID dataset generator with ground-truth masks, the per-domain
//! encoder/decoder/discriminator/attention networks with shared re-ID heads,
//! every loss term of the weighted objective, identity-aware batch sampling,
//! the alternating training loop with its phase schedules, and retrieval
//! evaluation (CMC / mAP) plus attention-quality metrics.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod train;
pub mod translate;
pub mod nn;
pub mod rng;
pub mod sampler;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use losses::{LossReport, LossWeights};
pub use model::{DomainModelSet, NetworkConfig, ReidNet};
pub use nn::Tensor;
pub use train::{TrainConfig, TrainMode};
