//! Multiple-instance learning networks trained with per-bag SGD.
//!
//! A bag is a set of instance feature vectors with one binary label. The four
//! network variants share a trunk of ReLU fully connected layers and differ in
//! where the bag-level pooling happens:
//!
//! * `mi-Net` scores every instance and pools the scores.
//! * `MI-Net` pools the last hidden features into a bag vector and scores it.
//! * `MI-Net+DS` attaches a pooled scoring head to every hidden layer.
//! * `MI-Net+RC` sums the pooled vectors of all hidden layers before scoring.

#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model_io;
pub mod network;
pub mod numerics;
pub mod pooling;
pub mod training;

pub use config::ExperimentConfig;
pub use data::{Bag, BagDataset, FoldPlan};
pub use error::{Error, Result};
pub use eval::CvReport;
pub use model_io::SavedModel;
pub use network::{Mode, Network, NetworkSpec, Variant};
pub use pooling::{PoolingMethod, PoolingSpec};
pub use training::{TrainConfig, TrainTrace};
