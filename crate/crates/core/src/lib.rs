//! Differentiable ensembles of single-layer classifiers routed by a soft
//! top-κ selection, trained online on class-incremental embedding streams.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choice of `f64`.

pub mod cli;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod numerics;
pub mod scalar;
pub mod soft_knn;
pub mod stream_data;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Vector = numerics::DenseVector<f64>;
pub type Matrix = numerics::DenseMatrix<f64>;
pub type SoftKnn = soft_knn::SoftKnnConfig<f64>;
pub type SoftKnnOutput = soft_knn::SoftKnnResult<f64>;
pub type EnsembleConfig = ensemble::EnsembleConfig<f64>;
pub type EnsembleState = ensemble::EnsembleState<f64>;
pub type TrainConfig = training::TrainConfig<f64>;
pub type Dataset = stream_data::EmbeddingDataset<f64>;

pub type Vector32 = numerics::DenseVector<f32>;
pub type Matrix32 = numerics::DenseMatrix<f32>;
pub type EnsembleState32 = ensemble::EnsembleState<f32>;
pub type Dataset32 = stream_data::EmbeddingDataset<f32>;
