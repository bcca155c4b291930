//! Relationship analysis over trained models: prediction matrices,
//! misclassification blocks, 2-D projections, spectral clusters and reports.

mod cluster;
mod matrix;
mod project;
mod report;

pub use cluster::{kmeans, purity, spectral_cluster, ClusterAssignment};
pub use matrix::{
    grouped_pair_agreement, location_prediction_matrix, misclassification_blocks, prediction_matrix, PredictionMatrix,
};
pub use project::{cosine_similarity, pca_2d, project_2d, tsne_2d, Projection, TsneConfig};
pub use report::{accuracy, heatmap_png, heatmap_ppm, write_accuracy_report, AccuracyRow};

use thiserror::Error;

use crate::model::ModelError;

pub const DEFAULT_BLOCK_THRESHOLD: f64 = 0.05;
pub const DEFAULT_MIN_MASKED: usize = 20;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png: {0}")]
    Png(#[from] png::EncodingError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
