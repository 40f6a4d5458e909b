//! Dataset ingestion, normalization, persistence and feature export.

pub mod blobs;
pub mod cnd;
mod dataset;
pub mod idx;
pub mod projection;

pub use blobs::{make_blob_split, make_blobs, BlobSpec};
pub use cnd::{load_params, load_synthetic, save_params, save_synthetic, CndContainer};
pub use dataset::{
    denormalize, normalize, normalize_images, normalize_with, sample_per_class, LabeledDataset, NormStats, STD_EPS,
};
pub use idx::load_idx;
pub use projection::{export_projection_csv, FeatureRows, Pca2};
