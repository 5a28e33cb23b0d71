//! Training, tiled inference and the file-level glue used by the CLI.

pub mod augment;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod infer;
pub mod tiling;
pub mod train;
pub mod tta;

pub use infer::{infer_large, infer_tiled, DEFAULT_OVERLAP};
pub use train::{TrainConfig, TrainSample, Trainer};
pub use tta::TtaMode;
