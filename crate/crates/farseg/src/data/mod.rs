//! Dataset ingestion, synthetic generation, augmentation, and tiling.

pub mod augment;
pub mod dataset;
pub mod isaid;
pub mod synth;
pub mod tiling;

pub use dataset::{load_dataset, load_isaid, save_dataset, Dataset, LabeledSample, LoadOptions};
pub use synth::{SynthConfig, SynthDataset};
pub use tiling::TileGrid;
