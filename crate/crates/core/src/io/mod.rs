//! Files: the PDIS container, run configuration, datasets, checkpoints and
//! image export.

pub mod config;
pub mod export;
pub mod pdis;
pub mod store;

pub use config::RunConfig;
pub use export::{export_image, ImageFormat};
pub use pdis::Container;
pub use store::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, Checkpoint, StoredDataset};
