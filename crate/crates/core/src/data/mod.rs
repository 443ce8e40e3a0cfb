//! Paired two-modality datasets: on-disk format, synthetic scenes, batching.

mod batch;
mod manifest;
mod raster;
mod synth;

pub use batch::{iterate_batches, Batch, BatchSampler, BatchStream, LabelBatch};
pub use manifest::{class_histogram, Dataset, DatasetManifest, Modalities, SampleRecord, MANIFEST_FILE};
pub use raster::{Raster, RasterSample};
pub use synth::{generate_scene, generate_synthetic_dataset, SyntheticSceneConfig};

/// Label value excluded from losses, sampling and metrics.
pub const IGNORE: u8 = 255;
