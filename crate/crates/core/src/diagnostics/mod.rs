//! Analysis instruments: cross-modal class similarity, feature collapse,
//! encoder parameter distributions and Grad-CAM.

mod cam;
mod collapse;
mod params;
mod similarity;

use std::path::Path;

pub use cam::{grad_cam, grad_cam_from_maps, write_pgm, GradCam};
pub use collapse::{collapse_monitor, collapse_on_dataset};
pub use params::{export_param_distributions, ks_distance, ParamDistribution, ParamKind, ParamReport, HIST_BINS};
pub use similarity::{class_similarity, similarity_from_features, SimilarityMatrix};

use crate::error::{Error, Result};

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
