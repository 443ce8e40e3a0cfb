use candle_core::{DType, Tensor};

use crate::data::{iterate_batches, Dataset};
use crate::error::{Error, Result};
use crate::model::StarsModel;
use crate::nn::{Ctx, NORM_EPS};

/// Mean over channels of the standard deviation of unit-normalized
/// per-position feature vectors across batch and space.
///
/// Zero means every position carries the same direction. Independent random
/// directions in `C` dimensions give roughly `1/√C`.
pub fn collapse_monitor(features: &Tensor) -> Result<f64> {
    let (b, c, h, w) = features.dims4()?;
    let n = b * h * w;
    if n == 0 || c == 0 {
        return Err(Error::Logic("collapse monitor needs a nonempty feature map".into()));
    }
    let rows: Vec<f64> = features
        .to_dtype(DType::F64)?
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .flatten_all()?
        .to_vec1()?;
    // Welford updates keep identical rows at exactly zero spread.
    let mut mean = vec![0.0f64; c];
    let mut m2 = vec![0.0f64; c];
    for (i, row) in rows.chunks(c).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        for ch in 0..c {
            let v = row[ch] / norm;
            let d = v - mean[ch];
            mean[ch] += d / (i + 1) as f64;
            m2[ch] += d * (v - mean[ch]);
        }
    }
    Ok(m2.iter().map(|s| (s / n as f64).sqrt()).sum::<f64>() / c as f64)
}

/// [`collapse_monitor`] over the modality-1 shared features of `stage`,
/// pooled across up to `max_batches` evaluation batches.
pub fn collapse_on_dataset(
    model: &StarsModel,
    dataset: &Dataset,
    stage: usize,
    max_batches: usize,
    dtype: DType,
) -> Result<f64> {
    let mut maps = Vec::new();
    for batch in iterate_batches(dataset, 8, None, None, dtype)?.take(max_batches.max(1)) {
        let batch = batch?;
        let x = batch
            .m1
            .as_ref()
            .ok_or_else(|| Error::Dataset("collapse monitor needs modality 1".into()))?;
        let (shared, _, _) = model.encode_single(x, crate::backbone::Modality::M1, Ctx::eval(), None)?;
        maps.push(shared.stage(stage)?.clone());
    }
    collapse_monitor(&Tensor::cat(&maps, 0)?)
}
