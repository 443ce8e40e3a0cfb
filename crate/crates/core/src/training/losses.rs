use candle_core::Tensor;

use crate::data::LabelBatch;
use crate::error::{shape_err, Error, Result};
use crate::nn::log_softmax_channels;

/// Mean over non-ignored pixels of `−log softmax` at the true class.
///
/// `None` when every pixel is ignored.
pub fn cross_entropy(logits: &Tensor, labels: &LabelBatch, ignore: u8) -> Result<Option<Tensor>> {
    let (b, k, h, w) = logits.dims4()?;
    if (b, h, w) != (labels.batch, labels.height, labels.width) {
        return Err(shape_err!(
            "logits ({b},{k},{h},{w}) do not match labels ({},{},{})",
            labels.batch,
            labels.height,
            labels.width
        ));
    }
    let plane = h * w;
    let mut onehot = vec![0f32; b * k * plane];
    let mut count = 0usize;
    for (i, &v) in labels.data.iter().enumerate() {
        if v == ignore {
            continue;
        }
        let c = v as usize;
        if c >= k {
            return Err(Error::Logic(format!("label {c} outside 0..{k}")));
        }
        let (bi, p) = (i / plane, i % plane);
        onehot[(bi * k + c) * plane + p] = 1.0;
        count += 1;
    }
    if count == 0 {
        return Ok(None);
    }
    let mask = Tensor::from_vec(onehot, (b, k, h, w), logits.device())?.to_dtype(logits.dtype())?;
    let picked = (log_softmax_channels(logits)? * mask)?.sum_all()?;
    Ok(Some((picked.neg()? / count as f64)?))
}

/// Average of the per-branch cross-entropies; `None` when all pixels are ignored.
pub fn seg_loss(branches: &[&Tensor], labels: &LabelBatch, ignore: u8) -> Result<Option<Tensor>> {
    if branches.is_empty() {
        return Err(Error::Logic("seg_loss needs at least one branch".into()));
    }
    let mut acc: Option<Tensor> = None;
    for logits in branches {
        match cross_entropy(logits, labels, ignore)? {
            None => return Ok(None),
            Some(ce) => {
                acc = Some(match acc {
                    Some(a) => (a + ce)?,
                    None => ce,
                })
            }
        }
    }
    Ok(Some((acc.expect("non-empty") / branches.len() as f64)?))
}

/// `seg + α·psc + β·ncs`; missing terms count as zero.
pub fn total_loss(
    seg: Option<&Tensor>,
    psc: Option<&Tensor>,
    ncs: Option<&Tensor>,
    alpha: f64,
    beta: f64,
) -> Result<Option<Tensor>> {
    let mut acc: Option<Tensor> = seg.cloned();
    for (t, w) in [(psc, alpha), (ncs, beta)] {
        if let Some(t) = t {
            let term = (t * w)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
    }
    Ok(acc)
}

/// Scalar form of [`total_loss`] used to cross-check logged values.
pub fn total_loss_value(seg: f64, psc: f64, ncs: f64, alpha: f64, beta: f64) -> f64 {
    seg + alpha * psc + beta * ncs
}
