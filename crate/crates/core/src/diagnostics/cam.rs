use std::path::Path;

use candle_core::{DType, Tensor};

use crate::backbone::{EncoderKind, Modality};
use crate::error::{Error, Result};
use crate::model::{Branch, StarsModel};
use crate::nn::{resize_plane, Ctx};

/// Heatmap in `[0, 1]` at input resolution, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCam {
    pub height: usize,
    pub width: usize,
    pub heatmap: Vec<f32>,
    /// Set when the map is flat because no positive evidence reached it.
    pub warning: Option<String>,
}

/// Grad-CAM from one sample's feature map and its gradient, both `(C, h, w)`.
pub fn grad_cam_from_maps(features: &Tensor, grads: &Tensor, out_h: usize, out_w: usize) -> Result<GradCam> {
    let (c, h, w) = features.dims3()?;
    if grads.dims() != features.dims() {
        return Err(Error::Logic(format!(
            "gradient {:?} does not match features {:?}",
            grads.dims(),
            features.dims()
        )));
    }
    let a: Vec<f64> = features.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let g: Vec<f64> = grads.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let hw = h * w;
    let mut cam = vec![0.0f64; hw];
    for ch in 0..c {
        let weight = g[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
        for (o, v) in cam.iter_mut().zip(&a[ch * hw..(ch + 1) * hw]) {
            *o += weight * v;
        }
    }
    let peak = cam.iter().fold(0.0f64, |m, &v| m.max(v));
    let flat = |why: &str| GradCam {
        height: out_h,
        width: out_w,
        heatmap: vec![0.0; out_h * out_w],
        warning: Some(why.to_string()),
    };
    if g.iter().all(|&v| v == 0.0) {
        return Ok(flat("gradient is zero everywhere; heatmap is flat"));
    }
    if peak <= 0.0 {
        return Ok(flat("no positive class evidence; heatmap is flat"));
    }
    let small: Vec<f32> = cam.iter().map(|&v| (v.max(0.0) / peak) as f32).collect();
    let heatmap = resize_plane(&small, h, w, out_h, out_w)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Ok(GradCam {
        height: out_h,
        width: out_w,
        heatmap,
        warning: None,
    })
}

/// Grad-CAM of `target_class` for the `stage` output of `encoder`, on a
/// single `(1, C, H, W)` input. The scalar target is the sum of the class
/// logits of the fused decoder over all pixels. The spec_m2 encoder reads
/// modality 2; the others read modality 1.
pub fn grad_cam(
    model: &StarsModel,
    x: &Tensor,
    target_class: usize,
    encoder: EncoderKind,
    stage: usize,
) -> Result<GradCam> {
    let (b, _, h, w) = x.dims4()?;
    if b != 1 {
        return Err(Error::Config(format!("grad-cam takes one sample, got a batch of {b}")));
    }
    let k = model.config().num_classes;
    if target_class >= k {
        return Err(Error::Config(format!("class {target_class} outside {k} classes")));
    }
    let m = if encoder == EncoderKind::SpecM2 { Modality::M2 } else { Modality::M1 };
    let ctx = Ctx::eval();
    let (shared, spec, tap) = model.encode_single(x, m, ctx, Some((encoder, stage)))?;
    let tap = tap.ok_or_else(|| Error::Logic("encoder tap was not created".into()))?;
    let logits = model.decode_single(&shared, &spec, m, Branch::Fused, h, w, ctx)?;
    let target = logits.narrow(1, target_class, 1)?.sum_all()?;
    let grads = target.backward()?;
    let features = tap.as_tensor().squeeze(0)?;
    let g = match grads.get(tap.as_tensor()) {
        Some(g) => g.squeeze(0)?,
        None => features.zeros_like()?,
    };
    grad_cam_from_maps(&features, &g, h, w)
}

/// Binary greyscale image (PGM) of a `[0, 1]` map.
pub fn write_pgm(path: &Path, cam: &GradCam) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", cam.width, cam.height).into_bytes();
    bytes.extend(cam.heatmap.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
