use candle_core::Tensor;

use crate::error::{shape_err, Result};
use crate::nn::{resize, Conv2d, Interp, ParamStore};

/// Feature pyramid decoder producing per-pixel class logits.
///
/// Lateral 1×1 projections, nearest-neighbour top-down pathway, 3×3 smoothing
/// with ReLU per level, sum of all levels at stride 4, 1×1 classifier, and a
/// bilinear resize back to the input resolution.
#[derive(Clone)]
pub struct FpnDecoder {
    laterals: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    classifier: Conv2d,
    num_classes: usize,
}

impl FpnDecoder {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        in_channels: &[usize; 4],
        lateral_width: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let mut laterals = Vec::with_capacity(4);
        let mut smooth = Vec::with_capacity(4);
        for (i, &c) in in_channels.iter().enumerate() {
            let s = i + 1;
            laterals.push(Conv2d::new(ps, &format!("{prefix}/lateral{s}"), c, lateral_width, 1, 1, 0, true)?);
            smooth.push(Conv2d::new(
                ps,
                &format!("{prefix}/smooth{s}"),
                lateral_width,
                lateral_width,
                3,
                1,
                1,
                true,
            )?);
        }
        let classifier = Conv2d::new(ps, &format!("{prefix}/classifier"), lateral_width, num_classes, 1, 1, 0, true)?;
        Ok(Self {
            laterals,
            smooth,
            classifier,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `stages` at strides 4/8/16/32; returns `(B, K, out_h, out_w)`.
    pub fn forward(&self, stages: &[Tensor], out_h: usize, out_w: usize) -> Result<Tensor> {
        if stages.len() != 4 {
            return Err(shape_err!("FPN needs 4 stages, got {}", stages.len()));
        }
        let lat: Vec<Tensor> = stages
            .iter()
            .zip(&self.laterals)
            .map(|(x, l)| l.forward(x))
            .collect::<Result<_>>()?;

        let mut top_down: Vec<Tensor> = vec![lat[3].clone()];
        for i in (0..3).rev() {
            let (_, _, h, w) = lat[i].dims4()?;
            let up = resize(top_down.last().expect("non-empty"), h, w, Interp::Nearest)?;
            top_down.push((&lat[i] + up)?);
        }
        top_down.reverse();

        let (_, _, h1, w1) = lat[0].dims4()?;
        let mut merged: Option<Tensor> = None;
        for (p, conv) in top_down.iter().zip(&self.smooth) {
            let s = conv.forward(p)?.relu()?;
            let s = resize(&s, h1, w1, Interp::Bilinear)?;
            merged = Some(match merged {
                Some(m) => (m + s)?,
                None => s,
            });
        }
        let logits = self.classifier.forward(&merged.expect("four levels"))?;
        resize(&logits, out_h, out_w, Interp::Bilinear)
    }
}
