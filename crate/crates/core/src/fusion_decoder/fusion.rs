use candle_core::Tensor;

use super::Scse;
use crate::error::{shape_err, Result};
use crate::nn::{ConvBn, Ctx, ParamStore};

/// Residual fusion of specific and shared features at one pyramid stage.
///
/// `concat(SCSE(spec), SCSE(shared)) -> Conv-BN-ReLU (2C -> C) -> SCSE -> + spec`,
/// then the untouched shared features are concatenated, giving `2C` channels.
#[derive(Clone)]
pub struct FusionModule {
    scse_spec: Scse,
    scse_shared: Scse,
    mix: ConvBn,
    scse_post: Scse,
    channels: usize,
}

impl FusionModule {
    pub fn new(ps: &mut ParamStore, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            scse_spec: Scse::new(ps, &format!("{prefix}/scse_spec"), channels, reduction)?,
            scse_shared: Scse::new(ps, &format!("{prefix}/scse_shared"), channels, reduction)?,
            mix: ConvBn::new(ps, &format!("{prefix}/mix"), 2 * channels, channels, 1, 1, 0, &[""])?,
            scse_post: Scse::new(ps, &format!("{prefix}/scse_post"), channels, reduction)?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&self, f_spec: &Tensor, f_shared: &Tensor, ctx: Ctx) -> Result<Tensor> {
        if f_spec.dims() != f_shared.dims() {
            return Err(shape_err!(
                "fusion inputs differ: {:?} vs {:?}",
                f_spec.dims(),
                f_shared.dims()
            ));
        }
        let (_, c, _, _) = f_spec.dims4()?;
        if c != self.channels {
            return Err(shape_err!("fusion expects {} channels, got {c}", self.channels));
        }
        let a = self.scse_spec.forward(f_spec)?;
        let b = self.scse_shared.forward(f_shared)?;
        let mixed = self.mix.forward(&Tensor::cat(&[&a, &b], 1)?, ctx, 0)?.relu()?;
        let refined = (self.scse_post.forward(&mixed)? + f_spec)?;
        Ok(Tensor::cat(&[&refined, f_shared], 1)?)
    }
}
