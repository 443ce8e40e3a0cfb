use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{sigmoid, Conv2d, Linear, ParamStore};

/// Concurrent channel (cSE) and spatial (sSE) squeeze-and-excitation,
/// combined by element-wise addition.
#[derive(Clone)]
pub struct Scse {
    fc1: Linear,
    fc2: Linear,
    spatial: Conv2d,
}

impl Scse {
    /// Bottleneck width is `max(channels / reduction, 1)`.
    pub fn new(ps: &mut ParamStore, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(Self {
            fc1: Linear::new(ps, &format!("{prefix}/cse_fc1"), channels, hidden)?,
            fc2: Linear::new(ps, &format!("{prefix}/cse_fc2"), hidden, channels)?,
            spatial: Conv2d::new(ps, &format!("{prefix}/sse"), channels, 1, 1, 1, 0, true)?,
        })
    }

    pub fn forward(&self, u: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = u.dims4()?;
        let z = u.mean((2, 3))?;
        let gates = sigmoid(&self.fc2.forward(&self.fc1.forward(&z)?.relu()?)?)?;
        let cse = u.broadcast_mul(&gates.reshape((b, c, 1, 1))?)?;
        let sse = u.broadcast_mul(&sigmoid(&self.spatial.forward(u)?)?)?;
        Ok((cse + sse)?)
    }
}
