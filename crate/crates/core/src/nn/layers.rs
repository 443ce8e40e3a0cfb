use candle_core::{Tensor, Var};

use super::bn_op::batch_norm_train;
use super::conv::conv2d_bias;
use super::params::ParamStore;
use crate::error::{shape_err, Result};

/// Forward-pass context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ctx {
    /// Normalize with batch statistics instead of running estimates.
    pub batch_stats: bool,
    /// Fold batch statistics into the running estimates.
    pub update_running: bool,
}

impl Ctx {
    pub fn train() -> Self {
        Self {
            batch_stats: true,
            update_running: true,
        }
    }

    pub fn eval() -> Self {
        Self {
            batch_stats: false,
            update_running: false,
        }
    }

    /// Batch statistics without touching running estimates (gradient probes).
    pub fn probe() -> Self {
        Self {
            batch_stats: true,
            update_running: false,
        }
    }
}

#[derive(Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let weight = ps.kaiming_normal(&format!("{prefix}/weight"), (cout, cin, kernel, kernel), fan_in)?;
        let bias = if bias {
            Some(ps.constant(&format!("{prefix}/bias"), cout, 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels() {
            return Err(shape_err!("conv expects {} input channels, got {c}", self.in_channels()));
        }
        conv2d_bias(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

/// Batch normalization over `(B, H, W)` with one set of running statistics
/// per input stream. A shared encoder sees two modalities whose activation
/// statistics differ, so each modality path keeps its own estimates while the
/// affine parameters stay shared.
#[derive(Clone)]
pub struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running: Vec<(Var, Var)>,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamStore, prefix: &str, channels: usize, streams: &[&str]) -> Result<Self> {
        let gamma = ps.constant(&format!("{prefix}/bn_gamma"), channels, 1.0)?;
        let beta = ps.constant(&format!("{prefix}/bn_beta"), channels, 0.0)?;
        let mut running = Vec::with_capacity(streams.len());
        for s in streams {
            let suffix = if s.is_empty() { String::new() } else { format!("_{s}") };
            let mean = ps.buffer(&format!("{prefix}/running_mean{suffix}"), channels, 0.0)?;
            let var = ps.buffer(&format!("{prefix}/running_var{suffix}"), channels, 1.0)?;
            running.push((mean, var));
        }
        Ok(Self {
            gamma,
            beta,
            running,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx, stream: usize) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (run_mean, run_var) = self
            .running
            .get(stream)
            .ok_or_else(|| shape_err!("batch norm has no stream {stream}"))?;
        if ctx.batch_stats {
            if ctx.update_running {
                let xd = x.detach();
                let mean = channel_mean(&xd)?;
                let var = channel_mean(&xd.broadcast_sub(&mean)?.sqr()?)?;
                let n = (b * h * w) as f64;
                let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let m = self.momentum;
                let new_mean = ((run_mean.as_tensor() * (1.0 - m))? + (mean.flatten_all()? * m)?)?;
                let new_var = ((run_var.as_tensor() * (1.0 - m))? + (var.flatten_all()? * (m * unbiased))?)?;
                run_mean.set(&new_mean)?;
                run_var.set(&new_var)?;
            }
            return batch_norm_train(x, &self.gamma, &self.beta, self.eps);
        }
        let mean = run_mean.as_tensor().reshape((1, c, 1, 1))?;
        let var = run_var.as_tensor().reshape((1, c, 1, 1))?;
        let inv = (var + self.eps)?.sqrt()?.recip()?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&inv)?;
        let y = y
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?;
        Ok(y)
    }
}

/// Per-channel mean over `(B, H, W)` as `(1, C, 1, 1)`; reducing the
/// contiguous spatial axis first is much faster than one strided reduction.
fn channel_mean(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.mean_keepdim(2)?.mean_keepdim(0)?.reshape((1, c, 1, 1))?)
}

/// Convolution followed by batch normalization; both live under one layer key.
#[derive(Clone)]
pub struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        streams: &[&str],
    ) -> Result<Self> {
        let conv = Conv2d::new(ps, prefix, cin, cout, kernel, stride, padding, false)?;
        let bn = BatchNorm::new(ps, prefix, cout, streams)?;
        Ok(Self { conv, bn })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx, stream: usize) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, ctx, stream)
    }
}

#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, prefix: &str, din: usize, dout: usize) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        let weight = ps.uniform(&format!("{prefix}/weight"), (dout, din), bound)?;
        let bias = ps.constant(&format!("{prefix}/bias"), dout, 0.0)?;
        Ok(Self { weight, bias })
    }

    /// `x`: `(B, din)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Per-sample, per-channel normalization over spatial positions (no affine).
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim((2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Scales vectors along `dim` to unit L2 norm; `eps` keeps zero vectors at zero.
pub fn l2_normalize(x: &Tensor, dim: usize, eps: f64) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(dim)? + eps * eps)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn log_softmax_channels(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::log_softmax(x, 1)?)
}
