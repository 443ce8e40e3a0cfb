//! Batch-statistics normalization as one fused op with a closed-form backward.

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

struct BatchNormTrain {
    eps: f64,
}

struct Dims {
    b: usize,
    c: usize,
    hw: usize,
}

impl Dims {
    fn of(layout: &Layout) -> candle_core::Result<Self> {
        let (b, c, h, w) = layout.shape().dims4()?;
        Ok(Self { b, c, hw: h * w })
    }

    fn n(&self) -> f64 {
        (self.b * self.hw) as f64
    }

    /// Flat indices of channel `ch`, batch by batch.
    fn channel(&self, ch: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.b).flat_map(move |bi| {
            let base = (bi * self.c + ch) * self.hw;
            base..base + self.hw
        })
    }
}

fn moments(x: &[f64], d: &Dims, ch: usize) -> (f64, f64) {
    let n = d.n();
    let mean = d.channel(ch).map(|i| x[i]).sum::<f64>() / n;
    let var = d.channel(ch).map(|i| (x[i] - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn forward<T: WithDType>(x: &[T], gamma: &[T], beta: &[T], d: &Dims, eps: f64) -> Vec<T> {
    let xf: Vec<f64> = x.iter().map(|v| v.to_f64()).collect();
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..d.c {
        let (mean, var) = moments(&xf, d, ch);
        let scale = gamma[ch].to_f64() / (var + eps).sqrt();
        let shift = beta[ch].to_f64();
        for i in d.channel(ch) {
            out[i] = T::from_f64((xf[i] - mean) * scale + shift);
        }
    }
    out
}

fn slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    l.contiguous_offsets()
        .map(|(a, b)| &v[a..b])
        .ok_or_else(|| candle_core::Error::Msg("batch norm needs contiguous operands".into()))
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = Dims::of(l1)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                CpuStorage::F32(forward(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?, &d, self.eps))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                CpuStorage::F64(forward(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?, &d, self.eps))
            }
            _ => return Err(candle_core::Error::Msg("batch norm supports matching f32/f64 operands".into())),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let d = Dims { b, c, hw: h * w };
        let xf: Vec<f64> = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let dy: Vec<f64> = grad.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let g: Vec<f64> = gamma.to_dtype(DType::F64)?.to_vec1()?;
        let n = d.n();
        let mut dx = vec![0.0; xf.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = moments(&xf, &d, ch);
            let inv = 1.0 / (var + self.eps).sqrt();
            let (mut s_dy, mut s_dy_xhat) = (0.0, 0.0);
            for i in d.channel(ch) {
                s_dy += dy[i];
                s_dy_xhat += dy[i] * (xf[i] - mean) * inv;
            }
            dbeta[ch] = s_dy;
            dgamma[ch] = s_dy_xhat;
            let k = g[ch] * inv / n;
            for i in d.channel(ch) {
                let xhat = (xf[i] - mean) * inv;
                dx[i] = k * (n * dy[i] - s_dy - xhat * s_dy_xhat);
            }
        }
        let dt = x.dtype();
        let dev = x.device();
        Ok((
            Some(Tensor::from_vec(dx, (b, c, h, w), dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(dgamma, c, dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(dbeta, c, dev)?.to_dtype(dt)?),
        ))
    }
}

/// `γ·(x − μ)/√(σ² + eps) + β` with per-channel batch moments of `x: (B, C, H, W)`.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, BatchNormTrain { eps })?)
}

#[cfg(test)]
mod tests {
    use candle_core::{Device, Var};

    use super::*;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 0.5).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn reference(x: &Tensor, g: &Tensor, b: &Tensor, eps: f64) -> Tensor {
        let c = g.dims()[0];
        let mean = x.mean_keepdim((0, 2, 3)).unwrap();
        let xc = x.broadcast_sub(&mean).unwrap();
        let var = xc.sqr().unwrap().mean_keepdim((0, 2, 3)).unwrap();
        let y = xc.broadcast_div(&(var + eps).unwrap().sqrt().unwrap()).unwrap();
        y.broadcast_mul(&g.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_composed_ops_and_their_gradients() {
        let x = Var::from_tensor(&rand(&[3, 4, 5, 2], 1)).unwrap();
        let g = Var::from_tensor(&rand(&[4], 2)).unwrap();
        let b = Var::from_tensor(&rand(&[4], 3)).unwrap();
        let ours = batch_norm_train(x.as_tensor(), g.as_tensor(), b.as_tensor(), 1e-5).unwrap();
        let theirs = reference(x.as_tensor(), g.as_tensor(), b.as_tensor(), 1e-5);
        assert!(max_diff(&ours, &theirs) < 1e-12);
        let probe = rand(&[3, 4, 5, 2], 4);
        let g1 = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (&theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &g, &b] {
            assert!(max_diff(g1.get(v.as_tensor()).unwrap(), g2.get(v.as_tensor()).unwrap()) < 1e-10);
        }
    }
}
