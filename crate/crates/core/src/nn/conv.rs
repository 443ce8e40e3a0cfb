//! 2-D convolution as patch extraction followed by a batched matmul.
//!
//! Patch extraction and its adjoint are custom ops with plain loops, so the
//! backward pass costs about as much as the forward pass.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err!("kernel {k} larger than padded input {h}x{w}"));
        }
        Ok(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `ox` whose tap `kx` lands inside the image.
    fn valid_x(&self, kx: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride, self.pad);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if self.w + p > kx { ((self.w + p - kx - 1) / s + 1).min(self.wo) } else { 0 };
        lo..hi.max(lo)
    }

    /// Calls `f(dst_offset, src_offset, run)` for every contiguous run of taps
    /// of one sample, where `dst_offset` indexes a patch matrix of row width
    /// `width` whose columns start at `col0`.
    fn for_each_run(&self, width: usize, col0: usize, mut f: impl FnMut(usize, usize, std::ops::Range<usize>)) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        for ci in 0..self.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let xs = self.valid_x(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        let dst = row * width + col0 + oy * self.wo;
                        let src = (ci * self.h + iy as usize) * self.w + kx;
                        f(dst, src, xs.clone());
                    }
                }
            }
        }
    }

    /// Patch matrix `(C·k·k, B·Ho·Wo)`: one column per output position of the whole batch.
    fn im2col<T: WithDType>(&self, x: &[T], batch: usize) -> Vec<T> {
        let per_in = self.c * self.h * self.w;
        let width = batch * self.cols();
        let s = self.stride;
        let p = self.pad;
        let mut out = vec![T::zero(); self.rows() * width];
        for b in 0..batch {
            let img = &x[b * per_in..(b + 1) * per_in];
            self.for_each_run(width, b * self.cols(), |dst, src, xs| {
                for ox in xs {
                    out[dst + ox] = img[src + ox * s - p];
                }
            });
        }
        out
    }

    fn col2im<T: WithDType>(&self, m: &[T], batch: usize) -> Vec<T> {
        let per_in = self.c * self.h * self.w;
        let width = batch * self.cols();
        let s = self.stride;
        let p = self.pad;
        let mut out = vec![T::zero(); batch * per_in];
        for b in 0..batch {
            let img = &mut out[b * per_in..(b + 1) * per_in];
            self.for_each_run(width, b * self.cols(), |dst, src, xs| {
                for ox in xs {
                    img[src + ox * s - p] += m[dst + ox];
                }
            });
        }
        out
    }
}

fn contiguous<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => Err(candle_core::Error::Msg("patch ops need contiguous input".into())),
    }
}

/// `(B, C, H, W)` → `(C·k·k, B·Ho·Wo)`.
struct Im2Col(Geometry);

/// Adjoint of [`Im2Col`]: sums patch columns back into the image.
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let b = layout.dims()[0];
        let shape = Shape::from((g.rows(), b * g.cols()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.im2col(contiguous(v, layout)?, b)),
            CpuStorage::F64(v) => CpuStorage::F64(g.im2col(contiguous(v, layout)?, b)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let b = layout.dims()[1] / g.cols();
        let shape = Shape::from((b, g.c, g.h, g.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.col2im(contiguous(v, layout)?, b)),
            CpuStorage::F64(v) => CpuStorage::F64(g.col2im(contiguous(v, layout)?, b)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32 and f64".into())),
        };
        Ok((out, shape))
    }
}

/// Cross-correlation of `x: (B, C, H, W)` with `weight: (O, C, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 {
        return Err(shape_err!("conv weight {:?} does not fit input {:?}", weight.dims(), x.dims()));
    }
    let g = Geometry::new(c, h, w, k, stride, padding)?;
    let wm = weight.reshape((o, g.rows()))?;
    let cols = if k == 1 && stride == 1 && padding == 0 {
        x.reshape((b, c, h * w))?.transpose(0, 1)?.reshape((c, b * h * w))?
    } else {
        x.contiguous()?.apply_op1(Im2Col(g))?
    };
    let y = wm.matmul(&cols)?.reshape((o, b, g.ho * g.wo))?.transpose(0, 1)?;
    Ok(y.reshape((b, o, g.ho, g.wo))?)
}

/// Adds a per-channel bias to `(B, C, H, W)`; the backward pass sums with plain loops.
struct BiasAdd;

fn add_bias<T: WithDType>(x: &[T], bias: &[T], per_channel: usize) -> Vec<T> {
    let c = bias.len();
    x.chunks(per_channel)
        .enumerate()
        .flat_map(|(i, chunk)| {
            let b = bias[i % c];
            chunk.iter().map(move |&v| v + b)
        })
        .collect()
}

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, _, h, w) = l1.shape().dims4()?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(b)) => {
                CpuStorage::F32(add_bias(contiguous(x, l1)?, contiguous(b, l2)?, h * w))
            }
            (CpuStorage::F64(x), CpuStorage::F64(b)) => {
                CpuStorage::F64(add_bias(contiguous(x, l1)?, contiguous(b, l2)?, h * w))
            }
            _ => return Err(candle_core::Error::Msg("bias add supports matching f32/f64 operands".into())),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        _x: &Tensor,
        bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, c, h, w) = grad.dims4()?;
        let g: Vec<f64> = grad.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let mut db = vec![0.0; c];
        for (i, chunk) in g.chunks(h * w).enumerate() {
            db[i % c] += chunk.iter().sum::<f64>();
        }
        let db = Tensor::from_vec(db, c, bias.device())?.to_dtype(bias.dtype())?;
        Ok((Some(grad.clone()), Some(db)))
    }
}

/// [`conv2d`] plus an optional per-output-channel bias.
pub fn conv2d_bias(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let y = conv2d(x, weight, stride, padding)?;
    match bias {
        Some(b) => Ok(y.contiguous()?.apply_op2(&b.contiguous()?, BiasAdd)?),
        None => Ok(y),
    }
}
