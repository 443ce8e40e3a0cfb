//! Spatial resizing expressed as two matrix products, `Mh · X · Mwᵀ`.
//!
//! Writing resampling as matmuls keeps it differentiable through the generic
//! autograd path for both nearest and bilinear modes.

use candle_core::{DType, Device, Tensor};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    /// Half-pixel centers, edge clamped (`align_corners = false`).
    Bilinear,
}

/// Row-stochastic `(out, input)` interpolation matrix, row-major.
pub fn interp_matrix(input: usize, out: usize, mode: Interp) -> Vec<f64> {
    let mut m = vec![0.0; out * input];
    let scale = input as f64 / out as f64;
    for o in 0..out {
        match mode {
            Interp::Nearest => {
                let i = ((o as f64 * scale).floor() as usize).min(input - 1);
                m[o * input + i] = 1.0;
            }
            Interp::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let frac = src - i0 as f64;
                m[o * input + i0] += 1.0 - frac;
                m[o * input + i1] += frac;
            }
        }
    }
    m
}

fn matrix(input: usize, out: usize, mode: Interp, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(interp_matrix(input, out, mode), (out, input), device)?.to_dtype(dtype)?)
}

/// Resizes `(B, C, h, w)` to `(B, C, out_h, out_w)`.
pub fn resize(x: &Tensor, out_h: usize, out_w: usize, mode: Interp) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let mw = matrix(w, out_w, mode, x.dtype(), x.device())?;
    let mh = matrix(h, out_h, mode, x.dtype(), x.device())?;
    // (B*C*h, w) · (w, out_w)
    let y = x.reshape((b * c * h, w))?.matmul(&mw.t()?)?;
    // (B*C, h, out_w) -> (B*C, out_w, h) · (h, out_h)
    let y = y
        .reshape((b * c, h, out_w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * c * out_w, h))?
        .matmul(&mh.t()?)?;
    let y = y
        .reshape((b * c, out_w, out_h))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, c, out_h, out_w))?;
    Ok(y)
}

/// Bilinear resize of a single `h × w` map, used for heatmaps outside autograd.
pub fn resize_plane(data: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let mh = interp_matrix(h, out_h, Interp::Bilinear);
    let mw = interp_matrix(w, out_w, Interp::Bilinear);
    let mut tmp = vec![0.0f64; h * out_w];
    for y in 0..h {
        for ox in 0..out_w {
            tmp[y * out_w + ox] = (0..w).map(|x| data[y * w + x] as f64 * mw[ox * w + x]).sum();
        }
    }
    let mut out = vec![0.0f32; out_h * out_w];
    for oy in 0..out_h {
        for ox in 0..out_w {
            out[oy * out_w + ox] = (0..h).map(|y| tmp[y * out_w + ox] * mh[oy * h + y]).sum::<f64>() as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_doubles_each_cell() {
        let x = Tensor::new(&[[1f32, 2.], [3., 4.]], &Device::Cpu).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let y = resize(&x, 4, 4, Interp::Nearest).unwrap();
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]);
    }

    #[test]
    fn bilinear_rows_sum_to_one_and_preserve_constants() {
        for (i, o) in [(2, 8), (4, 16), (3, 7), (16, 64)] {
            let m = interp_matrix(i, o, Interp::Bilinear);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let x = Tensor::full(0.25f32, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let y = resize(&x, 16, 16, Interp::Bilinear).unwrap();
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&a| (a - 0.25).abs() < 1e-7));
    }

    #[test]
    fn bilinear_matches_half_pixel_convention() {
        // 2 -> 4: output centers at 0.25-scaled offsets -0.25, 0.25, 0.75, 1.25.
        let m = interp_matrix(2, 4, Interp::Bilinear);
        assert_eq!(&m[0..2], &[1.0, 0.0]);
        assert_eq!(&m[2..4], &[0.75, 0.25]);
        assert_eq!(&m[4..6], &[0.25, 0.75]);
        assert_eq!(&m[6..8], &[0.0, 1.0]);
    }
}
