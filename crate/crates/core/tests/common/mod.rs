#![allow(dead_code)]

pub mod criteria;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

/// Largest relative error between the autodiff gradient of `f` at `x` and
/// central differences, over every coordinate (or `max_probes` evenly spaced
/// ones). `f` must return a scalar.
pub fn grad_check<F>(x: &Tensor, max_probes: usize, f: F) -> f64
where
    F: Fn(&Tensor) -> Tensor,
{
    let var = Var::from_tensor(x).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic = grads
        .get(var.as_tensor())
        .map(to_vec)
        .unwrap_or_else(|| vec![0.0; x.elem_count()]);
    let base = to_vec(x);
    let n = base.len();
    let stride = n.div_ceil(max_probes.max(1)).max(1);
    let h = 1e-6;
    let eval = |v: &[f64]| scalar(&f(&Tensor::from_vec(v.to_vec(), x.dims(), &Device::Cpu).unwrap()));
    let mut worst = 0.0f64;
    for i in (0..n).step_by(stride) {
        let mut p = base.clone();
        p[i] += h;
        let fp = eval(&p);
        p[i] -= 2.0 * h;
        let fm = eval(&p);
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(err);
    }
    worst
}

/// Fixed random projection turning a tensor into a scalar.
pub fn project(t: &Tensor, seed: u64) -> Tensor {
    let w = randn(t.dims(), seed);
    (t * w).unwrap().sum_all().unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = (a.iter().map(|x| x * x).sum::<f64>() + 1e-16).sqrt();
    let nb = (b.iter().map(|x| x * x).sum::<f64>() + 1e-16).sqrt();
    dot / (na * nb)
}

/// Channel vectors of a `(B, C, H, W)` tensor at every position.
fn positions(t: &Tensor) -> Vec<Vec<f64>> {
    let (b, c, h, w) = t.dims4().unwrap();
    let v = to_vec(t);
    let mut out = Vec::new();
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                out.push((0..c).map(|ci| v[((bi * c + ci) * h + y) * w + x]).collect());
            }
        }
    }
    out
}

/// Per-position cosine, averaged, for both directions, negated and halved.
pub fn ncs_brute_force(p1: &Tensor, f2: &Tensor, p2: &Tensor, f1: &Tensor) -> f64 {
    let mean_cos = |a: &Tensor, b: &Tensor| {
        let (pa, pb) = (positions(a), positions(b));
        pa.iter().zip(&pb).map(|(x, y)| cos(x, y)).sum::<f64>() / pa.len() as f64
    };
    -(mean_cos(p1, f2) + mean_cos(p2, f1)) / 2.0
}

/// Loop form of the cross-modal contrastive loss: per anchor,
/// `-log(Σ_pos exp(s/τ) / Σ_all exp(s/τ))`, averaged, both directions averaged.
pub fn psc_loop(f1: &[Vec<f64>], f2: &[Vec<f64>], labels: &[u8], tau: f64) -> f64 {
    let dir = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut total = 0.0;
        for i in 0..a.len() {
            let mut pos = 0.0;
            let mut all = 0.0;
            for j in 0..b.len() {
                let s: f64 = a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum();
                let e = (s / tau).exp();
                all += e;
                if labels[i] == labels[j] {
                    pos += e;
                }
            }
            total += -(pos / all).ln();
        }
        total / a.len() as f64
    };
    (dir(f1, f2) + dir(f2, f1)) / 2.0
}

/// Random unit rows.
pub fn unit_rows(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..c).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
    let c = rows[0].len();
    Tensor::from_vec(rows.concat(), (rows.len(), c), &Device::Cpu).unwrap()
}
