//! Three views for the browser page: a synthetic scene, the learning-rate
//! curve and the class-balanced pixel sample drawn on a label map.
//!
//! Images come back as RGBA bytes ready for `ImageData`. Seeds cross the
//! JS boundary as `u32` so the page can pass plain numbers.

use stars::alignment::sample_balanced_pixels;
use stars::data::{generate_scene, LabelBatch, SampleRecord, SyntheticSceneConfig, IGNORE};
use stars::training::{lr_schedule, TrainConfig};
use wasm_bindgen::prelude::*;

const PALETTE: [[u8; 3]; 8] = [
    [46, 125, 50],
    [30, 136, 229],
    [251, 140, 0],
    [216, 27, 96],
    [142, 36, 170],
    [0, 137, 123],
    [109, 76, 65],
    [253, 216, 53],
];

fn class_color(c: u8) -> [u8; 3] {
    if c == IGNORE {
        [0, 0, 0]
    } else {
        PALETTE[c as usize % PALETTE.len()]
    }
}

fn scene(seed: u64, index: usize, noise: f64) -> Result<SampleRecord, String> {
    let cfg = SyntheticSceneConfig {
        seed,
        noise_level2: noise,
        ..Default::default()
    };
    generate_scene(&cfg, index).map_err(|e| e.to_string())
}

fn byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Modality 1 (grey), modality 2 (first three channels as RGB) and the label
/// map side by side: an image `3 * size` wide and `size` high.
pub fn scene_rgba(seed: u64, index: usize, noise: f64) -> Result<Vec<u8>, String> {
    let r = scene(seed, index, noise)?;
    let (h, w) = (r.height(), r.width());
    let m1 = r.modality1.as_ref().ok_or("scene lacks modality 1")?;
    let m2 = r.modality2.as_ref().ok_or("scene lacks modality 2")?;
    let mut out = vec![255u8; 3 * w * h * 4];
    for y in 0..h {
        for x in 0..w {
            let g = byte(m1.get(y, x, 0));
            let rgb2: [u8; 3] = std::array::from_fn(|c| byte(m2.get(y, x, c.min(m2.channels - 1))));
            let panels = [[g, g, g], rgb2, class_color(r.label.get(y, x, 0))];
            for (p, px) in panels.iter().enumerate() {
                let o = (y * 3 * w + p * w + x) * 4;
                out[o..o + 3].copy_from_slice(px);
            }
        }
    }
    Ok(out)
}

/// Learning rate at `points` evenly spaced steps from 0 to `total_steps`.
pub fn lr_points(total_steps: usize, warmup_steps: usize, points: usize) -> Result<Vec<f64>, String> {
    let cfg = TrainConfig {
        total_steps,
        warmup_steps,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let n = points.max(2);
    (0..n)
        .map(|i| lr_schedule(i * total_steps / (n - 1), &cfg).map_err(|e| e.to_string()))
        .collect()
}

/// Label map with the balanced sample of `n` pixels per class marked in
/// white, and the number of times each pixel was drawn.
pub fn sample_overlay(seed: u64, index: usize, n: usize, sample_seed: u64) -> Result<(Vec<u8>, Vec<u32>), String> {
    let r = scene(seed, index, 0.5)?;
    let (h, w) = (r.height(), r.width());
    let labels = LabelBatch {
        data: r.label.data.clone(),
        batch: 1,
        height: h,
        width: w,
    };
    let mut hits = vec![0u32; h * w];
    if let Some(s) = sample_balanced_pixels(&labels, n, IGNORE, sample_seed) {
        for &(_, y, x) in &s.indices {
            hits[y * w + x] += 1;
        }
    }
    let mut out = vec![255u8; h * w * 4];
    for (i, &c) in labels.data.iter().enumerate() {
        let px = if hits[i] > 0 {
            [255, 255, 255]
        } else {
            class_color(c).map(|v| v / 2)
        };
        out[i * 4..i * 4 + 3].copy_from_slice(&px);
    }
    Ok((out, hits))
}

/// Pixels present and distinct pixels drawn, per class:
/// `[present0, drawn0, present1, drawn1, ...]`.
pub fn class_draws(seed: u64, index: usize, n: usize, sample_seed: u64) -> Result<Vec<u32>, String> {
    let r = scene(seed, index, 0.5)?;
    let (_, hits) = sample_overlay(seed, index, n, sample_seed)?;
    let k = SyntheticSceneConfig::default().num_classes;
    let mut out = vec![0u32; 2 * k];
    for (&c, &hit) in r.label.data.iter().zip(&hits) {
        if (c as usize) < k {
            out[2 * c as usize] += 1;
            if hit > 0 {
                out[2 * c as usize + 1] += 1;
            }
        }
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn render_scene(seed: u32, index: usize, noise: f64) -> Result<Vec<u8>, JsValue> {
    scene_rgba(seed.into(), index, noise).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn lr_curve(total_steps: usize, warmup_steps: usize, points: usize) -> Result<Vec<f64>, JsValue> {
    lr_points(total_steps, warmup_steps, points).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn render_sample(seed: u32, index: usize, n: usize, sample_seed: u32) -> Result<Vec<u8>, JsValue> {
    sample_overlay(seed.into(), index, n, sample_seed.into())
        .map(|(rgba, _)| rgba)
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn sampled_per_class(seed: u32, index: usize, n: usize, sample_seed: u32) -> Result<Vec<u32>, JsValue> {
    class_draws(seed.into(), index, n, sample_seed.into()).map_err(|e| JsValue::from_str(&e))
}
