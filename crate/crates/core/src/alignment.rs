//! Cross-modal alignment of shared-encoder features.
//!
//! Two objectives act on the deep shared stages:
//! * a translation consistency loss, where a small Conv-IN-SiLU-Conv network
//!   predicts one modality's features from the other's and the target side is
//!   detached, and
//! * a supervised cross-modal contrastive loss on class-balanced pixel samples.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::DualBranchFeatures;
use crate::data::LabelBatch;
use crate::error::{shape_err, Error, Result};
use crate::nn::{instance_norm, l2_normalize, Conv2d, ParamStore, NORM_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    /// Weight of the contrastive loss in the total objective.
    pub alpha: f64,
    /// Weight of the translation consistency loss.
    pub beta: f64,
    pub tau: f64,
    pub samples_per_class: usize,
    /// 1-based pyramid stages to align.
    pub stages: Vec<usize>,
    /// Stop gradients through the anchor side of the translation loss.
    pub detach: bool,
    /// Kernel of the first translation conv (1 or 3).
    pub translate_first_kernel: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.2,
            tau: 0.1,
            samples_per_class: 32,
            stages: vec![3, 4],
            detach: true,
            translate_first_kernel: 1,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be at least 1".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config("alpha and beta must be finite and nonnegative".into()));
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| !(3..=4).contains(s)) {
            return Err(Error::Config(format!("alignment stages must be a subset of {{3,4}}, got {:?}", self.stages)));
        }
        if ![1, 3].contains(&self.translate_first_kernel) {
            return Err(Error::Config("translate_first_kernel must be 1 or 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    M1ToM2,
    M2ToM1,
}

impl Direction {
    fn tag(self) -> &'static str {
        match self {
            Direction::M1ToM2 => "m1_to_m2",
            Direction::M2ToM1 => "m2_to_m1",
        }
    }
}

/// `Conv → InstanceNorm → SiLU → Conv1×1`, width preserved.
#[derive(Clone)]
pub struct TranslationModule {
    direction: Direction,
    conv1: Conv2d,
    conv2: Conv2d,
    channels: usize,
}

impl TranslationModule {
    pub fn new(
        ps: &mut ParamStore,
        stage: usize,
        direction: Direction,
        channels: usize,
        first_kernel: usize,
    ) -> Result<Self> {
        let prefix = format!("align/stage{stage}/{}", direction.tag());
        Ok(Self {
            direction,
            conv1: Conv2d::new(ps, &format!("{prefix}/conv1"), channels, channels, first_kernel, 1, first_kernel / 2, true)?,
            conv2: Conv2d::new(ps, &format!("{prefix}/conv2"), channels, channels, 1, 1, 0, true)?,
            channels,
        })
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn translate(&self, f: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = f.dims4()?;
        if c != self.channels {
            return Err(shape_err!("translation module expects {} channels, got {c}", self.channels));
        }
        let y = instance_norm(&self.conv1.forward(f)?, 1e-5)?.silu()?;
        self.conv2.forward(&y)
    }
}

/// Both translation directions for each aligned stage.
#[derive(Clone)]
pub struct Translators {
    by_stage: BTreeMap<usize, (TranslationModule, TranslationModule)>,
}

impl Translators {
    /// `stage_channels` are the encoder widths of stages 1..=4.
    pub fn new(ps: &mut ParamStore, cfg: &AlignmentConfig, stage_channels: &[usize; 4]) -> Result<Self> {
        let mut by_stage = BTreeMap::new();
        for &s in &cfg.stages {
            let c = stage_channels[s - 1];
            let k = cfg.translate_first_kernel;
            by_stage.insert(
                s,
                (
                    TranslationModule::new(ps, s, Direction::M1ToM2, c, k)?,
                    TranslationModule::new(ps, s, Direction::M2ToM1, c, k)?,
                ),
            );
        }
        Ok(Self { by_stage })
    }

    pub fn get(&self, stage: usize) -> Result<&(TranslationModule, TranslationModule)> {
        self.by_stage
            .get(&stage)
            .ok_or_else(|| Error::Logic(format!("no translation module for stage {stage}")))
    }
}

/// Mean over batch and positions of the channel-wise cosine similarity.
pub fn mean_cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(shape_err!("cosine operands differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    let an = l2_normalize(a, 1, NORM_EPS)?;
    let bn = l2_normalize(b, 1, NORM_EPS)?;
    Ok((an * bn)?.sum(1)?.mean_all()?)
}

/// `-(sim(p1, sg(f_m2)) + sim(p2, sg(f_m1))) / 2`; with `detach` the anchors
/// are constants for autograd.
pub fn ncs_loss(p1: &Tensor, f_m2: &Tensor, p2: &Tensor, f_m1: &Tensor, detach: bool) -> Result<Tensor> {
    let (a2, a1) = if detach {
        (f_m2.detach(), f_m1.detach())
    } else {
        (f_m2.clone(), f_m1.clone())
    };
    let s1 = mean_cosine(p1, &a2)?;
    let s2 = mean_cosine(p2, &a1)?;
    Ok(((s1 + s2)? * -0.5)?)
}

/// Sampled pixel coordinates `(batch, y, x)` with their labels, N per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelSample {
    pub indices: Vec<(usize, usize, usize)>,
    pub labels: Vec<u8>,
}

impl PixelSample {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Class-balanced sampling over a whole batch of label maps.
///
/// Each class present (ignoring `ignore`) contributes exactly `n` pixels. A
/// class's coordinates are shuffled first; classes with fewer than `n` pixels
/// cycle through their shuffled list. Returns `None` when no valid pixel
/// exists, meaning alignment is skipped for the step.
pub fn sample_balanced_pixels(labels: &LabelBatch, n: usize, ignore: u8, seed: u64) -> Option<PixelSample> {
    let mut by_class: BTreeMap<u8, Vec<(usize, usize, usize)>> = BTreeMap::new();
    let (h, w) = (labels.height, labels.width);
    for (i, &v) in labels.data.iter().enumerate() {
        if v == ignore {
            continue;
        }
        let b = i / (h * w);
        let r = i % (h * w);
        by_class.entry(v).or_default().push((b, r / w, r % w));
    }
    if by_class.is_empty() || n == 0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::with_capacity(n * by_class.len());
    let mut out_labels = Vec::with_capacity(n * by_class.len());
    for (class, mut coords) in by_class {
        coords.shuffle(&mut rng);
        for i in 0..n {
            indices.push(coords[i % coords.len()]);
            out_labels.push(class);
        }
    }
    Some(PixelSample {
        indices,
        labels: out_labels,
    })
}

/// Gathers L2-normalized feature rows at sampled label coordinates.
///
/// Label coordinates map to feature cells by integer division by the
/// label-to-feature stride.
pub fn gather_features(stage: &Tensor, sample: &PixelSample, label_h: usize, label_w: usize) -> Result<Tensor> {
    let (b, c, fh, fw) = stage.dims4()?;
    if fh == 0 || fw == 0 || label_h % fh != 0 || label_w % fw != 0 {
        return Err(shape_err!("label size {label_h}x{label_w} is not a multiple of feature size {fh}x{fw}"));
    }
    let (sy, sx) = (label_h / fh, label_w / fw);
    let mut flat = Vec::with_capacity(sample.len());
    for &(bi, y, x) in &sample.indices {
        if bi >= b || y >= label_h || x >= label_w {
            return Err(Error::Logic(format!(
                "sample ({bi},{y},{x}) outside label bounds ({b},{label_h},{label_w})"
            )));
        }
        flat.push((bi * fh * fw + (y / sy) * fw + x / sx) as u32);
    }
    let idx = Tensor::from_vec(flat, sample.len(), stage.device())?;
    let rows = stage
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .reshape((b * fh * fw, c))?
        .index_select(&idx, 0)?;
    l2_normalize(&rows, 1, NORM_EPS)
}

fn positive_mask(labels: &[u8], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let n = labels.len();
    let mut m = vec![0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                m[i * n + j] = 1.0;
            }
        }
    }
    Ok(Tensor::from_vec(m, (n, n), device)?.to_dtype(dtype)?)
}

/// Mean over anchors of `log Σ_all exp(s) − log Σ_pos exp(s)` for one direction.
fn contrast_direction(scaled: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let shift = scaled.max_keepdim(1)?.detach();
    let e = scaled.broadcast_sub(&shift)?.exp()?;
    let all = e.sum(1)?;
    let pos = (e * mask)?.sum(1)?;
    Ok((all.log()? - pos.log()?)?.mean_all()?)
}

/// Cross-modal supervised contrastive loss over sampled rows.
///
/// `f1`, `f2`: `(n, C)` unit rows from modalities 1 and 2; row `i` of each
/// carries `labels[i]`. Anchors from one modality contrast against all
/// samples of the other; the two directions are averaged. `None` for an
/// empty sample (step skipped).
pub fn psc_loss(f1: &Tensor, f2: &Tensor, labels: &[u8], tau: f64) -> Result<Option<Tensor>> {
    if labels.is_empty() {
        return Ok(None);
    }
    let (n1, c1) = f1.dims2()?;
    let (n2, c2) = f2.dims2()?;
    if n1 != labels.len() || n2 != labels.len() || c1 != c2 {
        return Err(shape_err!("psc operands ({n1},{c1}) / ({n2},{c2}) vs {} labels", labels.len()));
    }
    let scaled = (f1.matmul(&f2.t()?)? / tau)?;
    let mask = positive_mask(labels, f1.dtype(), f1.device())?;
    let forward = contrast_direction(&scaled, &mask)?;
    let backward = contrast_direction(&scaled.t()?.contiguous()?, &mask)?;
    Ok(Some(((forward + backward)? * 0.5)?))
}

/// Which alignment terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignToggles {
    pub use_trans: bool,
    pub use_ncs: bool,
    pub use_psc: bool,
}

impl Default for AlignToggles {
    fn default() -> Self {
        Self {
            use_trans: true,
            use_ncs: true,
            use_psc: true,
        }
    }
}

/// Per-stage averaged alignment losses; `None` when a term is disabled or skipped.
#[derive(Debug, Clone)]
pub struct AlignmentLosses {
    pub ncs: Option<Tensor>,
    pub psc: Option<Tensor>,
}

fn average(terms: Vec<Tensor>) -> Result<Option<Tensor>> {
    let n = terms.len();
    let mut acc: Option<Tensor> = None;
    for t in terms {
        acc = Some(match acc {
            Some(a) => (a + t)?,
            None => t,
        });
    }
    Ok(match acc {
        Some(a) => Some((a / n as f64)?),
        None => None,
    })
}

/// Translation and contrastive losses on the shared features of `cfg.stages`.
///
/// Without `use_trans` the predictions are the features themselves.
pub fn alignment_losses(
    dual: &DualBranchFeatures,
    labels: &LabelBatch,
    ignore: u8,
    cfg: &AlignmentConfig,
    toggles: AlignToggles,
    translators: &Translators,
    seed: u64,
) -> Result<AlignmentLosses> {
    let sample = if toggles.use_psc {
        sample_balanced_pixels(labels, cfg.samples_per_class, ignore, seed)
    } else {
        None
    };
    let mut ncs_terms = Vec::new();
    let mut psc_terms = Vec::new();
    for &s in &cfg.stages {
        let f1 = dual.shared_m1.stage(s)?;
        let f2 = dual.shared_m2.stage(s)?;
        if toggles.use_ncs {
            let (p1, p2) = if toggles.use_trans {
                let (h12, h21) = translators.get(s)?;
                (h12.translate(f1)?, h21.translate(f2)?)
            } else {
                (f1.clone(), f2.clone())
            };
            ncs_terms.push(ncs_loss(&p1, f2, &p2, f1, cfg.detach)?);
        }
        if let Some(sample) = &sample {
            let g1 = gather_features(f1, sample, labels.height, labels.width)?;
            let g2 = gather_features(f2, sample, labels.height, labels.width)?;
            if let Some(l) = psc_loss(&g1, &g2, &sample.labels, cfg.tau)? {
                psc_terms.push(l);
            }
        }
    }
    Ok(AlignmentLosses {
        ncs: average(ncs_terms)?,
        psc: average(psc_terms)?,
    })
}
