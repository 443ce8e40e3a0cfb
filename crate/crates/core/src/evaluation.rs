//! Confusion matrices, mIoU / mF1, and the missing-modality evaluation protocol.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Tensor};

use crate::data::{iterate_batches, Dataset, DatasetManifest, LabelBatch, Modalities};
use crate::error::{Error, Result};
use crate::model::Branch;
use crate::training::Network;

/// Pixel counts with rows = ground truth and columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Builds a matrix from row-major rows.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Logic("confusion matrix rows must form a square".into()));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every non-ignored pixel; labels and predictions are parallel slices.
    pub fn update_slices(&mut self, pred: &[u32], labels: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != labels.len() {
            return Err(Error::Logic(format!(
                "{} predictions for {} labels",
                pred.len(),
                labels.len()
            )));
        }
        for (&p, &y) in pred.iter().zip(labels) {
            if y == ignore {
                continue;
            }
            let (p, y) = (p as usize, y as usize);
            if p >= self.k {
                return Err(Error::Logic(format!("prediction {p} outside {} classes", self.k)));
            }
            if y >= self.k {
                return Err(Error::Logic(format!("label {y} outside {} classes", self.k)));
            }
            self.counts[y * self.k + p] += 1;
        }
        Ok(())
    }

    /// `pred` is a `(B, H, W)` class-index tensor aligned with `labels`.
    pub fn update(&mut self, pred: &Tensor, labels: &LabelBatch, ignore: u8) -> Result<()> {
        let (b, h, w) = pred.dims3()?;
        if (b, h, w) != (labels.batch, labels.height, labels.width) {
            return Err(Error::Logic(format!(
                "prediction {:?} does not match labels {}x{}x{}",
                pred.dims(),
                labels.batch,
                labels.height,
                labels.width
            )));
        }
        let p: Vec<u32> = pred.to_dtype(DType::U32)?.flatten_all()?.to_vec1()?;
        self.update_slices(&p, &labels.data, ignore)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Logic(format!("cannot merge {}-class and {}-class matrices", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `(TP, FP, FN)` of class `i`.
    pub fn class_counts(&self, i: usize) -> (u64, u64, u64) {
        let tp = self.get(i, i);
        let col: u64 = (0..self.k).map(|r| self.get(r, i)).sum();
        let row: u64 = (0..self.k).map(|c| self.get(i, c)).sum();
        (tp, col - tp, row - tp)
    }
}

fn mean_included(values: &[Option<f64>]) -> Result<f64> {
    let included: Vec<f64> = values.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::Logic("every class has a zero denominator; the mean is undefined".into()));
    }
    Ok(included.iter().sum::<f64>() / included.len() as f64)
}

/// Per-class IoU (`None` where the class never occurs in truth or prediction) and their mean.
pub fn miou(cm: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, f64)> {
    let per: Vec<Option<f64>> = (0..cm.k)
        .map(|i| {
            let (tp, fp, fneg) = cm.class_counts(i);
            let den = tp + fp + fneg;
            (den > 0).then(|| tp as f64 / den as f64)
        })
        .collect();
    let m = mean_included(&per)?;
    Ok((per, m))
}

/// Per-class F1 and their mean, with the same exclusion rule as [`miou`].
pub fn mf1(cm: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, f64)> {
    let per: Vec<Option<f64>> = (0..cm.k)
        .map(|i| {
            let (tp, fp, fneg) = cm.class_counts(i);
            let den = 2 * tp + fp + fneg;
            (den > 0).then(|| 2.0 * tp as f64 / den as f64)
        })
        .collect();
    let m = mean_included(&per)?;
    Ok((per, m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_f1: Vec<Option<f64>>,
    pub miou: f64,
    pub mf1: f64,
    pub pixel_count: u64,
    pub branch: Branch,
    pub mode: Modalities,
}

fn mode_tag(mode: Modalities) -> &'static str {
    match mode {
        Modalities::Both => "both",
        Modalities::M1Only => "m1_only",
        Modalities::M2Only => "m2_only",
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix, mode: Modalities, branch: Branch) -> Result<Self> {
        let (per_class_iou, miou) = miou(cm)?;
        let (per_class_f1, mf1) = mf1(cm)?;
        Ok(Self {
            per_class_iou,
            per_class_f1,
            miou,
            mf1,
            pixel_count: cm.total(),
            branch,
            mode,
        })
    }

    /// Percent table (one IoU column per class, then mIoU and mF1) followed
    /// by a `key=value` block with unrounded values.
    pub fn to_text(&self, class_names: Option<&[String]>) -> String {
        let k = self.per_class_iou.len();
        let names: Vec<String> = (0..k)
            .map(|i| class_names.and_then(|n| n.get(i).cloned()).unwrap_or_else(|| format!("class{i}")))
            .collect();
        let mut s = String::new();
        let _ = writeln!(s, "# mode {} / branch {}", mode_tag(self.mode), self.branch);
        let header: Vec<String> = names.iter().map(|n| format!("{n:>8}")).collect();
        let _ = writeln!(s, "{:<6}{} {:>8} {:>8}", "", header.join(""), "mIoU", "mF1");
        let ious: Vec<String> = self.per_class_iou.iter().map(|&v| format!("{:>8}", cell(v))).collect();
        let f1s: Vec<String> = self.per_class_f1.iter().map(|&v| format!("{:>8}", cell(v))).collect();
        let _ = writeln!(s, "{:<6}{} {:>8.2} {:>8.2}", "IoU", ious.join(""), 100.0 * self.miou, 100.0 * self.mf1);
        let _ = writeln!(s, "{:<6}{}", "F1", f1s.join(""));
        s.push('\n');
        let _ = writeln!(s, "mode={}", mode_tag(self.mode));
        let _ = writeln!(s, "branch={}", self.branch);
        let _ = writeln!(s, "pixels={}", self.pixel_count);
        let _ = writeln!(s, "miou={:.6}", self.miou);
        let _ = writeln!(s, "mf1={:.6}", self.mf1);
        for i in 0..k {
            let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
            let _ = writeln!(s, "iou_{i}={}", fmt(self.per_class_iou[i]));
            let _ = writeln!(s, "f1_{i}={}", fmt(self.per_class_f1[i]));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_text(None)).map_err(|e| Error::io(path, e))
    }
}

/// Decoder scored when none is requested: the input modality's own branch
/// for single-modality modes, the fused branch otherwise.
pub fn default_branch(mode: Modalities) -> Branch {
    match mode {
        Modalities::Both => Branch::Fused,
        Modalities::M1Only => Branch::M1,
        Modalities::M2Only => Branch::M2,
    }
}

/// Class index per pixel, `(B, H, W)`.
pub fn argmax_classes(logits: &Tensor) -> Result<Tensor> {
    Ok(logits.argmax(1)?)
}

/// Scores `net` on every record of `manifest` using only the modalities in `mode`.
/// Modality rasters outside `mode` are never opened.
pub fn evaluate(
    net: &dyn Network,
    manifest: &DatasetManifest,
    mode: Modalities,
    branch: Branch,
    dtype: DType,
) -> Result<EvalReport> {
    net.check_inference(mode, branch)?;
    let dataset = Dataset::load(manifest, mode)?;
    let mut cm = ConfusionMatrix::new(manifest.num_classes);
    for batch in iterate_batches(&dataset, 8, None, None, dtype)? {
        let batch = batch?;
        let logits = net.predict(&batch, mode, branch)?;
        cm.update(&argmax_classes(&logits)?, &batch.labels, manifest.ignore_value)?;
    }
    EvalReport::from_confusion(&cm, mode, branch)
}
