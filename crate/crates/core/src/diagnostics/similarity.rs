use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Tensor};

use super::write_text;
use crate::alignment::{gather_features, sample_balanced_pixels};
use crate::data::{iterate_batches, Dataset};
use crate::error::{Error, Result};
use crate::model::StarsModel;
use crate::nn::Ctx;

/// Cosine similarity between per-class mean shared features of modality 1
/// (rows) and modality 2 (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub step: usize,
    pub num_classes: usize,
    /// Row-major `K × K`; NaN in rows and columns of absent classes.
    pub matrix: Vec<f64>,
    /// Sampled pixels per class.
    pub support: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.num_classes + j]
    }

    pub fn present(&self, i: usize) -> bool {
        self.support[i] > 0
    }

    /// Mean diagonal minus mean off-diagonal entry over present classes.
    pub fn margin(&self) -> Option<f64> {
        let k = self.num_classes;
        let (mut diag, mut nd, mut off, mut no) = (0.0, 0usize, 0.0, 0usize);
        for i in (0..k).filter(|&i| self.present(i)) {
            for j in (0..k).filter(|&j| self.present(j)) {
                if i == j {
                    diag += self.get(i, j);
                    nd += 1;
                } else {
                    off += self.get(i, j);
                    no += 1;
                }
            }
        }
        (nd > 0 && no > 0).then(|| diag / nd as f64 - off / no as f64)
    }

    pub fn to_csv(&self) -> String {
        let k = self.num_classes;
        let mut s = String::new();
        let header: Vec<String> = (0..k).map(|j| format!("m2_class{j}")).collect();
        let _ = writeln!(s, "step,row,{},support", header.join(","));
        for i in 0..k {
            let row: Vec<String> = (0..k)
                .map(|j| {
                    let v = self.get(i, j);
                    if v.is_nan() {
                        "absent".to_string()
                    } else {
                        format!("{v:.6}")
                    }
                })
                .collect();
            let _ = writeln!(s, "{},m1_class{i},{},{}", self.step, row.join(","), self.support[i]);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv())
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

/// Builds the matrix from unit feature rows `(n, C)` of each modality with
/// their class labels.
pub fn similarity_from_features(
    f1: &Tensor,
    f2: &Tensor,
    labels: &[u8],
    num_classes: usize,
    step: usize,
) -> Result<SimilarityMatrix> {
    let a: Vec<Vec<f64>> = f1.to_dtype(DType::F64)?.to_vec2()?;
    let b: Vec<Vec<f64>> = f2.to_dtype(DType::F64)?.to_vec2()?;
    if a.len() != labels.len() || b.len() != labels.len() {
        return Err(Error::Logic("feature rows and labels disagree in count".into()));
    }
    let c = a.first().map_or(0, |r| r.len());
    let mut sums = [vec![vec![0.0; c]; num_classes], vec![vec![0.0; c]; num_classes]];
    let mut support = vec![0usize; num_classes];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= num_classes {
            return Err(Error::Logic(format!("label {l} outside {num_classes} classes")));
        }
        support[l] += 1;
        for (m, rows) in [&a, &b].into_iter().enumerate() {
            for (acc, v) in sums[m][l].iter_mut().zip(&rows[i]) {
                *acc += v;
            }
        }
    }
    if support.iter().all(|&s| s == 0) {
        return Err(Error::Logic("no class present; similarity matrix is empty".into()));
    }
    let means: Vec<Vec<Vec<f64>>> = sums.iter().map(|per| per.iter().map(|v| unit(v)).collect()).collect();
    let mut matrix = vec![f64::NAN; num_classes * num_classes];
    for i in 0..num_classes {
        for j in 0..num_classes {
            if support[i] > 0 && support[j] > 0 {
                let dot: f64 = means[0][i].iter().zip(&means[1][j]).map(|(x, y)| x * y).sum();
                matrix[i * num_classes + j] = dot.clamp(-1.0, 1.0);
            }
        }
    }
    Ok(SimilarityMatrix {
        step,
        num_classes,
        matrix,
        support,
    })
}

/// Dataset-wide class similarity of shared `stage` features, with pixels
/// drawn by the class-balanced sampler (`per_class` per class and batch)
/// from up to `max_batches` batches.
pub fn class_similarity(
    model: &StarsModel,
    dataset: &Dataset,
    stage: usize,
    max_batches: usize,
    per_class: usize,
    step: usize,
    dtype: DType,
) -> Result<SimilarityMatrix> {
    let mut f1 = Vec::new();
    let mut f2 = Vec::new();
    let mut labels = Vec::new();
    for (bi, batch) in iterate_batches(dataset, 8, None, None, dtype)?.take(max_batches.max(1)).enumerate() {
        let batch = batch?;
        let (Some(x1), Some(x2)) = (&batch.m1, &batch.m2) else {
            return Err(Error::Dataset("class similarity needs both modalities".into()));
        };
        let dual = model.backbone().forward_dual(x1, x2, Ctx::eval())?;
        let Some(sample) = sample_balanced_pixels(&batch.labels, per_class, dataset.ignore_value, bi as u64) else {
            continue;
        };
        let (h, w) = (batch.labels.height, batch.labels.width);
        f1.push(gather_features(dual.shared_m1.stage(stage)?, &sample, h, w)?);
        f2.push(gather_features(dual.shared_m2.stage(stage)?, &sample, h, w)?);
        labels.extend(sample.labels);
    }
    if labels.is_empty() {
        return Err(Error::Logic("no class present; similarity matrix is empty".into()));
    }
    similarity_from_features(&Tensor::cat(&f1, 0)?, &Tensor::cat(&f2, 0)?, &labels, dataset.num_classes, step)
}

#[cfg(test)]
mod tests {
    use candle_core::Device;

    use super::*;

    #[test]
    fn one_hot_features_give_identity() {
        let labels = [0u8, 1, 2, 2, 0, 1];
        let rows: Vec<f64> = labels
            .iter()
            .flat_map(|&l| (0..3).map(move |c| if c == l { 1.0 } else { 0.0 }))
            .collect();
        let f = Tensor::from_vec(rows, (6, 3), &Device::Cpu).unwrap();
        let s = similarity_from_features(&f, &f, &labels, 3, 0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(s.margin(), Some(1.0));
    }

    #[test]
    fn identical_modalities_give_symmetric_unit_diagonal() {
        let f = Tensor::randn(0f64, 1.0, (12, 5), &Device::Cpu).unwrap();
        let labels: Vec<u8> = (0..12).map(|i| (i % 3) as u8).collect();
        let s = similarity_from_features(&f, &f, &labels, 4, 3).unwrap();
        for i in 0..3 {
            assert!((s.get(i, i) - 1.0).abs() < 1e-12);
            for j in 0..3 {
                assert!((s.get(i, j) - s.get(j, i)).abs() < 1e-12);
                assert!((-1.0..=1.0).contains(&s.get(i, j)));
            }
        }
        assert!(!s.present(3));
        assert!(s.get(3, 0).is_nan());
        assert!(s.to_csv().contains("absent"));
    }

    #[test]
    fn no_samples_is_an_error() {
        let f = Tensor::zeros((0, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(similarity_from_features(&f, &f, &[], 3, 0).is_err());
    }
}
