use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Tensor};

use super::write_text;
use crate::backbone::EncoderKind;
use crate::error::Result;

pub const HIST_BINS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    NormScale,
    NormShift,
}

impl ParamKind {
    pub const ALL: [ParamKind; 3] = [ParamKind::ConvWeight, ParamKind::NormScale, ParamKind::NormShift];

    pub fn suffix(self) -> &'static str {
        match self {
            ParamKind::ConvWeight => "weight",
            ParamKind::NormScale => "bn_gamma",
            ParamKind::NormShift => "bn_beta",
        }
    }
}

/// Histogram and moments of one parameter group: all tensors of one kind in
/// one stage of one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDistribution {
    pub encoder: EncoderKind,
    pub kind: ParamKind,
    pub stage: usize,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl ParamDistribution {
    pub fn key(&self) -> String {
        format!("{}/stage{}/{}", self.encoder.prefix(), self.stage, self.kind.suffix())
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamReport {
    pub distributions: Vec<ParamDistribution>,
    /// Group keys with no matching tensor.
    pub absent: Vec<String>,
}

impl ParamReport {
    pub fn find(&self, encoder: EncoderKind, kind: ParamKind, stage: usize) -> Option<&ParamDistribution> {
        self.distributions
            .iter()
            .find(|d| d.encoder == encoder && d.kind == kind && d.stage == stage)
    }

    /// Long-format CSV: one line per bin.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("key,bin,lo,hi,count\n");
        for d in &self.distributions {
            for (i, c) in d.counts.iter().enumerate() {
                let _ = writeln!(s, "{},{i},{:.6e},{:.6e},{c}", d.key(), d.edges[i], d.edges[i + 1]);
            }
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("key,count,mean,std\n");
        for d in &self.distributions {
            let _ = writeln!(s, "{},{},{:.6e},{:.6e}", d.key(), d.count(), d.mean, d.std);
        }
        for a in &self.absent {
            let _ = writeln!(s, "{a},absent,,");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("param_histograms.csv"), &self.histogram_csv())?;
        write_text(&dir.join("param_summary.csv"), &self.summary_csv())
    }
}

fn histogram(values: &[f64]) -> (Vec<f64>, Vec<u64>) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / HIST_BINS as f64;
    let edges: Vec<f64> = (0..=HIST_BINS).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; HIST_BINS];
    for &v in values {
        let bin = (((v - lo) / width) as usize).min(HIST_BINS - 1);
        counts[bin] += 1;
    }
    (edges, counts)
}

fn group_values(params: &BTreeMap<String, Tensor>, prefix: &str, suffix: &str) -> Result<Option<Vec<f64>>> {
    let mut values = Vec::new();
    let mut found = false;
    for (name, t) in params.range(prefix.to_string()..) {
        if !name.starts_with(prefix) {
            break;
        }
        if name.rsplit('/').next() == Some(suffix) {
            found = true;
            values.extend(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
        }
    }
    Ok(found.then_some(values))
}

/// Per encoder, parameter kind and stage: a 64-bin histogram with moments.
/// Groups with no tensor in `params` are listed as absent.
pub fn export_param_distributions(params: &BTreeMap<String, Tensor>) -> Result<ParamReport> {
    let mut report = ParamReport::default();
    for encoder in EncoderKind::ALL {
        for stage in 1..=4 {
            for kind in ParamKind::ALL {
                let prefix = format!("{}/stage{stage}/", encoder.prefix());
                match group_values(params, &prefix, kind.suffix())? {
                    Some(values) if !values.is_empty() => {
                        let n = values.len() as f64;
                        let mean = values.iter().sum::<f64>() / n;
                        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                        let (edges, counts) = histogram(&values);
                        report.distributions.push(ParamDistribution {
                            encoder,
                            kind,
                            stage,
                            edges,
                            counts,
                            mean,
                            std,
                            values,
                        });
                    }
                    _ => report.absent.push(format!("{prefix}{}", kind.suffix())),
                }
            }
        }
    }
    Ok(report)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use candle_core::Device;

    use super::*;
    use crate::alignment::AlignmentConfig;
    use crate::model::{ModelConfig, StarsModel};
    use crate::nn::ParamStore;

    fn fresh_params() -> BTreeMap<String, Tensor> {
        let mut ps = ParamStore::new(0, DType::F32);
        StarsModel::new(&mut ps, &ModelConfig::tiny(1, 3, 4), &AlignmentConfig::default()).unwrap();
        ps.iter().map(|(n, e)| (n.clone(), e.var.as_tensor().clone())).collect()
    }

    #[test]
    fn fresh_model_distributions() {
        let params = fresh_params();
        let r = export_param_distributions(&params).unwrap();
        assert_eq!(r.distributions.len(), 3 * 4 * 3);
        assert!(r.absent.is_empty());
        for d in &r.distributions {
            assert_eq!(d.counts.iter().sum::<u64>() as usize, d.count());
            let expected: usize = params
                .iter()
                .filter(|(n, _)| n.starts_with(&format!("{}/stage{}/", d.encoder.prefix(), d.stage)))
                .filter(|(n, _)| n.ends_with(&format!("/{}", d.kind.suffix())))
                .map(|(_, t)| t.elem_count())
                .sum();
            assert_eq!(d.count(), expected);
        }
        let g = r.find(EncoderKind::Shared, ParamKind::NormScale, 2).unwrap();
        assert_eq!(g.mean, 1.0);
        assert_eq!(g.std, 0.0);
        let w = r.find(EncoderKind::SpecM1, ParamKind::ConvWeight, 3).unwrap();
        assert!(w.mean.abs() < 0.01 && w.std > 0.0 && w.std.is_finite());
    }

    #[test]
    fn missing_groups_are_listed() {
        let mut params = fresh_params();
        params.retain(|n, _| !n.starts_with("spec_m2/stage4/"));
        let r = export_param_distributions(&params).unwrap();
        assert_eq!(r.absent.len(), 3);
        assert!(r.summary_csv().contains("spec_m2/stage4/bn_gamma,absent"));
    }

    #[test]
    fn ks_distance_extremes() {
        assert_eq!(ks_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(ks_distance(&[0.0, 0.1], &[5.0, 6.0]), 1.0);
        assert!((ks_distance(&[1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 5.0, 6.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_group_histogram_brackets_the_value() {
        let t = Tensor::ones(8, DType::F32, &Device::Cpu).unwrap();
        let params = BTreeMap::from([("shared/stage1/b0_bn1/bn_gamma".to_string(), t)]);
        let r = export_param_distributions(&params).unwrap();
        let d = r.find(EncoderKind::Shared, ParamKind::NormScale, 1).unwrap();
        let bin = d.counts.iter().position(|&c| c == 8).unwrap();
        assert!(d.edges[bin] <= 1.0 && 1.0 <= d.edges[bin + 1]);
    }
}
