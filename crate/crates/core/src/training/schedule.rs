use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignToggles;
use crate::error::{Error, Result};

/// Which network a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Shared/specific encoders, alignment and three decoders.
    Stars,
    /// One encoder and decoder on modality 1 only.
    Baseline,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stars" => Ok(ModelKind::Stars),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(Error::Config(format!("unknown model {other:?} (stars, baseline)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub lr_init: f64,
    pub lr_peak: f64,
    /// Value the cosine decays to.
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Square crop side; `0` trains on full records.
    pub crop: usize,
    pub seed: u64,
    pub use_trans: bool,
    pub use_ncs: bool,
    pub use_psc: bool,
    /// Write a checkpoint every this many steps (`0`: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Stars,
            total_steps: 80_000,
            warmup_steps: 1_000,
            lr_init: 1e-6,
            lr_peak: 1e-4,
            lr_floor: 0.0,
            weight_decay: 1e-4,
            clip_norm: 5.0,
            batch_size: 8,
            crop: 512,
            seed: 0,
            use_trans: true,
            use_ncs: true,
            use_psc: true,
            checkpoint_every: 5_000,
        }
    }
}

impl TrainConfig {
    pub fn tiny() -> Self {
        Self {
            total_steps: 2_000,
            warmup_steps: 100,
            batch_size: 4,
            crop: 64,
            checkpoint_every: 0,
            ..Self::default()
        }
    }

    pub fn toggles(&self) -> AlignToggles {
        AlignToggles {
            use_trans: self.use_trans,
            use_ncs: self.use_ncs,
            use_psc: self.use_psc,
        }
    }

    pub fn crop_size(&self) -> Option<usize> {
        (self.crop > 0).then_some(self.crop)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "need 0 <= warmup_steps < total_steps, got {} and {}",
                self.warmup_steps, self.total_steps
            )));
        }
        let rates = [self.lr_init, self.lr_peak, self.clip_norm];
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::Config("lr_init, lr_peak and clip_norm must be positive".into()));
        }
        if !(self.lr_floor >= 0.0) || self.lr_floor > self.lr_peak {
            return Err(Error::Config("lr_floor must lie in [0, lr_peak]".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.crop % 32 != 0 {
            return Err(Error::Config(format!("crop {} must be a multiple of 32", self.crop)));
        }
        Ok(())
    }
}

/// Linear warm-up from `lr_init` to `lr_peak`, then cosine decay to `lr_floor`
/// at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Logic(format!("step {step} beyond total_steps {}", cfg.total_steps)));
    }
    if step < cfg.warmup_steps {
        let t = step as f64 / cfg.warmup_steps as f64;
        return Ok(cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * t);
    }
    if step == cfg.warmup_steps {
        return Ok(cfg.lr_peak);
    }
    if step == cfg.total_steps {
        return Ok(cfg.lr_floor);
    }
    let t = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * 0.5 * (1.0 + (PI * t).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg).unwrap(), 1e-6);
        assert_eq!(lr_schedule(1000, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_schedule(80_000, &cfg).unwrap(), 0.0);
        assert!(lr_schedule(80_001, &cfg).is_err());
        let floored = TrainConfig {
            lr_floor: 1e-6,
            ..cfg
        };
        assert_eq!(lr_schedule(80_000, &floored).unwrap(), 1e-6);
    }

    #[test]
    fn monotone_segments() {
        let cfg = TrainConfig::tiny();
        let lr: Vec<f64> = (0..=cfg.total_steps).map(|s| lr_schedule(s, &cfg).unwrap()).collect();
        assert!(lr[..=cfg.warmup_steps].windows(2).all(|w| w[0] < w[1]));
        assert!(lr[cfg.warmup_steps..].windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = TrainConfig {
            warmup_steps: 2_000,
            ..TrainConfig::tiny()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            crop: 50,
            ..TrainConfig::tiny()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::tiny().validate().is_ok());
    }
}
