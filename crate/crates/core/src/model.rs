//! Full three-branch segmentation network and the single-modality baseline.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentConfig, Translators};
use crate::backbone::{Backbone, DualBranchFeatures, EncoderConfig, EncoderKind, Encoder, FeaturePyramid, Modality, Stem};
use crate::error::{Error, Result};
use crate::fusion_decoder::{FpnDecoder, FusionModule};
use crate::nn::{Conv2d, Ctx, ParamStore};

/// Decoder branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    M1,
    M2,
    Fused,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::M1, Branch::M2, Branch::Fused];

    pub fn tag(self) -> &'static str {
        match self {
            Branch::M1 => "m1",
            Branch::M2 => "m2",
            Branch::Fused => "fuse",
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m1" => Ok(Branch::M1),
            "m2" => Ok(Branch::M2),
            "fused" | "fuse" => Ok(Branch::Fused),
            other => Err(Error::Config(format!("unknown branch {other:?} (m1, m2, fused)"))),
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Branch::M1 => "m1",
            Branch::M2 => "m2",
            Branch::Fused => "fused",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    pub lateral_width: usize,
    pub scse_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            num_classes: 4,
            lateral_width: 256,
            scse_reduction: 16,
        }
    }
}

impl ModelConfig {
    pub fn tiny(in_channels_m1: usize, in_channels_m2: usize, num_classes: usize) -> Self {
        Self {
            encoder: EncoderConfig::tiny(in_channels_m1, in_channels_m2),
            num_classes,
            lateral_width: 64,
            scse_reduction: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.lateral_width == 0 || self.scse_reduction == 0 {
            return Err(Error::Config("lateral_width and scse_reduction must be positive".into()));
        }
        Ok(())
    }
}

/// Logits `(B, K, H, W)` of the three decoders.
#[derive(Debug, Clone)]
pub struct BranchLogits {
    pub m1: Tensor,
    pub m2: Tensor,
    pub fused: Tensor,
}

struct FusionStage {
    m1: FusionModule,
    m2: FusionModule,
    fuse: FusionModule,
    reduce: Conv2d,
}

/// Stems, shared and specific encoders, translators, per-stage fusion for
/// each branch and three FPN decoders.
pub struct StarsModel {
    cfg: ModelConfig,
    backbone: Backbone,
    translators: Translators,
    fusion: Vec<FusionStage>,
    decoder_m1: FpnDecoder,
    decoder_m2: FpnDecoder,
    decoder_fuse: FpnDecoder,
}

impl StarsModel {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, align: &AlignmentConfig) -> Result<Self> {
        cfg.validate()?;
        align.validate()?;
        let backbone = Backbone::new(ps, &cfg.encoder)?;
        let widths = cfg.encoder.stage_channels;
        let translators = Translators::new(ps, align, &widths)?;
        let mut fusion = Vec::with_capacity(4);
        for (i, &c) in widths.iter().enumerate() {
            let p = format!("fusion/stage{}", i + 1);
            fusion.push(FusionStage {
                m1: FusionModule::new(ps, &format!("{p}/m1"), c, cfg.scse_reduction)?,
                m2: FusionModule::new(ps, &format!("{p}/m2"), c, cfg.scse_reduction)?,
                fuse: FusionModule::new(ps, &format!("{p}/fuse"), c, cfg.scse_reduction)?,
                reduce: Conv2d::new(ps, &format!("{p}/fuse/reduce"), 2 * c, c, 1, 1, 0, true)?,
            });
        }
        let doubled = widths.map(|c| 2 * c);
        let dec = |ps: &mut ParamStore, name: &str| FpnDecoder::new(ps, name, &doubled, cfg.lateral_width, cfg.num_classes);
        Ok(Self {
            cfg: cfg.clone(),
            decoder_m1: dec(ps, "decoder_m1")?,
            decoder_m2: dec(ps, "decoder_m2")?,
            decoder_fuse: dec(ps, "decoder_fuse")?,
            backbone,
            translators,
            fusion,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn translators(&self) -> &Translators {
        &self.translators
    }

    fn decoder(&self, branch: Branch) -> &FpnDecoder {
        match branch {
            Branch::M1 => &self.decoder_m1,
            Branch::M2 => &self.decoder_m2,
            Branch::Fused => &self.decoder_fuse,
        }
    }

    fn fuse_pyramid(
        &self,
        spec: &FeaturePyramid,
        shared: &FeaturePyramid,
        pick: impl Fn(&FusionStage) -> &FusionModule,
        ctx: Ctx,
    ) -> Result<Vec<Tensor>> {
        self.fusion
            .iter()
            .zip(spec.stages.iter().zip(&shared.stages))
            .map(|(f, (sp, sh))| pick(f).forward(sp, sh, ctx))
            .collect()
    }

    /// Both modalities through all three branches.
    ///
    /// The fused branch combines the two specific pyramids by concatenation
    /// and a 1×1 reduction, and the shared pyramids by averaging.
    pub fn forward_branches(&self, dual: &DualBranchFeatures, out_h: usize, out_w: usize, ctx: Ctx) -> Result<BranchLogits> {
        let p1 = self.fuse_pyramid(&dual.spec_m1, &dual.shared_m1, |f| &f.m1, ctx)?;
        let p2 = self.fuse_pyramid(&dual.spec_m2, &dual.shared_m2, |f| &f.m2, ctx)?;
        let mut pf = Vec::with_capacity(4);
        for (s, f) in self.fusion.iter().enumerate() {
            let spec = f
                .reduce
                .forward(&Tensor::cat(&[&dual.spec_m1.stages[s], &dual.spec_m2.stages[s]], 1)?)?;
            let shared = ((&dual.shared_m1.stages[s] + &dual.shared_m2.stages[s])? * 0.5)?;
            pf.push(f.fuse.forward(&spec, &shared, ctx)?);
        }
        Ok(BranchLogits {
            m1: self.decoder_m1.forward(&p1, out_h, out_w)?,
            m2: self.decoder_m2.forward(&p2, out_h, out_w)?,
            fused: self.decoder_fuse.forward(&pf, out_h, out_w)?,
        })
    }

    /// Shared and specific pyramids of one modality; with `tap` the chosen
    /// encoder stage is re-rooted at a `Var` for attribution.
    pub fn encode_single(
        &self,
        x: &Tensor,
        m: Modality,
        ctx: Ctx,
        tap: Option<(EncoderKind, usize)>,
    ) -> Result<(FeaturePyramid, FeaturePyramid, Option<Var>)> {
        let spec_kind = match m {
            Modality::M1 => EncoderKind::SpecM1,
            Modality::M2 => EncoderKind::SpecM2,
        };
        if let Some((kind, _)) = tap {
            if kind != EncoderKind::Shared && kind != spec_kind {
                return Err(Error::Config(format!(
                    "encoder {} is not on the {} input path",
                    kind.prefix(),
                    m.tag()
                )));
            }
        }
        let stem = self.backbone.stem_forward(x, m, ctx)?;
        let tap_for = |k: EncoderKind| tap.filter(|(t, _)| *t == k).map(|(_, s)| s);
        let (shared, v1) =
            self.backbone
                .encoder(EncoderKind::Shared)
                .forward_tapped(&stem, ctx, m.stream(), tap_for(EncoderKind::Shared))?;
        let (spec, v2) = self
            .backbone
            .encoder(spec_kind)
            .forward_tapped(&stem, ctx, 0, tap_for(spec_kind))?;
        Ok((shared, spec, v1.or(v2)))
    }

    /// Logits from one modality. The fused branch decodes
    /// `fuse(spec_m, shared_m)`; a modality branch must match `m`.
    pub fn decode_single(
        &self,
        shared: &FeaturePyramid,
        spec: &FeaturePyramid,
        m: Modality,
        branch: Branch,
        out_h: usize,
        out_w: usize,
        ctx: Ctx,
    ) -> Result<Tensor> {
        let stages = match (branch, m) {
            (Branch::Fused, _) => self.fuse_pyramid(spec, shared, |f| &f.fuse, ctx)?,
            (Branch::M1, Modality::M1) => self.fuse_pyramid(spec, shared, |f| &f.m1, ctx)?,
            (Branch::M2, Modality::M2) => self.fuse_pyramid(spec, shared, |f| &f.m2, ctx)?,
            _ => {
                return Err(Error::Config(format!(
                    "branch {branch} cannot decode {}-only input",
                    m.tag()
                )))
            }
        };
        self.decoder(branch).forward(&stages, out_h, out_w)
    }

    pub fn forward_single(&self, x: &Tensor, m: Modality, branch: Branch, ctx: Ctx) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let (shared, spec, _) = self.encode_single(x, m, ctx, None)?;
        self.decode_single(&shared, &spec, m, branch, h, w, ctx)
    }
}

/// One stem, one encoder and one FPN decoder on modality 1 alone.
pub struct BaselineModel {
    cfg: ModelConfig,
    stem: Stem,
    encoder: Encoder,
    decoder: FpnDecoder,
}

impl BaselineModel {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let e = &cfg.encoder;
        Ok(Self {
            cfg: cfg.clone(),
            stem: Stem::new(ps, "stem_m1", e.in_channels_m1, e.stem_channels)?,
            encoder: Encoder::new(ps, "spec_m1", e, &[""])?,
            decoder: FpnDecoder::new(ps, "decoder_m1", &e.stage_channels, cfg.lateral_width, cfg.num_classes)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let stem = self.stem.forward(x, ctx)?;
        let p = self.encoder.forward(&stem, ctx, 0)?;
        self.decoder.forward(&p.stages, h, w)
    }
}
