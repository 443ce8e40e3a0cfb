//! Modality stems plus shared and modality-specific residual encoders.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{ConvBn, Ctx, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// One basic residual block per stage.
    Tiny,
    /// Bottleneck blocks `[3, 4, 6, 3]`, expansion 4.
    Resnet50like,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    M1,
    M2,
}

impl Modality {
    pub fn stream(self) -> usize {
        match self {
            Modality::M1 => 0,
            Modality::M2 => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::M1 => "m1",
            Modality::M2 => "m2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Shared,
    SpecM1,
    SpecM2,
}

impl EncoderKind {
    pub fn prefix(self) -> &'static str {
        match self {
            EncoderKind::Shared => "shared",
            EncoderKind::SpecM1 => "spec_m1",
            EncoderKind::SpecM2 => "spec_m2",
        }
    }

    pub const ALL: [EncoderKind; 3] = [EncoderKind::Shared, EncoderKind::SpecM1, EncoderKind::SpecM2];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub variant: Variant,
    pub stage_channels: [usize; 4],
    pub stem_channels: usize,
    pub in_channels_m1: usize,
    pub in_channels_m2: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::resnet50like(1, 3)
    }
}

impl EncoderConfig {
    pub fn tiny(in_channels_m1: usize, in_channels_m2: usize) -> Self {
        Self {
            variant: Variant::Tiny,
            stage_channels: [16, 32, 64, 128],
            stem_channels: 16,
            in_channels_m1,
            in_channels_m2,
        }
    }

    pub fn resnet50like(in_channels_m1: usize, in_channels_m2: usize) -> Self {
        Self {
            variant: Variant::Resnet50like,
            stage_channels: [256, 512, 1024, 2048],
            stem_channels: 64,
            in_channels_m1,
            in_channels_m2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.iter().any(|&c| c == 0) || self.stem_channels == 0 {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        if self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "stage_channels must be strictly increasing, got {:?}",
                self.stage_channels
            )));
        }
        if self.in_channels_m1 == 0 || self.in_channels_m2 == 0 {
            return Err(Error::Config("modality input channels must be positive".into()));
        }
        if self.variant == Variant::Resnet50like && self.stage_channels.iter().any(|c| c % 4 != 0) {
            return Err(Error::Config("bottleneck stage widths must be divisible by 4".into()));
        }
        Ok(())
    }

    pub fn blocks_per_stage(&self) -> [usize; 4] {
        match self.variant {
            Variant::Tiny => [1, 1, 1, 1],
            Variant::Resnet50like => [3, 4, 6, 3],
        }
    }

    pub fn in_channels(&self, m: Modality) -> usize {
        match m {
            Modality::M1 => self.in_channels_m1,
            Modality::M2 => self.in_channels_m2,
        }
    }
}

/// Four feature maps at strides 4, 8, 16 and 32.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub stages: [Tensor; 4],
}

impl FeaturePyramid {
    /// Stage by 1-based index.
    pub fn stage(&self, s: usize) -> Result<&Tensor> {
        if !(1..=4).contains(&s) {
            return Err(shape_err!("stage index {s} outside 1..=4"));
        }
        Ok(&self.stages[s - 1])
    }

    pub fn channels(&self) -> Vec<usize> {
        self.stages.iter().map(|t| t.dims()[1]).collect()
    }
}

/// Shared and specific pyramids for both modalities.
#[derive(Clone, Debug)]
pub struct DualBranchFeatures {
    pub shared_m1: FeaturePyramid,
    pub shared_m2: FeaturePyramid,
    pub spec_m1: FeaturePyramid,
    pub spec_m2: FeaturePyramid,
}

impl DualBranchFeatures {
    pub fn shared(&self, m: Modality) -> &FeaturePyramid {
        match m {
            Modality::M1 => &self.shared_m1,
            Modality::M2 => &self.shared_m2,
        }
    }

    pub fn spec(&self, m: Modality) -> &FeaturePyramid {
        match m {
            Modality::M1 => &self.spec_m1,
            Modality::M2 => &self.spec_m2,
        }
    }
}

/// Two stride-2 3×3 conv-norm-ReLU layers: stride 4 overall.
#[derive(Clone)]
pub struct Stem {
    conv1: ConvBn,
    conv2: ConvBn,
}

impl Stem {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv1: ConvBn::new(ps, &format!("{name}/stem/conv1"), cin, cout, 3, 2, 1, &[""])?,
            conv2: ConvBn::new(ps, &format!("{name}/stem/conv2"), cout, cout, 3, 2, 1, &[""])?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(shape_err!("input spatial size {h}x{w} must be divisible by 32"));
        }
        let y = self.conv1.forward(x, ctx, 0)?.relu()?;
        Ok(self.conv2.forward(&y, ctx, 0)?.relu()?)
    }
}

#[derive(Clone)]
enum Block {
    Basic {
        conv1: ConvBn,
        conv2: ConvBn,
        down: Option<ConvBn>,
    },
    Bottleneck {
        conv1: ConvBn,
        conv2: ConvBn,
        conv3: ConvBn,
        down: Option<ConvBn>,
    },
}

impl Block {
    fn layer_name(prefix: &str, block: usize, layer: &str) -> String {
        if block == 0 {
            format!("{prefix}/{layer}")
        } else {
            format!("{prefix}/b{block}_{layer}")
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamStore,
        prefix: &str,
        block: usize,
        variant: Variant,
        cin: usize,
        cout: usize,
        stride: usize,
        streams: &[&str],
    ) -> Result<Self> {
        let name = |layer: &str| Self::layer_name(prefix, block, layer);
        let down = if cin != cout || stride != 1 {
            Some(ConvBn::new(ps, &name("down"), cin, cout, 1, stride, 0, streams)?)
        } else {
            None
        };
        Ok(match variant {
            Variant::Tiny => Block::Basic {
                conv1: ConvBn::new(ps, &name("conv1"), cin, cout, 3, stride, 1, streams)?,
                conv2: ConvBn::new(ps, &name("conv2"), cout, cout, 3, 1, 1, streams)?,
                down,
            },
            Variant::Resnet50like => {
                let mid = cout / 4;
                Block::Bottleneck {
                    conv1: ConvBn::new(ps, &name("conv1"), cin, mid, 1, 1, 0, streams)?,
                    conv2: ConvBn::new(ps, &name("conv2"), mid, mid, 3, stride, 1, streams)?,
                    conv3: ConvBn::new(ps, &name("conv3"), mid, cout, 1, 1, 0, streams)?,
                    down,
                }
            }
        })
    }

    fn forward(&self, x: &Tensor, ctx: Ctx, stream: usize) -> Result<Tensor> {
        let (y, down) = match self {
            Block::Basic { conv1, conv2, down } => {
                let y = conv1.forward(x, ctx, stream)?.relu()?;
                (conv2.forward(&y, ctx, stream)?, down)
            }
            Block::Bottleneck {
                conv1,
                conv2,
                conv3,
                down,
            } => {
                let y = conv1.forward(x, ctx, stream)?.relu()?;
                let y = conv2.forward(&y, ctx, stream)?.relu()?;
                (conv3.forward(&y, ctx, stream)?, down)
            }
        };
        let skip = match down {
            Some(d) => d.forward(x, ctx, stream)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// Four-stage residual encoder.
#[derive(Clone)]
pub struct Encoder {
    stages: Vec<Vec<Block>>,
    in_channels: usize,
    streams: usize,
}

impl Encoder {
    /// `streams` names the inputs that keep separate normalization statistics
    /// (`["m1", "m2"]` for the shared encoder, `[""]` otherwise).
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &EncoderConfig, streams: &[&str]) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut cin = cfg.stem_channels;
        for (s, (&cout, &nblocks)) in cfg.stage_channels.iter().zip(cfg.blocks_per_stage().iter()).enumerate() {
            let prefix = format!("{name}/stage{}", s + 1);
            let mut blocks = Vec::with_capacity(nblocks);
            for b in 0..nblocks {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(Block::new(ps, &prefix, b, cfg.variant, cin, cout, stride, streams)?);
                cin = cout;
            }
            stages.push(blocks);
        }
        Ok(Self {
            stages,
            in_channels: cfg.stem_channels,
            streams: streams.len(),
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx, stream: usize) -> Result<FeaturePyramid> {
        Ok(self.forward_tapped(x, ctx, stream, None)?.0)
    }

    /// Forward pass that re-roots the graph at the output of `tap` (1-based):
    /// the returned `Var` holds that stage's activations and every later stage
    /// is computed from it, so gradients w.r.t. the `Var` include all
    /// downstream paths.
    pub fn forward_tapped(
        &self,
        x: &Tensor,
        ctx: Ctx,
        stream: usize,
        tap: Option<usize>,
    ) -> Result<(FeaturePyramid, Option<Var>)> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(shape_err!("encoder expects {} channels, got {c}", self.in_channels));
        }
        if stream >= self.streams {
            return Err(shape_err!("encoder has {} streams, got index {stream}", self.streams));
        }
        let mut outs = Vec::with_capacity(4);
        let mut tapped = None;
        let mut y = x.clone();
        for (s, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                y = b.forward(&y, ctx, stream)?;
            }
            if tap == Some(s + 1) {
                let v = Var::from_tensor(&y.detach())?;
                y = v.as_tensor().clone();
                tapped = Some(v);
            }
            outs.push(y.clone());
        }
        let stages: [Tensor; 4] = outs
            .try_into()
            .map_err(|_| Error::Logic("encoder must produce four stages".into()))?;
        Ok((FeaturePyramid { stages }, tapped))
    }
}

/// Stems for both modalities, the shared encoder and the two specific encoders.
#[derive(Clone)]
pub struct Backbone {
    cfg: EncoderConfig,
    stem_m1: Stem,
    stem_m2: Stem,
    shared: Encoder,
    spec_m1: Encoder,
    spec_m2: Encoder,
}

impl Backbone {
    pub fn new(ps: &mut ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            stem_m1: Stem::new(ps, "stem_m1", cfg.in_channels_m1, cfg.stem_channels)?,
            stem_m2: Stem::new(ps, "stem_m2", cfg.in_channels_m2, cfg.stem_channels)?,
            shared: Encoder::new(ps, "shared", cfg, &["m1", "m2"])?,
            spec_m1: Encoder::new(ps, "spec_m1", cfg, &[""])?,
            spec_m2: Encoder::new(ps, "spec_m2", cfg, &[""])?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn stem_forward(&self, x: &Tensor, which: Modality, ctx: Ctx) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        let expected = self.cfg.in_channels(which);
        if c != expected {
            return Err(shape_err!("modality {} expects {expected} channels, got {c}", which.tag()));
        }
        match which {
            Modality::M1 => self.stem_m1.forward(x, ctx),
            Modality::M2 => self.stem_m2.forward(x, ctx),
        }
    }

    pub fn encoder(&self, kind: EncoderKind) -> &Encoder {
        match kind {
            EncoderKind::Shared => &self.shared,
            EncoderKind::SpecM1 => &self.spec_m1,
            EncoderKind::SpecM2 => &self.spec_m2,
        }
    }

    /// Runs one encoder on a stem output. `source` selects the shared
    /// encoder's normalization statistics and is ignored by specific encoders.
    pub fn encode(&self, stem_out: &Tensor, kind: EncoderKind, source: Modality, ctx: Ctx) -> Result<FeaturePyramid> {
        let stream = if kind == EncoderKind::Shared { source.stream() } else { 0 };
        self.encoder(kind).forward(stem_out, ctx, stream)
    }

    /// Shared and specific pyramids for one modality.
    pub fn forward_single(&self, x: &Tensor, m: Modality, ctx: Ctx) -> Result<(FeaturePyramid, FeaturePyramid)> {
        let stem = self.stem_forward(x, m, ctx)?;
        let shared = self.encode(&stem, EncoderKind::Shared, m, ctx)?;
        let kind = match m {
            Modality::M1 => EncoderKind::SpecM1,
            Modality::M2 => EncoderKind::SpecM2,
        };
        let spec = self.encode(&stem, kind, m, ctx)?;
        Ok((shared, spec))
    }

    pub fn forward_dual(&self, x1: &Tensor, x2: &Tensor, ctx: Ctx) -> Result<DualBranchFeatures> {
        let (b1, _, h1, w1) = x1.dims4()?;
        let (b2, _, h2, w2) = x2.dims4()?;
        if (b1, h1, w1) != (b2, h2, w2) {
            return Err(shape_err!(
                "modality inputs disagree: ({b1},{h1},{w1}) vs ({b2},{h2},{w2})"
            ));
        }
        let (shared_m1, spec_m1) = self.forward_single(x1, Modality::M1, ctx)?;
        let (shared_m2, spec_m2) = self.forward_single(x2, Modality::M2, ctx)?;
        Ok(DualBranchFeatures {
            shared_m1,
            shared_m2,
            spec_m1,
            spec_m2,
        })
    }
}
