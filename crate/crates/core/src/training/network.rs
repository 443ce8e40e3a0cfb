use candle_core::Tensor;

use super::losses::{cross_entropy, seg_loss};
use super::schedule::ModelKind;
use crate::alignment::{alignment_losses, AlignToggles, AlignmentConfig};
use crate::backbone::Modality;
use crate::data::{Batch, Modalities};
use crate::error::{Error, Result};
use crate::model::{BaselineModel, Branch, StarsModel};
use crate::nn::Ctx;

/// Loss terms of one forward pass; `None` marks a skipped term.
#[derive(Debug, Clone, Default)]
pub struct LossTerms {
    pub seg: Option<Tensor>,
    pub psc: Option<Tensor>,
    pub ncs: Option<Tensor>,
}

/// A trainable segmentation network.
pub trait Network {
    fn kind(&self) -> ModelKind;

    fn losses(
        &self,
        batch: &Batch,
        align: &AlignmentConfig,
        toggles: AlignToggles,
        ignore: u8,
        seed: u64,
        ctx: Ctx,
    ) -> Result<LossTerms>;

    /// Rejects mode/branch combinations the network cannot serve.
    fn check_inference(&self, mode: Modalities, branch: Branch) -> Result<()>;

    /// Logits `(B, K, H, W)` using running normalization statistics.
    fn predict(&self, batch: &Batch, mode: Modalities, branch: Branch) -> Result<Tensor>;
}

fn need<'a>(t: &'a Option<Tensor>, what: &str) -> Result<&'a Tensor> {
    t.as_ref()
        .ok_or_else(|| Error::Dataset(format!("batch lacks {what}")))
}

impl Network for StarsModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Stars
    }

    fn losses(
        &self,
        batch: &Batch,
        align: &AlignmentConfig,
        toggles: AlignToggles,
        ignore: u8,
        seed: u64,
        ctx: Ctx,
    ) -> Result<LossTerms> {
        let x1 = need(&batch.m1, "modality 1")?;
        let x2 = need(&batch.m2, "modality 2")?;
        let dual = self.backbone().forward_dual(x1, x2, ctx)?;
        let (h, w) = (batch.labels.height, batch.labels.width);
        let logits = self.forward_branches(&dual, h, w, ctx)?;
        let seg = seg_loss(&[&logits.m1, &logits.m2, &logits.fused], &batch.labels, ignore)?;
        let a = alignment_losses(&dual, &batch.labels, ignore, align, toggles, self.translators(), seed)?;
        Ok(LossTerms {
            seg,
            psc: a.psc,
            ncs: a.ncs,
        })
    }

    fn check_inference(&self, mode: Modalities, branch: Branch) -> Result<()> {
        match (mode, branch) {
            (Modalities::M1Only, Branch::M2) | (Modalities::M2Only, Branch::M1) => Err(Error::Config(format!(
                "branch {branch} is unavailable when evaluating {mode:?}"
            ))),
            _ => Ok(()),
        }
    }

    fn predict(&self, batch: &Batch, mode: Modalities, branch: Branch) -> Result<Tensor> {
        self.check_inference(mode, branch)?;
        let ctx = Ctx::eval();
        match mode {
            Modalities::Both => {
                let dual = self
                    .backbone()
                    .forward_dual(need(&batch.m1, "modality 1")?, need(&batch.m2, "modality 2")?, ctx)?;
                let out = self.forward_branches(&dual, batch.labels.height, batch.labels.width, ctx)?;
                Ok(match branch {
                    Branch::M1 => out.m1,
                    Branch::M2 => out.m2,
                    Branch::Fused => out.fused,
                })
            }
            Modalities::M1Only => self.forward_single(need(&batch.m1, "modality 1")?, Modality::M1, branch, ctx),
            Modalities::M2Only => self.forward_single(need(&batch.m2, "modality 2")?, Modality::M2, branch, ctx),
        }
    }
}

impl Network for BaselineModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Baseline
    }

    fn losses(
        &self,
        batch: &Batch,
        _align: &AlignmentConfig,
        _toggles: AlignToggles,
        ignore: u8,
        _seed: u64,
        ctx: Ctx,
    ) -> Result<LossTerms> {
        let logits = self.forward(need(&batch.m1, "modality 1")?, ctx)?;
        Ok(LossTerms {
            seg: cross_entropy(&logits, &batch.labels, ignore)?,
            psc: None,
            ncs: None,
        })
    }

    fn check_inference(&self, mode: Modalities, _branch: Branch) -> Result<()> {
        if mode == Modalities::M2Only {
            return Err(Error::Config("the baseline only reads modality 1".into()));
        }
        Ok(())
    }

    /// The single decoder answers for every branch.
    fn predict(&self, batch: &Batch, mode: Modalities, branch: Branch) -> Result<Tensor> {
        self.check_inference(mode, branch)?;
        self.forward(need(&batch.m1, "modality 1")?, Ctx::eval())
    }
}
