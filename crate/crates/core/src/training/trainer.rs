use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::losses::total_loss;
use super::network::Network;
use super::optim::{clip_grad_norm, AdamW};
use super::schedule::{lr_schedule, TrainConfig};
use crate::alignment::AlignmentConfig;
use crate::data::{Batch, BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};

/// Scalars of one optimization step. Skipped alignment terms read 0.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lseg: f64,
    pub lpsc: f64,
    pub lncs: f64,
    pub ltotal: f64,
    pub lr: f64,
    /// Global gradient norm after clipping.
    pub grad_norm: f64,
    pub grad_norm_raw: f64,
    pub psc_skipped: bool,
}

impl StepReport {
    pub fn log_line(&self) -> String {
        format!(
            "step={} lseg={:.6} lpsc={:.6} lncs={:.6} ltotal={:.6} lr={:e} gnorm={:.6}",
            self.step, self.lseg, self.lpsc, self.lncs, self.ltotal, self.lr, self.grad_norm
        )
    }
}

/// SplitMix64 of `(seed, step)`: the per-step seed for pixel sampling.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn value(t: &Option<Tensor>) -> Result<f64> {
    match t {
        Some(t) => Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?),
        None => Ok(0.0),
    }
}

/// Forward, backward, clip and update for one batch.
pub fn train_step(
    net: &dyn Network,
    ps: &ParamStore,
    opt: &mut AdamW,
    batch: &Batch,
    cfg: &TrainConfig,
    align: &AlignmentConfig,
    ignore: u8,
    step: usize,
) -> Result<StepReport> {
    let lr = lr_schedule(step, cfg)?;
    let terms = net.losses(batch, align, cfg.toggles(), ignore, step_seed(cfg.seed, step), Ctx::train())?;
    let total = total_loss(terms.seg.as_ref(), terms.psc.as_ref(), terms.ncs.as_ref(), align.alpha, align.beta)?;
    let mut report = StepReport {
        step,
        lseg: value(&terms.seg)?,
        lpsc: value(&terms.psc)?,
        lncs: value(&terms.ncs)?,
        ltotal: value(&total)?,
        lr,
        grad_norm: 0.0,
        grad_norm_raw: 0.0,
        psc_skipped: cfg.use_psc && terms.psc.is_none(),
    };
    let scalars = [report.lseg, report.lpsc, report.lncs, report.ltotal];
    if scalars.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            step,
            detail: format!(
                "non-finite loss (lseg={} lpsc={} lncs={} ltotal={})",
                report.lseg, report.lpsc, report.lncs, report.ltotal
            ),
        });
    }
    let Some(total) = total else {
        return Ok(report);
    };
    let mut grads = total.backward()?;
    let (raw, clipped) = clip_grad_norm(ps, &mut grads, cfg.clip_norm)?;
    if !raw.is_finite() {
        return Err(Error::Numeric {
            step,
            detail: format!("non-finite gradient norm {raw}"),
        });
    }
    report.grad_norm_raw = raw;
    report.grad_norm = clipped;
    opt.step(ps, &grads, lr)?;
    Ok(report)
}

/// Where a run writes its metrics log and checkpoints.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    /// Config snapshot stored in every checkpoint.
    pub config_text: String,
}

impl RunOutput {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.log")
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoints").join("last.ckpt")
    }
}

/// Runs steps `start_step..cfg.total_steps`.
///
/// Batch `k` and the pixel sampler of step `k` depend only on
/// `(cfg.seed, k)`, so a resumed run replays the same stream. With `out`,
/// every step appends a metrics line, and checkpoints are written before the
/// first step of a fresh run, every `cfg.checkpoint_every` steps and at the
/// end. A non-finite loss aborts with a numeric error naming the last
/// checkpoint written.
#[allow(clippy::too_many_arguments)]
pub fn train(
    net: &dyn Network,
    ps: &ParamStore,
    opt: &mut AdamW,
    dataset: &Dataset,
    cfg: &TrainConfig,
    align: &AlignmentConfig,
    start_step: usize,
    out: Option<&RunOutput>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    align.validate()?;
    let sampler = BatchSampler::new(dataset, cfg.batch_size, cfg.crop_size(), cfg.seed, ps.dtype())?;
    let mut log = match out {
        Some(o) => {
            fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let path = o.metrics_path();
            let f = if start_step == 0 {
                File::create(&path)
            } else {
                OpenOptions::new().append(true).create(true).open(&path)
            };
            Some((f.map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut last_ck: Option<PathBuf> = None;
    if let (Some(o), 0) = (out, start_step) {
        let path = o.checkpoint_path(0);
        save_checkpoint(&path, &Checkpoint::capture(ps, opt, 0, cfg.seed, &o.config_text)?)?;
        last_ck = Some(path);
    }
    let mut reports = Vec::with_capacity(cfg.total_steps.saturating_sub(start_step));
    for step in start_step..cfg.total_steps {
        let batch = sampler.batch_at(step)?;
        let report = match train_step(net, ps, opt, &batch, cfg, align, dataset.ignore_value, step) {
            Ok(r) => r,
            Err(Error::Numeric { step, detail }) => {
                let cite = last_ck
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "none written".into());
                return Err(Error::Numeric {
                    step,
                    detail: format!("{detail}; last good checkpoint: {cite}"),
                });
            }
            Err(e) => return Err(e),
        };
        if let Some((f, path)) = log.as_mut() {
            writeln!(f, "{}", report.log_line()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        on_step(&report);
        reports.push(report);
        let done = step + 1;
        if let Some(o) = out {
            let periodic = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
            if periodic || done == cfg.total_steps {
                let ck = Checkpoint::capture(ps, opt, done, cfg.seed, &o.config_text)?;
                let path = o.checkpoint_path(done);
                save_checkpoint(&path, &ck)?;
                save_checkpoint(&o.last_checkpoint(), &ck)?;
                last_ck = Some(path);
            }
        }
    }
    Ok(reports)
}

/// Reads a metrics log back into `(step, key → value)` rows.
pub fn read_metrics(path: &Path) -> Result<Vec<Vec<(String, f64)>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| {
            l.split_whitespace()
                .filter_map(|kv| kv.split_once('='))
                .filter_map(|(k, v)| v.parse::<f64>().ok().map(|v| (k.to_string(), v)))
                .collect()
        })
        .collect())
}
