//! One function per acceptance criterion. Each returns a short detail line on
//! success and the reason on failure.

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stars::alignment::{ncs_loss, psc_loss, sample_balanced_pixels, AlignmentConfig, Direction, TranslationModule};
use stars::data::{
    generate_synthetic_dataset, Dataset, DatasetManifest, LabelBatch, Modalities, SyntheticSceneConfig, IGNORE,
};
use stars::diagnostics::{class_similarity, collapse_on_dataset};
use stars::evaluation::{default_branch, evaluate, mf1, miou, ConfusionMatrix};
use stars::fusion_decoder::{FpnDecoder, FusionModule, Scse};
use stars::model::{BaselineModel, Branch, ModelConfig, StarsModel};
use stars::nn::{Ctx, ParamStore};
use stars::training::{lr_schedule, train, AdamW, Network, TrainConfig};

use super::{grad_check, ncs_brute_force, project, psc_loop, randn, rows_tensor, scalar, to_vec, unit_rows};

pub type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn loss_oracles() -> Outcome {
    let a = randn(&[2, 3, 4, 4], 1);
    let same = scalar(&ncs_loss(&a, &a, &a, &a, true).unwrap());
    ensure((same + 1.0).abs() <= 1e-6, || format!("ncs on identical tensors = {same}"))?;

    // first half of channels against second half: orthogonal at every position
    let z = Tensor::zeros((2, 2, 3, 3), DType::F64, &Device::Cpu).unwrap();
    let u = randn(&[2, 2, 3, 3], 2);
    let v = randn(&[2, 2, 3, 3], 3);
    let left = Tensor::cat(&[&u, &z], 1).unwrap();
    let right = Tensor::cat(&[&z, &v], 1).unwrap();
    let orth = scalar(&ncs_loss(&left, &right, &right, &left, true).unwrap());
    ensure(orth.abs() <= 1e-6, || format!("ncs on orthogonal tensors = {orth}"))?;

    let mut worst_ncs = 0.0f64;
    for seed in 0..20 {
        let t: Vec<Tensor> = (0..4).map(|i| randn(&[1, 4, 2, 2], 100 + seed * 4 + i)).collect();
        let got = scalar(&ncs_loss(&t[0], &t[1], &t[2], &t[3], true).unwrap());
        worst_ncs = worst_ncs.max((got - ncs_brute_force(&t[0], &t[1], &t[2], &t[3])).abs());
    }
    ensure(worst_ncs <= 1e-6, || format!("ncs brute-force gap {worst_ncs:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f1 = rows_tensor(&unit_rows(6, 5, &mut rng));
    let f2 = rows_tensor(&unit_rows(6, 5, &mut rng));
    let single = scalar(&psc_loss(&f1, &f2, &[2; 6], 0.1).unwrap().unwrap());
    ensure(single.abs() <= 1e-7, || format!("psc on a single-class batch = {single}"))?;

    let onehot = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
    let t = rows_tensor(&onehot);
    let two = scalar(&psc_loss(&t, &t, &[0, 0, 1, 1], 1.0).unwrap().unwrap());
    let expected = (1.0 + (-1.0f64).exp()).ln();
    ensure((two - expected).abs() <= 1e-12, || format!("psc two-class example {two} vs {expected}"))?;

    let mut worst_psc = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=8);
        let c = rng.random_range(2..=6);
        let k = rng.random_range(1..=3u8);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let tau = rng.random_range(0.05..2.0);
        let a = unit_rows(n, c, &mut rng);
        let b = unit_rows(n, c, &mut rng);
        let got = scalar(&psc_loss(&rows_tensor(&a), &rows_tensor(&b), &labels, tau).unwrap().unwrap());
        let want = psc_loop(&a, &b, &labels, tau);
        worst_psc = worst_psc.max((got - want).abs() / want.abs().max(1e-12));
        ensure(got >= -1e-12, || format!("negative psc {got}"))?;
    }
    ensure(worst_psc <= 1e-6, || format!("psc loop-oracle relative gap {worst_psc:e}"))?;
    Ok(format!(
        "ncs identical {same:.6}, orthogonal {orth:.1e}, brute-force gap {worst_ncs:.1e}; psc single-class {single:.1e}, loop gap {worst_psc:.1e}"
    ))
}

pub fn stop_gradient() -> Outcome {
    let p1 = randn(&[2, 4, 3, 3], 11);
    let p2 = randn(&[2, 4, 3, 3], 12);
    let f1 = Var::from_tensor(&randn(&[2, 4, 3, 3], 13)).unwrap();
    let f2 = Var::from_tensor(&randn(&[2, 4, 3, 3], 14)).unwrap();
    let anchor_grad = |detach: bool| -> f64 {
        let g = ncs_loss(&p1, f2.as_tensor(), &p2, f1.as_tensor(), detach)
            .unwrap()
            .backward()
            .unwrap();
        [&f1, &f2]
            .iter()
            .map(|v| g.get(v.as_tensor()).map(|t| to_vec(t)).unwrap_or_default())
            .flatten()
            .fold(0.0f64, |m, x| m.max(x.abs()))
    };
    let detached = anchor_grad(true);
    let attached = anchor_grad(false);
    ensure(detached <= 1e-12, || format!("anchor gradient {detached:e} with detach"))?;
    ensure(attached > 1e-6, || format!("anchor gradient {attached:e} without detach"))?;

    // with detach, the gradient reaching a translator input equals the one
    // obtained when the anchors are replaced by constants of the same value
    let mut ps = ParamStore::new(5, DType::F64);
    let h12 = TranslationModule::new(&mut ps, 3, Direction::M1ToM2, 4, 1).unwrap();
    let h21 = TranslationModule::new(&mut ps, 3, Direction::M2ToM1, 4, 1).unwrap();
    let grad_of = |constant_anchors: bool| -> Vec<f64> {
        let a = Var::from_tensor(&randn(&[2, 4, 3, 3], 15)).unwrap();
        let b = Var::from_tensor(&randn(&[2, 4, 3, 3], 16)).unwrap();
        let (fa, fb) = if constant_anchors {
            (Tensor::new(to_vec(a.as_tensor()), &Device::Cpu).unwrap().reshape(a.dims()).unwrap(),
             Tensor::new(to_vec(b.as_tensor()), &Device::Cpu).unwrap().reshape(b.dims()).unwrap())
        } else {
            (a.as_tensor().clone(), b.as_tensor().clone())
        };
        let loss = ncs_loss(
            &h12.translate(a.as_tensor()).unwrap(),
            &fb,
            &h21.translate(b.as_tensor()).unwrap(),
            &fa,
            !constant_anchors,
        )
        .unwrap();
        let g = loss.backward().unwrap();
        to_vec(g.get(a.as_tensor()).unwrap())
    };
    let gap = grad_of(false)
        .iter()
        .zip(grad_of(true))
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    ensure(gap <= 1e-12, || format!("detached vs constant-anchor gradients differ by {gap:e}"))?;
    Ok(format!("detached anchor grad {detached:.1e}, attached {attached:.2e}, constant-anchor gap {gap:.1e}"))
}

pub fn gradient_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut ps = ParamStore::new(1, DType::F64);
    let h = TranslationModule::new(&mut ps, 3, Direction::M1ToM2, 4, 1).unwrap();
    let x = randn(&[2, 4, 3, 3], 10);
    out.push(("translate", grad_check(&x, 72, |x| project(&h.translate(x).unwrap(), 11))));

    let s = Scse::new(&mut ps, "s", 8, 2).unwrap();
    let x = randn(&[2, 8, 3, 3], 20);
    out.push(("scse", grad_check(&x, 144, |x| project(&s.forward(x).unwrap(), 21))));

    let m = FusionModule::new(&mut ps, "fuse", 4, 2).unwrap();
    let spec = randn(&[2, 4, 3, 3], 30);
    let shared = randn(&[2, 4, 3, 3], 31);
    let e1 = grad_check(&spec, 72, |x| project(&m.forward(x, &shared, Ctx::probe()).unwrap(), 32));
    let e2 = grad_check(&shared, 72, |x| project(&m.forward(&spec, x, Ctx::probe()).unwrap(), 32));
    out.push(("fuse", e1.max(e2)));

    let d = FpnDecoder::new(&mut ps, "dec", &[2, 3, 4, 5], 4, 3).unwrap();
    let stages = [
        randn(&[1, 2, 8, 8], 40),
        randn(&[1, 3, 4, 4], 41),
        randn(&[1, 4, 2, 2], 42),
        randn(&[1, 5, 1, 1], 43),
    ];
    let mut worst = 0.0f64;
    for i in 0..4 {
        worst = worst.max(grad_check(&stages[i], 64, |x| {
            let mut st = stages.to_vec();
            st[i] = x.clone();
            project(&d.forward(&st, 32, 32).unwrap(), 44)
        }));
    }
    out.push(("fpn_decode", worst));

    let t: Vec<Tensor> = (0..4).map(|i| randn(&[2, 3, 2, 2], 50 + i)).collect();
    let mut worst = 0.0f64;
    for detach in [true, false] {
        worst = worst.max(grad_check(&t[0], 24, |x| ncs_loss(x, &t[1], &t[2], &t[3], detach).unwrap()));
        worst = worst.max(grad_check(&t[1], 24, |x| ncs_loss(&t[0], x, &t[2], &t[3], false).unwrap()));
    }
    out.push(("ncs", worst));

    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let labels = [0u8, 0, 1, 1, 2, 2];
    let f1 = rows_tensor(&unit_rows(6, 4, &mut rng));
    let f2 = rows_tensor(&unit_rows(6, 4, &mut rng));
    let mut worst = 0.0f64;
    for tau in [0.1, 1.0] {
        worst = worst.max(grad_check(&f1, 24, |x| psc_loss(x, &f2, &labels, tau).unwrap().unwrap()));
        worst = worst.max(grad_check(&f2, 24, |x| psc_loss(&f1, x, &labels, tau).unwrap().unwrap()));
    }
    out.push(("psc", worst));
    out
}

pub fn gradient_checks() -> Outcome {
    let errs = gradient_errors();
    let detail = errs
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(errs.iter().all(|(_, e)| *e < 1e-3), || format!("relative error above 1e-3: {detail}"))?;
    Ok(detail)
}

pub fn sampler_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut repeated_classes = 0;
    for trial in 0..1000 {
        let (b, h, w) = (rng.random_range(1..=3), rng.random_range(1..=12), rng.random_range(1..=12));
        let k = rng.random_range(2..=6u8);
        let p_ignore = rng.random_range(0.0..0.5);
        let data: Vec<u8> = (0..b * h * w)
            .map(|_| if rng.random_bool(p_ignore) { IGNORE } else { rng.random_range(0..k) })
            .collect();
        let labels = LabelBatch { data: data.clone(), batch: b, height: h, width: w };
        let n = rng.random_range(1..=48);
        let Some(s) = sample_balanced_pixels(&labels, n, IGNORE, trial) else {
            ensure(data.iter().all(|&v| v == IGNORE), || format!("trial {trial}: no sample despite valid pixels"))?;
            continue;
        };
        for class in 0..k {
            let count = data.iter().filter(|&&v| v == class).count();
            let picked: Vec<_> = s
                .indices
                .iter()
                .zip(&s.labels)
                .filter(|(_, &l)| l == class)
                .map(|(i, _)| *i)
                .collect();
            let expected = if count > 0 { n } else { 0 };
            ensure(picked.len() == expected, || {
                format!("trial {trial}: class {class} got {} samples, expected {expected}", picked.len())
            })?;
            for &(bi, y, x) in &picked {
                ensure(labels.get(bi, y, x) == class, || format!("trial {trial}: sampled pixel has another label"))?;
            }
            if count == 0 {
                continue;
            }
            // every pixel is used floor(n/count) or ceil(n/count) times
            let mut uses = std::collections::HashMap::new();
            for p in &picked {
                *uses.entry(*p).or_insert(0usize) += 1;
            }
            let lo = n / count;
            let hi = n.div_ceil(count);
            let distinct_expected = count.min(n);
            ensure(uses.len() == distinct_expected && uses.values().all(|&u| u >= lo.max(1) && u <= hi), || {
                format!("trial {trial}: class {class} with {count} pixels and n={n} has uneven reuse")
            })?;
            if count < n {
                repeated_classes += 1;
            }
        }
        ensure(!s.labels.contains(&IGNORE), || format!("trial {trial}: ignore label sampled"))?;
    }
    Ok(format!("1000 label maps, {repeated_classes} under-N classes cycled evenly"))
}

pub fn metric_oracles() -> Outcome {
    let cm = ConfusionMatrix::from_rows(&[vec![8, 2], vec![3, 7]]).unwrap();
    let (_, m_iou) = miou(&cm).unwrap();
    let (_, m_f1) = mf1(&cm).unwrap();
    ensure((m_iou - 0.5994).abs() <= 1e-4, || format!("mIoU {m_iou}"))?;
    ensure((m_f1 - 0.7494).abs() <= 1e-4, || format!("mF1 {m_f1}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(2..=6);
        let rows: Vec<Vec<u64>> = (0..k).map(|_| (0..k).map(|_| rng.random_range(0..50)).collect()).collect();
        let cm = ConfusionMatrix::from_rows(&rows).unwrap();
        let Ok((ious, _)) = miou(&cm) else { continue };
        let (f1s, _) = mf1(&cm).unwrap();
        for (i, f) in ious.iter().zip(&f1s) {
            if let (Some(i), Some(f)) = (i, f) {
                worst = worst.max((f - 2.0 * i / (1.0 + i)).abs());
            }
        }
    }
    ensure(worst <= 1e-12, || format!("F1/IoU identity gap {worst:e}"))?;
    Ok(format!("mIoU {m_iou:.4}, mF1 {m_f1:.4}, identity gap {worst:.1e} over 100 matrices"))
}

pub fn schedule_anchors() -> Outcome {
    let cfg = TrainConfig::default();
    let lr = |s| lr_schedule(s, &cfg).unwrap();
    ensure(lr(0) == 1e-6, || format!("lr(0) = {}", lr(0)))?;
    ensure(lr(1000) == 1e-4, || format!("lr(1000) = {}", lr(1000)))?;
    ensure(lr(cfg.total_steps) == 0.0, || format!("lr(total) = {}", lr(cfg.total_steps)))?;
    for s in 0..cfg.warmup_steps {
        ensure(lr(s + 1) > lr(s), || format!("warm-up not increasing at {s}"))?;
    }
    for s in cfg.warmup_steps..cfg.total_steps {
        ensure(lr(s + 1) <= lr(s), || format!("decay not monotone at {s}"))?;
    }
    Ok(format!("lr(0)={:e} lr(1000)={:e} lr({})={}", lr(0), lr(1000), cfg.total_steps, lr(cfg.total_steps)))
}

pub fn shape_contracts(scratch: &Path) -> Outcome {
    let mut ps = ParamStore::new(8, DType::F32);
    let fuse = FusionModule::new(&mut ps, "fuse", 6, 2).unwrap();
    let spec = Tensor::randn(0f32, 1.0, (2, 6, 5, 5), &Device::Cpu).unwrap();
    let shared = Tensor::randn(0f32, 1.0, (2, 6, 5, 5), &Device::Cpu).unwrap();
    let out = fuse.forward(&spec, &shared, Ctx::train()).unwrap();
    ensure(out.dims() == [2, 12, 5, 5], || format!("fuse output {:?}", out.dims()))?;
    let tail: Vec<f32> = out.narrow(1, 6, 6).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let want: Vec<f32> = shared.flatten_all().unwrap().to_vec1().unwrap();
    ensure(tail.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()), || {
        "trailing fuse channels differ from the shared input".into()
    })?;

    let dec = FpnDecoder::new(&mut ps, "dec", &[4, 8, 8, 16], 8, 5).unwrap();
    for (h, w) in [(32, 32), (64, 96), (96, 64)] {
        let st: Vec<Tensor> = [4usize, 8, 8, 16]
            .iter()
            .enumerate()
            .map(|(i, &c)| Tensor::zeros((1, c, h / (4 << i), w / (4 << i)), DType::F32, &Device::Cpu).unwrap())
            .collect();
        let logits = dec.forward(&st, h, w).unwrap();
        ensure(logits.dims() == [1, 5, h, w], || format!("logits {:?} for {h}x{w}", logits.dims()))?;
    }

    let dir = scratch.join("m1_only");
    let cfg = SyntheticSceneConfig { seed: 5, ..Default::default() };
    generate_synthetic_dataset(&cfg, 6, &dir).unwrap();
    let manifest = DatasetManifest::load(&dir).unwrap();
    let mut removed = 0;
    for entry in walk(&dir) {
        let name = entry.file_name().unwrap().to_string_lossy().to_string();
        if name.contains(".m2.") {
            std::fs::remove_file(&entry).unwrap();
            removed += 1;
        }
    }
    ensure(removed > 0, || "no modality-2 files found to remove".into())?;
    let mut ps = ParamStore::new(9, DType::F32);
    let model = StarsModel::new(&mut ps, &ModelConfig::tiny(1, 3, 4), &AlignmentConfig::default()).unwrap();
    let report = evaluate(&model, &manifest, Modalities::M1Only, default_branch(Modalities::M1Only), DType::F32)
        .map_err(|e| format!("m1-only evaluation touched modality 2: {e}"))?;
    ensure(evaluate(&model, &manifest, Modalities::Both, Branch::Fused, DType::F32).is_err(), || {
        "two-modality evaluation succeeded without modality-2 files".into()
    })?;
    Ok(format!(
        "fuse 6->12 channels, shared tail bitwise; logits at input size; m1-only eval over {} pixels with {removed} modality-2 files deleted",
        report.pixel_count
    ))
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

/// Training and test sets for the desk-scale runs.
pub struct DeskData {
    pub train: Dataset,
    pub test_manifest: DatasetManifest,
    pub test: Dataset,
}

impl DeskData {
    pub fn create(root: &Path) -> Self {
        let cfg = SyntheticSceneConfig::default();
        let tr = root.join("train");
        let te = root.join("test");
        generate_synthetic_dataset(&cfg, 200, &tr).unwrap();
        generate_synthetic_dataset(&SyntheticSceneConfig { seed: 2, ..cfg }, 50, &te).unwrap();
        let test_manifest = DatasetManifest::load(&te).unwrap();
        Self {
            train: Dataset::load(&DatasetManifest::load(&tr).unwrap(), Modalities::Both).unwrap(),
            test: Dataset::load(&test_manifest, Modalities::Both).unwrap(),
            test_manifest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeskVariant {
    Stars,
    NcsOnly,
    Baseline,
    Detach08,
    NoDetach08,
}

#[derive(Debug, Clone)]
pub struct DeskRun {
    pub variant: DeskVariant,
    pub seed: u64,
    pub miou: f64,
    pub seconds: f64,
    pub margin_before: Option<f64>,
    pub margin_after: Option<f64>,
    pub collapse: Option<f64>,
}

pub fn desk_run(data: &DeskData, variant: DeskVariant, seed: u64, steps: usize) -> DeskRun {
    let start = Instant::now();
    let mut ps = ParamStore::new(seed, DType::F32);
    let mc = ModelConfig::tiny(1, 3, 4);
    let mut align = AlignmentConfig::default();
    let tiny = TrainConfig::tiny();
    let warmup_steps = tiny.warmup_steps.min(steps / 20);
    let mut tc = TrainConfig { total_steps: steps, warmup_steps, seed, ..tiny };
    match variant {
        DeskVariant::NcsOnly => {
            tc.use_trans = false;
            tc.use_psc = false;
        }
        DeskVariant::Detach08 => align.beta = 0.8,
        DeskVariant::NoDetach08 => {
            align.beta = 0.8;
            align.detach = false;
        }
        _ => {}
    }
    let (stars, baseline) = if variant == DeskVariant::Baseline {
        (None, Some(BaselineModel::new(&mut ps, &mc).unwrap()))
    } else {
        (Some(StarsModel::new(&mut ps, &mc, &align).unwrap()), None)
    };
    let net: &dyn Network = match (&stars, &baseline) {
        (Some(m), _) => m,
        (_, Some(m)) => m,
        _ => unreachable!(),
    };
    let margin = |m: &StarsModel| {
        class_similarity(m, &data.test, 4, 4, 32, 0, DType::F32)
            .unwrap()
            .margin()
            .unwrap_or(f64::NAN)
    };
    let margin_before = match (&stars, variant) {
        (Some(m), DeskVariant::Stars) => Some(margin(m)),
        _ => None,
    };
    let mut opt = AdamW::new(tc.weight_decay);
    train(net, &ps, &mut opt, &data.train, &tc, &align, 0, None, |_| {}).unwrap();
    let mode = Modalities::M1Only;
    let miou = evaluate(net, &data.test_manifest, mode, default_branch(mode), DType::F32)
        .unwrap()
        .miou;
    let margin_after = margin_before.and(stars.as_ref().map(margin));
    let collapse = match (&stars, variant) {
        (Some(m), DeskVariant::Detach08 | DeskVariant::NoDetach08) => {
            Some(collapse_on_dataset(m, &data.test, 4, 8, DType::F32).unwrap())
        }
        _ => None,
    };
    DeskRun {
        variant,
        seed,
        miou,
        seconds: start.elapsed().as_secs_f64(),
        margin_before,
        margin_after,
        collapse,
    }
}

/// Identical-seed tiny training runs written through the trainer's metrics log.
pub fn determinism(scratch: &Path, data: &DeskData, steps: usize) -> Outcome {
    let mut logs = Vec::new();
    for i in 0..2 {
        let out = stars::training::RunOutput {
            dir: scratch.join(format!("det{i}")),
            config_text: "determinism".into(),
        };
        let mut ps = ParamStore::new(3, DType::F32);
        let align = AlignmentConfig::default();
        let model = StarsModel::new(&mut ps, &ModelConfig::tiny(1, 3, 4), &align).unwrap();
        let tc = TrainConfig { total_steps: steps, seed: 3, checkpoint_every: 0, ..TrainConfig::tiny() };
        let mut opt = AdamW::new(tc.weight_decay);
        train(&model, &ps, &mut opt, &data.train, &tc, &align, 0, Some(&out), |_| {}).unwrap();
        logs.push(std::fs::read(out.metrics_path()).unwrap());
    }
    ensure(!logs[0].is_empty() && logs[0] == logs[1], || "metrics logs differ".into())?;
    Ok(format!("{steps}-step runs, {} identical log bytes", logs[0].len()))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
