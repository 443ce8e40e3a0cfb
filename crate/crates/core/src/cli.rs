//! `stars` command line: synth, train, eval and diag subcommands.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backbone::EncoderKind;
use crate::config::{Overrides, Preset, RunConfig};
use crate::data::{generate_synthetic_dataset, iterate_batches, Batch, Dataset, DatasetManifest, Modalities};
use crate::diagnostics::{
    class_similarity, collapse_on_dataset, export_param_distributions, grad_cam, ks_distance, write_pgm, ParamKind,
};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::model::{BaselineModel, Branch, StarsModel};
use crate::nn::ParamStore;
use crate::training::{
    config_hash, load_checkpoint, train, AdamW, Checkpoint, ModelKind, Network, RunOutput,
};

#[derive(Debug, Parser)]
#[command(name = "stars", version, about = "Missing-modality segmentation: data, training, evaluation, diagnostics")]
pub struct Cli {
    /// TOML config file; its values override the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in starting point: `full` or `tiny`.
    #[arg(long, global = true)]
    pub preset: Option<Preset>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub eval_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Run name under `<out_dir>/runs` and `<out_dir>/reports`.
    #[arg(long, global = true)]
    pub run: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-modality dataset.
    Synth(SynthArgs),
    /// Train a network on the dataset in `data_dir`.
    Train(TrainArgs),
    /// Score a checkpoint on the dataset in `eval_dir`.
    Eval(EvalArgs),
    /// Run an analysis instrument on a checkpoint.
    Diag(DiagArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: `data_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub no_trans: bool,
    #[arg(long)]
    pub no_ncs: bool,
    #[arg(long)]
    pub no_psc: bool,
    #[arg(long)]
    pub no_detach: bool,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    /// Continue from the run's last checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file (default: the run's last checkpoint).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Modalities>,
    #[arg(long)]
    pub branch: Option<Branch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Instrument {
    Sim,
    Collapse,
    Params,
    Cam,
}

#[derive(Debug, Args)]
pub struct DiagArgs {
    #[arg(long, value_enum)]
    pub instrument: Instrument,
    /// Checkpoint file; `sim` defaults to every checkpoint of the run,
    /// the others to the last one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Encoder stage (1-4).
    #[arg(long, default_value_t = 4)]
    pub stage: usize,
    /// Target class for `cam`.
    #[arg(long, default_value_t = 1)]
    pub class: usize,
    /// Record index of the sample used by `cam`.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Batches of 8 records read by `sim` and `collapse`.
    #[arg(long, default_value_t = 8)]
    pub max_batches: usize,
}

/// Maps an error to the process exit status: 2 for configuration and usage
/// problems, 3 for numeric failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Dataset(_) => 2,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Numeric { .. } => 3,
        _ => 1,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn overrides(cli: &Cli) -> Overrides {
    let mut o = Overrides {
        data_dir: cli.data_dir.clone(),
        eval_dir: cli.eval_dir.clone(),
        out_dir: cli.out_dir.clone(),
        run: cli.run.clone(),
        ..Default::default()
    };
    match &cli.command {
        Command::Synth(a) => o.synth_seed = a.seed,
        Command::Train(a) => {
            o.seed = a.seed;
            o.model = a.model;
            o.steps = a.steps;
            o.no_trans = a.no_trans;
            o.no_ncs = a.no_ncs;
            o.no_psc = a.no_psc;
            o.no_detach = a.no_detach;
            o.alpha = a.alpha;
            o.beta = a.beta;
            o.tau = a.tau;
            o.samples_per_class = a.samples_per_class;
        }
        Command::Eval(a) => {
            o.mode = a.mode;
            o.branch = a.branch;
        }
        Command::Diag(_) => {}
    }
    o
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.preset.unwrap_or_default(), cli.config.as_deref(), &overrides(cli))?;
    cfg.validate()?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Diag(a) => cmd_diag(&cfg, a),
    }
}

fn cmd_synth(cfg: &RunConfig, a: &SynthArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
    let m = generate_synthetic_dataset(&cfg.synth, a.count, &out)?;
    println!("wrote {} records to {}", m.len(), out.display());
    Ok(())
}

/// A constructed network of either kind.
pub enum Built {
    Stars(StarsModel),
    Baseline(BaselineModel),
}

impl Built {
    pub fn network(&self) -> &dyn Network {
        match self {
            Built::Stars(m) => m,
            Built::Baseline(m) => m,
        }
    }

    pub fn stars(&self) -> Result<&StarsModel> {
        match self {
            Built::Stars(m) => Ok(m),
            Built::Baseline(_) => Err(Error::Config("this instrument needs a STARS checkpoint".into())),
        }
    }
}

pub fn build(cfg: &RunConfig, ps: &mut ParamStore) -> Result<Built> {
    Ok(match cfg.train.model {
        ModelKind::Stars => Built::Stars(StarsModel::new(ps, &cfg.model, &cfg.align)?),
        ModelKind::Baseline => Built::Baseline(BaselineModel::new(ps, &cfg.model)?),
    })
}

/// Takes input channels and class count from the dataset.
fn fit_to_data(cfg: &mut RunConfig, manifest: &DatasetManifest, dataset: &Dataset) -> Result<()> {
    let first = dataset
        .records
        .first()
        .ok_or_else(|| Error::Dataset("dataset is empty".into()))?;
    let enc = &mut cfg.model.encoder;
    if let Some(r) = &first.modality1 {
        enc.in_channels_m1 = r.channels;
    }
    if let Some(r) = &first.modality2 {
        enc.in_channels_m2 = r.channels;
    }
    cfg.model.num_classes = manifest.num_classes;
    Ok(())
}

fn cmd_train(mut cfg: RunConfig, a: &TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&cfg.paths.data_dir)?;
    let which = match cfg.train.model {
        ModelKind::Stars => Modalities::Both,
        ModelKind::Baseline => Modalities::M1Only,
    };
    let dataset = Dataset::load(&manifest, which)?;
    fit_to_data(&mut cfg, &manifest, &dataset)?;
    let text = cfg.to_toml()?;
    let out = RunOutput {
        dir: cfg.run_dir(),
        config_text: text.clone(),
    };
    let mut ps = ParamStore::new(cfg.train.seed, DType::F32);
    let built = build(&cfg, &mut ps)?;
    let (mut opt, start) = if a.resume {
        let ck = load_checkpoint(&out.last_checkpoint(), None)?;
        if ck.config_hash != config_hash(&text) {
            return Err(Error::Config(format!(
                "{} was written under a different config; resume needs identical settings",
                out.last_checkpoint().display()
            )));
        }
        ck.restore_params(&ps)?;
        (ck.optimizer(), ck.step)
    } else {
        (AdamW::new(cfg.train.weight_decay), 0)
    };
    println!("run {} -> {}", cfg.run_name(), out.dir.display());
    train(
        built.network(),
        &ps,
        &mut opt,
        &dataset,
        &cfg.train,
        &cfg.align,
        start,
        Some(&out),
        |r| {
            if r.step % 100 == 0 || r.step + 1 == cfg.train.total_steps {
                println!("{}", r.log_line());
            }
        },
    )?;
    println!("checkpoint {}", out.last_checkpoint().display());
    Ok(())
}

/// Rebuilds the network stored in a checkpoint.
pub fn restore(path: &Path) -> Result<(RunConfig, Checkpoint, ParamStore, Built)> {
    let ck = load_checkpoint(path, None)?;
    let cfg = RunConfig::from_toml(&ck.config_text)?;
    let mut ps = ParamStore::new(cfg.train.seed, DType::F32);
    let built = build(&cfg, &mut ps)?;
    ck.restore_params(&ps)?;
    Ok((cfg, ck, ps, built))
}

fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir().join("checkpoints").join("last.ckpt")
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let path = a.checkpoint.clone().unwrap_or_else(|| default_checkpoint(cfg));
    let (_, ck, _, built) = restore(&path)?;
    let manifest = DatasetManifest::load(&cfg.paths.eval_dir)?;
    let (mode, branch) = (cfg.eval.mode, cfg.eval.branch());
    let report = evaluate(built.network(), &manifest, mode, branch, DType::F32)?;
    let tag = match mode {
        Modalities::Both => "both",
        Modalities::M1Only => "m1_only",
        Modalities::M2Only => "m2_only",
    };
    let file = cfg
        .report_dir()
        .join("eval")
        .join(format!("step{}_{tag}_{branch}.txt", ck.step));
    report.write(&file)?;
    print!("{}", report.to_text(None));
    println!("report {}", file.display());
    Ok(())
}

fn checkpoints_of_run(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = cfg.run_dir().join("checkpoints");
    let mut v: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("step_") && n.ends_with(".ckpt"))
        })
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(Error::Config(format!("no checkpoints in {}", dir.display())));
    }
    Ok(v)
}

fn cmd_diag(cfg: &RunConfig, a: &DiagArgs) -> Result<()> {
    let diag_dir = cfg.report_dir().join("diag");
    match a.instrument {
        Instrument::Sim => {
            let paths = match &a.checkpoint {
                Some(p) => vec![p.clone()],
                None => checkpoints_of_run(cfg)?,
            };
            let manifest = DatasetManifest::load(&cfg.paths.eval_dir)?;
            let dataset = Dataset::load(&manifest, Modalities::Both)?;
            let mut summary = String::from("step,margin\n");
            for p in paths {
                let (rc, ck, _, built) = restore(&p)?;
                let m = built.stars()?;
                let s = class_similarity(
                    m,
                    &dataset,
                    a.stage,
                    a.max_batches,
                    rc.align.samples_per_class,
                    ck.step,
                    DType::F32,
                )?;
                let file = diag_dir.join(format!("similarity_stage{}_step{:06}.csv", a.stage, ck.step));
                s.write_csv(&file)?;
                let margin = s.margin().map_or("nan".to_string(), |v| format!("{v:.6}"));
                let _ = writeln!(summary, "{},{margin}", ck.step);
                println!("step {} margin {margin} -> {}", ck.step, file.display());
            }
            crate::diagnostics::write_text(&diag_dir.join(format!("similarity_stage{}_margins.csv", a.stage)), &summary)
        }
        Instrument::Collapse => {
            let path = a.checkpoint.clone().unwrap_or_else(|| default_checkpoint(cfg));
            let (_, ck, _, built) = restore(&path)?;
            let manifest = DatasetManifest::load(&cfg.paths.eval_dir)?;
            let dataset = Dataset::load(&manifest, Modalities::M1Only)?;
            let v = collapse_on_dataset(built.stars()?, &dataset, a.stage, a.max_batches, DType::F32)?;
            let text = format!("step={}\nstage={}\ncollapse={v:.6}\n", ck.step, a.stage);
            crate::diagnostics::write_text(&diag_dir.join(format!("collapse_step{:06}.txt", ck.step)), &text)?;
            print!("{text}");
            Ok(())
        }
        Instrument::Params => {
            let path = a.checkpoint.clone().unwrap_or_else(|| default_checkpoint(cfg));
            let ck = load_checkpoint(&path, None)?;
            let report = export_param_distributions(&ck.params)?;
            report.write(&diag_dir)?;
            let mut ks = String::from("stage,ks_shared_vs_spec_m1_gamma\n");
            for stage in 1..=4 {
                let s = report.find(EncoderKind::Shared, ParamKind::NormScale, stage);
                let p = report.find(EncoderKind::SpecM1, ParamKind::NormScale, stage);
                if let (Some(s), Some(p)) = (s, p) {
                    let _ = writeln!(ks, "{stage},{:.6}", ks_distance(&s.values, &p.values));
                }
            }
            crate::diagnostics::write_text(&diag_dir.join("param_ks.csv"), &ks)?;
            print!("{}{ks}", report.summary_csv());
            Ok(())
        }
        Instrument::Cam => {
            let path = a.checkpoint.clone().unwrap_or_else(|| default_checkpoint(cfg));
            let (_, ck, _, built) = restore(&path)?;
            let m = built.stars()?;
            let manifest = DatasetManifest::load(&cfg.paths.eval_dir)?;
            let rec = manifest.load_record(a.index, Modalities::Both)?;
            let id = rec.id.clone();
            let single = Dataset {
                records: vec![rec],
                num_classes: manifest.num_classes,
                ignore_value: manifest.ignore_value,
                modalities: Modalities::Both,
            };
            let batch: Batch = iterate_batches(&single, 1, None, None, DType::F32)?
                .next()
                .ok_or_else(|| Error::Dataset("empty record".into()))??;
            let input = |t: &Option<Tensor>| -> Result<Tensor> {
                t.clone().ok_or_else(|| Error::Dataset("record lacks a modality".into()))
            };
            for enc in EncoderKind::ALL {
                let x = if enc == EncoderKind::SpecM2 { input(&batch.m2)? } else { input(&batch.m1)? };
                let cam = grad_cam(m, &x, a.class, enc, a.stage)?;
                if let Some(w) = &cam.warning {
                    eprintln!("warning: {} class {}: {w}", enc.prefix(), a.class);
                }
                let file = diag_dir.join(format!(
                    "cam_step{:06}_{}_{}_class{}.pgm",
                    ck.step,
                    id,
                    enc.prefix(),
                    a.class
                ));
                write_pgm(&file, &cam)?;
                println!("{}", file.display());
            }
            Ok(())
        }
    }
}
