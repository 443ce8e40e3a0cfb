//! Run configuration: one TOML document with a section per component.
//!
//! Values resolve in increasing precedence: built-in defaults, the preset,
//! `STARS_DATA_DIR` / `STARS_OUT_DIR`, the config file, command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::alignment::AlignmentConfig;
use crate::data::{Modalities, SyntheticSceneConfig};
use crate::error::{Error, Result};
use crate::evaluation::default_branch;
use crate::model::{Branch, ModelConfig};
use crate::training::{ModelKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    /// Full-size backbone and schedule.
    #[default]
    Full,
    /// Small backbone, 2000 steps on 64×64 crops.
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::Config(format!("unknown preset {other:?} (full, tiny)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Training dataset directory (holds a manifest).
    pub data_dir: PathBuf,
    /// Held-out dataset used by `eval` and `diag`.
    pub eval_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Run name; empty derives `<model>_seed<seed>`.
    pub run: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data/train"),
            eval_dir: PathBuf::from("data/test"),
            out_dir: PathBuf::from("out"),
            run: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mode: Modalities,
    /// Decoder to score; unset picks [`default_branch`] of the mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch: Option<Branch>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: Modalities::M1Only,
            branch: None,
        }
    }
}

impl EvalConfig {
    pub fn branch(&self) -> Branch {
        self.branch.unwrap_or_else(|| default_branch(self.mode))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SyntheticSceneConfig,
    pub model: ModelConfig,
    pub align: AlignmentConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
    pub eval: EvalConfig,
}

/// Command-line values; `None` / `false` leaves the lower layers alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub synth_seed: Option<u64>,
    pub model: Option<ModelKind>,
    pub steps: Option<usize>,
    pub no_trans: bool,
    pub no_ncs: bool,
    pub no_psc: bool,
    pub no_detach: bool,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub tau: Option<f64>,
    pub samples_per_class: Option<usize>,
    pub mode: Option<Modalities>,
    pub branch: Option<Branch>,
    pub data_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub run: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        set(&mut cfg.train.seed, &self.seed);
        set(&mut cfg.synth.seed, &self.synth_seed);
        set(&mut cfg.train.model, &self.model);
        set(&mut cfg.train.total_steps, &self.steps);
        cfg.train.use_trans &= !self.no_trans;
        cfg.train.use_ncs &= !self.no_ncs;
        cfg.train.use_psc &= !self.no_psc;
        cfg.align.detach &= !self.no_detach;
        set(&mut cfg.align.alpha, &self.alpha);
        set(&mut cfg.align.beta, &self.beta);
        set(&mut cfg.align.tau, &self.tau);
        set(&mut cfg.align.samples_per_class, &self.samples_per_class);
        set(&mut cfg.eval.mode, &self.mode);
        if self.branch.is_some() {
            cfg.eval.branch = self.branch;
        }
        set(&mut cfg.paths.data_dir, &self.data_dir);
        set(&mut cfg.paths.eval_dir, &self.eval_dir);
        set(&mut cfg.paths.out_dir, &self.out_dir);
        set(&mut cfg.paths.run, &self.run);
    }
}

fn to_table<T: Serialize>(v: &T) -> Result<Table> {
    Table::try_from(v).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
}

/// Rejects keys of `file` that `reference` does not have.
fn check_keys(file: &Table, reference: &Table, path: &str) -> Result<()> {
    for (k, v) in file {
        let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match (v, reference.get(k)) {
            (_, None) => return Err(Error::Config(format!("unknown config key `{full}`"))),
            (Value::Table(f), Some(Value::Table(r))) => check_keys(f, r, &full)?,
            _ => {}
        }
    }
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let mut cfg = Self::default();
        if p == Preset::Tiny {
            let s = &cfg.synth;
            cfg.model = ModelConfig::tiny(s.modality1_channels, s.modality2_channels, s.num_classes);
            cfg.train = TrainConfig::tiny();
        }
        cfg
    }

    /// Overlays the keys present in `text` onto `self`.
    pub fn merge_toml(&self, text: &str) -> Result<Self> {
        let file: Table = text
            .parse()
            .map_err(|e| Error::Config(format!("cannot parse config file: {e}")))?;
        let mut probe = self.clone();
        probe.eval.branch.get_or_insert(Branch::Fused);
        check_keys(&file, &to_table(&probe)?, "")?;
        let mut base = to_table(self)?;
        merge(&mut base, file);
        Value::Table(base)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config value: {e}")))
    }

    pub fn resolve(
        preset: Preset,
        env: impl Fn(&str) -> Option<String>,
        file: Option<&str>,
        cli: &Overrides,
    ) -> Result<Self> {
        let mut cfg = Self::preset(preset);
        if let Some(d) = env("STARS_DATA_DIR") {
            let root = PathBuf::from(d);
            cfg.paths.data_dir = root.join("train");
            cfg.paths.eval_dir = root.join("test");
        }
        if let Some(d) = env("STARS_OUT_DIR") {
            cfg.paths.out_dir = PathBuf::from(d);
        }
        if let Some(text) = file {
            cfg = cfg.merge_toml(text)?;
        }
        cli.apply(&mut cfg);
        Ok(cfg)
    }

    pub fn load(preset: Preset, file: Option<&Path>, cli: &Overrides) -> Result<Self> {
        let text = match file {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve(preset, |k| std::env::var(k).ok(), text.as_deref(), cli)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.align.validate()?;
        self.train.validate()
    }

    /// Canonical text stored in checkpoints and hashed.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        RunConfig::default().merge_toml(text)
    }

    pub fn run_name(&self) -> String {
        if self.paths.run.is_empty() {
            let model = match self.train.model {
                ModelKind::Stars => "stars",
                ModelKind::Baseline => "baseline",
            };
            format!("{model}_seed{}", self.train.seed)
        } else {
            self.paths.run.clone()
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.paths.out_dir.join("runs").join(self.run_name())
    }

    pub fn report_dir(&self) -> PathBuf {
        self.paths.out_dir.join("reports").join(self.run_name())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn tiny_preset_values() {
        let c = RunConfig::resolve(Preset::Tiny, no_env, None, &Overrides::default()).unwrap();
        assert_eq!(c.train.total_steps, 2000);
        assert_eq!(c.train.warmup_steps, 100);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.train.crop, 64);
        assert_eq!(c.model.encoder.stage_channels, [16, 32, 64, 128]);
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_text() {
        let c = RunConfig::preset(Preset::Tiny);
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let base = RunConfig::default();
        assert!(matches!(base.merge_toml("[train]\nsetps = 3\n"), Err(Error::Config(_))));
        assert!(matches!(base.merge_toml("[nope]\nx = 1\n"), Err(Error::Config(_))));
        assert!(matches!(base.merge_toml("[train]\ntotal_steps = \"many\"\n"), Err(Error::Config(_))));
        let c = base.merge_toml("[synth]\nclass_weights = [0.5, 0.6, 0.1, 0.1]\n").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_flags_switch_terms_off() {
        let cli = Overrides {
            no_trans: true,
            no_psc: true,
            ..Default::default()
        };
        let c = RunConfig::resolve(Preset::Tiny, no_env, None, &cli).unwrap();
        assert!(!c.train.use_trans && !c.train.use_psc && c.train.use_ncs);
        assert_eq!(c.align.beta, 0.2);
        assert!(c.align.detach);
    }

    #[test]
    fn env_sets_path_defaults() {
        let env = |k: &str| match k {
            "STARS_DATA_DIR" => Some("/d".to_string()),
            "STARS_OUT_DIR" => Some("/o".to_string()),
            _ => None,
        };
        let c = RunConfig::resolve(Preset::Full, env, None, &Overrides::default()).unwrap();
        assert_eq!(c.paths.data_dir, PathBuf::from("/d/train"));
        assert_eq!(c.paths.out_dir, PathBuf::from("/o"));
        let c = RunConfig::resolve(Preset::Full, env, Some("[paths]\nout_dir = \"/f\"\n"), &Overrides::default()).unwrap();
        assert_eq!(c.paths.out_dir, PathBuf::from("/f"));
    }

    proptest! {
        #[test]
        fn cli_beats_file_beats_defaults(
            file_seed in prop::option::of(0u64..1000),
            cli_seed in prop::option::of(0u64..1000),
            file_beta in prop::option::of(0.0f64..2.0),
            cli_beta in prop::option::of(0.0f64..2.0),
            file_n in prop::option::of(1usize..64),
            cli_n in prop::option::of(1usize..64),
            file_out in prop::option::of("[a-z]{1,8}"),
            cli_out in prop::option::of("[a-z]{1,8}"),
            tiny in any::<bool>(),
        ) {
            let mut text = String::new();
            if file_seed.is_some() || file_n.is_some() {
                text.push_str("[train]\n");
                if let Some(s) = file_seed { text.push_str(&format!("seed = {s}\n")); }
            }
            let mut align = String::new();
            if let Some(b) = file_beta { align.push_str(&format!("beta = {b:?}\n")); }
            if let Some(n) = file_n { align.push_str(&format!("samples_per_class = {n}\n")); }
            if !align.is_empty() { text.push_str(&format!("[align]\n{align}")); }
            if let Some(o) = &file_out { text.push_str(&format!("[paths]\nout_dir = \"{o}\"\n")); }
            let cli = Overrides {
                seed: cli_seed,
                beta: cli_beta,
                samples_per_class: cli_n,
                out_dir: cli_out.clone().map(PathBuf::from),
                ..Default::default()
            };
            let preset = if tiny { Preset::Tiny } else { Preset::Full };
            let base = RunConfig::preset(preset);
            let c = RunConfig::resolve(preset, no_env, Some(&text), &cli).unwrap();
            prop_assert_eq!(c.train.seed, cli_seed.or(file_seed).unwrap_or(base.train.seed));
            prop_assert_eq!(c.align.beta, cli_beta.or(file_beta).unwrap_or(base.align.beta));
            prop_assert_eq!(c.align.samples_per_class, cli_n.or(file_n).unwrap_or(base.align.samples_per_class));
            let out = cli_out.or(file_out).map(PathBuf::from).unwrap_or(base.paths.out_dir.clone());
            prop_assert_eq!(&c.paths.out_dir, &out);
            prop_assert_eq!(c.train.total_steps, base.train.total_steps);
        }
    }
}
