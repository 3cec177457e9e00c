//! Run configuration: presets, TOML loading and flag overrides.
//!
//! A config file is merged key by key over a named preset, so a file only
//! needs the keys it changes. The fully resolved config is written next to
//! every run's outputs and reloads to the same run.

use std::path::{Path, PathBuf};

use hba_core::augment::AugmentSpace;
use hba_core::data::{load_cifar10_binary, Baseline, Dataset, NoiseTask, RotationTask};
use hba_core::hba::HbaConfig;
use hba_core::hyperlayers::SharingStrategy;
use hba_core::network::{preset as network_preset, NetworkSpec};
use hba_core::pbt::PbtConfig;
use hba_core::schedule::config_hash;
use hba_core::train::{LrSchedule, PlainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const PRESETS: [&str; 3] = ["noise-toy", "rotation", "reduced-cifar10"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    NoiseToy,
    Rotation,
    Cifar10,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::NoiseToy => "noise-toy",
            Task::Rotation => "rotation",
            Task::Cifar10 => "cifar10",
        }
    }

    fn default_preset(self) -> &'static str {
        match self {
            Task::NoiseToy => "noise-toy",
            Task::Rotation => "rotation",
            Task::Cifar10 => "reduced-cifar10",
        }
    }
}

/// Where to find CIFAR-10 binary batches and how much of them to use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CifarSource {
    pub dir: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for CifarSource {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data/cifar-10-batches-bin"),
            n_train: 4000,
            n_val: 10000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: String,
    pub task: Task,
    pub network: String,
    pub strategy: SharingStrategy,
    pub seed: u64,
    pub data_seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Only "f64" is supported.
    pub precision: String,
    /// Upper end of the noise scale on the noise task.
    pub noise_max_scale: f64,
    pub baseline: Baseline,
    pub hba: HbaConfig,
    pub pbt: PbtConfig,
    /// Training used when replaying a schedule.
    pub replay: PlainConfig,
    pub noise_task: NoiseTask,
    pub rotation_task: RotationTask,
    pub cifar: CifarSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        preset("noise-toy").expect("built-in preset")
    }
}

/// A built-in configuration.
pub fn preset(name: &str) -> Result<RunConfig, CliError> {
    let base = RunConfig {
        preset: name.to_string(),
        task: Task::NoiseToy,
        network: "linear-bn".into(),
        strategy: SharingStrategy::FirstBN,
        seed: 0,
        data_seed: 7,
        out_dir: None,
        precision: "f64".into(),
        noise_max_scale: 1.0,
        baseline: Baseline::none(),
        hba: HbaConfig::default(),
        pbt: PbtConfig::default(),
        replay: PlainConfig::default(),
        noise_task: NoiseTask::default(),
        rotation_task: RotationTask::default(),
        cifar: CifarSource::default(),
    };
    match name {
        "noise-toy" => Ok(RunConfig {
            hba: HbaConfig {
                batch_size: 32,
                val_batch_size: 512,
                epochs: 40,
                lr: 0.2,
                lambda_lr: 0.02,
                sigma: 0.25,
                ..HbaConfig::default()
            },
            pbt: PbtConfig {
                n: 4,
                rounds: 40,
                t_train: 32,
                sigma: 0.25,
                alpha: 0.2,
                batch_size: 32,
                ..PbtConfig::default()
            },
            replay: PlainConfig {
                epochs: 40,
                batch_size: 32,
                lr: 0.2,
                ..PlainConfig::default()
            },
            ..base
        }),
        "rotation" => Ok(RunConfig {
            task: Task::Rotation,
            network: "tiny-cnn".into(),
            rotation_task: RotationTask {
                n_train: 1024,
                n_val: 256,
                ..RotationTask::default()
            },
            hba: HbaConfig {
                batch_size: 32,
                val_batch_size: 256,
                epochs: 20,
                lr: 0.05,
                lambda_lr: 0.05,
                sigma: 1.0,
                ..HbaConfig::default()
            },
            pbt: PbtConfig {
                n: 4,
                rounds: 20,
                t_train: 32,
                sigma: 1.0,
                alpha: 0.05,
                batch_size: 32,
                ..PbtConfig::default()
            },
            replay: PlainConfig {
                epochs: 20,
                batch_size: 32,
                lr: 0.05,
                ..PlainConfig::default()
            },
            ..base
        }),
        "reduced-cifar10" => Ok(RunConfig {
            task: Task::Cifar10,
            network: "tiny-cnn".into(),
            baseline: Baseline {
                flip: true,
                pad: 4,
                cutout: 16,
                ..Baseline::none()
            },
            hba: HbaConfig {
                batch_size: 128,
                val_batch_size: 128,
                epochs: 200,
                lr: 0.05,
                lr_schedule: LrSchedule::Cosine,
                weight_decay: 0.005,
                lambda_lr: 0.03,
                sigma: 1.0,
                ..HbaConfig::default()
            },
            pbt: PbtConfig {
                n: 4,
                rounds: 200,
                t_train: 32,
                sigma: 1.0,
                alpha: 0.05,
                lr_schedule: LrSchedule::Cosine,
                batch_size: 128,
                weight_decay: 0.005,
                ..PbtConfig::default()
            },
            replay: PlainConfig {
                epochs: 200,
                batch_size: 128,
                lr: 0.1,
                lr_schedule: LrSchedule::Cosine,
                weight_decay: 0.0005,
            },
            ..base
        }),
        other => Err(CliError::usage(format!(
            "unknown preset `{other}`; valid presets: {}",
            PRESETS.join(", ")
        ))),
    }
}

/// Values given on the command line; each one overrides the file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// TOML config file merged over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in preset to start from.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    /// Network preset (tiny-cnn, tiny-mlp, linear-bn).
    #[arg(long)]
    pub network: Option<String>,
    /// Sharing strategy (conv-bn, conv, bn, first-conv, first-bn, all, none).
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training epochs for the command being run.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory; defaults to `$HBA_OUTPUT_ROOT/<command>-<task>-<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn read_table(path: &Path) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
}

impl Overrides {
    /// Preset, then config file, then flags.
    pub fn resolve(&self, command: &str) -> Result<RunConfig, CliError> {
        let file = self.config.as_deref().map(read_table).transpose()?;
        let file_str = |key: &str| {
            file.as_ref()
                .and_then(|t| t.get(key))
                .and_then(|v| v.as_str())
                .map(str::to_string)
        };
        let task_preset = |t: Option<Task>| t.map(|t| t.default_preset().to_string());
        let file_task = file_str("task")
            .map(|s| {
                toml::Value::String(s)
                    .try_into::<Task>()
                    .map_err(|e| CliError::usage(format!("invalid task: {e}")))
            })
            .transpose()?;
        let name = self
            .preset
            .clone()
            .or_else(|| file_str("preset"))
            .or_else(|| task_preset(self.task))
            .or_else(|| task_preset(file_task))
            .unwrap_or_else(|| "noise-toy".to_string());
        let mut cfg = preset(&name)?;
        if let Some(file) = file {
            let mut table =
                toml::Table::try_from(&cfg).map_err(|e| CliError::runtime(format!("cannot encode preset: {e}")))?;
            merge(&mut table, file);
            cfg = table
                .try_into()
                .map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
        }
        if let Some(t) = self.task {
            cfg.task = t;
        }
        if let Some(n) = &self.network {
            cfg.network = n.clone();
        }
        if let Some(s) = &self.strategy {
            cfg.strategy = SharingStrategy::from_name(s).map_err(|e| CliError::usage(e.to_string()))?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            match command {
                "search" => cfg.hba.epochs = e,
                "pbt" => cfg.pbt.rounds = e,
                _ => cfg.replay.epochs = e,
            }
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        if cfg.out_dir.is_none() {
            let root = std::env::var_os("HBA_OUTPUT_ROOT")
                .map(PathBuf::from)
                .unwrap_or_else(|| "runs".into());
            cfg.out_dir = Some(root.join(format!("{command}-{}-{}", cfg.task.name(), cfg.seed)));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.precision != "f64" {
            return Err(CliError::usage(format!(
                "precision `{}` is not supported; only f64 is available",
                self.precision
            )));
        }
        if !(self.noise_max_scale > 0.0) {
            return Err(CliError::usage("noise_max_scale must be positive"));
        }
        self.hba.validate().map_err(CliError::from_config)?;
        self.pbt.validate().map_err(CliError::from_config)?;
        Ok(())
    }

    pub fn out_dir(&self) -> &Path {
        self.out_dir.as_deref().unwrap_or(Path::new("runs"))
    }

    pub fn space(&self) -> AugmentSpace {
        match self.task {
            Task::NoiseToy => AugmentSpace::GaussianNoise {
                max_scale: self.noise_max_scale,
            },
            Task::Rotation | Task::Cifar10 => AugmentSpace::Pba,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config encodes as TOML")
    }

    /// Hash of everything that affects results; the output directory is
    /// left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        config_hash(&c.to_toml())
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset), CliError> {
        match self.task {
            Task::NoiseToy => self.noise_task.generate(self.data_seed).map_err(CliError::from_config),
            Task::Rotation => self
                .rotation_task
                .generate(self.data_seed)
                .map(|(t, v, _)| (t, v))
                .map_err(CliError::from_config),
            Task::Cifar10 => load_cifar(&self.cifar),
        }
    }

    pub fn network_spec(&self, input: &[usize], classes: usize) -> Result<NetworkSpec, CliError> {
        network_preset(&self.network, input, classes).map_err(CliError::from_config)
    }
}

/// Reads `data_batch_*.bin` in name order and splits off the first
/// `n_train` records for training and the next `n_val` for validation.
fn load_cifar(src: &CifarSource) -> Result<(Dataset, Dataset), CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(&src.dir)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", src.dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch") && n.ends_with(".bin"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::usage(format!(
            "no data_batch_*.bin files in {}",
            src.dir.display()
        )));
    }
    let want = src.n_train + src.n_val;
    let mut examples = Vec::with_capacity(want);
    for f in files {
        if examples.len() >= want {
            break;
        }
        let d = load_cifar10_binary(&f, Some(want - examples.len())).map_err(CliError::from_config)?;
        examples.extend(d.examples().iter().cloned());
    }
    if examples.len() < want {
        return Err(CliError::usage(format!(
            "need {want} CIFAR-10 records, found {}",
            examples.len()
        )));
    }
    let val = examples.split_off(src.n_train);
    let d = |e| Dataset::new(e, 10).map_err(CliError::from_config);
    Ok((d(examples)?, d(val)?))
}
