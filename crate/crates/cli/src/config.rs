use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use vllve::synth::SynthConfig;
use vllve::train::TrainConfig;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// A mistake in how the tool was invoked, as opposed to a failure while
/// running. Reported with exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    #[default]
    Synth,
    Train,
    Infer,
    Eval,
    Report,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Infer => "infer",
            Command::Eval => "eval",
            Command::Report => "report",
        })
    }
}

/// Everything a command needs, resolved from defaults, the config file and
/// flags, in increasing precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Trained two-frame model that residual training starts from.
    pub pretrained: Option<PathBuf>,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
    /// Directory of enhanced frames, as written by `infer`.
    pub enhanced: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Also write L, R and B images from `infer`.
    pub save_decomposition: bool,
    pub logs: Vec<PathBuf>,
    pub metrics: Vec<PathBuf>,
    pub verbosity: u8,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Reads a TOML config file, or the `config` of a previous run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            let manifest: Manifest = serde_json::from_str(&text)
                .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
            return Ok(manifest.config);
        }
        toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        match value {
            Some(p) => Ok(p),
            None => usage(format!(
                "{} needs {flag} (or the matching config key)",
                self.command.unwrap_or_default()
            )),
        }
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.require(&self.output, "--out")
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Seeds {
    pub synth: u64,
    pub degradation: u64,
    pub train: u64,
    pub init: u64,
    pub perturb: u64,
}

/// Written beside every output; `--config <manifest>` replays the run.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub seeds: Seeds,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: config.command.unwrap_or_default(),
            seeds: Seeds {
                synth: config.synth.seed,
                degradation: config.synth.degradation.seed,
                train: config.train.seed,
                init: config.train.init_seed,
                perturb: config.train.provider.perturb_seed,
            },
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
