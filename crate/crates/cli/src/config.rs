//! Declarative run configs: TOML files layered over built-in defaults, then
//! command-line flags layered over the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sttr_core::network::{Stream, DESK_BASE_WIDTH};
use sttr_core::skeleton::{SplitRule, SynthConfig};
use sttr_core::training::TrainConfig;

use crate::CliError;

/// Recursively overwrites `base` with the keys present in `over`.
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

/// `defaults` overridden by the keys of the TOML file at `path`, if any.
/// Unknown keys and ill-typed values are usage errors.
pub fn load<T: Serialize + DeserializeOwned + Clone>(defaults: &T, path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(defaults.clone());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let over: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::usage(format!("malformed config {}: {}", path.display(), one_line(&e.to_string()))))?;
    let mut base: toml::Table = toml::from_str(&toml::to_string(defaults).map_err(internal)?).map_err(internal)?;
    merge(&mut base, over);
    base.try_into()
        .map_err(|e: toml::de::Error| CliError::usage(format!("malformed config {}: {}", path.display(), one_line(&e.to_string()))))
}

pub fn save<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = toml::to_string(value).map_err(internal)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Core(sttr_core::Error::Io { path: dir.into(), source: e }))?;
    }
    fs::write(path, text).map_err(|e| {
        CliError::Core(sttr_core::Error::Io {
            path: path.into(),
            source: e,
        })
    })
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

pub fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    Random,
    CrossSubject,
    CrossView,
    CrossSetup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub kind: SplitKind,
    /// Used by `random` only.
    pub test_fraction: f64,
    /// Used by `random` only.
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            kind: SplitKind::Random,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn rule(&self) -> SplitRule {
        match self.kind {
            SplitKind::Random => SplitRule::Random {
                test_fraction: self.test_fraction,
                seed: self.seed,
            },
            SplitKind::CrossSubject => SplitRule::CrossSubject,
            SplitKind::CrossView => SplitRule::CrossView,
            SplitKind::CrossSetup => SplitRule::CrossSetup,
        }
    }
}

/// Resolved `synth` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRun {
    pub out: PathBuf,
    pub synth: SynthConfig,
}

impl Default for SynthRun {
    fn default() -> Self {
        SynthRun {
            out: "synth.clips".into(),
            synth: SynthConfig::default(),
        }
    }
}

/// Resolved `parse-ntu` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParseNtuRun {
    pub input: PathBuf,
    pub out: PathBuf,
    pub frames: usize,
    pub max_bodies: usize,
    pub align_axes: bool,
    pub num_classes: usize,
    /// Skip unreadable files instead of failing the whole run.
    pub skip_invalid: bool,
}

impl Default for ParseNtuRun {
    fn default() -> Self {
        ParseNtuRun {
            input: ".".into(),
            out: "ntu.clips".into(),
            frames: 300,
            max_bodies: 2,
            align_axes: false,
            num_classes: 60,
            skip_invalid: false,
        }
    }
}

/// Resolved `train` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub stream: Stream,
    pub bones: bool,
    /// `"synth"` to generate from `[synth]`, otherwise a packed clip file.
    pub data: String,
    /// Empty means `runs/<stream>-<joints|bones>-seed<seed>`.
    pub out_dir: PathBuf,
    /// Width of the first layer; 64 is the full-size network.
    pub base_width: usize,
    pub deterministic: bool,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub synth: SynthConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            stream: Stream::STr,
            bones: false,
            data: "synth".into(),
            out_dir: PathBuf::new(),
            base_width: DESK_BASE_WIDTH,
            deterministic: false,
            train: TrainConfig::desk(),
            split: SplitConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}
