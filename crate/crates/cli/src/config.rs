//! Run configuration: TOML with `include` composition and strict keys.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sigssl::analysis::{BootstrapConfig, CkaOptions, Stage, Weighting};
use sigssl::encoder::EncoderConfig;
use sigssl::eval::{EvalConfig, TaskKind};
use sigssl::objectives::ObjectiveConfig;
use sigssl::train::TrainConfig;
use sigssl::{Error, Result};

/// Included files are resolved depth-first; deeper chains are almost
/// certainly cycles.
const MAX_INCLUDE_DEPTH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub window_len: usize,
    /// Defaults to `window_len` (non-overlapping windows).
    pub stride: Option<usize>,
    pub num_folds: usize,
    pub fold_seed: u64,
    /// Defaults to the last fold.
    pub val_fold: Option<usize>,
    /// Hold out a validation fold during pretraining.
    pub validation: bool,
    /// Downstream task type for `evaluate` and `label-eff`.
    pub task: TaskKind,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            window_len: 600,
            stride: None,
            num_folds: 10,
            fold_seed: 0,
            val_fold: None,
            validation: true,
            task: TaskKind::MultilabelClassification,
        }
    }
}

impl DataConfig {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.window_len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub cka: CkaOptions,
    pub bootstrap: BootstrapConfig,
    pub stage: Stage,
    /// Fit `C N^-a + L0` instead of a pure power law for `scaling`.
    pub with_floor: bool,
    pub weighting: Weighting,
    /// Cap on probe windows used for CKA.
    pub probe_samples: usize,
    pub batch_size: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            cka: CkaOptions::default(),
            bootstrap: BootstrapConfig::default(),
            stage: Stage::Late,
            with_floor: false,
            weighting: Weighting::R2,
            probe_samples: 2500,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            objective: ObjectiveConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    #[cfg(test)]
    pub fn from_str(text: &str) -> Result<Self> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(one_line(&e)))?;
        Self::from_table(value)
    }

    /// Reads `path`, resolving `include = [..]` relative to each file.
    /// Later files override earlier ones key by key; the including file
    /// overrides everything it includes.
    pub fn load(path: &Path) -> Result<Self> {
        let table = load_table(path, 0)?;
        Self::from_table(table)
    }

    fn from_table(mut table: toml::Table) -> Result<Self> {
        table.remove("include");
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(one_line(&e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.window_len == 0 || self.data.stride() == 0 {
            return Err(Error::Config("data.window_len and data.stride must be positive".into()));
        }
        if self.data.num_folds < 2 {
            return Err(Error::Config("data.num_folds must be >= 2".into()));
        }
        self.train.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Fully resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

fn one_line(e: &toml::de::Error) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_table(path: &Path, depth: usize) -> Result<toml::Table> {
    if depth > MAX_INCLUDE_DEPTH {
        return Err(Error::Config(format!("include depth exceeds {MAX_INCLUDE_DEPTH} at {}", path.display())));
    }
    let text = read(path)?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), one_line(&e))))?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(toml::Value::String(s)) => vec![s],
        Some(toml::Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                other => Err(Error::Config(format!("include entries must be strings, got {other}"))),
            })
            .collect::<Result<_>>()?,
        Some(other) => return Err(Error::Config(format!("include must be a string or list, got {other}"))),
    };
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut merged = toml::Table::new();
    for inc in includes {
        let inc_path: PathBuf = base.join(inc);
        merge(&mut merged, load_table(&inc_path, depth + 1)?);
    }
    merge(&mut merged, table);
    Ok(merged)
}

/// Deep merge where `over` wins; tables merge recursively, everything else
/// is replaced.
fn merge(into: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_str("[train]\nleraning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("leraning_rate"), "{err}");
    }

    #[test]
    fn include_is_overridden_by_includer() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("base.toml"), "[train]\nepochs = 3\nbatch_size = 8\n").unwrap();
        fs::write(dir.path().join("run.toml"), "include = [\"base.toml\"]\n[train]\nepochs = 5\n").unwrap();
        let cfg = RunConfig::load(&dir.path().join("run.toml")).unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.batch_size, 8);
    }

    #[test]
    fn include_cycle_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.toml"), "include = \"a.toml\"\n").unwrap();
        let err = RunConfig::load(&dir.path().join("a.toml")).unwrap_err();
        assert!(err.to_string().contains("include depth"));
    }
}
