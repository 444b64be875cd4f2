//! Run configuration: JSON file plus command-line overrides.
//!
//! Resolution order is defaults (or a checkpoint's training config), then the
//! keys present in `--config`, then flags. Only keys that appear in the file
//! are taken from it, so a partial file never resets the other settings.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use strgnn_core::graph::EdgeFileFormat;
use strgnn_core::sampling::{InjectionScope, InjectionSpec};
use strgnn_core::{GraphMode, Partition, TrainConfig};

use crate::error::{CliError, CliResult, Kind};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "STRGNN_OUT_DIR";
const FALLBACK_OUT_DIR: &str = "strgnn-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FileFormat {
    #[default]
    Auto,
    Whitespace,
    Comma,
}

impl From<FileFormat> for EdgeFileFormat {
    fn from(f: FileFormat) -> Self {
        match f {
            FileFormat::Auto => EdgeFileFormat::Auto,
            FileFormat::Whitespace => EdgeFileFormat::Whitespace,
            FileFormat::Comma => EdgeFileFormat::Comma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub format: FileFormat,
    /// Optional `node,community` CSV; injected anomalies then only join
    /// nodes from different communities.
    pub communities: Option<PathBuf>,
    pub injection_fraction: f64,
    pub injection_scope: InjectionScope,
    pub injection_retries: usize,
    pub output_dir: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            format: FileFormat::Auto,
            communities: None,
            injection_fraction: 0.05,
            injection_scope: InjectionScope::AllSnapshots,
            injection_retries: 1000,
            output_dir: None,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        if !(self.injection_fraction > 0.0 && self.injection_fraction < 1.0) {
            return Err(CliError::config(format!(
                "injection_fraction must be in (0, 1), got {}",
                self.injection_fraction
            )));
        }
        Ok(())
    }

    pub fn injection(&self) -> InjectionSpec {
        InjectionSpec { fraction: self.injection_fraction, scope: self.injection_scope, max_retries: self.injection_retries }
    }

    pub fn dataset(&self) -> CliResult<&Path> {
        self.dataset.as_deref().ok_or_else(|| CliError::config("no dataset given (use --dataset or the `dataset` key)"))
    }

    pub fn out_dir(&self) -> &Path {
        self.output_dir.as_deref().expect("resolved configs always carry an output directory")
    }
}

/// Flags mirroring every configuration key. List-valued flags accept
/// comma-separated values; only `sweep` uses more than one.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    /// JSON run configuration; flags override its keys.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Edge file: `src dst timestamp [label]` per line.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<FileFormat>,
    /// `node,community` CSV restricting injected pairs to cross-community ones.
    #[arg(long)]
    pub communities: Option<PathBuf>,
    /// Output directory [default: $STRGNN_OUT_DIR or ./strgnn-out].
    #[arg(long = "out", value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
    #[arg(long = "injection-fraction", visible_alias = "fraction", value_delimiter = ',')]
    pub injection_fraction: Option<Vec<f64>>,
    #[arg(long = "injection-scope", value_parser = parse_kebab::<InjectionScope>)]
    pub injection_scope: Option<InjectionScope>,
    #[arg(long = "injection-retries")]
    pub injection_retries: Option<usize>,

    #[arg(long, visible_alias = "h", value_delimiter = ',')]
    pub hops: Option<Vec<usize>>,
    #[arg(long, visible_alias = "w", value_delimiter = ',')]
    pub window: Option<Vec<usize>>,
    #[arg(long)]
    pub snapshots: Option<usize>,
    #[arg(long, value_parser = parse_kebab::<Partition>)]
    pub partition: Option<Partition>,
    #[arg(long, value_parser = parse_kebab::<GraphMode>)]
    pub mode: Option<GraphMode>,
    #[arg(long = "train-ratio", value_delimiter = ',')]
    pub train_ratio: Option<Vec<f64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch", visible_alias = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long = "adam-eps")]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "sortpool-rate")]
    pub sortpool_rate: Option<f64>,
    #[arg(long = "gcn-channels", value_delimiter = ',')]
    pub gcn_channels: Option<Vec<usize>>,
    #[arg(long = "gru-hidden")]
    pub gru_hidden: Option<usize>,
    /// Hidden widths of the classifier head; pass an empty string for none.
    #[arg(long = "head-hidden", value_parser = parse_width_list)]
    pub head_hidden: Option<Widths>,
    #[arg(long = "negatives", visible_alias = "negatives-per-positive")]
    pub negatives_per_positive: Option<f64>,
    #[arg(long = "max-retries")]
    pub max_retries: Option<usize>,
    #[arg(long = "validation-fraction")]
    pub validation_fraction: Option<f64>,
    /// Worker threads; 0 uses every core, 1 is the reference for determinism.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Widths(pub Vec<usize>);

fn parse_width_list(s: &str) -> Result<Widths, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<usize>().map_err(|e| format!("invalid width `{p}`: {e}")))
        .collect::<Result<_, _>>()
        .map(Widths)
}

fn parse_kebab<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn single<T: Copy>(name: &str, values: &Option<Vec<T>>) -> CliResult<Option<T>> {
    match values.as_deref() {
        None => Ok(None),
        Some([v]) => Ok(Some(*v)),
        Some(_) => Err(CliError::new(Kind::Usage, format!("--{name} takes a single value for this command"))),
    }
}

/// Deep-merges `overlay` into `base`: objects merge key by key, anything
/// else replaces.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ConfigFlags {
    /// Builds the effective configuration on top of `base`.
    pub fn resolve(&self, base: RunConfig) -> CliResult<RunConfig> {
        let mut value = serde_json::to_value(&base).map_err(|e| CliError::config(e.to_string()))?;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("invalid JSON in {}: {e}", path.display())))?;
            if !file.is_object() {
                return Err(CliError::config(format!("{} must contain a JSON object", path.display())));
            }
            merge(&mut value, file);
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        self.apply(&mut cfg)?;
        if cfg.output_dir.is_none() {
            let dir = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR));
            cfg.output_dir = Some(dir);
        }
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) -> CliResult<()> {
        let t = &mut cfg.train;
        macro_rules! set {
            ($flag:expr, $slot:expr) => {
                if let Some(v) = $flag.clone() {
                    $slot = v;
                }
            };
        }
        if self.dataset.is_some() {
            cfg.dataset = self.dataset.clone();
        }
        if self.communities.is_some() {
            cfg.communities = self.communities.clone();
        }
        if self.output_dir.is_some() {
            cfg.output_dir = self.output_dir.clone();
        }
        set!(self.format, cfg.format);
        set!(self.injection_scope, cfg.injection_scope);
        set!(self.injection_retries, cfg.injection_retries);
        set!(single("injection-fraction", &self.injection_fraction)?, cfg.injection_fraction);
        set!(single("hops", &self.hops)?, t.hops);
        set!(single("window", &self.window)?, t.window);
        set!(single("train-ratio", &self.train_ratio)?, t.train_ratio);
        set!(self.snapshots, t.snapshots);
        set!(self.partition, t.partition);
        set!(self.mode, t.mode);
        set!(self.epochs, t.epochs);
        set!(self.batch_size, t.batch_size);
        set!(self.lr, t.lr);
        set!(self.beta1, t.beta1);
        set!(self.beta2, t.beta2);
        set!(self.adam_eps, t.adam_eps);
        set!(self.seed, t.seed);
        set!(self.sortpool_rate, t.sortpool_rate);
        set!(self.gcn_channels, t.gcn_channels);
        set!(self.gru_hidden, t.gru_hidden);
        set!(self.head_hidden.as_ref().map(|w| w.0.clone()), t.head_hidden);
        set!(self.negatives_per_positive, t.negatives_per_positive);
        set!(self.max_retries, t.max_retries);
        set!(self.validation_fraction, t.validation_fraction);
        set!(self.workers, t.workers);
        Ok(())
    }

    /// The same flags with the grid axes removed, for resolving one sweep cell.
    pub fn without_grid(&self) -> Self {
        Self { hops: None, window: None, train_ratio: None, injection_fraction: None, ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_keys_merge_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"dataset": "edges.txt", "train": {"epochs": 7, "hops": 2}}"#).unwrap();
        let flags = ConfigFlags { config: Some(path), hops: Some(vec![3]), lr: Some(0.5), ..Default::default() };
        let cfg = flags.resolve(RunConfig::default()).unwrap();
        assert_eq!(cfg.dataset.as_deref(), Some(Path::new("edges.txt")));
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.hops, 3);
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.window, 5);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"train": {"epoch": 7}}"#).unwrap();
        let err = ConfigFlags { config: Some(path), ..Default::default() }.resolve(RunConfig::default()).unwrap_err();
        assert_eq!(err.kind, Kind::Config);
    }

    #[test]
    fn lists_are_rejected_outside_sweep() {
        let flags = ConfigFlags { hops: Some(vec![1, 2]), ..Default::default() };
        assert_eq!(flags.resolve(RunConfig::default()).unwrap_err().kind, Kind::Usage);
    }

    #[test]
    fn enum_flags_use_config_spelling() {
        assert_eq!(parse_kebab::<Partition>("equal-time"), Ok(Partition::EqualTime));
        assert!(parse_kebab::<GraphMode>("sideways").is_err());
        assert_eq!(parse_width_list(""), Ok(Widths(vec![])));
        assert_eq!(parse_width_list("16,8"), Ok(Widths(vec![16, 8])));
    }
}
