//! The run configuration file: one TOML document with a versioned schema
//! covering data generation, networks, loss weights, training and
//! evaluation. Unknown keys are rejected with the offending key named;
//! command-line overrides (`--set a.b.c=value`) are applied to the parsed
//! document before validation.

use crate::data::{ProtocolConfig, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::NetworkConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable overriding `paths.run_root`.
pub const RUN_ROOT_ENV: &str = "ADAPTREID_RUN_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: ProtocolConfig,
    pub cmc_ks: Vec<usize>,
    pub attn_iou_threshold: f64,
    /// How many queries the exported ranking grid shows.
    pub ranking_grid_queries: usize,
    pub ranking_top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: ProtocolConfig::default(),
            cmc_ks: vec![1, 5, 10],
            attn_iou_threshold: 0.5,
            ranking_grid_queries: 4,
            ranking_top_k: 10,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        if self.cmc_ks.is_empty() || self.cmc_ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("eval.cmc_ks must be non-empty and increasing".into()));
        }
        if !(0.0..1.0).contains(&self.attn_iou_threshold) || self.attn_iou_threshold <= 0.0 {
            return Err(Error::Config(format!(
                "eval.attn_iou_threshold must be in (0,1), got {}",
                self.attn_iou_threshold
            )));
        }
        if self.ranking_top_k == 0 {
            return Err(Error::Config("eval.ranking_top_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset root: the generator writes here, training and evaluation read
    /// the manifest from here.
    pub data_dir: PathBuf,
    pub run_root: PathBuf,
    pub run_name: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: PathBuf::from("data/synthetic"),
            run_root: PathBuf::from("runs"),
            run_name: "run".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub synthetic: SyntheticSpec,
    pub network: NetworkConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig { schema_version: SCHEMA_VERSION, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.synthetic.validate()?;
        self.network.validate()?;
        self.weights.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.paths.run_name.is_empty() {
            return Err(Error::Config("paths.run_name must not be empty".into()));
        }
        Ok(())
    }

    /// Parse a config file and apply `key.path=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut doc: toml::Value = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for item in overrides {
            apply_override(&mut doc, item)?;
        }
        let config: RunConfig = doc
            .try_into()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    /// Run directory: `run_root/run_name`, with the root overridable from the
    /// environment.
    pub fn run_dir(&self) -> PathBuf {
        let root = std::env::var_os(RUN_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.paths.run_root.clone());
        root.join(&self.paths.run_name)
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.network.image_height, self.network.image_width)
    }
}

fn apply_override(doc: &mut toml::Value, item: &str) -> Result<()> {
    let (key, raw_value) = item.split_once('=').ok_or_else(|| {
        Error::Config(format!("override `{item}` must look like section.key=value"))
    })?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{item}` has an empty key")));
    }
    // parse the value as a TOML literal, falling back to a bare string
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw_value}")) {
        Ok(mut table) => table.remove("v").expect("parsed literal"),
        Err(_) => toml::Value::String(raw_value.trim().to_string()),
    };
    let mut cursor = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
        cursor = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}` does not address a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str, tag: &str) -> PathBuf {
        let path = std::env::temp_dir()
            .join(format!("adaptreid-cfg-{tag}-{}.toml", std::process::id()));
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let path = write_temp("schema_version = 1\n", "minimal");
        let cfg = RunConfig::load(&path, &[]).unwrap();
        assert_eq!(cfg.train.epochs, 60);
        assert_eq!(cfg.weights.lambda_attn, 10.0);
        assert_eq!(cfg.network.embedding_dim, 128);
        assert_eq!(cfg.network.dropout_rate, 0.5);
        assert_eq!(cfg.eval.cmc_ks, vec![1, 5, 10]);
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let path = write_temp("schema_version = 1\n[synthetic]\nnum_identitys = 2\n", "badkey");
        let err = RunConfig::load(&path, &[]).unwrap_err().to_string();
        assert!(err.contains("num_identitys"), "{err}");
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn schema_version_is_checked() {
        let path = write_temp("schema_version = 99\n", "version");
        let err = RunConfig::load(&path, &[]).unwrap_err().to_string();
        assert!(err.contains("schema_version"), "{err}");
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn overrides_reach_nested_sections() {
        let path = write_temp("schema_version = 1\n", "override");
        let cfg = RunConfig::load(
            &path,
            &[
                "train.lr=0.001".into(),
                "train.mode=daan_two_stage".into(),
                "synthetic.num_identities=7".into(),
                "weights.lambda_attn=2.5".into(),
                "train.attention_enabled=false".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.train.mode, crate::train::TrainMode::DaanTwoStage);
        assert_eq!(cfg.synthetic.num_identities, 7);
        assert_eq!(cfg.weights.lambda_attn, 2.5);
        assert!(!cfg.train.attention_enabled);
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn override_with_unknown_key_is_rejected() {
        let path = write_temp("schema_version = 1\n", "override-bad");
        let err =
            RunConfig::load(&path, &["train.learning_rate=0.1".into()]).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = RunConfig::defaults();
        let text = cfg.to_toml().unwrap();
        let path = write_temp(&text, "roundtrip");
        let back = RunConfig::load(&path, &[]).unwrap();
        assert_eq!(back.to_toml().unwrap(), text);
        fs::remove_file(&path).unwrap();
    }
}
