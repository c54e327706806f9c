use std::path::{Path, PathBuf};

use anticipation_core::network::ModelConfig;
use anticipation_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub train_split: String,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            train_split: "train".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: String,
    /// Evaluate the final parameters on `split` once training ends.
    pub after_train: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split: "test".into(),
            after_train: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "runs".into() }
    }
}

/// Top-level JSON configuration. Missing sections and fields take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub output: OutputSection,
    /// When set, overrides both `train.seed` and `model.init_seed`.
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Parses a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> CliResult<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::parse(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = cfg.data.manifest.as_mut() {
            rebase(m);
        }
        rebase(&mut cfg.output.dir);
        if let Some(d) = cfg.train.checkpoint_dir.as_mut() {
            rebase(d);
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig, String> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if let Some(seed) = cfg.seed {
            cfg.train.seed = seed;
            cfg.model.init_seed = seed;
        }
        cfg.model.validate().map_err(|e| e.to_string())?;
        cfg.train.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.train
            .checkpoint_dir
            .clone()
            .unwrap_or_else(|| self.output.dir.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_reference_hyperparameters() {
        let cfg = RunConfig::parse("{}").unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.train.batch_size, 10);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.model.dilations, vec![1, 2, 4]);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(RunConfig::parse(r#"{"bogus": 1}"#).is_err());
        assert!(RunConfig::parse(r#"{"train": {"lr": 0.1, "momentum": 0.9}}"#).is_err());
        assert!(RunConfig::parse(r#"{"model": {"ablation": {"use_x": true}}}"#).is_err());
    }

    #[test]
    fn nested_fields_and_seed_override() {
        let cfg = RunConfig::parse(
            r#"{"model": {"feature_dim": 8, "temporal_head": "tcn", "ablation": {"use_dgcn": false}},
                "train": {"epochs": 2, "seed": 4}, "seed": 9}"#,
        )
        .unwrap();
        assert_eq!(cfg.model.feature_dim, 8);
        assert!(!cfg.model.ablation.use_dgcn);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!((cfg.train.seed, cfg.model.init_seed), (9, 9));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse(r#"{"train": {"batch_size": 0}}"#).is_err());
        assert!(RunConfig::parse(r#"{"train": {"lr": -1}}"#).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"data": {"manifest": "d/manifest.json"}, "output": {"dir": "out"}}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(
            cfg.data.manifest.as_deref(),
            Some(dir.path().join("d/manifest.json").as_path())
        );
        assert_eq!(cfg.checkpoint_dir(), dir.path().join("out"));
    }
}
