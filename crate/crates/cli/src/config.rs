use std::path::{Path, PathBuf};

use compad::DetectionConfig;
use serde::{Deserialize, Serialize};

/// Run configuration file. Command-line flags take precedence over its fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub detection: DetectionConfig,
    /// Dataset name written into reports.
    pub dataset: Option<String>,
    pub bank: Option<PathBuf>,
    /// Glob patterns selecting query manifests.
    pub queries: Vec<String>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub shots: Option<usize>,
}

impl RunConfig {
    /// Reads the file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.bank.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.out_dir.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.detection.adapter_path.as_mut() {
            rebase(p);
        }
        for q in &mut cfg.queries {
            if Path::new(q).is_relative() {
                *q = base.join(&*q).to_string_lossy().into_owned();
            }
        }
        if let Some(seed) = cfg.seed {
            cfg.detection.seed = seed;
        }
        cfg.detection.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"detection": {"delta": 0.5, "gamma": 1}}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
        std::fs::write(&p, r#"{"detections": {}}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
    }

    #[test]
    fn paths_rebased_and_seed_applied() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"bank": "b.json", "queries": ["q/*.json"], "seed": 9}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.bank.unwrap(), dir.path().join("b.json"));
        assert_eq!(c.queries, [dir.path().join("q/*.json").to_string_lossy()]);
        assert_eq!(c.detection.seed, 9);
    }
}
