use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::RunError;
use crate::chain::{ChainConfig, InputMode, Step};
use crate::chunker::ChunkerConfig;
use crate::gateway::{GatewayConfig, LiveConfig};
use crate::normalizer::NormalizerConfig;
use crate::section::DetectorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Replay a recorded transcript.
    Mock { transcript: PathBuf },
    /// Call a live OpenAI-compatible endpoint.
    Live(LiveConfig),
    /// Call a live endpoint and save every exchange as a transcript.
    Record { live: LiveConfig, transcript: PathBuf },
}

fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input_dir: PathBuf,
    pub dictionary: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fail_fast: bool,
    /// Directory holding template sets; the built-in set is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_dir: Option<PathBuf>,
    #[serde(default)]
    pub chain: ChainConfig,
    #[serde(default)]
    pub chunker: ChunkerConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub normalizer: NormalizerConfig,
    #[serde(default)]
    pub gateway: GatewayConfig,
    pub backend: BackendConfig,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub input_dir: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub transcript: Option<PathBuf>,
    pub concurrency: Option<usize>,
    pub seed: Option<u64>,
    pub fail_fast: bool,
    pub collapse_subtests: bool,
    pub input_mode: Option<InputMode>,
    pub steps: Option<Vec<Step>>,
}

const PATH_KEYS: [&str; 4] = ["input_dir", "dictionary", "output_dir", "template_dir"];

impl RunConfig {
    /// Reads a TOML config file, or the `config` section of a run manifest
    /// (any `.json` file). Relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let bad = |e: String| RunError::Config(format!("{}: {e}", path.display()));
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            let manifest: Value = serde_json::from_str(&raw).map_err(|e| bad(e.to_string()))?;
            let config = manifest.get("config").cloned().ok_or_else(|| bad("no `config` section".into()))?;
            let cfg: RunConfig = serde_json::from_value(config).map_err(|e| bad(e.to_string()))?;
            if let Some(expected) = manifest.get("config_digest").and_then(Value::as_str) {
                let actual = cfg.digest();
                if actual != expected {
                    return Err(bad(format!(
                        "config digest mismatch: manifest says {expected}, config hashes to {actual}"
                    )));
                }
            }
            cfg
        } else {
            toml::from_str(&raw).map_err(|e| bad(e.to_string()))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.input_dir);
        fix(&mut self.dictionary);
        fix(&mut self.output_dir);
        if let Some(t) = &mut self.template_dir {
            fix(t);
        }
        match &mut self.backend {
            BackendConfig::Mock { transcript } | BackendConfig::Record { transcript, .. } => fix(transcript),
            BackendConfig::Live(_) => {}
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = &o.input_dir {
            self.input_dir = p.clone();
        }
        if let Some(p) = &o.dictionary {
            self.dictionary = p.clone();
        }
        if let Some(p) = &o.output_dir {
            self.output_dir = p.clone();
        }
        if let Some(t) = &o.transcript {
            self.backend = match &self.backend {
                BackendConfig::Record { live, .. } => {
                    BackendConfig::Record { live: live.clone(), transcript: t.clone() }
                }
                _ => BackendConfig::Mock { transcript: t.clone() },
            };
        }
        if let Some(c) = o.concurrency {
            self.concurrency = c;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        self.fail_fast |= o.fail_fast;
        self.normalizer.collapse_subtests |= o.collapse_subtests;
        if let Some(m) = o.input_mode {
            self.chain.input_mode = m;
        }
        if let Some(s) = &o.steps {
            self.chain.steps = s.clone();
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.concurrency == 0 {
            return Err(RunError::Config("concurrency must be at least 1".into()));
        }
        self.chain.validate().map_err(|e| RunError::Config(format!("chain: {e}")))?;
        self.chunker.validate().map_err(|e| RunError::Config(format!("chunker: {e}")))?;
        if !(0.0..=1.0).contains(&self.normalizer.fuzzy_threshold) {
            return Err(RunError::Config("normalizer.fuzzy_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Hash of every setting except file locations, so a moved corpus or
    /// output directory still verifies.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            for key in PATH_KEYS {
                obj.remove(key);
            }
            if let Some(backend) = obj.get_mut("backend").and_then(Value::as_object_mut) {
                backend.remove("transcript");
            }
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}
