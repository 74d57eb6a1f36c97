//! Pipeline configuration file: one JSON document covering paths, the
//! embedder, training hyperparameters, retrieval and generation settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use veridex_core::embedding::EmbedderConfig;
use veridex_core::error::{Error, Result};
use veridex_core::knowledge::DEFAULT_CHUNK_SIZE;
use veridex_core::prompt::PromptMode;
use veridex_core::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(default = "default_backend_kind")]
    pub kind: String,
    /// Canned responses for the mock backend, JSONL of
    /// `{"prompt_hash": .., "response": ..}`.
    #[serde(default)]
    pub responses_path: Option<PathBuf>,
    #[serde(default = "default_model_name")]
    pub model: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub temperature: f64,
}

fn default_backend_kind() -> String {
    "mock".to_string()
}

fn default_model_name() -> String {
    "gpt-4".to_string()
}

fn default_timeout_secs() -> u64 {
    30
}

fn default_max_in_flight() -> usize {
    4
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: default_backend_kind(),
            responses_path: None,
            model: default_model_name(),
            timeout_secs: default_timeout_secs(),
            max_in_flight: default_max_in_flight(),
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub dataset_path: Option<PathBuf>,
    #[serde(default)]
    pub docs_path: Option<PathBuf>,
    #[serde(default = "default_store_path")]
    pub store_path: PathBuf,
    #[serde(default = "default_model_path")]
    pub model_path: PathBuf,
    #[serde(default)]
    pub template_dir: Option<PathBuf>,
    #[serde(default = "default_reports_dir")]
    pub reports_dir: PathBuf,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_chunk_size")]
    pub chunk_size: usize,
    #[serde(default = "default_top_n")]
    pub retrieval_top_n: usize,
    #[serde(default = "default_mode")]
    pub prompt_mode: PromptMode,
    #[serde(default = "default_rag")]
    pub rag: bool,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub exemplars_path: Option<PathBuf>,
    #[serde(default = "default_exemplar_k")]
    pub exemplar_k: usize,
}

fn default_store_path() -> PathBuf {
    PathBuf::from("store.bin")
}

fn default_model_path() -> PathBuf {
    PathBuf::from("model.bin")
}

fn default_reports_dir() -> PathBuf {
    PathBuf::from(".")
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_chunk_size() -> usize {
    DEFAULT_CHUNK_SIZE
}

fn default_top_n() -> usize {
    1
}

fn default_mode() -> PromptMode {
    PromptMode::ZeroShot
}

fn default_rag() -> bool {
    true
}

fn default_exemplar_k() -> usize {
    2
}

impl PipelineConfig {
    /// Parse a config file. Relative paths inside it are resolved against
    /// the file's own directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        if cfg.train_fraction <= 0.0 || cfg.train_fraction > 1.0 {
            return Err(Error::Config(format!(
                "train_fraction {} outside (0, 1]",
                cfg.train_fraction
            )));
        }
        if cfg.retrieval_top_n == 0 {
            return Err(Error::Config("retrieval_top_n must be at least 1".into()));
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.dataset_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.docs_path.as_mut() {
            fix(p);
        }
        fix(&mut self.store_path);
        fix(&mut self.model_path);
        if let Some(p) = self.template_dir.as_mut() {
            fix(p);
        }
        fix(&mut self.reports_dir);
        if let Some(p) = self.embedder.source.as_mut() {
            fix(p);
        }
        if let Some(p) = self.exemplars_path.as_mut() {
            fix(p);
        }
        if let Some(b) = self.backend.responses_path.as_mut() {
            fix(b);
        }
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        self.dataset_path
            .as_deref()
            .ok_or_else(|| Error::Config("config has no dataset_path".into()))
    }
}
