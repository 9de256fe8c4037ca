//! Pipeline configuration: one TOML file, every section optional, flags
//! override fields at the command layer. The auth token is the single value
//! that never lives in the file; it comes from COMPASS_API_KEY.

use std::path::{Path, PathBuf};
use std::time::Duration;

use compass_core::elicit::{Decoding, Endpoint};
use compass_core::error::{Error, Result};
use compass_core::pct::{
    builtin_statements, load_scoring_matrix, load_statements, ScoringMatrix, Statement,
};
use compass_core::stats::{GridSpec, QuadrantConvention};
use serde::{Deserialize, Serialize};

pub const API_KEY_ENV: &str = "COMPASS_API_KEY";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    pub assets: AssetsConfig,
    pub endpoint: EndpointConfig,
    pub decoding: DecodingConfig,
    pub run: RunConfig,
    pub analysis: AnalysisConfig,
    pub cluster: ClusterConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: PathBuf,
    /// JSON key holding the persona description in each corpus line.
    pub field: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            path: PathBuf::new(),
            field: "persona".to_string(),
        }
    }
}

/// Statement and matrix override paths; empty paths select the bundled
/// instrument.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssetsConfig {
    pub statements: PathBuf,
    pub matrix: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    pub retry_limit: u32,
    pub concurrency: usize,
    pub backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            url: "http://127.0.0.1:8080".to_string(),
            model: "default".to_string(),
            retry_limit: 3,
            concurrency: 16,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingConfig {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig {
            temperature: 0.0,
            max_tokens: 8,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub bins_per_axis: usize,
    pub quadrant_convention: QuadrantConvention,
    /// Bonferroni family size. 28 covers the full published comparison grid
    /// (7 models, 2 axes, 2 injected conditions).
    pub m_tests: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            bins_per_axis: 35,
            quadrant_convention: QuadrantConvention::SharedMiddle,
            m_tests: 28,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Endpoint,
    VectorFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
    /// Target dimensionality before k-means; clamped to the embedding width.
    pub reduce_dim: usize,
    pub provider: ProviderKind,
    /// Required when provider = "vector_file".
    pub vector_file: PathBuf,
    pub embed_model: String,
    pub batch_size: usize,
    pub concurrency: usize,
    pub retry_limit: u32,
    pub n_keywords: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k: 8,
            reduce_dim: 50,
            provider: ProviderKind::Endpoint,
            vector_file: PathBuf::new(),
            embed_model: "embed-default".to_string(),
            batch_size: 64,
            concurrency: 4,
            retry_limit: 3,
            n_keywords: 8,
            seed: 0,
        }
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: PipelineConfig = toml::from_str(&raw)
        .map_err(|e| Error::data(format!("config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.endpoint.retry_limit == 0 {
            return Err(Error::data("endpoint.retry_limit must be at least 1"));
        }
        if self.endpoint.concurrency == 0 {
            return Err(Error::data("endpoint.concurrency must be at least 1"));
        }
        if self.analysis.bins_per_axis == 0 {
            return Err(Error::data("analysis.bins_per_axis must be at least 1"));
        }
        if self.analysis.m_tests == 0 {
            return Err(Error::data("analysis.m_tests must be at least 1"));
        }
        if self.cluster.k < 2 {
            return Err(Error::data("cluster.k must be at least 2"));
        }
        for (name, path) in [
            ("assets.statements", &self.assets.statements),
            ("assets.matrix", &self.assets.matrix),
        ] {
            if !path.as_os_str().is_empty() && !path.exists() {
                return Err(Error::data(format!(
                    "{name} path {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    /// The corpus path, required to be configured and present.
    pub fn corpus_path(&self) -> Result<&Path> {
        if self.corpus.path.as_os_str().is_empty() {
            return Err(Error::data(
                "corpus.path is not set; this command needs a persona corpus",
            ));
        }
        if !self.corpus.path.exists() {
            return Err(Error::data(format!(
                "corpus.path {} does not exist",
                self.corpus.path.display()
            )));
        }
        Ok(&self.corpus.path)
    }

    pub fn statements(&self) -> Result<Vec<Statement>> {
        if self.assets.statements.as_os_str().is_empty() {
            Ok(builtin_statements())
        } else {
            load_statements(&self.assets.statements)
        }
    }

    pub fn matrix(&self) -> Result<ScoringMatrix> {
        if self.assets.matrix.as_os_str().is_empty() {
            Ok(ScoringMatrix::builtin())
        } else {
            load_scoring_matrix(&self.assets.matrix)
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.analysis.bins_per_axis)
    }

    /// Builds the elicitation endpoint, pulling the bearer token from the
    /// environment (never from the config file).
    pub fn endpoint(&self) -> Endpoint {
        Endpoint::new(self.endpoint.url.clone())
            .with_api_key(std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()))
            .with_backoff_base(Duration::from_millis(self.endpoint.backoff_ms))
    }

    pub fn decoding(&self) -> Decoding {
        Decoding {
            temperature: self.decoding.temperature,
            max_tokens: self.decoding.max_tokens,
            ..Decoding::default()
        }
    }
}
