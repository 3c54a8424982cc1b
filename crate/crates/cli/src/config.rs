//! Run configuration file.
//!
//! Relative paths are resolved against the directory holding the config
//! file. See `fixtures/qqp-rule/config.toml` for a complete offline example.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use promptlex::oracle::mock::{RuleOracle, RuleSpec, TableOracle};
use promptlex::oracle::{HttpFillMask, OpenAiClient, OracleConfig, RetryPolicy, StaticFillMask};
use promptlex::{
    load_pool, CompletionOracle, FillMaskProvider, MatchPolicy, OptimizationParams, PoolFormat,
    PromptTemplate, ResponseCache, TaskInstance, TaskPool, Verbalizer,
};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub template: PathBuf,
    pub labels: Vec<String>,
    #[serde(default)]
    pub match_policy: MatchPolicy,
    pub proxy_pool: PoolSpec,
    pub eval_pool: Option<PoolSpec>,
    pub oracle: OracleSpec,
    pub provider: Option<ProviderSpec>,
    #[serde(default)]
    pub params: OptimizationParams,
    /// Defaults to `cache.jsonl` inside the run directory.
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub path: PathBuf,
    /// Inferred from the file extension when absent.
    pub format: Option<PoolFormat>,
    /// Defaults to the file stem.
    pub name: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleSpec {
    /// OpenAI-compatible chat completions endpoint.
    Openai(OracleConfig),
    /// Recorded `{"prompt_hash", "raw_response"}` transcript.
    Replay { transcript: PathBuf },
    /// Error rate is a declared function of the description.
    Rule(RuleSpec),
}

fn default_provider_timeout() -> u64 {
    60
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    /// JSON object mapping masked text to `[{word, probability}]`.
    Table { path: PathBuf },
    /// Fill-mask service.
    Http {
        base_url: String,
        #[serde(default = "default_provider_timeout")]
        timeout_secs: u64,
        #[serde(default)]
        retry: RetryPolicy,
    },
}

/// A parsed config plus the directory its relative paths hang off.
#[derive(Debug)]
pub struct Loaded {
    pub cfg: RunConfig,
    base: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().map(Path::to_owned).unwrap_or_default();
        Ok(Self { cfg, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base.join(p)
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.cfg.run_dir)
    }

    pub fn verbalizer(&self) -> Result<Verbalizer> {
        Ok(Verbalizer::new(self.cfg.labels.iter().cloned(), self.cfg.match_policy)?)
    }

    /// Template path: `override_path` if given (relative to the working
    /// directory), else the configured one.
    pub fn template_path(&self, override_path: Option<&Path>) -> PathBuf {
        override_path.map_or_else(|| self.resolve(&self.cfg.template), Path::to_owned)
    }

    pub fn template_source(&self, override_path: Option<&Path>) -> Result<(String, PromptTemplate)> {
        let path = self.template_path(override_path);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading template {}", path.display()))?;
        let template = promptlex::parse_template(&text)
            .with_context(|| format!("parsing template {}", path.display()))?;
        Ok((text, template))
    }

    fn pool(&self, spec: &PoolSpec) -> Result<TaskPool> {
        let path = self.resolve(&spec.path);
        let format = match spec.format.or_else(|| PoolFormat::from_path(&path)) {
            Some(f) => f,
            None => bail!("cannot tell the format of {}; set `format`", path.display()),
        };
        let name = spec.name.clone().unwrap_or_else(|| {
            path.file_stem()
                .map_or_else(|| "pool".to_owned(), |s| s.to_string_lossy().into_owned())
        });
        Ok(load_pool(&path, format, &name, self.verbalizer()?)?)
    }

    pub fn proxy_pool(&self) -> Result<TaskPool> {
        self.pool(&self.cfg.proxy_pool)
    }

    pub fn eval_pool(&self) -> Result<TaskPool> {
        match &self.cfg.eval_pool {
            Some(spec) => self.pool(spec),
            None => bail!("config has no eval_pool"),
        }
    }

    pub fn cache(&self, run_dir: &Path) -> Result<ResponseCache> {
        let path = match &self.cfg.cache {
            Some(p) => self.resolve(p),
            None => run_dir.join("cache.jsonl"),
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))?;
        }
        ResponseCache::open(&path).with_context(|| format!("opening cache {}", path.display()))
    }

    /// Build the configured oracle. A rule oracle answers only for the task
    /// groups passed here.
    pub fn oracle(
        &self,
        template: &PromptTemplate,
        verbalizer: &Verbalizer,
        groups: &[&[TaskInstance]],
    ) -> Result<Box<dyn CompletionOracle>> {
        Ok(match &self.cfg.oracle {
            OracleSpec::Openai(c) => Box::new(OpenAiClient::new(c.clone())?),
            OracleSpec::Replay { transcript } => {
                Box::new(TableOracle::from_transcript(&self.resolve(transcript))?)
            }
            OracleSpec::Rule(spec) => {
                let mut oracle = RuleOracle::new(spec.clone(), template);
                for group in groups {
                    oracle.add_group(template, group, verbalizer)?;
                }
                Box::new(oracle)
            }
        })
    }

    pub fn provider(&self) -> Result<Box<dyn FillMaskProvider>> {
        Ok(match &self.cfg.provider {
            Some(ProviderSpec::Table { path }) => {
                Box::new(StaticFillMask::from_json_file(&self.resolve(path))?)
            }
            Some(ProviderSpec::Http {
                base_url,
                timeout_secs,
                retry,
            }) => Box::new(HttpFillMask::new(
                base_url,
                Duration::from_secs(*timeout_secs),
                *retry,
            )?),
            None => bail!("config has no provider"),
        })
    }
}
