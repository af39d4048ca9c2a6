//! TOML run configuration.
//!
//! Relative paths inside the file are resolved against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lorashop::blend::BlendConfig;
use lorashop::mmdit::ModelConfig;
use lorashop::prior::PriorParams;
use lorashop::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Noise seed.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_prompt_seed")]
    pub prompt_seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub subjects: Vec<Subject>,
}

fn default_seed() -> u64 {
    2
}

fn default_prompt_seed() -> u64 {
    1
}

fn default_steps() -> usize {
    16
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Either a checkpoint path or an architecture to initialise from its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub prompt_len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub double_blocks: usize,
    pub single_blocks: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::default();
        Self {
            checkpoint: None,
            seed: c.seed,
            channels: c.channels,
            height: c.height,
            width: c.width,
            prompt_len: c.prompt_len,
            heads: c.heads,
            head_dim: c.head_dim,
            mlp_hidden: c.mlp_hidden,
            double_blocks: c.double_blocks,
            single_blocks: c.single_blocks,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            height: self.height,
            width: self.width,
            prompt_len: self.prompt_len,
            heads: self.heads,
            head_dim: self.head_dim,
            mlp_hidden: self.mlp_hidden,
            double_blocks: self.double_blocks,
            single_blocks: self.single_blocks,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub t: f64,
    pub gamma: f64,
    pub tau: f64,
    pub kernel_size: usize,
    pub sigma: f64,
    pub max_passes: usize,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture_block: Option<usize>,
}

impl Default for Params {
    fn default() -> Self {
        let p = PriorParams::default();
        let b = BlendConfig::default();
        Self {
            t: b.t,
            gamma: p.gamma,
            tau: p.tau,
            kernel_size: p.kernel_size,
            sigma: p.sigma,
            max_passes: p.max_passes,
            epsilon: b.epsilon,
            capture_block: p.capture_block,
        }
    }
}

impl Params {
    pub fn prior(&self) -> PriorParams {
        PriorParams {
            gamma: self.gamma,
            tau: self.tau,
            kernel_size: self.kernel_size,
            sigma: self.sigma,
            max_passes: self.max_passes,
            capture_block: self.capture_block,
        }
    }

    pub fn blend(&self) -> BlendConfig {
        BlendConfig {
            t: self.t,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subject {
    pub name: String,
    pub tokens: Vec<usize>,
    pub adapter: PathBuf,
}

/// Command-line overrides of individual config fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
    pub t: Option<f64>,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Parameter(format!("config: {}", e.message())))
    }

    /// Reads `path`, resolves relative paths against its directory and applies `overrides`.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.out_dir = base.join(&cfg.out_dir);
        if let Some(ck) = &cfg.model.checkpoint {
            cfg.model.checkpoint = Some(base.join(ck));
        }
        for s in &mut cfg.subjects {
            s.adapter = base.join(&s.adapter);
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.steps {
            self.steps = v;
        }
        if let Some(v) = &o.out {
            self.out_dir = v.clone();
        }
        if let Some(v) = o.t {
            self.params.t = v;
        }
        if let Some(v) = o.gamma {
            self.params.gamma = v;
        }
        if let Some(v) = o.tau {
            self.params.tau = v;
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.steps == 0 {
            return Err(Error::Parameter("steps must be at least 1".into()));
        }
        self.params.prior().validate()?;
        self.params.blend().validate()?;
        if self.model.checkpoint.is_none() {
            let mc = self.model.model_config();
            mc.validate()?;
            self.params.prior().capture_block_for(mc.double_blocks)?;
        }
        for s in &self.subjects {
            if s.tokens.is_empty() {
                return Err(Error::Parameter(format!("subject '{}' has no prompt tokens", s.name)));
            }
        }
        Ok(())
    }
}
