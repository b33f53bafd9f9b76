//! Flat key/value run configuration.
//!
//! A simulation config is a flat TOML table. Model keys are the
//! [`ModelConfig`] field names; decoding keys are `method`, `k`, `k_min`,
//! `tokens_per_step`, `num_blocks`, `prompt_len` plus the baseline knobs
//! `page_size`, `anchor_layer`, `num_sinks`, `window_size`. A single `seed`
//! drives the model weights, the prompt and any random baseline. Missing
//! keys take defaults; unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineConfig, DEFAULT_PAGE_SIZE};
use crate::costmodel::{CostParams, SweepSpec};
use crate::decoder::{DecodeConfig, Method};
use crate::error::{MageError, Result};
use crate::toymodel::ModelConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatConfig {
    pub num_layers: Option<usize>,
    pub num_query_heads: Option<usize>,
    pub num_kv_heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub vocab_size: Option<usize>,
    pub block_size: Option<usize>,
    pub exact_layer_prefix: Option<usize>,
    pub skew_temperature: Option<f32>,
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub k: Option<usize>,
    pub k_min: Option<usize>,
    pub tokens_per_step: Option<usize>,
    pub num_blocks: Option<usize>,
    pub prompt_len: Option<usize>,
    pub page_size: Option<usize>,
    pub anchor_layer: Option<usize>,
    pub num_sinks: Option<usize>,
    pub window_size: Option<usize>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($f:ident),*) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f.clone(); } )*
    };
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MageError::Config(e.to_string()))
    }

    /// Keys set in `top` replace those in `self`.
    pub fn overlay(mut self, top: &FlatConfig) -> Self {
        let base = &mut self;
        overlay!(
            base, top, num_layers, num_query_heads, num_kv_heads, head_dim, vocab_size,
            block_size, exact_layer_prefix, skew_temperature, seed, method, k, k_min,
            tokens_per_step, num_blocks, prompt_len, page_size, anchor_layer, num_sinks,
            window_size
        );
        self
    }

    pub fn resolve(&self) -> Result<SimConfig> {
        let d = ModelConfig::default();
        let seed = self.seed.unwrap_or(d.seed);
        let model = ModelConfig {
            num_layers: self.num_layers.unwrap_or(d.num_layers),
            num_query_heads: self.num_query_heads.unwrap_or(d.num_query_heads),
            num_kv_heads: self.num_kv_heads.unwrap_or(d.num_kv_heads),
            head_dim: self.head_dim.unwrap_or(d.head_dim),
            vocab_size: self.vocab_size.unwrap_or(d.vocab_size),
            block_size: self.block_size.unwrap_or(d.block_size),
            exact_layer_prefix: self.exact_layer_prefix.unwrap_or(d.exact_layer_prefix),
            skew_temperature: self.skew_temperature.unwrap_or(d.skew_temperature),
            seed,
        };
        model.validate()?;
        let k = self.k.unwrap_or(DecodeConfig::default().k);
        let method = match self.method.as_deref().unwrap_or("mage") {
            "exact" => Method::Exact,
            "mage" => Method::Mage,
            "quest" => Method::Baseline(BaselineConfig::Quest {
                page_size: self.page_size.unwrap_or(DEFAULT_PAGE_SIZE),
            }),
            "tidal" => Method::Baseline(BaselineConfig::Tidal {
                anchor_layer: self.anchor_layer.unwrap_or(model.exact_layer_prefix),
            }),
            "window" => {
                let num_sinks = self.num_sinks.unwrap_or(4.min(k));
                Method::Baseline(BaselineConfig::Window {
                    num_sinks,
                    window_size: self.window_size.unwrap_or(k.saturating_sub(num_sinks)),
                })
            }
            "random" => Method::Baseline(BaselineConfig::Random { seed }),
            "oracle" => Method::Baseline(BaselineConfig::Oracle),
            other => return Err(MageError::Config(format!("unknown method `{other}`"))),
        };
        let dd = DecodeConfig::default();
        let decode = DecodeConfig {
            tokens_per_step: self.tokens_per_step.unwrap_or(dd.tokens_per_step),
            k,
            k_min: self.k_min.unwrap_or(dd.k_min.min(k)),
            method,
            num_blocks: self.num_blocks.unwrap_or(dd.num_blocks),
            prompt_len: self.prompt_len.unwrap_or(dd.prompt_len),
            seed,
            trace_oracle: true,
            keep_attention: false,
            keep_logits: false,
        };
        Ok(SimConfig { model, decode })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub model: ModelConfig,
    pub decode: DecodeConfig,
}

/// Cost parameters from a flat TOML table; missing keys take defaults.
pub fn parse_cost_params(text: &str) -> Result<CostParams> {
    let p: CostParams = toml::from_str(text).map_err(|e| MageError::Config(e.to_string()))?;
    p.validate()?;
    Ok(p)
}

/// Sweep grid from a flat TOML table (`contexts`, `budgets`, `kinds`).
pub fn parse_sweep(text: &str) -> Result<SweepSpec> {
    let s: SweepSpec = toml::from_str(text).map_err(|e| MageError::Config(e.to_string()))?;
    if s.contexts.is_empty() || s.budgets.is_empty() || s.kinds.is_empty() {
        return Err(MageError::Config("sweep needs contexts, budgets and kinds".into()));
    }
    Ok(s)
}
