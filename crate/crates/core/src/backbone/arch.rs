use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape description of a post-LN transformer encoder (RoBERTa family).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub vocab_size: usize,
    pub max_position: usize,
    pub type_vocab_size: usize,
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub intermediate: usize,
    pub layer_norm_eps: f64,
    pub hidden_dropout: f64,
    /// Position ids start here (RoBERTa reserves `pad_token_id + 1` slots).
    pub position_offset: usize,
    /// Longest token sequence accepted per encoder pass.
    pub max_seq_len: usize,
}

impl ArchConfig {
    /// Architectures of the released multilingual encoders.
    pub fn known(model_name: &str) -> Option<Self> {
        let (n_layers, hidden, n_heads, intermediate, vocab_size, max_position, offset, type_vocab) =
            match model_name {
                "xlm-roberta-large" | "FacebookAI/xlm-roberta-large" => {
                    (24, 1024, 16, 4096, 250_002, 514, 2, 1)
                }
                "xlm-roberta-base" | "FacebookAI/xlm-roberta-base" => {
                    (12, 768, 12, 3072, 250_002, 514, 2, 1)
                }
                "bert-base-multilingual-cased" | "google-bert/bert-base-multilingual-cased" => {
                    (12, 768, 12, 3072, 119_547, 512, 0, 2)
                }
                _ => return None,
            };
        Some(Self {
            vocab_size,
            max_position,
            type_vocab_size: type_vocab,
            n_layers,
            hidden,
            n_heads,
            intermediate,
            layer_norm_eps: 1e-5,
            hidden_dropout: 0.1,
            position_offset: offset,
            max_seq_len: max_position - offset,
        })
    }

    /// Small architecture for desk-scale runs. Dropout is off: at widths
    /// around 16 it drowns the signal the adapters have to learn.
    pub fn toy(n_layers: usize, hidden: usize) -> Self {
        let n_heads = if hidden >= 16 && hidden % 8 == 0 {
            hidden / 8
        } else {
            1
        };
        Self {
            vocab_size: 2048,
            max_position: 128,
            type_vocab_size: 1,
            n_layers,
            hidden,
            n_heads,
            intermediate: 4 * hidden,
            layer_norm_eps: 1e-5,
            hidden_dropout: 0.0,
            position_offset: 0,
            max_seq_len: 64,
        }
    }

    /// Reads a Hugging Face style `config.json`.
    pub fn from_hf_config(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&raw)?;
        let get = |key: &str| -> Result<usize> {
            v.get(key)
                .and_then(serde_json::Value::as_u64)
                .map(|x| x as usize)
                .ok_or_else(|| Error::Config(format!("{}: missing integer {key:?}", path.display())))
        };
        let max_position = get("max_position_embeddings")?;
        let pad = v.get("pad_token_id").and_then(|p| p.as_u64()).unwrap_or(0) as usize;
        let is_roberta = v
            .get("model_type")
            .and_then(|m| m.as_str())
            .is_some_and(|m| m.contains("roberta"));
        let position_offset = if is_roberta { pad + 1 } else { 0 };
        let cfg = Self {
            vocab_size: get("vocab_size")?,
            max_position,
            type_vocab_size: get("type_vocab_size").unwrap_or(1),
            n_layers: get("num_hidden_layers")?,
            hidden: get("hidden_size")?,
            n_heads: get("num_attention_heads")?,
            intermediate: get("intermediate_size")?,
            layer_norm_eps: v
                .get("layer_norm_eps")
                .and_then(|x| x.as_f64())
                .unwrap_or(1e-5),
            hidden_dropout: v
                .get("hidden_dropout_prob")
                .and_then(|x| x.as_f64())
                .unwrap_or(0.1),
            position_offset,
            max_seq_len: max_position.saturating_sub(position_offset),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.hidden == 0 || self.n_heads == 0 || self.intermediate == 0 || self.vocab_size < 8 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.hidden % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.n_heads
            )));
        }
        if self.max_seq_len < 4 || self.max_seq_len + self.position_offset > self.max_position {
            return Err(Error::Config(format!(
                "max_seq_len {} does not fit {} positions",
                self.max_seq_len, self.max_position
            )));
        }
        if !(0.0..1.0).contains(&self.hidden_dropout) {
            return Err(Error::Config("hidden_dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    /// Every base parameter, by tensor name, in a fixed order. Layer names
    /// are 0-based like the released checkpoints; the public API is 1-based.
    pub fn base_param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden;
        let mut shapes = vec![
            ("embeddings.word_embeddings.weight".to_string(), vec![self.vocab_size, d]),
            ("embeddings.position_embeddings.weight".to_string(), vec![self.max_position, d]),
            (
                "embeddings.token_type_embeddings.weight".to_string(),
                vec![self.type_vocab_size, d],
            ),
            ("embeddings.LayerNorm.weight".to_string(), vec![d]),
            ("embeddings.LayerNorm.bias".to_string(), vec![d]),
        ];
        for layer in 1..=self.n_layers {
            shapes.extend(self.layer_param_shapes(layer));
        }
        shapes
    }

    pub fn layer_param_shapes(&self, layer: usize) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden;
        let i = self.intermediate;
        let p = layer_prefix(layer);
        vec![
            (format!("{p}.attention.self.query.weight"), vec![d, d]),
            (format!("{p}.attention.self.query.bias"), vec![d]),
            (format!("{p}.attention.self.key.weight"), vec![d, d]),
            (format!("{p}.attention.self.key.bias"), vec![d]),
            (format!("{p}.attention.self.value.weight"), vec![d, d]),
            (format!("{p}.attention.self.value.bias"), vec![d]),
            (format!("{p}.attention.output.dense.weight"), vec![d, d]),
            (format!("{p}.attention.output.dense.bias"), vec![d]),
            (format!("{p}.attention.output.LayerNorm.weight"), vec![d]),
            (format!("{p}.attention.output.LayerNorm.bias"), vec![d]),
            (format!("{p}.intermediate.dense.weight"), vec![i, d]),
            (format!("{p}.intermediate.dense.bias"), vec![i]),
            (format!("{p}.output.dense.weight"), vec![d, i]),
            (format!("{p}.output.dense.bias"), vec![d]),
            (format!("{p}.output.LayerNorm.weight"), vec![d]),
            (format!("{p}.output.LayerNorm.bias"), vec![d]),
        ]
    }

    pub fn base_param_count(&self) -> usize {
        count(&self.base_param_shapes())
    }

    pub fn layer_param_count(&self) -> usize {
        count(&self.layer_param_shapes(1))
    }

    pub fn embedding_param_count(&self) -> usize {
        self.base_param_count() - self.n_layers * self.layer_param_count()
    }

    /// (input, output) width of the linear map at `site`.
    pub fn site_dims(&self, site: HookSite) -> (usize, usize) {
        match site {
            HookSite::Query | HookSite::Key | HookSite::Value | HookSite::AttentionOutput => {
                (self.hidden, self.hidden)
            }
            HookSite::FfnOutput => (self.intermediate, self.hidden),
        }
    }
}

pub(crate) fn layer_prefix(layer: usize) -> String {
    format!("encoder.layer.{}", layer - 1)
}

pub(crate) fn count(shapes: &[(String, Vec<usize>)]) -> usize {
    shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// Linear sublayers an adapter can be hooked onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookSite {
    Query,
    Key,
    Value,
    AttentionOutput,
    FfnOutput,
}

impl HookSite {
    pub fn name(self) -> &'static str {
        match self {
            HookSite::Query => "query",
            HookSite::Key => "key",
            HookSite::Value => "value",
            HookSite::AttentionOutput => "attention_output",
            HookSite::FfnOutput => "ffn_output",
        }
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HookSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            HookSite::Query,
            HookSite::Key,
            HookSite::Value,
            HookSite::AttentionOutput,
            HookSite::FfnOutput,
        ]
        .into_iter()
        .find(|h| h.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown hook site {s:?}")))
    }
}
