//! Small post-LN bidirectional transformer encoder with a dense pooler.

mod model;
mod pooling;

pub use model::{Activation, EncoderParams};
pub use pooling::{pool, pool_on_tape, wrap_prompt, PoolingStrategy, PromptTemplate};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenizer::{self, Tokenizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    BertLike,
    RobertaLike,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_position: usize,
    pub model_family: ModelFamily,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_ln_eps() -> f64 {
    1e-12
}

fn default_init_std() -> f64 {
    0.02
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_position: 64,
            model_family: ModelFamily::BertLike,
            layer_norm_eps: default_ln_eps(),
            init_std: default_init_std(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= tokenizer::MASK_ID {
            return Err(Error::invalid("vocabulary must contain the five reserved tokens"));
        }
        if self.max_position < 2 || self.d_ff == 0 {
            return Err(Error::invalid("max_position must be >= 2 and d_ff > 0"));
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std > 0.0) {
            return Err(Error::invalid("layer_norm_eps and init_std must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Token ids ready for the encoder, plus the `[MASK]` position for prompt pooling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedInput {
    pub ids: Vec<usize>,
    pub mask_index: Option<usize>,
    pub truncated: bool,
}

/// Tokenize `text` for `strategy`, truncating the sentence body to fit `max_position`.
pub fn prepare_input(
    tokenizer: &Tokenizer,
    text: &str,
    strategy: &PoolingStrategy,
    max_position: usize,
) -> Result<PreparedInput> {
    match strategy {
        PoolingStrategy::Cls | PoolingStrategy::Mean => {
            let (ids, truncated) = tokenizer.encode_with_specials(text, max_position);
            Ok(PreparedInput {
                ids,
                mask_index: None,
                truncated,
            })
        }
        PoolingStrategy::Prompt { template } => {
            let overhead = template.len(tokenizer) - 1;
            if overhead >= max_position {
                return Err(Error::invalid(format!(
                    "prompt template needs {overhead} positions, max_position is {max_position}"
                )));
            }
            let mut body = tokenizer.encode(text);
            let truncated = body.len() > max_position - overhead;
            body.truncate(max_position - overhead);
            let (ids, mask_index) = wrap_prompt(tokenizer, &body, template, max_position)?;
            Ok(PreparedInput {
                ids,
                mask_index: Some(mask_index),
                truncated,
            })
        }
    }
}

/// Pooled last hidden state of one sentence (no pooler applied).
pub fn embed_sentence<T: Scalar>(
    encoder: &EncoderParams<T>,
    tokenizer: &Tokenizer,
    text: &str,
    strategy: &PoolingStrategy,
) -> Result<(Vec<T>, bool)> {
    let input = prepare_input(tokenizer, text, strategy, encoder.config.max_position)?;
    let mask = vec![T::one(); input.ids.len()];
    let hidden = encoder.encode(&input.ids, &mask)?;
    let v = pool(&hidden, &mask, strategy, input.mask_index)?;
    Ok((v, input.truncated))
}
