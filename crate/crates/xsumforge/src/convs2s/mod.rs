//! Topic-conditioned convolutional sequence-to-sequence model: embeddings
//! with optional topic channels, stacked GLU convolution blocks with
//! residuals, per-layer attention over the encoder, and the output
//! projection onto the vocabulary.

mod net;
mod params;

pub use net::{
    attend, bind, decode_step, decoder_forward, embed_source, embed_target_prefix, encode,
    forward_loss, BoundParams, DecoderOut, EncoderOut, Projection, TopicVectors,
};
pub use params::ModelParams;

use serde::{Deserialize, Serialize};
use std::str::FromStr;
use thiserror::Error;

use crate::diffcore::DiffError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("position {pos} at or beyond maximum {max}")]
    PositionOverflow { pos: usize, max: usize },
    #[error("topic vectors have width {got}, model expects {want}")]
    TopicWidthMismatch { got: usize, want: usize },
    #[error("bad model configuration: {0}")]
    BadConfig(String),
    #[error("bad checkpoint file: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which topic channels are wired into the encoder and decoder inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// No topic conditioning anywhere: the vanilla convolutional seq2seq.
    #[serde(rename = "plain")]
    Plain,
    /// Encoder tokens carry their word topic vectors.
    #[serde(rename = "enc_t")]
    EncT,
    /// Word topics on the encoder, document topic on the decoder.
    #[serde(rename = "enc_t_dec_tD")]
    EncTDecTd,
    /// Encoder tokens carry word topics times the document topic.
    #[serde(rename = "enc_ttD")]
    EncTtd,
    /// Full conditioning on both sides.
    #[serde(rename = "enc_ttD_dec_tD")]
    EncTtdDecTd,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Plain, Variant::EncT, Variant::EncTDecTd, Variant::EncTtd, Variant::EncTtdDecTd];

    /// Encoder input rows end with a topic block.
    pub fn enc_word_topics(self) -> bool {
        self != Variant::Plain
    }

    /// The encoder topic block is t'_i pointwise-times t_D rather than t'_i.
    pub fn enc_doc_topic_product(self) -> bool {
        matches!(self, Variant::EncTtd | Variant::EncTtdDecTd)
    }

    /// Decoder input rows end with the document topic vector.
    pub fn dec_doc_topic(self) -> bool {
        matches!(self, Variant::EncTDecTd | Variant::EncTtdDecTd)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::EncT => "enc_t",
            Variant::EncTDecTd => "enc_t_dec_tD",
            Variant::EncTtd => "enc_ttD",
            Variant::EncTtdDecTd => "enc_ttD_dec_tD",
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}; expected one of plain, enc_t, enc_t_dec_tD, enc_ttD, enc_ttD_dec_tD"))
    }
}

fn default_width() -> usize {
    512
}
fn default_kernel() -> usize {
    3
}
fn default_layers() -> usize {
    4
}
fn default_max_src() -> usize {
    400
}
fn default_max_tgt() -> usize {
    90
}
fn default_vocab() -> usize {
    50_000
}
fn default_dropout() -> f64 {
    0.2
}
fn default_variant() -> Variant {
    Variant::EncTtdDecTd
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Word and position embedding width.
    #[serde(default = "default_width")]
    pub f: usize,
    /// Topic vector width; must equal the topic model's topic count for any
    /// topic-conditioned variant, ignored for plain.
    #[serde(default = "default_width")]
    pub f_prime: usize,
    /// Convolution channel width.
    #[serde(default = "default_width")]
    pub d: usize,
    /// Kernel width.
    #[serde(default = "default_kernel")]
    pub k: usize,
    #[serde(default = "default_layers")]
    pub enc_layers: usize,
    #[serde(default = "default_layers")]
    pub dec_layers: usize,
    #[serde(default = "default_max_src")]
    pub max_src_positions: usize,
    #[serde(default = "default_max_tgt")]
    pub max_tgt_positions: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Scale residual sums by sqrt(0.5).
    #[serde(default)]
    pub residual_scale: bool,
    /// Apply layer normalization to each block output before the residual.
    #[serde(default)]
    pub layer_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl ModelConfig {
    /// Encoder input row width: f plus the topic block when present.
    pub fn enc_embed_width(&self) -> usize {
        self.f + if self.variant.enc_word_topics() { self.f_prime } else { 0 }
    }

    /// Decoder input row width: f plus t_D when present.
    pub fn dec_embed_width(&self) -> usize {
        self.f + if self.variant.dec_doc_topic() { self.f_prime } else { 0 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::BadConfig(msg));
        if self.f == 0 || self.d == 0 {
            return fail(format!("widths must be positive (f={}, d={})", self.f, self.d));
        }
        if self.k == 0 {
            return fail("kernel width must be at least 1".into());
        }
        if self.variant.enc_word_topics() && self.f_prime == 0 {
            return fail(format!("variant {} needs f_prime > 0", self.variant.name()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size < 5 {
            return fail(format!("vocabulary of {} leaves no real tokens", self.vocab_size));
        }
        if self.max_src_positions == 0 || self.max_tgt_positions == 0 {
            return fail("position tables must be non-empty".into());
        }
        Ok(())
    }
}
