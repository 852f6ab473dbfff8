use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::vocab::CharVocab;
use crate::error::{Error, Result};

/// What the semantic module reads from the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SemanticSource {
    /// The whole feature sequence flattened into one vector.
    #[default]
    Flattened,
    /// Only the BiLSTM output at the last position.
    LastState,
}

/// Decoder initialisation during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Initialise from the pre-trained embedding of the label.
    GtEmbedding,
    /// Initialise from the predicted semantics.
    #[default]
    Predicted,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::GtEmbedding => "gt-embedding",
            Strategy::Predicted => "predicted",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt-embedding" | "gt" | "1" => Ok(Strategy::GtEmbedding),
            "predicted" | "2" => Ok(Strategy::Predicted),
            other => Err(Error::invalid(format!("unknown strategy {other:?} (expected gt-embedding or predicted)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Output channels of each 3x3 conv layer.
    pub conv_channels: Vec<usize>,
    /// Max-pool window (height, width) after each conv layer; stride equals the window.
    pub pools: Vec<[usize; 2]>,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub semantic_dim: usize,
    pub semantic_hidden: usize,
    pub gru_hidden: usize,
    pub attention_units: usize,
    pub vocab: CharVocab,
    pub use_wes: bool,
    pub use_init: bool,
    #[serde(default)]
    pub semantic_source: SemanticSource,
    pub max_decode_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_h: 32,
            input_w: 128,
            conv_channels: vec![32, 64, 128, 128],
            pools: vec![[2, 2], [2, 2], [2, 2], [4, 1]],
            lstm_hidden: 64,
            lstm_layers: 2,
            semantic_dim: 32,
            semantic_hidden: 256,
            gru_hidden: 128,
            attention_units: 64,
            vocab: CharVocab::printable(),
            use_wes: false,
            use_init: false,
            semantic_source: SemanticSource::Flattened,
            max_decode_len: 24,
        }
    }
}

impl ModelConfig {
    /// A narrow variant of the default that trains in minutes on one core.
    pub fn compact() -> Self {
        ModelConfig {
            conv_channels: vec![8, 16, 16, 32],
            lstm_hidden: 32,
            lstm_layers: 1,
            semantic_hidden: 64,
            gru_hidden: 64,
            attention_units: 32,
            max_decode_len: 16,
            ..ModelConfig::default()
        }
    }

    /// A few-parameter network over 8x16 inputs, for gradient and decoding checks.
    pub fn tiny(vocab: CharVocab) -> Self {
        ModelConfig {
            input_h: 8,
            input_w: 16,
            conv_channels: vec![2, 3],
            pools: vec![[2, 2], [4, 2]],
            lstm_hidden: 3,
            lstm_layers: 1,
            semantic_dim: 4,
            semantic_hidden: 5,
            gru_hidden: 6,
            attention_units: 5,
            vocab,
            use_wes: false,
            use_init: false,
            semantic_source: SemanticSource::Flattened,
            max_decode_len: 4,
        }
    }

    pub fn with_flags(mut self, use_wes: bool, use_init: bool) -> Self {
        self.use_wes = use_wes;
        self.use_init = use_init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_h", self.input_h),
            ("input_w", self.input_w),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_layers", self.lstm_layers),
            ("semantic_dim", self.semantic_dim),
            ("semantic_hidden", self.semantic_hidden),
            ("gru_hidden", self.gru_hidden),
            ("attention_units", self.attention_units),
            ("max_decode_len", self.max_decode_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.conv_channels.is_empty() || self.conv_channels.len() != self.pools.len() {
            return Err(Error::invalid(format!(
                "need one pool per conv layer, got {} layers and {} pools",
                self.conv_channels.len(),
                self.pools.len()
            )));
        }
        if self.conv_channels.contains(&0) || self.pools.iter().any(|p| p[0] == 0 || p[1] == 0) {
            return Err(Error::invalid("conv channels and pool sizes must be positive"));
        }
        let (mut h, mut w) = (self.input_h, self.input_w);
        for p in &self.pools {
            if h % p[0] != 0 || w % p[1] != 0 {
                return Err(Error::invalid(format!(
                    "pool {p:?} does not divide feature map {h}x{w}"
                )));
            }
            h /= p[0];
            w /= p[1];
        }
        if h != 1 {
            return Err(Error::invalid(format!(
                "conv stack must reduce height {} to 1, got {h}",
                self.input_h
            )));
        }
        Ok(())
    }

    /// Encoder sequence length L.
    pub fn seq_len(&self) -> usize {
        self.pools.iter().fold(self.input_w, |w, p| w / p[1])
    }

    /// Channels per encoder position, C = 2 x lstm_hidden.
    pub fn channels(&self) -> usize {
        2 * self.lstm_hidden
    }

    /// Width K of the semantic module input.
    pub fn semantic_input(&self) -> usize {
        match self.semantic_source {
            SemanticSource::Flattened => self.seq_len() * self.channels(),
            SemanticSource::LastState => self.channels(),
        }
    }

    pub fn symbol_embed_dim(&self) -> usize {
        (self.gru_hidden / 4).max(1)
    }

    /// Index of the start-of-sequence decoder input.
    pub fn go_symbol(&self) -> usize {
        self.vocab.len()
    }

    /// Fails unless `other` differs from `self` only in its WES/INIT flags.
    pub fn check_compatible(&self, other: &ModelConfig) -> Result<()> {
        let mut a = self.clone();
        a.use_wes = other.use_wes;
        a.use_init = other.use_init;
        if &a == other {
            return Ok(());
        }
        let mut diffs = Vec::new();
        if self.vocab != other.vocab {
            diffs.push(format!("vocab size {} vs {}", self.vocab.len(), other.vocab.len()));
        }
        if (self.input_h, self.input_w) != (other.input_h, other.input_w) {
            diffs.push(format!(
                "input {}x{} vs {}x{}",
                self.input_h, self.input_w, other.input_h, other.input_w
            ));
        }
        if diffs.is_empty() {
            diffs.push("layer dimensions differ".into());
        }
        Err(Error::ConfigMismatch(diffs.join(", ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.seq_len(), 16);
        assert_eq!(c.channels(), 128);
        assert_eq!(c.semantic_input(), 16 * 128);
        assert_eq!(c.vocab.len(), 97);
        ModelConfig::compact().validate().unwrap();
    }

    #[test]
    fn rejects_bad_pools() {
        let mut c = ModelConfig::default();
        c.pools[3] = [2, 1];
        assert!(c.validate().is_err());
        c.pools.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn compatibility_ignores_flags() {
        let a = ModelConfig::compact();
        assert!(a.check_compatible(&a.clone().with_flags(true, true)).is_ok());
        let mut b = a.clone();
        b.vocab = CharVocab::new(vec!['x']).unwrap();
        assert!(matches!(a.check_compatible(&b), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn strategy_parses() {
        assert_eq!("predicted".parse::<Strategy>().unwrap(), Strategy::Predicted);
        assert_eq!("gt-embedding".parse::<Strategy>().unwrap(), Strategy::GtEmbedding);
        assert!("other".parse::<Strategy>().is_err());
    }
}
