use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the past-context window of a chunk is anchored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PastAnchor {
    /// `P` tokens before the chunk's first token (cache-style streaming).
    #[default]
    ChunkStart,
    /// `P` tokens before each query token.
    Token,
}

/// Chunking and architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamingConfig {
    /// Chunk size `C` in grapheme tokens.
    pub chunk_size: usize,
    /// Past context `P` in tokens.
    pub past_context: usize,
    /// Minimum look-ahead `M` in tokens, first attention layer only.
    pub min_lookahead: usize,
    /// Frames per token `U`.
    pub upsample: usize,
    pub n_layers: usize,
    /// 1-based layer indices that feed an intermediate CTC head.
    pub intermediate_layers: Vec<usize>,
    pub intermediate_weight: f64,
    pub d_model: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub ff_dim: usize,
    pub past_anchor: PastAnchor,
    /// Relative-position bias clip distance, in tokens.
    pub rel_pos_clip: usize,
}

impl Default for StreamingConfig {
    fn default() -> Self {
        Self {
            chunk_size: 5,
            past_context: 10,
            min_lookahead: 1,
            upsample: 8,
            n_layers: 4,
            intermediate_layers: vec![2],
            intermediate_weight: 1.0 / 3.0,
            d_model: 128,
            n_heads: 4,
            conv_kernel: 8,
            ff_dim: 256,
            past_anchor: PastAnchor::ChunkStart,
            rel_pos_clip: 16,
        }
    }
}

impl StreamingConfig {
    /// Eight layers of width 512 with intermediate heads at layers 2, 4, 6.
    pub fn full_scale() -> Self {
        Self {
            n_layers: 8,
            intermediate_layers: vec![2, 4, 6],
            d_model: 512,
            n_heads: 8,
            ff_dim: 2048,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.chunk_size == 0 {
            return bad("chunk_size must be at least 1".into());
        }
        if self.upsample == 0 {
            return bad("upsample must be at least 1".into());
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if let Some(&l) = self.intermediate_layers.iter().find(|&&l| l == 0 || l >= self.n_layers) {
            return bad(format!(
                "intermediate layer {l} outside 1..{} (n_layers = {})",
                self.n_layers.saturating_sub(1),
                self.n_layers
            ));
        }
        let mut sorted = self.intermediate_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.intermediate_layers.len() {
            return bad("intermediate layers repeat".into());
        }
        if !(self.intermediate_weight.is_finite() && self.intermediate_weight >= 0.0) {
            return bad("intermediate_weight must be finite and non-negative".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.conv_kernel == 0 || self.ff_dim == 0 {
            return bad("conv_kernel and ff_dim must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Tokens the streaming engine needs before it can run the first chunk.
    pub fn wait_tokens(&self) -> usize {
        self.chunk_size + self.min_lookahead
    }

    pub fn is_intermediate(&self, layer: usize) -> bool {
        self.intermediate_layers.contains(&layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        StreamingConfig::default().validate().unwrap();
        StreamingConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let base = StreamingConfig::default();
        for cfg in [
            StreamingConfig { chunk_size: 0, ..base.clone() },
            StreamingConfig { upsample: 0, ..base.clone() },
            StreamingConfig { intermediate_layers: vec![4], ..base.clone() },
            StreamingConfig { intermediate_layers: vec![0], ..base.clone() },
            StreamingConfig { n_heads: 3, ..base.clone() },
            StreamingConfig { intermediate_weight: -1.0, ..base.clone() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn lookahead_may_exceed_chunk() {
        let cfg = StreamingConfig { chunk_size: 2, min_lookahead: 5, ..Default::default() };
        cfg.validate().unwrap();
        assert_eq!(cfg.wait_tokens(), 7);
    }
}
