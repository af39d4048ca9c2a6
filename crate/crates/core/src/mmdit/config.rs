use crate::error::{Error, Result};

/// Shape and seed of a miniature multi-modal transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub prompt_len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub double_blocks: usize,
    pub single_blocks: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            height: 8,
            width: 8,
            prompt_len: 8,
            heads: 4,
            head_dim: 8,
            mlp_hidden: 64,
            double_blocks: 2,
            single_blocks: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Number of image tokens `S = H·W`.
    pub fn image_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn total_blocks(&self) -> usize {
        self.double_blocks + self.single_blocks
    }

    /// Index of the last double-stream block, where subject attention is read.
    pub fn last_double_block(&self) -> usize {
        self.double_blocks - 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::param(m));
        if self.heads == 0 || self.head_dim == 0 {
            return fail("heads and head_dim must be positive".into());
        }
        if self.channels != self.heads * self.head_dim {
            return fail(format!(
                "channels ({}) must equal heads ({}) x head_dim ({})",
                self.channels, self.heads, self.head_dim
            ));
        }
        if self.channels % 2 != 0 {
            return fail(format!(
                "channels ({}) must be even for the sinusoidal embeddings",
                self.channels
            ));
        }
        if self.double_blocks < 1 {
            return fail("at least one double-stream block is required".into());
        }
        if self.height < 2 || self.width < 2 {
            return fail(format!(
                "image grid must be at least 2x2, got {}x{}",
                self.height, self.width
            ));
        }
        if self.prompt_len < 1 {
            return fail("prompt_len must be positive".into());
        }
        if self.mlp_hidden < 1 {
            return fail("mlp_hidden must be positive".into());
        }
        Ok(())
    }
}
