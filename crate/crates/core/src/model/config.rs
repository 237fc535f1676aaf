use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

/// Nonlinearity applied inside the router's residual branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RouterActivation {
    #[default]
    Silu,
    Relu,
}

/// Shapes shared by the target, draft and router.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    /// Decoder blocks in the target; the draft always has one.
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub max_seq_len: usize,
    /// Number of equal vocabulary groups behind the router.
    pub head_groups: usize,
    pub router_top_n: usize,
    pub router_activation: RouterActivation,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            hidden_size: 64,
            num_layers: 4,
            num_heads: 4,
            intermediate_size: 128,
            max_seq_len: 512,
            head_groups: 16,
            router_top_n: 2,
            router_activation: RouterActivation::Silu,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.vocab_size == 0 || self.hidden_size == 0 || self.num_layers == 0 {
            return fail("vocab_size, hidden_size and num_layers must be positive".into());
        }
        if self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            return fail(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if (self.hidden_size / self.num_heads) % 2 != 0 {
            return fail("head dimension must be even for rotary embeddings".into());
        }
        if self.intermediate_size == 0 || self.max_seq_len < 2 {
            return fail("intermediate_size must be positive and max_seq_len at least 2".into());
        }
        if self.head_groups == 0 || self.vocab_size % self.head_groups != 0 {
            return fail(format!(
                "vocab_size {} is not divisible by head_groups {}",
                self.vocab_size, self.head_groups
            ));
        }
        if self.router_top_n == 0 || self.router_top_n > self.head_groups {
            return fail(format!(
                "router_top_n {} must lie in [1, {}]",
                self.router_top_n, self.head_groups
            ));
        }
        if !(self.rope_base > 1.0) || !(self.norm_eps > 0.0) {
            return fail("rope_base must exceed 1 and norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Tokens per router group.
    pub fn group_size(&self) -> usize {
        self.vocab_size / self.head_groups
    }

    /// Group owning a token id.
    pub fn group_of(&self, token: usize) -> usize {
        token / self.group_size()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.group_size(), 16);
        assert_eq!(c.group_of(255), 15);
    }

    #[test]
    fn rejects_uneven_groups_and_heads() {
        let c = ModelConfig { head_groups: 3, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { num_heads: 5, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { router_top_n: 17, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
