use serde::{Deserialize, Serialize};

use super::{EngineError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DraftMode {
    #[default]
    Chain,
    Tree,
}

impl std::str::FromStr for DraftMode {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chain" => Ok(Self::Chain),
            "tree" => Ok(Self::Tree),
            other => Err(EngineError::Config(format!("unknown draft mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub mode: DraftMode,
    /// Draft depth per cycle in chain mode.
    pub gamma: usize,
    pub tree_depth: usize,
    /// Total candidate tokens per tree.
    pub tree_budget: usize,
    /// Per-depth beam width while expanding a tree; `None` uses
    /// `ceil(tree_budget / tree_depth)`.
    pub beam_width: Option<usize>,
    pub temperature: f64,
    pub use_router: bool,
    pub router_top_n: usize,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub eos_token: Option<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: DraftMode::Chain,
            gamma: 6,
            tree_depth: 6,
            tree_budget: 60,
            beam_width: None,
            temperature: 0.0,
            use_router: false,
            router_top_n: 2,
            seed: 0,
            max_new_tokens: 64,
            eos_token: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EngineError::Config(m.into()));
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return bad("temperature must be finite and nonnegative");
        }
        match self.mode {
            DraftMode::Chain if self.gamma == 0 => return bad("gamma must be at least 1"),
            DraftMode::Tree if self.tree_depth == 0 => return bad("tree_depth must be at least 1"),
            DraftMode::Tree if self.tree_budget < self.tree_depth => {
                return bad("tree_budget must be at least tree_depth")
            }
            _ => {}
        }
        if self.beam_width == Some(0) {
            return bad("beam_width must be positive");
        }
        if self.use_router && self.router_top_n == 0 {
            return bad("router_top_n must be at least 1");
        }
        Ok(())
    }

    /// Number of draft levels per cycle.
    pub fn depth(&self) -> usize {
        match self.mode {
            DraftMode::Chain => self.gamma,
            DraftMode::Tree => self.tree_depth,
        }
    }

    pub fn effective_beam(&self) -> usize {
        self.beam_width.unwrap_or_else(|| self.tree_budget.div_ceil(self.tree_depth.max(1)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_guards_fire() {
        let c = EngineConfig::default();
        c.validate().unwrap();
        assert_eq!(EngineConfig { mode: DraftMode::Tree, ..c.clone() }.effective_beam(), 10);
        assert!(EngineConfig { gamma: 0, ..c.clone() }.validate().is_err());
        assert!(EngineConfig { mode: DraftMode::Tree, tree_budget: 3, ..c.clone() }.validate().is_err());
        assert!(EngineConfig { temperature: -1.0, ..c }.validate().is_err());
    }
}
