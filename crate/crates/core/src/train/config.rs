use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

/// Draft training recipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DraftMethod {
    /// Single step, regression and classification only.
    Eagle,
    /// Multi-step rollout without the alignment term.
    Hass,
    /// Multi-step rollout with cross-step alignment.
    Csra,
}

impl DraftMethod {
    pub fn name(self) -> &'static str {
        match self {
            DraftMethod::Eagle => "eagle",
            DraftMethod::Hass => "hass",
            DraftMethod::Csra => "csra",
        }
    }
}

impl std::str::FromStr for DraftMethod {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eagle" => Ok(Self::Eagle),
            "hass" => Ok(Self::Hass),
            "csra" => Ok(Self::Csra),
            other => Err(TrainError::Config(format!("unknown method {other:?}; expected eagle, hass or csra"))),
        }
    }
}

/// Draft-model training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub w_reg: f64,
    pub w_cls: f64,
    pub w_csra: f64,
    pub csra_temperature: f64,
    /// Count the target feature at the same position as a positive.
    pub csra_target_positive: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Training sequences drawn from the corpus and reused every epoch.
    pub num_sequences: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub smooth_l1_beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            w_reg: 0.5,
            w_cls: 0.1,
            w_csra: 0.15,
            csra_temperature: 0.07,
            csra_target_positive: true,
            steps: 3,
            batch_size: 8,
            seq_len: 32,
            num_sequences: 1024,
            epochs: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 20,
            clip_norm: 1.0,
            smooth_l1_beta: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.w_reg < 0.0 || self.w_cls < 0.0 || self.w_csra < 0.0 {
            return fail("loss weights must be nonnegative");
        }
        if !(self.csra_temperature > 0.0) {
            return fail("csra_temperature must be positive");
        }
        if self.steps == 0 {
            return fail("steps must be at least 1");
        }
        if self.w_csra > 0.0 && self.steps < 2 {
            return fail("the alignment loss needs steps >= 2 (set w_csra = 0 for single-step training)");
        }
        if self.batch_size == 0 || self.seq_len < 2 || self.num_sequences == 0 {
            return fail("batch_size, num_sequences must be positive and seq_len at least 2");
        }
        if self.steps >= self.seq_len {
            return fail("steps must be smaller than seq_len");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(self.clip_norm > 0.0) || !(self.smooth_l1_beta > 0.0) {
            return fail("lr, clip_norm and smooth_l1_beta must be positive; weight_decay nonnegative");
        }
        Ok(())
    }

    /// Applies a method's fixed settings on top of this config.
    pub fn for_method(&self, method: DraftMethod) -> Result<Self> {
        let mut c = self.clone();
        match method {
            DraftMethod::Eagle => {
                c.steps = 1;
                c.w_csra = 0.0;
            }
            DraftMethod::Hass => {
                if c.steps < 2 {
                    return Err(TrainError::Config("hass needs steps >= 2".into()));
                }
                c.w_csra = 0.0;
            }
            DraftMethod::Csra => {
                if c.steps < 2 {
                    return Err(TrainError::Config("csra needs steps >= 2".into()));
                }
                if !(c.w_csra > 0.0) {
                    return Err(TrainError::Config("csra needs w_csra > 0".into()));
                }
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Target pretraining settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetTrainConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub train_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TargetTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            seq_len: 32,
            train_steps: 2000,
            lr: 3e-3,
            weight_decay: 0.01,
            warmup_steps: 40,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TargetTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len < 2 || self.train_steps == 0 {
            return Err(TrainError::Config("batch_size, train_steps positive and seq_len >= 2 required".into()));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(TrainError::Config("lr and clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Router (second stage) training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 8,
            lr: 3e-3,
            weight_decay: 0.0,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_alignment_is_rejected() {
        let c = TrainConfig { steps: 1, ..Default::default() };
        assert!(matches!(c.validate(), Err(TrainError::Config(_))));
        let c = TrainConfig { steps: 1, ..Default::default() };
        assert!(c.for_method(DraftMethod::Csra).is_err());
        let e = c.for_method(DraftMethod::Eagle).unwrap();
        assert_eq!((e.steps, e.w_csra), (1, 0.0));
    }

    #[test]
    fn method_settings() {
        let c = TrainConfig::default();
        let h = c.for_method(DraftMethod::Hass).unwrap();
        assert_eq!((h.steps, h.w_csra), (3, 0.0));
        let s = c.for_method(DraftMethod::Csra).unwrap();
        assert_eq!((s.steps, s.w_csra), (3, 0.15));
        assert_eq!("hass".parse::<DraftMethod>().unwrap(), DraftMethod::Hass);
    }
}
