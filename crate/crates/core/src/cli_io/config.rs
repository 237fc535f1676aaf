use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{DraftMode, EngineConfig};
use crate::model::ModelConfig;
use crate::train::{Corpus, DraftMethod, RouterTrainConfig, TargetTrainConfig, TrainConfig};

use super::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Raw byte corpus; empty selects the seeded Markov corpus.
    pub corpus: PathBuf,
    pub weights_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::new(),
            weights_dir: PathBuf::from("runs/weights"),
            output_dir: PathBuf::from("runs/out"),
        }
    }
}

/// Synthetic corpus used when no corpus file is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkovConfig {
    pub alphabet: usize,
    pub length: usize,
    pub seed: u64,
}

impl Default for MarkovConfig {
    fn default() -> Self {
        Self { alphabet: 32, length: 200_000, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Prompts drawn from the held-out split when no prompt file is given.
    pub num_prompts: usize,
    pub prompt_len: usize,
    pub prompt_seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { num_prompts: 20, prompt_len: 16, prompt_seed: 99 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagConfig {
    pub steps: usize,
    pub temperature: f64,
    pub eval_sequences: usize,
    pub seed: u64,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self { steps: 4, temperature: 0.07, eval_sequences: 32, seed: 77 }
    }
}

/// Everything a command needs. Stage seeds are offsets added to the
/// run-level `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Drafter used by `train-router`, `generate`, `bench` and `diag-infonce`.
    pub draft_method: DraftMethod,
    /// Writes wall-clock fields into traces and metrics; off gives
    /// byte-identical reruns.
    pub record_timings: bool,
    pub paths: PathsConfig,
    pub markov: MarkovConfig,
    pub model: ModelConfig,
    pub target_train: TargetTrainConfig,
    pub draft_train: TrainConfig,
    pub router_train: RouterTrainConfig,
    pub engine: EngineConfig,
    pub bench: BenchConfig,
    pub diag: DiagConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            draft_method: DraftMethod::Csra,
            record_timings: true,
            paths: PathsConfig::default(),
            markov: MarkovConfig::default(),
            model: ModelConfig::default(),
            target_train: TargetTrainConfig::default(),
            draft_train: TrainConfig::default(),
            router_train: RouterTrainConfig::default(),
            engine: EngineConfig::default(),
            bench: BenchConfig::default(),
            diag: DiagConfig::default(),
        }
    }
}

/// Command-line values that replace config entries when present.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<DraftMethod>,
    pub steps: Option<usize>,
    pub groups: Option<usize>,
    pub top_n: Option<usize>,
    pub mode: Option<DraftMode>,
    pub tree_depth: Option<usize>,
    pub tree_budget: Option<usize>,
    pub temperature: Option<f64>,
    pub use_router: bool,
    pub max_new_tokens: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.method {
            self.draft_method = v;
        }
        if let Some(v) = o.steps {
            self.draft_train.steps = v;
        }
        if let Some(v) = o.groups {
            self.model.head_groups = v;
        }
        if let Some(v) = o.top_n {
            self.engine.router_top_n = v;
            self.model.router_top_n = v;
        }
        if let Some(v) = o.mode {
            self.engine.mode = v;
        }
        if let Some(v) = o.tree_depth {
            self.engine.tree_depth = v;
        }
        if let Some(v) = o.tree_budget {
            self.engine.tree_budget = v;
        }
        if let Some(v) = o.temperature {
            self.engine.temperature = v;
        }
        if o.use_router {
            self.engine.use_router = true;
        }
        if let Some(v) = o.max_new_tokens {
            self.engine.max_new_tokens = v;
        }
    }

    /// Checks every section and the cross-section constraints.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.target_train.validate()?;
        self.draft_train_cfg(self.draft_method)?;
        self.engine.validate()?;
        let r = &self.router_train;
        if r.batch_size == 0 || r.epochs == 0 || !(r.lr > 0.0) {
            return Err(CliError::Config("router_train batch_size, epochs and lr must be positive".into()));
        }
        if self.engine.use_router && self.engine.router_top_n > self.model.head_groups {
            return Err(CliError::Config(format!(
                "router_top_n {} exceeds head_groups {}",
                self.engine.router_top_n, self.model.head_groups
            )));
        }
        if self.target_train.seq_len > self.model.max_seq_len || self.draft_train.seq_len > self.model.max_seq_len {
            return Err(CliError::Config("training seq_len exceeds max_seq_len".into()));
        }
        if self.bench.num_prompts == 0 || self.bench.prompt_len == 0 {
            return Err(CliError::Config("bench needs at least one prompt of at least one token".into()));
        }
        if self.diag.steps < 2 || !(self.diag.temperature > 0.0) || self.diag.eval_sequences == 0 {
            return Err(CliError::Config("diag needs steps >= 2, a positive temperature and sequences".into()));
        }
        if self.paths.corpus.as_os_str().is_empty() && self.markov.alphabet > self.model.vocab_size {
            return Err(CliError::Config("markov alphabet exceeds the vocabulary".into()));
        }
        Ok(())
    }

    pub fn target_train_cfg(&self) -> TargetTrainConfig {
        TargetTrainConfig { seed: self.seed.wrapping_add(self.target_train.seed), ..self.target_train.clone() }
    }

    /// Draft settings with the method's fixed values applied.
    pub fn draft_train_cfg(&self, method: DraftMethod) -> Result<TrainConfig> {
        let c = TrainConfig { seed: self.seed.wrapping_add(self.draft_train.seed), ..self.draft_train.clone() };
        Ok(c.for_method(method)?)
    }

    pub fn router_train_cfg(&self) -> RouterTrainConfig {
        RouterTrainConfig { seed: self.seed.wrapping_add(self.router_train.seed), ..self.router_train.clone() }
    }

    pub fn engine_cfg(&self) -> EngineConfig {
        EngineConfig { seed: self.seed.wrapping_add(self.engine.seed), ..self.engine.clone() }
    }

    pub fn corpus(&self) -> Result<Corpus> {
        if self.paths.corpus.as_os_str().is_empty() {
            Ok(Corpus::markov(self.markov.alphabet, self.markov.length, self.markov.seed)?)
        } else {
            Ok(Corpus::from_file(&self.paths.corpus)?)
        }
    }

    pub fn target_path(&self) -> PathBuf {
        self.paths.weights_dir.join("target.bin")
    }

    pub fn draft_path(&self, method: DraftMethod) -> PathBuf {
        self.paths.weights_dir.join(format!("draft_{}.bin", method.name()))
    }

    pub fn router_path(&self) -> PathBuf {
        self.paths
            .weights_dir
            .join(format!("router_{}_g{}.bin", self.draft_method.name(), self.model.head_groups))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_example_matches_defaults() {
        let text = include_str!("../../../../configs/default.toml");
        assert_eq!(RunConfig::from_toml(text).unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_round_trips() {
        let mut c = RunConfig::default();
        c.engine.beam_width = Some(7);
        c.engine.eos_token = Some(3);
        c.draft_method = DraftMethod::Hass;
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = RunConfig::from_toml("seed = 1\nbogus = 2\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = RunConfig::from_toml("[engine]\ngama = 3\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn overrides_and_stage_seeds() {
        let mut c = RunConfig::default();
        c.draft_train.seed = 5;
        c.apply(&Overrides { seed: Some(10), steps: Some(4), groups: Some(8), use_router: true, ..Default::default() });
        assert_eq!(c.draft_train_cfg(DraftMethod::Csra).unwrap().seed, 15);
        assert_eq!(c.draft_train_cfg(DraftMethod::Csra).unwrap().steps, 4);
        assert_eq!(c.draft_train_cfg(DraftMethod::Eagle).unwrap().steps, 1);
        assert_eq!(c.engine_cfg().seed, 10);
        assert!(c.engine.use_router);
        assert!(c.router_path().ends_with("router_csra_g8.bin"));
        c.validate().unwrap();
    }

    #[test]
    fn csra_with_one_step_is_a_config_error() {
        let mut c = RunConfig::default();
        c.draft_train.steps = 1;
        assert_eq!(c.draft_train_cfg(DraftMethod::Csra).unwrap_err().exit_code(), 2);
    }
}
