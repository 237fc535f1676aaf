//! The drafting-verification loop and the vanilla decoding reference.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::model::{check_tokens, KvCache, ModelError, RouterHead, TargetModel, Visibility};
use crate::tensor::argmax;

use super::tree::DraftSettings;
use super::{
    draft_chain, draft_tree, temperature_probs, verify_greedy, verify_sampling, ChaChaSampler, DraftMode,
    DraftTree, Drafter, EngineConfig, EngineError, HeadMode, Result, RoundInput, Sampler,
};

/// Outcome of one drafting-verification cycle.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CycleRecord {
    pub drafted: usize,
    /// Accepted draft tokens `k`.
    pub accepted: usize,
    /// `k` accepted tokens plus the target's token.
    pub emitted: Vec<usize>,
    /// Entry `n - 1` tells whether the depth-`n` draft was accepted; depths
    /// the cycle never reached are absent.
    pub depth_accepted: Vec<bool>,
    /// LM-head groups evaluated per draft step.
    pub active_groups: Vec<usize>,
    /// Candidates whose distribution was evaluated per draft step.
    pub step_candidates: Vec<usize>,
    pub num_groups: usize,
    pub draft_ms: f64,
    pub verify_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Newly generated tokens (prompt excluded).
    pub tokens: Vec<usize>,
    pub cycles: Vec<CycleRecord>,
}

/// One trace line per cycle.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceLine<'a> {
    pub cycle: usize,
    pub drafted: usize,
    pub accepted: usize,
    pub emitted_tokens: &'a [usize],
    pub active_groups: &'a [usize],
    pub draft_ms: f64,
    pub verify_ms: f64,
}

/// Writes the JSON-lines trace. Without `timings`, both timing fields are
/// zero so that traces of identical runs compare byte for byte.
pub fn write_trace<W: Write>(records: &[CycleRecord], timings: bool, mut out: W) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        let line = TraceLine {
            cycle: i,
            drafted: r.drafted,
            accepted: r.accepted,
            emitted_tokens: &r.emitted,
            active_groups: &r.active_groups,
            draft_ms: if timings { r.draft_ms } else { 0.0 },
            verify_ms: if timings { r.verify_ms } else { 0.0 },
        };
        let s = serde_json::to_string(&line).map_err(|e| EngineError::Io(e.into()))?;
        writeln!(out, "{s}")?;
    }
    Ok(())
}

fn check_prompt(prompt: &[usize], target: &TargetModel) -> Result<()> {
    if prompt.is_empty() {
        return Err(EngineError::Config("the prompt must contain at least one token".into()));
    }
    check_tokens(prompt, target.config().vocab_size)?;
    if prompt.len() > target.config().max_seq_len {
        return Err(ModelError::SequenceTooLong {
            position: prompt.len() - 1,
            max: target.config().max_seq_len,
        }
        .into());
    }
    Ok(())
}

/// Step-by-step state of a speculative generation.
pub struct Session<'a> {
    target: &'a TargetModel,
    drafter: &'a mut dyn Drafter,
    router: Option<&'a RouterHead>,
    cfg: EngineConfig,
    tokens: Vec<usize>,
    cache: KvCache,
    features: Vec<Vec<f64>>,
    sampler: ChaChaSampler,
    produced: usize,
    done: bool,
}

impl<'a> Session<'a> {
    pub fn new(
        prompt: &[usize],
        target: &'a TargetModel,
        drafter: &'a mut dyn Drafter,
        router: Option<&'a RouterHead>,
        cfg: &EngineConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        check_prompt(prompt, target)?;
        if cfg.use_router {
            let r = router.ok_or_else(|| EngineError::Config("use_router is set but no router was given".into()))?;
            let n = r.num_groups();
            if cfg.router_top_n > n || target.config().vocab_size % n != 0 {
                return Err(EngineError::Config(format!(
                    "router_top_n {} with {n} groups over {} tokens",
                    cfg.router_top_n,
                    target.config().vocab_size
                )));
            }
        }
        drafter.reset();
        let mut cache = target.new_cache();
        let mut features = Vec::new();
        if prompt.len() > 1 {
            let out = target.forward(&prompt[..prompt.len() - 1], Some(&mut cache))?;
            features = (0..out.features.rows()).map(|r| out.features.row(r).to_vec()).collect();
        }
        Ok(Self {
            target,
            drafter,
            router: if cfg.use_router { router } else { None },
            sampler: ChaChaSampler::new(cfg.seed),
            cfg: cfg.clone(),
            tokens: prompt.to_vec(),
            cache,
            features,
            produced: 0,
            done: false,
        })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Target cache covering every token but the last.
    pub fn target_cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn is_done(&self) -> bool {
        self.done || self.produced >= self.cfg.max_new_tokens || self.tokens.len() >= self.target.config().max_seq_len
    }

    fn num_groups(&self) -> usize {
        self.router.map_or(self.target.config().head_groups, RouterHead::num_groups)
    }

    /// Runs one cycle; `None` once generation is finished.
    pub fn cycle(&mut self) -> Result<Option<CycleRecord>> {
        if self.is_done() {
            return Ok(None);
        }
        let len = self.tokens.len();
        let max_seq = self.target.config().max_seq_len;
        let depth = self
            .cfg
            .depth()
            .min(self.cfg.max_new_tokens - self.produced - 1)
            .min(max_seq - len - 1);
        let head = match self.router {
            Some(router) => HeadMode::Routed { router, top_n: self.cfg.router_top_n },
            None => HeadMode::Full,
        };
        let settings = DraftSettings { head, temperature: self.cfg.temperature, num_groups: self.num_groups() };

        let t0 = Instant::now();
        let tree = if depth == 0 {
            DraftTree::default()
        } else {
            let input = RoundInput { tokens: &self.tokens, target_features: &self.features };
            match self.cfg.mode {
                DraftMode::Chain => draft_chain(&mut *self.drafter, &input, &settings, depth, &mut self.sampler)?,
                DraftMode::Tree => {
                    let budget = self.cfg.tree_budget.max(depth);
                    draft_tree(&mut *self.drafter, &input, &settings, depth, budget, self.cfg.effective_beam())?
                }
            }
        };
        self.drafter.end_round();
        let draft_ms = t0.elapsed().as_secs_f64() * 1e3;

        let t1 = Instant::now();
        self.cache
            .check_prefix_of(&self.tokens)
            .map_err(|e| EngineError::CacheDivergence(format!("target cache: {e}")))?;
        if self.cache.len() != len - 1 {
            return Err(EngineError::CacheDivergence(format!(
                "target cache holds {} tokens, expected {}",
                self.cache.len(),
                len - 1
            )));
        }
        let mut row_tokens = vec![self.tokens[len - 1]];
        row_tokens.extend(tree.nodes.iter().map(|n| n.token));
        let mut positions = vec![len - 1];
        positions.extend(tree.nodes.iter().map(|n| len - 1 + n.depth));
        let vis = Visibility::tree(self.cache.len(), &tree.verify_parents());
        let out = self.target.forward_rows(&row_tokens, &positions, self.cache.rows(), &vis)?;
        let rows = out.logits.rows();
        let verdict = if self.cfg.temperature == 0.0 {
            let logits: Vec<Vec<f64>> = (0..rows).map(|r| out.logits.row(r).to_vec()).collect();
            verify_greedy(&tree, &logits)?
        } else {
            let probs: Vec<Vec<f64>> =
                (0..rows).map(|r| temperature_probs(out.logits.row(r), self.cfg.temperature)).collect();
            verify_sampling(&tree, &probs, &mut self.sampler)?
        };
        let mut commit_rows = vec![0];
        commit_rows.extend(verdict.accepted.iter().map(|&i| i + 1));
        let commit_tokens: Vec<usize> = commit_rows.iter().map(|&r| row_tokens[r]).collect();
        self.cache.commit(&out.kv, &commit_rows, &commit_tokens)?;
        self.features.extend(commit_rows.iter().map(|&r| out.features.row(r).to_vec()));
        let verify_ms = t1.elapsed().as_secs_f64() * 1e3;

        let mut emitted = verdict.tokens(&tree);
        if let Some(eos) = self.cfg.eos_token {
            if let Some(i) = emitted.iter().position(|&t| t == eos) {
                emitted.truncate(i + 1);
                self.done = true;
            }
        }
        self.tokens.extend_from_slice(&emitted);
        self.produced += emitted.len();

        let k = verdict.accepted.len();
        let mut depth_accepted = vec![true; k];
        if !tree.children(verdict.accepted.last().copied()).is_empty() {
            depth_accepted.push(false);
        }
        Ok(Some(CycleRecord {
            drafted: tree.len(),
            accepted: k,
            emitted,
            depth_accepted,
            active_groups: tree.step_active_groups.clone(),
            step_candidates: tree.step_candidates.clone(),
            num_groups: self.num_groups(),
            draft_ms,
            verify_ms,
        }))
    }
}

/// Speculative generation until `max_new_tokens`, the end token or the
/// context limit.
pub fn generate(
    prompt: &[usize],
    target: &TargetModel,
    drafter: &mut dyn Drafter,
    router: Option<&RouterHead>,
    cfg: &EngineConfig,
) -> Result<Generation> {
    let mut s = Session::new(prompt, target, drafter, router, cfg)?;
    let mut cycles = Vec::new();
    while let Some(c) = s.cycle()? {
        cycles.push(c);
    }
    Ok(Generation { tokens: s.tokens[prompt.len()..].to_vec(), cycles })
}

/// Plain autoregressive decoding with the target: argmax at `T = 0`,
/// otherwise sampling from `softmax(logits / T)`.
pub fn vanilla_generate(prompt: &[usize], target: &TargetModel, cfg: &EngineConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    check_prompt(prompt, target)?;
    let max_seq = target.config().max_seq_len;
    let mut tokens = prompt.to_vec();
    let mut cache = target.new_cache();
    let mut sampler = ChaChaSampler::new(cfg.seed);
    let mut produced = 0;
    while produced < cfg.max_new_tokens && tokens.len() < max_seq {
        let out = target.forward(&tokens, Some(&mut cache))?;
        let logits = out.logits.row(out.logits.rows() - 1);
        let next = if cfg.temperature == 0.0 {
            argmax(logits)
        } else {
            sampler.categorical(&temperature_probs(logits, cfg.temperature))
        };
        tokens.push(next);
        produced += 1;
        if cfg.eos_token == Some(next) {
            break;
        }
    }
    Ok(tokens[prompt.len()..].to_vec())
}
