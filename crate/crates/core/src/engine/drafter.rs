//! Sources of draft distributions.
//!
//! A drafter is synchronised with the committed sequence at the start of a
//! round, then asked for next-token scores of newly created tree nodes.
//! Speculative rows live only until [`Drafter::end_round`].

use crate::model::{DraftModel, KvCache, KvRows, ModelError, TargetModel, Visibility};
use crate::tensor::Tensor;

use super::{EngineError, Result};

/// Raw output of one draft step.
#[derive(Clone, Debug, PartialEq)]
pub enum DraftScores {
    /// Hidden state to be projected by the LM head (or router).
    Features(Vec<f64>),
    /// Full-vocabulary logits.
    Logits(Vec<f64>),
}

/// Committed state handed to a drafter at the start of a round.
pub struct RoundInput<'a> {
    /// Full sequence so far; the last token has not been through the target.
    pub tokens: &'a [usize],
    /// Target features of every position except the last.
    pub target_features: &'a [Vec<f64>],
}

pub trait Drafter {
    /// Syncs with `input` and returns the scores of the first draft token,
    /// or `None` when this drafter cannot draft yet.
    fn begin_round(&mut self, input: &RoundInput<'_>) -> Result<Option<DraftScores>>;
    /// Adds nodes `(parent, token)` (parent `None` is the round root; node
    /// ids count up from 0 across calls) and returns each node's
    /// next-token scores.
    fn extend(&mut self, nodes: &[(Option<usize>, usize)]) -> Result<Vec<DraftScores>>;
    /// Drops speculative state.
    fn end_round(&mut self);
    /// Forgets everything, ready for an unrelated prompt.
    fn reset(&mut self);
    /// LM head used for [`DraftScores::Features`].
    fn lm_head(&self) -> Option<&Tensor> {
        None
    }
}

/// Speculative rows stacked after a committed cache.
struct SpecRows {
    kv: KvRows,
    parent: Vec<Option<usize>>,
}

impl SpecRows {
    fn new(layers: usize, width: usize) -> Self {
        Self { kv: KvRows::empty(layers, width), parent: Vec::new() }
    }

    fn clear(&mut self) {
        self.kv.truncate(0);
        self.parent.clear();
    }

    /// Keys: committed rows, existing speculative rows, then the new rows.
    /// A new row sees every committed row, its speculative ancestors and
    /// itself.
    fn visibility(&self, committed: usize, new_parents: &[Option<usize>]) -> Visibility {
        let spec = self.parent.len();
        let keys = committed + spec + new_parents.len();
        let mut allowed = vec![false; new_parents.len() * keys];
        for (i, p) in new_parents.iter().enumerate() {
            let row = &mut allowed[i * keys..(i + 1) * keys];
            row[..committed].iter_mut().for_each(|a| *a = true);
            row[committed + spec + i] = true;
            let mut cur = *p;
            while let Some(c) = cur {
                row[committed + c] = true;
                cur = self.parent[c];
            }
        }
        Visibility::Explicit(allowed)
    }

    fn past(&self, committed: &KvRows) -> Result<KvRows> {
        let mut all = committed.clone();
        all.append_all(&self.kv)?;
        Ok(all)
    }

    fn push(&mut self, kv: &KvRows, parents: &[Option<usize>]) -> Result<Vec<usize>> {
        let start = self.parent.len();
        self.kv.append_all(kv)?;
        self.parent.extend_from_slice(parents);
        Ok((start..self.parent.len()).collect())
    }
}

fn bad_input(msg: String) -> EngineError {
    EngineError::Model(ModelError::State(msg))
}

/// The trained feature-level draft model.
///
/// Draft row `r` pairs token `t_{r+1}` with the target feature at position
/// `r`; committed rows only ever use target features, so rejected branches
/// never reach the draft cache.
pub struct EagleDrafter<'a> {
    draft: &'a DraftModel,
    cache: KvCache,
    root_feature: Vec<f64>,
    root_pos: usize,
    spec: SpecRows,
    node_row: Vec<usize>,
    node_depth: Vec<usize>,
    node_feature: Vec<Vec<f64>>,
}

impl<'a> EagleDrafter<'a> {
    pub fn new(draft: &'a DraftModel) -> Self {
        let d = draft.config().hidden_size;
        Self {
            draft,
            cache: draft.new_cache(),
            root_feature: Vec::new(),
            root_pos: 0,
            spec: SpecRows::new(1, d),
            node_row: Vec::new(),
            node_depth: Vec::new(),
            node_feature: Vec::new(),
        }
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }
}

impl Drafter for EagleDrafter<'_> {
    fn begin_round(&mut self, input: &RoundInput<'_>) -> Result<Option<DraftScores>> {
        self.end_round();
        let len = input.tokens.len();
        if len < 2 {
            return Ok(None);
        }
        if input.target_features.len() < len - 1 {
            return Err(bad_input(format!(
                "{} target features for {len} tokens",
                input.target_features.len()
            )));
        }
        let row_tokens = &input.tokens[1..len];
        self.cache
            .check_prefix_of(row_tokens)
            .map_err(|e| EngineError::CacheDivergence(format!("draft cache: {e}")))?;
        let start = self.cache.len();
        if start < len - 1 {
            let d = self.draft.config().hidden_size;
            let feats: Vec<f64> = input.target_features[start..len - 1].iter().flatten().copied().collect();
            let n = len - 1 - start;
            let prev = Tensor::new(vec![n, d], feats).map_err(ModelError::from)?;
            let positions: Vec<usize> = (start..len - 1).collect();
            let new = &row_tokens[start..];
            let out = self.draft.forward_rows(new, &prev, &positions, self.cache.rows(), &Visibility::Causal)?;
            let all: Vec<usize> = (0..n).collect();
            self.cache.commit(&out.kv, &all, new)?;
            self.root_feature = out.features.row(n - 1).to_vec();
        }
        self.root_pos = len - 2;
        Ok(Some(DraftScores::Features(self.root_feature.clone())))
    }

    fn extend(&mut self, nodes: &[(Option<usize>, usize)]) -> Result<Vec<DraftScores>> {
        if nodes.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.draft.config().hidden_size;
        let mut prev = Vec::with_capacity(nodes.len() * d);
        let mut positions = Vec::with_capacity(nodes.len());
        let mut spec_parents = Vec::with_capacity(nodes.len());
        let mut depths = Vec::with_capacity(nodes.len());
        for &(parent, _) in nodes {
            let (feat, depth, row) = match parent {
                None => (&self.root_feature, 1, None),
                Some(p) if p < self.node_row.len() => {
                    (&self.node_feature[p], self.node_depth[p] + 1, Some(self.node_row[p]))
                }
                Some(p) => return Err(EngineError::Contract(format!("unknown parent node {p}"))),
            };
            prev.extend_from_slice(feat);
            positions.push(self.root_pos + depth);
            spec_parents.push(row);
            depths.push(depth);
        }
        let tokens: Vec<usize> = nodes.iter().map(|n| n.1).collect();
        let prev = Tensor::new(vec![nodes.len(), d], prev).map_err(ModelError::from)?;
        let vis = self.spec.visibility(self.cache.len(), &spec_parents);
        let past = self.spec.past(self.cache.rows())?;
        let out = self.draft.forward_rows(&tokens, &prev, &positions, &past, &vis)?;
        let rows = self.spec.push(&out.kv, &spec_parents)?;
        let mut scores = Vec::with_capacity(nodes.len());
        for (i, row) in rows.into_iter().enumerate() {
            let f = out.features.row(i).to_vec();
            self.node_row.push(row);
            self.node_depth.push(depths[i]);
            self.node_feature.push(f.clone());
            scores.push(DraftScores::Features(f));
        }
        Ok(scores)
    }

    fn end_round(&mut self) {
        self.spec.clear();
        self.node_row.clear();
        self.node_depth.clear();
        self.node_feature.clear();
    }

    fn reset(&mut self) {
        self.end_round();
        self.cache = self.draft.new_cache();
        self.root_feature.clear();
    }

    fn lm_head(&self) -> Option<&Tensor> {
        Some(self.draft.lm_head())
    }
}

/// Drafts with the target itself, so every draft distribution equals the
/// target's; the perfect-drafter reference.
pub struct MirrorDrafter<'a> {
    target: &'a TargetModel,
    cache: KvCache,
    root_pos: usize,
    spec: SpecRows,
    node_row: Vec<usize>,
    node_depth: Vec<usize>,
}

impl<'a> MirrorDrafter<'a> {
    pub fn new(target: &'a TargetModel) -> Self {
        let c = target.config();
        Self {
            target,
            cache: target.new_cache(),
            root_pos: 0,
            spec: SpecRows::new(c.num_layers, c.hidden_size),
            node_row: Vec::new(),
            node_depth: Vec::new(),
        }
    }

    fn run(&mut self, tokens: &[usize], positions: &[usize], parents: &[Option<usize>]) -> Result<Vec<DraftScores>> {
        let vis = self.spec.visibility(self.cache.len(), parents);
        let past = self.spec.past(self.cache.rows())?;
        let out = self.target.forward_rows(tokens, positions, &past, &vis)?;
        self.spec.push(&out.kv, parents)?;
        Ok((0..tokens.len()).map(|i| DraftScores::Logits(out.logits.row(i).to_vec())).collect())
    }
}

impl Drafter for MirrorDrafter<'_> {
    fn begin_round(&mut self, input: &RoundInput<'_>) -> Result<Option<DraftScores>> {
        self.end_round();
        let len = input.tokens.len();
        if len == 0 {
            return Err(bad_input("empty context".into()));
        }
        let committed = &input.tokens[..len - 1];
        self.cache
            .check_prefix_of(committed)
            .map_err(|e| EngineError::CacheDivergence(format!("mirror cache: {e}")))?;
        if self.cache.len() < committed.len() {
            self.target.forward(committed, Some(&mut self.cache))?;
        }
        self.root_pos = len - 1;
        let mut s = self.run(&input.tokens[len - 1..], &[len - 1], &[None])?;
        Ok(s.pop())
    }

    fn extend(&mut self, nodes: &[(Option<usize>, usize)]) -> Result<Vec<DraftScores>> {
        if nodes.is_empty() {
            return Ok(Vec::new());
        }
        let mut parents = Vec::with_capacity(nodes.len());
        let mut depths = Vec::with_capacity(nodes.len());
        for &(p, _) in nodes {
            match p {
                // Speculative row 0 is the round root.
                None => {
                    parents.push(Some(0));
                    depths.push(1);
                }
                Some(p) if p < self.node_row.len() => {
                    parents.push(Some(self.node_row[p]));
                    depths.push(self.node_depth[p] + 1);
                }
                Some(p) => return Err(EngineError::Contract(format!("unknown parent node {p}"))),
            }
        }
        let tokens: Vec<usize> = nodes.iter().map(|n| n.1).collect();
        let positions: Vec<usize> = depths.iter().map(|d| self.root_pos + d).collect();
        let first = self.spec.parent.len();
        let scores = self.run(&tokens, &positions, &parents)?;
        self.node_row.extend(first..first + nodes.len());
        self.node_depth.extend(depths);
        Ok(scores)
    }

    fn end_round(&mut self) {
        self.spec.clear();
        self.node_row.clear();
        self.node_depth.clear();
    }

    fn reset(&mut self) {
        self.end_round();
        self.cache = self.target.new_cache();
    }
}

/// Proposes the target's least likely token at every step (negated
/// target logits); the worst-case reference.
pub struct AdversarialDrafter<'a> {
    inner: MirrorDrafter<'a>,
}

impl<'a> AdversarialDrafter<'a> {
    pub fn new(target: &'a TargetModel) -> Self {
        Self { inner: MirrorDrafter::new(target) }
    }
}

fn negate(s: DraftScores) -> DraftScores {
    match s {
        DraftScores::Logits(l) => DraftScores::Logits(l.into_iter().map(|v| -v).collect()),
        other => other,
    }
}

impl Drafter for AdversarialDrafter<'_> {
    fn begin_round(&mut self, input: &RoundInput<'_>) -> Result<Option<DraftScores>> {
        Ok(self.inner.begin_round(input)?.map(negate))
    }

    fn extend(&mut self, nodes: &[(Option<usize>, usize)]) -> Result<Vec<DraftScores>> {
        Ok(self.inner.extend(nodes)?.into_iter().map(negate).collect())
    }

    fn end_round(&mut self) {
        self.inner.end_round();
    }

    fn reset(&mut self) {
        self.inner.reset();
    }
}
