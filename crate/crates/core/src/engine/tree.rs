//! Chain and tree drafting.

use std::collections::BTreeSet;

use crate::tensor::argmax;

use super::{scores_to_dist, DraftDist, DraftScores, Drafter, EngineError, HeadMode, Result, RoundInput, Sampler};

#[derive(Clone, Debug, PartialEq)]
pub struct DraftNode {
    pub token: usize,
    /// `None` for children of the root (the last committed token).
    pub parent: Option<usize>,
    /// 1 for children of the root.
    pub depth: usize,
    /// Cumulative draft log-probability of the path ending here.
    pub log_prob: f64,
    /// Index into [`DraftTree::dists`] of the distribution this token was
    /// drafted from.
    pub dist: usize,
}

/// Draft candidates of one cycle; parents always precede their children.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DraftTree {
    pub nodes: Vec<DraftNode>,
    pub dists: Vec<DraftDist>,
    /// Tokens were sampled from their recorded distributions (chain at
    /// `T > 0`); otherwise they were chosen deterministically.
    pub sampled: bool,
    /// LM-head groups evaluated at each draft step (union over the step's
    /// candidates).
    pub step_active_groups: Vec<usize>,
    /// Number of nodes whose distribution was evaluated at each step.
    pub step_candidates: Vec<usize>,
}

impl DraftTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn children(&self, parent: Option<usize>) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].parent == parent).collect()
    }

    /// Token path from the root to `node`.
    pub fn path_tokens(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = Some(node);
        while let Some(c) = cur {
            out.push(self.nodes[c].token);
            cur = self.nodes[c].parent;
        }
        out.reverse();
        out
    }

    /// Parent indices for a forward pass over `[root] + nodes`.
    pub fn verify_parents(&self) -> Vec<Option<usize>> {
        std::iter::once(None)
            .chain(self.nodes.iter().map(|n| Some(n.parent.map_or(0, |p| p + 1))))
            .collect()
    }

    fn record_step(&mut self, dists: &[usize], num_groups: usize) {
        let mut union = BTreeSet::new();
        let mut full = false;
        for &d in dists {
            match &self.dists[d].groups {
                Some(g) => union.extend(g.iter().copied()),
                None => full = true,
            }
        }
        self.step_active_groups.push(if full { num_groups } else { union.len() });
        self.step_candidates.push(dists.len());
    }
}

/// Shared settings of one drafting call.
#[derive(Clone, Copy, Debug)]
pub struct DraftSettings<'a> {
    pub head: HeadMode<'a>,
    pub temperature: f64,
    /// Group count used when a step evaluates the whole head.
    pub num_groups: usize,
}

fn to_dist(drafter: &dyn Drafter, s: &DraftScores, cfg: &DraftSettings<'_>) -> Result<DraftDist> {
    scores_to_dist(s, drafter.lm_head(), cfg.head, cfg.temperature)
}

/// Drafts `gamma` tokens one after another: sampled at `T > 0`, argmax at
/// `T = 0`. Returns an empty tree when the drafter cannot draft yet.
pub fn draft_chain(
    drafter: &mut dyn Drafter,
    input: &RoundInput<'_>,
    cfg: &DraftSettings<'_>,
    gamma: usize,
    sampler: &mut dyn Sampler,
) -> Result<DraftTree> {
    if gamma == 0 {
        return Err(EngineError::Config("gamma must be at least 1".into()));
    }
    let mut tree = DraftTree { sampled: cfg.temperature > 0.0, ..Default::default() };
    let Some(root) = drafter.begin_round(input)? else {
        return Ok(tree);
    };
    tree.dists.push(to_dist(drafter, &root, cfg)?);
    tree.record_step(&[0], cfg.num_groups);
    let mut parent = None;
    let mut lp = 0.0;
    for depth in 1..=gamma {
        let di = tree.dists.len() - 1;
        let probs = &tree.dists[di].probs;
        let token = if tree.sampled { sampler.categorical(probs) } else { argmax(probs) };
        lp += probs[token].ln();
        tree.nodes.push(DraftNode { token, parent, depth, log_prob: lp, dist: di });
        let id = tree.nodes.len() - 1;
        if depth < gamma {
            let s = drafter.extend(&[(parent, token)])?;
            tree.dists.push(to_dist(drafter, &s[0], cfg)?);
            let last = tree.dists.len() - 1;
            tree.record_step(&[last], cfg.num_groups);
        }
        parent = Some(id);
    }
    Ok(tree)
}

/// Tokens of `probs` ranked by probability (lowest id first on ties),
/// positive entries only, at most `k`.
fn top_tokens(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Dynamic tree: per depth, the children of the current frontier compete
/// for `beam` slots by cumulative draft log-probability; the finished tree
/// keeps the `budget` best nodes overall. Ties favour shallower, then
/// earlier nodes, so the kept set is closed under taking ancestors.
pub fn draft_tree(
    drafter: &mut dyn Drafter,
    input: &RoundInput<'_>,
    cfg: &DraftSettings<'_>,
    depth: usize,
    budget: usize,
    beam: usize,
) -> Result<DraftTree> {
    if depth == 0 || budget < depth || beam == 0 {
        return Err(EngineError::Config(format!(
            "tree needs depth >= 1, budget >= depth and beam >= 1 (depth {depth}, budget {budget}, beam {beam})"
        )));
    }
    let mut tree = DraftTree::default();
    let Some(root) = drafter.begin_round(input)? else {
        return Ok(tree);
    };
    tree.dists.push(to_dist(drafter, &root, cfg)?);
    tree.record_step(&[0], cfg.num_groups);
    // (node id or None for the root, its next-token dist, its log-prob)
    let mut frontier: Vec<(Option<usize>, usize, f64)> = vec![(None, 0, 0.0)];
    for d in 1..=depth {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (fi, &(_, di, lp)) in frontier.iter().enumerate() {
            let probs = &tree.dists[di].probs;
            for t in top_tokens(probs, beam) {
                cands.push((lp + probs[t].ln(), fi, t));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam);
        if cands.is_empty() {
            break;
        }
        let first = tree.nodes.len();
        for &(lp, fi, token) in &cands {
            let (parent, di, _) = frontier[fi];
            tree.nodes.push(DraftNode { token, parent, depth: d, log_prob: lp, dist: di });
        }
        let ids: Vec<usize> = (first..tree.nodes.len()).collect();
        if d == depth {
            break;
        }
        let req: Vec<(Option<usize>, usize)> = ids.iter().map(|&i| (tree.nodes[i].parent, tree.nodes[i].token)).collect();
        let scores = drafter.extend(&req)?;
        let mut step = Vec::with_capacity(ids.len());
        frontier.clear();
        for (&i, s) in ids.iter().zip(&scores) {
            tree.dists.push(to_dist(drafter, s, cfg)?);
            let di = tree.dists.len() - 1;
            step.push(di);
            frontier.push((Some(i), di, tree.nodes[i].log_prob));
        }
        tree.record_step(&step, cfg.num_groups);
    }
    prune(&mut tree, budget);
    Ok(tree)
}

fn prune(tree: &mut DraftTree, budget: usize) {
    if tree.nodes.len() <= budget {
        return;
    }
    let mut order: Vec<usize> = (0..tree.nodes.len()).collect();
    order.sort_by(|&a, &b| {
        let (na, nb) = (&tree.nodes[a], &tree.nodes[b]);
        nb.log_prob.total_cmp(&na.log_prob).then(na.depth.cmp(&nb.depth)).then(a.cmp(&b))
    });
    let mut keep = vec![false; tree.nodes.len()];
    for &i in &order[..budget] {
        keep[i] = true;
    }
    let mut remap = vec![usize::MAX; tree.nodes.len()];
    let mut nodes = Vec::with_capacity(budget);
    for (i, n) in tree.nodes.iter().enumerate() {
        if keep[i] {
            let parent = n.parent.map(|p| remap[p]);
            debug_assert!(parent.is_none_or(|p| p != usize::MAX));
            remap[i] = nodes.len();
            nodes.push(DraftNode { parent, ..n.clone() });
        }
    }
    tree.nodes = nodes;
}
