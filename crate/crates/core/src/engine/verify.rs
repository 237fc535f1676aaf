//! Target-side acceptance of draft candidates.

use crate::tensor::argmax;

use super::{DraftTree, EngineError, Result, Sampler};

/// Accepted root path (node indices, shallowest first) and the target's
/// bonus token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub accepted: Vec<usize>,
    pub bonus: usize,
}

impl Verdict {
    /// Emitted tokens: accepted drafts followed by the bonus token.
    pub fn tokens(&self, tree: &DraftTree) -> Vec<usize> {
        let mut t: Vec<usize> = self.accepted.iter().map(|&i| tree.nodes[i].token).collect();
        t.push(self.bonus);
        t
    }
}

/// Rows are `[root] + nodes`: row 0 scores the children of the root, row
/// `i + 1` the children of node `i`.
fn row_of(node: Option<usize>) -> usize {
    node.map_or(0, |i| i + 1)
}

/// Walks down while some child equals the target argmax.
pub fn verify_greedy(tree: &DraftTree, target_logits: &[Vec<f64>]) -> Result<Verdict> {
    check_rows(tree, target_logits.len())?;
    let mut cur = None;
    let mut accepted = Vec::new();
    loop {
        let best = argmax(&target_logits[row_of(cur)]);
        match tree.children(cur).into_iter().find(|&c| tree.nodes[c].token == best) {
            Some(c) => {
                accepted.push(c);
                cur = Some(c);
            }
            None => return Ok(Verdict { accepted, bonus: best }),
        }
    }
}

/// Speculative sampling against target probabilities (already tempered).
///
/// Sampled chains use the standard rule: accept `x ~ q` with probability
/// `min(1, p(x) / q(x))`, otherwise resample from `norm(max(0, p - q))`.
/// Deterministically chosen tree candidates are point-mass proposals: each
/// sibling in turn is accepted with its current residual probability, and a
/// rejected sibling is zeroed out of the residual. Both keep the emitted
/// law equal to sampling from `p`.
pub fn verify_sampling(tree: &DraftTree, target_probs: &[Vec<f64>], sampler: &mut dyn Sampler) -> Result<Verdict> {
    check_rows(tree, target_probs.len())?;
    let mut cur = None;
    let mut accepted = Vec::new();
    'depth: loop {
        let mut p = target_probs[row_of(cur)].clone();
        let kids = tree.children(cur);
        if kids.is_empty() {
            return Ok(Verdict { accepted, bonus: sampler.categorical(&p) });
        }
        if tree.sampled {
            if kids.len() != 1 {
                return Err(EngineError::Contract("a sampled chain node has several children".into()));
            }
            let c = kids[0];
            let node = &tree.nodes[c];
            let q = &tree.dists[node.dist].probs;
            let qx = q[node.token];
            if !(qx > 0.0) {
                return Err(EngineError::Contract(format!(
                    "drafted token {} has draft probability 0",
                    node.token
                )));
            }
            if sampler.bernoulli((p[node.token] / qx).min(1.0)) {
                accepted.push(c);
                cur = Some(c);
                continue 'depth;
            }
            let residual: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
            let bonus = if residual.iter().any(|&r| r > 0.0) { sampler.categorical(&residual) } else { sampler.categorical(&p) };
            return Ok(Verdict { accepted, bonus });
        }
        for &c in &kids {
            let x = tree.nodes[c].token;
            let total: f64 = p.iter().sum();
            if !(total > 0.0) {
                break;
            }
            if sampler.bernoulli(p[x] / total) {
                accepted.push(c);
                cur = Some(c);
                continue 'depth;
            }
            p[x] = 0.0;
        }
        if !p.iter().any(|&v| v > 0.0) {
            return Err(EngineError::Contract("residual target distribution vanished".into()));
        }
        return Ok(Verdict { accepted, bonus: sampler.categorical(&p) });
    }
}

fn check_rows(tree: &DraftTree, rows: usize) -> Result<()> {
    if rows != tree.len() + 1 {
        return Err(EngineError::Contract(format!(
            "{rows} target rows for a tree of {} nodes",
            tree.len()
        )));
    }
    Ok(())
}
