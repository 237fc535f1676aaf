//! Turning draft outputs into proposal distributions.

use crate::model::{group_logits, grouped_head_prob, top_groups, GroupedDist, RouterHead};
use crate::tensor::{softmax_slice, Tensor};

use super::{DraftScores, EngineError, Result};

/// How draft features are mapped to token probabilities.
#[derive(Clone, Copy, Debug)]
pub enum HeadMode<'a> {
    /// Every LM-head row.
    Full,
    /// Only the rows of the router's `top_n` groups.
    Routed { router: &'a RouterHead, top_n: usize },
}

/// Proposal distribution of one draft step.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftDist {
    /// Normalized over its support.
    pub probs: Vec<f64>,
    /// Active vocabulary groups; `None` when the whole head was evaluated.
    pub groups: Option<Vec<usize>>,
}

/// `softmax(logits / T)`. At `T = 0` the untempered softmax is returned; it
/// is only used for ranking and argmax.
pub fn temperature_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature > 0.0 && temperature != 1.0 {
        let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
        softmax_slice(&scaled)
    } else {
        softmax_slice(logits)
    }
}

/// Active groups and factorized probabilities for hidden state `h`.
pub fn routed_logits(h: &[f64], lm_head: &Tensor, router: &RouterHead, top_n: usize) -> Result<GroupedDist> {
    let groups = router.num_groups();
    if top_n == 0 || top_n > groups {
        return Err(EngineError::Config(format!("top_n must lie in [1, {groups}], got {top_n}")));
    }
    let p = router.probs(h)?;
    Ok(grouped_head_prob(h, lm_head, &p, &top_groups(&p, top_n))?)
}

/// Proposal for one draft step. Routed proposals are renormalized over the
/// active groups, and that renormalized proposal is what verification sees.
pub fn scores_to_dist(
    scores: &DraftScores,
    lm_head: Option<&Tensor>,
    head: HeadMode<'_>,
    temperature: f64,
) -> Result<DraftDist> {
    match scores {
        DraftScores::Logits(l) => Ok(DraftDist { probs: temperature_probs(l, temperature), groups: None }),
        DraftScores::Features(h) => {
            let lm = lm_head.ok_or_else(|| EngineError::Contract("feature scores need an LM head".into()))?;
            match head {
                HeadMode::Full => {
                    let logits = group_logits(h, lm, &[0], lm.cols());
                    Ok(DraftDist { probs: temperature_probs(&logits, temperature), groups: None })
                }
                HeadMode::Routed { router, top_n } => {
                    let p = router.probs(h)?;
                    let top = top_groups(&p, top_n);
                    let tempered: Vec<f64>;
                    let feat = if temperature > 0.0 && temperature != 1.0 {
                        tempered = h.iter().map(|v| v / temperature).collect();
                        &tempered
                    } else {
                        h
                    };
                    let g = grouped_head_prob(feat, lm, &p, &top)?;
                    if !(g.active_mass > 0.0) {
                        return Err(EngineError::Contract("active groups carry no router mass".into()));
                    }
                    let probs = g.probs.iter().map(|q| q / g.active_mass).collect();
                    Ok(DraftDist { probs, groups: Some(g.active_groups) })
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_groups_routed_matches_full_support() {
        let cfg = ModelConfig { vocab_size: 32, hidden_size: 8, head_groups: 4, num_heads: 2, ..Default::default() };
        let router = RouterHead::init(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lm = Tensor::randn(&[8, 32], 1.0, &mut rng);
        let h = Tensor::randn(&[1, 8], 1.0, &mut rng).to_vec();
        let g = routed_logits(&h, &lm, &router, 4).unwrap();
        assert_eq!(g.active_groups, vec![0, 1, 2, 3]);
        assert!(g.probs.iter().all(|&p| p > 0.0));
        assert!((g.active_mass - 1.0).abs() < 1e-12);
        let two = routed_logits(&h, &lm, &router, 2).unwrap();
        assert_eq!(two.probs.iter().filter(|&&p| p > 0.0).count(), 16);
        assert!(routed_logits(&h, &lm, &router, 5).is_err());
    }

    #[test]
    fn routed_proposal_is_renormalized() {
        let cfg = ModelConfig { vocab_size: 32, hidden_size: 8, head_groups: 4, num_heads: 2, ..Default::default() };
        let router = RouterHead::init(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lm = Tensor::randn(&[8, 32], 1.0, &mut rng);
        let h = Tensor::randn(&[1, 8], 1.0, &mut rng).to_vec();
        for t in [0.0, 0.7, 1.0] {
            let d = scores_to_dist(
                &DraftScores::Features(h.clone()),
                Some(&lm),
                HeadMode::Routed { router: &router, top_n: 1 },
                t,
            )
            .unwrap();
            assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(d.groups.as_ref().unwrap().len(), 1);
        }
    }

    #[test]
    fn temperature_sharpens() {
        let l = [1.0, 2.0, 0.5];
        let cold = temperature_probs(&l, 0.5);
        let warm = temperature_probs(&l, 1.0);
        assert!(cold[1] > warm[1]);
    }
}
