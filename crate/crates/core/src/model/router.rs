//! Grouped LM head: a router over `N` contiguous vocabulary groups and the
//! factorized distribution `p(x) = p_router(n) * p_group(x | n)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{softmax_slice, Result as TResult, Tape, Tensor, Var};

use super::{ModelConfig, ModelError, Parameterized, Result, RouterActivation};

/// `softmax(W2 (act(W1 h) + h))` with `W1: [d x d]`, `W2: [N x d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterHead {
    pub(crate) w1: Tensor,
    pub(crate) w2: Tensor,
    pub(crate) activation: RouterActivation,
}

pub(crate) struct RouterVars {
    pub w1: Var,
    pub w2: Var,
}

impl RouterHead {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.hidden_size;
        let s = 1.0 / (d as f64).sqrt();
        Self {
            w1: Tensor::randn(&[d, d], s, &mut rng),
            w2: Tensor::randn(&[cfg.head_groups, d], s, &mut rng),
            activation: cfg.router_activation,
        }
    }

    pub fn from_weights(w1: Tensor, w2: Tensor, activation: RouterActivation) -> Result<Self> {
        let d = w1.rows();
        if w1.shape() != [d, d] || w2.shape().len() != 2 || w2.cols() != d {
            return Err(ModelError::Config(format!(
                "router weights {:?} and {:?} do not fit together",
                w1.shape(),
                w2.shape()
            )));
        }
        Ok(Self { w1, w2, activation })
    }

    pub fn num_groups(&self) -> usize {
        self.w2.rows()
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> RouterVars {
        RouterVars {
            w1: tape.leaf(self.w1.clone(), trainable),
            w2: tape.leaf(self.w2.clone(), trainable),
        }
    }

    /// Router logits `[n x N]` for hidden states `h: [n x d]`.
    pub(crate) fn logits_tape(&self, tape: &mut Tape, vars: &RouterVars, h: Var) -> TResult<Var> {
        let a = tape.matmul_nt(h, vars.w1)?;
        let a = match self.activation {
            RouterActivation::Silu => tape.silu(a)?,
            RouterActivation::Relu => tape.relu(a)?,
        };
        let z = tape.add(a, h)?;
        tape.matmul_nt(z, vars.w2)
    }

    /// Group probabilities for one hidden state.
    pub fn probs(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let hv = tape.constant(Tensor::new(vec![1, h.len()], h.to_vec())?);
        let l = self.logits_tape(&mut tape, &vars, hv)?;
        let p = tape.softmax(l, 1)?;
        Ok(tape.value(p).to_vec())
    }
}

impl Parameterized for RouterHead {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("w1".into(), &self.w1), ("w2".into(), &self.w2)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("w1".into(), &mut self.w1), ("w2".into(), &mut self.w2)]
    }
}

/// Indices of the `n` most probable groups in descending probability;
/// the lowest id wins ties.
pub fn top_groups(p_router: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p_router.len()).collect();
    idx.sort_by(|&a, &b| p_router[b].total_cmp(&p_router[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Factorized distribution over the vocabulary restricted to active groups.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedDist {
    /// Length `V`; zero outside active groups.
    pub probs: Vec<f64>,
    /// Active group ids in ascending order.
    pub active_groups: Vec<usize>,
    /// `sum of p_router(n)` over active groups (before any renormalization).
    pub active_mass: f64,
}

/// Logits of the tokens in `groups` only, computed from the matching
/// LM-head columns; other entries are left at zero. Each logit uses the same
/// accumulation order as a full matrix product.
pub fn group_logits(feature: &[f64], lm_head: &Tensor, groups: &[usize], group_size: usize) -> Vec<f64> {
    let vocab = lm_head.cols();
    let w = lm_head.data();
    let mut out = vec![0.0; vocab];
    for (k, &fk) in feature.iter().enumerate() {
        if fk == 0.0 {
            continue;
        }
        let row = &w[k * vocab..(k + 1) * vocab];
        for &g in groups {
            let span = g * group_size..(g + 1) * group_size;
            for (o, &wv) in out[span.clone()].iter_mut().zip(&row[span]) {
                *o += fk * wv;
            }
        }
    }
    out
}

/// `p(x) = p_router(n) * softmax_within_group_n(logits)(x)` for tokens in
/// active groups, zero elsewhere.
pub fn grouped_head_prob(
    feature: &[f64],
    lm_head: &Tensor,
    p_router: &[f64],
    active_groups: &[usize],
) -> Result<GroupedDist> {
    let groups = p_router.len();
    if active_groups.is_empty() {
        return Err(ModelError::Config("at least one active group is required".into()));
    }
    if groups == 0 || lm_head.cols() % groups != 0 || feature.len() != lm_head.rows() {
        return Err(ModelError::Config(format!(
            "{groups} groups, LM head {:?}, feature length {}",
            lm_head.shape(),
            feature.len()
        )));
    }
    if let Some(&g) = active_groups.iter().find(|&&g| g >= groups) {
        return Err(ModelError::Config(format!("group {g} out of range for {groups} groups")));
    }
    let mut active = active_groups.to_vec();
    active.sort_unstable();
    active.dedup();
    let size = lm_head.cols() / groups;
    let logits = group_logits(feature, lm_head, &active, size);
    let mut probs = vec![0.0; lm_head.cols()];
    let mut mass = 0.0;
    for &g in &active {
        let span = g * size..(g + 1) * size;
        let within = softmax_slice(&logits[span.clone()]);
        for (p, w) in probs[span].iter_mut().zip(within) {
            *p = p_router[g] * w;
        }
        mass += p_router[g];
    }
    Ok(GroupedDist {
        probs,
        active_groups: active,
        active_mass: mass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::max_relative_error;

    #[test]
    fn zero_weights_give_uniform_groups() {
        let cfg = ModelConfig { hidden_size: 8, num_heads: 2, vocab_size: 32, head_groups: 4, ..Default::default() };
        let r = RouterHead::from_weights(Tensor::zeros(&[8, 8]), Tensor::zeros(&[4, 8]), cfg.router_activation).unwrap();
        let p = r.probs(&[0.3, -1.0, 2.0, 0.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn router_outputs_are_distributions() {
        let cfg = ModelConfig::default();
        let r = RouterHead::init(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let h = Tensor::randn(&[64], 3.0, &mut rng);
            let p = r.probs(h.data()).unwrap();
            assert_eq!(p.len(), 16);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn router_nll_gradient_matches_finite_differences() {
        for act in [RouterActivation::Silu, RouterActivation::Relu] {
            for seed in 0..20 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs = [Tensor::randn(&[6, 6], 0.5, &mut rng), Tensor::randn(&[3, 6], 0.5, &mut rng)];
                let h = Tensor::randn(&[1, 6], 1.0, &mut rng);
                let target = (seed as usize) % 3;
                let err = max_relative_error(&inputs, 1e-5, |t, v| {
                    let r = RouterHead { w1: inputs[0].clone(), w2: inputs[1].clone(), activation: act };
                    let vars = RouterVars { w1: v[0], w2: v[1] };
                    let hv = t.constant(h.clone());
                    let l = r.logits_tape(t, &vars, hv)?;
                    let lp = t.log_softmax(l, 1)?;
                    let nll = t.select_mean(lp, vec![target])?;
                    t.scale(nll, -1.0)
                })
                .unwrap();
                assert!(err < 1e-4, "{act:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn top_groups_break_ties_low() {
        assert_eq!(top_groups(&[0.2, 0.4, 0.4, 0.0], 2), vec![1, 2]);
        assert_eq!(top_groups(&[0.25; 4], 3), vec![0, 1, 2]);
    }

    #[test]
    fn single_group_is_full_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::randn(&[8, 12], 1.0, &mut rng);
        let f = Tensor::randn(&[8], 1.0, &mut rng);
        let g = grouped_head_prob(f.data(), &w, &[1.0], &[0]).unwrap();
        let mut tape = Tape::new();
        let fv = tape.constant(f.reshape(vec![1, 8]).unwrap());
        let wv = tape.constant(w.clone());
        let l = tape.matmul(fv, wv).unwrap();
        let full = softmax_slice(tape.value(l).data());
        assert_eq!(g.probs, full);
        assert_eq!(g.active_mass, 1.0);
    }

    #[test]
    fn empty_or_bad_groups_are_rejected() {
        let w = Tensor::zeros(&[2, 4]);
        assert!(grouped_head_prob(&[1.0, 1.0], &w, &[0.5, 0.5], &[]).is_err());
        assert!(grouped_head_prob(&[1.0, 1.0], &w, &[0.5, 0.5], &[2]).is_err());
    }
}
