use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{AttnMask, Result as TResult, Tape, Tensor, Var};

use super::block::{block_forward, BlockVars, BlockWeights};
use super::{check_tokens, KvCache, KvRows, ModelConfig, ModelError, Parameterized, Result, Visibility};

/// Decoder-only language model whose post-norm hidden states are the
/// features the draft model learns to predict.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetModel {
    pub(crate) cfg: ModelConfig,
    pub(crate) embedding: Tensor,
    pub(crate) blocks: Vec<BlockWeights>,
    pub(crate) final_norm: Tensor,
    pub(crate) lm_head: Tensor,
}

/// Rows produced by a forward call.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[n x d]` hidden states fed to the LM head.
    pub features: Tensor,
    /// `[n x V]`
    pub logits: Tensor,
    /// New key/value rows, one per input row.
    pub kv: KvRows,
}

pub(crate) struct TargetVars {
    pub embedding: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
    pub lm_head: Var,
}

impl TargetVars {
    /// Vars in the same order as [`Parameterized::named_params`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.embedding];
        for b in &self.blocks {
            v.extend(b.vars());
        }
        v.push(self.final_norm);
        v.push(self.lm_head);
        v
    }
}

pub(crate) struct TapeOutput {
    pub features: Var,
    pub logits: Var,
    pub kv: Vec<(Var, Var)>,
}

impl TargetModel {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.hidden_size;
        let depth_scale = 1.0 / ((2 * cfg.num_layers) as f64).sqrt();
        let embedding = Tensor::randn(&[cfg.vocab_size, d], 0.5, &mut rng);
        let blocks = (0..cfg.num_layers)
            .map(|_| BlockWeights::init(&cfg, depth_scale, &mut rng))
            .collect();
        let lm_head = Tensor::randn(&[d, cfg.vocab_size], 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Self {
            final_norm: Tensor::filled(&[d], 1.0),
            cfg,
            embedding,
            blocks,
            lm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embedding
    }

    pub fn lm_head(&self) -> &Tensor {
        &self.lm_head
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.cfg.num_layers, self.cfg.hidden_size)
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> TargetVars {
        TargetVars {
            embedding: tape.leaf(self.embedding.clone(), trainable),
            blocks: self.blocks.iter().map(|b| b.bind(tape, trainable)).collect(),
            final_norm: tape.leaf(self.final_norm.clone(), trainable),
            lm_head: tape.leaf(self.lm_head.clone(), trainable),
        }
    }

    /// Records the full model on `tape`. `past` rows come first in the key
    /// index space of `mask`.
    pub(crate) fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &TargetVars,
        tokens: &[usize],
        positions: &Arc<Vec<usize>>,
        past: Option<&KvRows>,
        mask: &AttnMask,
    ) -> TResult<TapeOutput> {
        let mut x = tape.gather_rows(vars.embedding, tokens)?;
        let mut kv = Vec::with_capacity(self.blocks.len());
        for (l, bv) in vars.blocks.iter().enumerate() {
            let past_l = match past {
                Some(p) if p.rows() > 0 => {
                    let (k, v) = p.layer(l);
                    Some((tape.constant(k), tape.constant(v)))
                }
                _ => None,
            };
            let out = block_forward(tape, &self.cfg, bv, x, positions, past_l, mask.clone())?;
            kv.push((out.k, out.v));
            x = out.hidden;
        }
        let features = tape.rms_norm(x, vars.final_norm, self.cfg.norm_eps)?;
        let logits = tape.matmul(features, vars.lm_head)?;
        Ok(TapeOutput { features, logits, kv })
    }

    /// Evaluates new rows at explicit positions after `past` without
    /// touching any cache.
    pub fn forward_rows(
        &self,
        tokens: &[usize],
        positions: &[usize],
        past: &KvRows,
        visibility: &Visibility,
    ) -> Result<ForwardOutput> {
        check_tokens(tokens, self.cfg.vocab_size)?;
        if tokens.is_empty() || positions.len() != tokens.len() {
            return Err(ModelError::State("need one position per new token".into()));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.cfg.max_seq_len) {
            return Err(ModelError::SequenceTooLong { position: p, max: self.cfg.max_seq_len });
        }
        let mask = visibility.to_mask(past.rows(), tokens.len())?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let positions = Arc::new(positions.to_vec());
        let out = self.forward_tape(&mut tape, &vars, tokens, &positions, Some(past), &mask)?;
        Ok(collect_output(&tape, &out, self.cfg.hidden_size, tokens.len()))
    }

    /// Causal forward over `tokens`, the full sequence so far. With a cache,
    /// only the tokens beyond the cached prefix are evaluated and appended;
    /// returned rows cover exactly those tokens.
    pub fn forward(&self, tokens: &[usize], cache: Option<&mut KvCache>) -> Result<ForwardOutput> {
        match cache {
            None => {
                let positions: Vec<usize> = (0..tokens.len()).collect();
                let empty = KvRows::empty(self.cfg.num_layers, self.cfg.hidden_size);
                self.forward_rows(tokens, &positions, &empty, &Visibility::Causal)
            }
            Some(cache) => {
                cache.check_prefix_of(tokens)?;
                let start = cache.len();
                let new = &tokens[start..];
                let positions: Vec<usize> = (start..tokens.len()).collect();
                let out = self.forward_rows(new, &positions, cache.rows(), &Visibility::Causal)?;
                let all: Vec<usize> = (0..new.len()).collect();
                cache.commit(&out.kv, &all, new)?;
                Ok(out)
            }
        }
    }
}

pub(crate) fn collect_output(tape: &Tape, out: &TapeOutput, width: usize, rows: usize) -> ForwardOutput {
    let layers = out
        .kv
        .iter()
        .map(|(k, v)| (tape.value(*k).to_vec(), tape.value(*v).to_vec()))
        .collect();
    ForwardOutput {
        features: tape.value(out.features).clone(),
        logits: tape.value(out.logits).clone(),
        kv: KvRows::from_layers(width, rows, layers),
    }
}

impl Parameterized for TargetModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("embedding".to_string(), &self.embedding)];
        for (l, b) in self.blocks.iter().enumerate() {
            v.extend(b.named(&format!("blocks.{l}")));
        }
        v.push(("final_norm".into(), &self.final_norm));
        v.push(("lm_head".into(), &self.lm_head));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![("embedding".to_string(), &mut self.embedding)];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            v.extend(b.named_mut(&format!("blocks.{l}")));
        }
        v.push(("final_norm".into(), &mut self.final_norm));
        v.push(("lm_head".into(), &mut self.lm_head));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TargetModel {
        let cfg = ModelConfig {
            vocab_size: 32,
            hidden_size: 16,
            num_layers: 2,
            num_heads: 2,
            intermediate_size: 24,
            max_seq_len: 64,
            head_groups: 4,
            ..Default::default()
        };
        TargetModel::init(cfg, 7).unwrap()
    }

    #[test]
    fn shapes_follow_sequence_length() {
        let m = small();
        for s in [1, 5, 17] {
            let toks: Vec<usize> = (0..s).map(|i| (i * 7) % 32).collect();
            let out = m.forward(&toks, None).unwrap();
            assert_eq!(out.logits.shape(), &[s, 32]);
            assert_eq!(out.features.shape(), &[s, 16]);
        }
    }

    #[test]
    fn cached_path_matches_uncached() {
        let m = small();
        let toks = [3usize, 9, 1, 30, 12];
        let full = m.forward(&toks, None).unwrap();
        let mut cache = m.new_cache();
        m.forward(&toks[..4], Some(&mut cache)).unwrap();
        let last = m.forward(&toks, Some(&mut cache)).unwrap();
        assert_eq!(cache.len(), 5);
        let diff = full
            .logits
            .row(4)
            .iter()
            .zip(last.logits.row(0))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn future_tokens_do_not_affect_the_past() {
        let m = small();
        let a = m.forward(&[4, 8, 15, 16, 23, 5], None).unwrap();
        let b = m.forward(&[4, 8, 15, 16, 2, 29], None).unwrap();
        for r in 0..4 {
            assert_eq!(a.logits.row(r), b.logits.row(r));
        }
        assert_ne!(a.logits.row(4), b.logits.row(4));
    }

    #[test]
    fn rejects_bad_tokens_and_stale_cache() {
        let m = small();
        assert!(matches!(m.forward(&[1, 32], None), Err(ModelError::Vocabulary { .. })));
        let mut cache = m.new_cache();
        m.forward(&[1, 2], Some(&mut cache)).unwrap();
        assert!(matches!(m.forward(&[1, 3, 4], Some(&mut cache)), Err(ModelError::State(_))));
    }
}
