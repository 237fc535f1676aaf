use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{AttnMask, Result as TResult, Tape, Tensor, Var};

use super::block::{block_forward, BlockVars, BlockWeights};
use super::target::TargetModel;
use super::{check_tokens, KvCache, KvRows, ModelConfig, ModelError, Parameterized, Result, Visibility};

/// Feature-level autoregressive drafter: one decoder block over
/// `fusion(concat(embedding(token), previous feature))`, sharing the
/// target's embedding and LM head.
///
/// Draft row `r` holds token `t_{r+1}` paired with the feature at position
/// `r`; its rotary position is `r`. Rotary attention depends only on
/// relative offsets, so this indexing is equivalent to any shifted one.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftModel {
    pub(crate) cfg: ModelConfig,
    pub(crate) embedding: Tensor,
    pub(crate) lm_head: Tensor,
    pub(crate) fusion: Tensor,
    pub(crate) block: BlockWeights,
}

pub(crate) struct DraftVars {
    pub embedding: Var,
    pub lm_head: Var,
    pub fusion: Var,
    pub block: BlockVars,
}

impl DraftVars {
    /// Trainable vars in [`Parameterized::named_params`] order.
    pub fn trainable(&self) -> Vec<Var> {
        let mut v = vec![self.fusion];
        v.extend(self.block.vars());
        v
    }
}

/// New draft rows from one forward call.
#[derive(Clone, Debug)]
pub struct DraftForward {
    /// `[n x d]`; also the hidden state consumed by the router.
    pub features: Tensor,
    pub kv: KvRows,
}

impl DraftModel {
    /// Fresh trainable weights; embedding and LM head share the target's buffers.
    pub fn init(target: &TargetModel, seed: u64) -> Self {
        let cfg = target.cfg.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.hidden_size;
        let mut fusion = Tensor::randn(&[2 * d, d], 0.5 / (d as f64).sqrt(), &mut rng);
        // Start close to passing the feature half through unchanged.
        {
            let f = fusion.data_mut();
            for i in 0..d {
                f[(d + i) * d + i] += 1.0;
            }
        }
        let block = BlockWeights::init(&cfg, 1.0 / 2f64.sqrt(), &mut rng);
        Self {
            embedding: target.embedding.clone(),
            lm_head: target.lm_head.clone(),
            fusion,
            block,
            cfg,
        }
    }

    /// Rebuilds a draft around a target from stored trainable weights.
    pub(crate) fn from_parts(target: &TargetModel, fusion: Tensor, block: BlockWeights) -> Self {
        Self {
            cfg: target.cfg.clone(),
            embedding: target.embedding.clone(),
            lm_head: target.lm_head.clone(),
            fusion,
            block,
        }
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
        KvCache::new(1, self.cfg.hidden_size)
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> DraftVars {
        DraftVars {
            embedding: tape.constant(self.embedding.clone()),
            lm_head: tape.constant(self.lm_head.clone()),
            fusion: tape.leaf(self.fusion.clone(), trainable),
            block: self.block.bind(tape, trainable),
        }
    }

    /// Records the draft on `tape`; returns block output features and the
    /// new key/value rows.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &DraftVars,
        tokens: &[usize],
        prev_features: Var,
        positions: &Arc<Vec<usize>>,
        past: Option<(Var, Var)>,
        mask: AttnMask,
    ) -> TResult<(Var, Var, Var)> {
        let e = tape.gather_rows(vars.embedding, tokens)?;
        let cat = tape.concat_cols(&[e, prev_features])?;
        let x = tape.matmul(cat, vars.fusion)?;
        let out = block_forward(tape, &self.cfg, &vars.block, x, positions, past, mask)?;
        Ok((out.hidden, out.k, out.v))
    }

    /// Evaluates new rows after `past` without touching any cache.
    pub fn forward_rows(
        &self,
        tokens: &[usize],
        prev_features: &Tensor,
        positions: &[usize],
        past: &KvRows,
        visibility: &Visibility,
    ) -> Result<DraftForward> {
        check_tokens(tokens, self.cfg.vocab_size)?;
        let d = self.cfg.hidden_size;
        if tokens.is_empty() || positions.len() != tokens.len() || prev_features.shape() != [tokens.len(), d] {
            return Err(ModelError::State(format!(
                "{} tokens, {} positions, features {:?}",
                tokens.len(),
                positions.len(),
                prev_features.shape()
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.cfg.max_seq_len) {
            return Err(ModelError::SequenceTooLong { position: p, max: self.cfg.max_seq_len });
        }
        let mask = visibility.to_mask(past.rows(), tokens.len())?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let prev = tape.constant(prev_features.clone());
        let past_vars = (past.rows() > 0).then(|| {
            let (k, v) = past.layer(0);
            (tape.constant(k), tape.constant(v))
        });
        let positions = Arc::new(positions.to_vec());
        let (f, k, v) = self.forward_tape(&mut tape, &vars, tokens, prev, &positions, past_vars, mask)?;
        let kv = KvRows::from_layers(
            d,
            tokens.len(),
            vec![(tape.value(k).to_vec(), tape.value(v).to_vec())],
        );
        Ok(DraftForward {
            features: tape.value(f).clone(),
            kv,
        })
    }

    /// One autoregressive step appended to `cache`; returns the new feature.
    pub fn step(&self, prev_feature: &[f64], token: usize, cache: &mut KvCache) -> Result<Vec<f64>> {
        let prev = Tensor::new(vec![1, prev_feature.len()], prev_feature.to_vec())?;
        let pos = cache.len();
        let out = self.forward_rows(&[token], &prev, &[pos], cache.rows(), &Visibility::Causal)?;
        cache.commit(&out.kv, &[0], &[token])?;
        Ok(out.features.to_vec())
    }

    /// Full-vocabulary logits `[n x V]` for draft features.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let w = tape.constant(self.lm_head.clone());
        let l = tape.matmul(f, w)?;
        Ok(tape.value(l).clone())
    }

    /// True while the tied weights still share the target's buffers and values.
    pub fn is_tied_to(&self, target: &TargetModel) -> bool {
        self.embedding.bit_eq(&target.embedding) && self.lm_head.bit_eq(&target.lm_head)
    }
}

impl Parameterized for DraftModel {
    /// Trainable tensors only; the tied embedding and LM head are excluded.
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("fusion".to_string(), &self.fusion)];
        v.extend(self.block.named("block"));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![("fusion".to_string(), &mut self.fusion)];
        v.extend(self.block.named_mut("block"));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> (TargetModel, DraftModel) {
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
        let t = TargetModel::init(cfg, 1).unwrap();
        let d = DraftModel::init(&t, 2);
        (t, d)
    }

    #[test]
    fn step_is_deterministic_and_shaped() {
        let (_, d) = pair();
        let f = vec![0.3; 16];
        let mut c1 = d.new_cache();
        let mut c2 = d.new_cache();
        let a = d.step(&f, 5, &mut c1).unwrap();
        let b = d.step(&f, 5, &mut c2).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn chained_steps_match_batched_rows() {
        let (t, d) = pair();
        let toks = [3usize, 17, 8, 30];
        let feats = t.forward(&toks, None).unwrap().features;
        // Rows for tokens 1..=3 paired with target features 0..=2.
        let prev = Tensor::from_rows(&[feats.row(0).to_vec(), feats.row(1).to_vec(), feats.row(2).to_vec()]).unwrap();
        let batched = d
            .forward_rows(&toks[1..], &prev, &[0, 1, 2], &KvRows::empty(1, 16), &Visibility::Causal)
            .unwrap();
        let mut cache = d.new_cache();
        for r in 0..3 {
            let f = d.step(feats.row(r), toks[r + 1], &mut cache).unwrap();
            for (a, b) in f.iter().zip(batched.features.row(r)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert!(cache.rows().max_abs_diff(&batched.kv) < 1e-10);
    }

    #[test]
    fn tied_weights_share_storage() {
        let (t, d) = pair();
        assert!(d.embedding.shares_storage(&t.embedding));
        assert!(d.is_tied_to(&t));
        assert!(d.named_params().iter().all(|(n, _)| n != "lm_head" && n != "embedding"));
    }
}
