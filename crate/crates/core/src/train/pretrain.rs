//! Next-token pretraining of the target model.

use std::sync::Arc;

use crate::model::{ModelConfig, Parameterized, TargetModel};
use crate::tensor::{log_softmax_slice, AttnMask, Tape};

use super::draft_train::LossRow;
use super::{AdamW, Corpus, Result, TargetTrainConfig, TrainError};

/// Causal attention within each of `batch` stacked sequences of length `len`.
pub(crate) fn block_causal_mask(batch: usize, len: usize) -> AttnMask {
    let n = batch * len;
    let mut allowed = vec![false; n * n];
    for b in 0..batch {
        for i in 0..len {
            let row = (b * len + i) * n;
            for j in 0..=i {
                allowed[row + b * len + j] = true;
            }
        }
    }
    AttnMask::Explicit { keys: n, allowed: Arc::new(allowed) }
}

/// Trains a fresh target on the corpus's training split. Returns the model
/// and one log row per optimizer step (the loss lands in `loss_cls`).
pub fn pretrain_target(
    corpus: &Corpus,
    model_cfg: ModelConfig,
    cfg: &TargetTrainConfig,
) -> Result<(TargetModel, Vec<LossRow>)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if cfg.seq_len > model_cfg.max_seq_len {
        return Err(TrainError::Config("seq_len exceeds max_seq_len".into()));
    }
    let train = corpus.train();
    if train.len() < cfg.seq_len + 1 {
        return Err(TrainError::Data(format!(
            "corpus training split has {} tokens; at least seq_len + 1 = {} needed",
            train.len(),
            cfg.seq_len + 1
        )));
    }
    if let Some(&t) = train.iter().find(|&&t| t >= model_cfg.vocab_size) {
        return Err(TrainError::Data(format!("token {t} outside the vocabulary")));
    }
    let vocab = model_cfg.vocab_size;
    let mut model = TargetModel::init(model_cfg, cfg.seed)?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, cfg.warmup_steps, cfg.clip_norm);
    let (b, s) = (cfg.batch_size, cfg.seq_len);
    let mask = block_causal_mask(b, s);
    let positions = Arc::new((0..b).flat_map(|_| 0..s).collect::<Vec<_>>());
    let mut log = Vec::with_capacity(cfg.train_steps);
    for step in 0..cfg.train_steps {
        let windows = Corpus::windows(train, s + 1, b, cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
        let inputs: Vec<usize> = windows.iter().flat_map(|w| w[..s].iter().copied()).collect();
        let picks: Vec<usize> = windows
            .iter()
            .flat_map(|w| w[1..].iter().copied())
            .enumerate()
            .map(|(r, t)| r * vocab + t)
            .collect();

        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let out = model.forward_tape(&mut tape, &vars, &inputs, &positions, None, &mask)?;
        let lp = tape.log_softmax(out.logits, 1)?;
        let nll = tape.select_mean(lp, picks)?;
        let loss = tape.scale(nll, -1.0)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(TrainError::NonFinite { step, dump: format!("target loss {value}") });
        }
        let grads = tape.backward(loss)?;
        let all = vars.all();
        let mut params: Vec<_> = model.named_params_mut().into_iter().map(|(_, t)| t).collect();
        let g: Vec<_> = all.iter().zip(params.iter()).map(|(v, p)| grads.get_or_zeros(*v, p)).collect();
        opt.update(&mut params, &g);
        log.push(LossRow {
            epoch: 0,
            step,
            loss_total: value,
            loss_reg: 0.0,
            loss_cls: value,
            loss_csra: 0.0,
        });
    }
    Ok((model, log))
}

/// Mean next-token cross-entropy (nats) over consecutive windows of
/// `seq_len + 1` tokens.
pub fn heldout_cross_entropy(model: &TargetModel, tokens: &[usize], seq_len: usize) -> Result<f64> {
    if tokens.len() < 2 || seq_len == 0 {
        return Err(TrainError::Data("held-out split needs at least two tokens".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + seq_len + 1).min(tokens.len());
        let chunk = &tokens[start..end];
        let out = model.forward(&chunk[..chunk.len() - 1], None)?;
        for (r, &next) in chunk[1..].iter().enumerate() {
            total -= log_softmax_slice(out.logits.row(r))[next];
            count += 1;
        }
        start += seq_len;
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 256,
            hidden_size: 16,
            num_layers: 1,
            num_heads: 2,
            intermediate_size: 32,
            max_seq_len: 64,
            head_groups: 16,
            ..Default::default()
        }
    }

    fn quick() -> TargetTrainConfig {
        TargetTrainConfig { batch_size: 4, seq_len: 16, train_steps: 150, lr: 1e-2, warmup_steps: 10, ..Default::default() }
    }

    #[test]
    fn learns_a_deterministic_source() {
        let corpus = Corpus::from_bytes(&b"ab".repeat(600));
        let (m, log) = pretrain_target(&corpus, tiny_cfg(), &quick()).unwrap();
        let ce = heldout_cross_entropy(&m, corpus.heldout(), 16).unwrap();
        assert!(ce < 0.1, "held-out CE {ce}");
        assert!(log.last().unwrap().loss_total < log[0].loss_total);
    }

    #[test]
    fn beats_uniform_and_is_reproducible() {
        let corpus = Corpus::markov(16, 4000, 1).unwrap();
        let cfg = TargetTrainConfig { train_steps: 60, ..quick() };
        let (a, _) = pretrain_target(&corpus, tiny_cfg(), &cfg).unwrap();
        let (b, _) = pretrain_target(&corpus, tiny_cfg(), &cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let ce = heldout_cross_entropy(&a, corpus.heldout(), 16).unwrap();
        assert!(ce < 256f64.ln(), "{ce}");
    }

    #[test]
    fn short_corpus_is_a_data_error() {
        let corpus = Corpus::from_bytes(b"abcdefghij");
        assert!(matches!(pretrain_target(&corpus, tiny_cfg(), &quick()), Err(TrainError::Data(_))));
    }
}
