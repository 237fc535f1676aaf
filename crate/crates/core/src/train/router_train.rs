//! Second-stage router training on hidden states of a frozen draft.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{io, DraftModel, ModelConfig, Parameterized, RouterHead, TargetModel};
use crate::tensor::{argmax, Tape, Tensor};

use super::batch::gather;
use super::losses::router_loss_tape;
use super::{multi_step_rollout, router_target, AdamW, Corpus, Result, TrainBatch, RouterTrainConfig, TrainConfig, TrainError};

/// Stage-1 output: draft hidden states and the router targets derived from
/// the target model's next-token distribution at the same rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterDataset {
    /// `[n x d]`
    pub hidden: Tensor,
    /// `[n x N]`
    pub q_router: Tensor,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    kind: String,
    draft_checksum: String,
}

impl RouterDataset {
    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the features in the weight container format.
    pub fn save(&self, draft: &DraftModel, path: &Path) -> Result<()> {
        let h = DatasetHeader { kind: "router_features".into(), draft_checksum: draft.checksum() };
        io::write_file(
            path,
            &h,
            [("hidden".to_string(), &self.hidden), ("q_router".to_string(), &self.q_router)],
        )?;
        Ok(())
    }

    /// Reads cached features, refusing caches produced by a different draft.
    pub fn load(draft: &DraftModel, path: &Path) -> Result<Self> {
        let mut c = io::read_file(path)?;
        let h: DatasetHeader = c.header_as()?;
        if h.kind != "router_features" {
            return Err(TrainError::Data(format!("expected router_features, found {}", h.kind)));
        }
        if h.draft_checksum != draft.checksum() {
            return Err(TrainError::Data("cached router features belong to a different draft".into()));
        }
        let hidden = c.take("hidden")?;
        let q_router = c.take("q_router")?;
        if hidden.rows() != q_router.rows() {
            return Err(TrainError::Data("cached feature and target row counts differ".into()));
        }
        Ok(Self { hidden, q_router })
    }
}

/// Runs the frozen draft over seeded training windows. Every rollout step
/// contributes rows, since at inference the router sees features from every
/// draft depth.
pub fn build_router_dataset(
    target: &TargetModel,
    draft: &DraftModel,
    sequences: &[Vec<usize>],
    cfg: &TrainConfig,
    groups: usize,
) -> Result<RouterDataset> {
    let vocab = target.config().vocab_size;
    if groups == 0 || vocab % groups != 0 {
        return Err(TrainError::Config(format!("{groups} groups do not divide the vocabulary of {vocab}")));
    }
    let mut hidden = Vec::new();
    let mut q = Vec::new();
    for chunk in sequences.chunks(cfg.batch_size) {
        let batch = TrainBatch::from_target(target, chunk)?;
        let steps = multi_step_rollout(&batch, draft, cfg.steps.min(batch.seq_len))?;
        let probs = batch.label_probs()?;
        let mut qrows = Vec::with_capacity(probs.rows() * groups);
        for r in 0..probs.rows() {
            qrows.extend(router_target(probs.row(r), groups)?);
        }
        for s in &steps.steps {
            hidden.extend_from_slice(s.data());
            q.extend_from_slice(&qrows);
        }
    }
    let d = target.config().hidden_size;
    let n = hidden.len() / d;
    Ok(RouterDataset {
        hidden: Tensor::new(vec![n, d], hidden)?,
        q_router: Tensor::new(vec![n, groups], q)?,
    })
}

/// Trains a router on precomputed features. Returns the router and the
/// mean loss of each epoch.
pub fn train_router_on(
    data: &RouterDataset,
    model_cfg: &ModelConfig,
    cfg: &RouterTrainConfig,
) -> Result<(RouterHead, Vec<f64>)> {
    if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(TrainError::Config("router batch_size, epochs and lr must be positive".into()));
    }
    if data.is_empty() {
        return Err(TrainError::Data("router dataset is empty".into()));
    }
    let mut router = RouterHead::init(model_cfg, cfg.seed ^ 0x0A11);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, 0, cfg.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for idx in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars = router.bind(&mut tape, true);
            let h = tape.constant(gather(&data.hidden, idx)?);
            let q = tape.constant(gather(&data.q_router, idx)?);
            let logits = router.logits_tape(&mut tape, &vars, h)?;
            let loss = router_loss_tape(&mut tape, logits, q)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::NonFinite { step: opt.steps_taken(), dump: "router loss".into() });
            }
            let grads = tape.backward(loss)?;
            let g = [grads.get_or_zeros(vars.w1, &router.w1), grads.get_or_zeros(vars.w2, &router.w2)];
            let mut params: Vec<_> = router.named_params_mut().into_iter().map(|(_, t)| t).collect();
            opt.update(&mut params, &g);
            total += value * idx.len() as f64;
            count += idx.len();
        }
        epochs.push(total / count as f64);
    }
    Ok((router, epochs))
}

/// Full two-stage router training over `groups` vocabulary groups. With
/// `cache`, stage-1 features are read from that file when it matches the
/// draft and group count, and written there otherwise.
pub fn train_router(
    target: &TargetModel,
    draft: &DraftModel,
    corpus: &Corpus,
    draft_cfg: &TrainConfig,
    cfg: &RouterTrainConfig,
    groups: usize,
    cache: Option<&Path>,
) -> Result<(RouterHead, Vec<f64>)> {
    let before = (target.checksum(), draft.checksum());
    let cached = match cache {
        Some(p) if p.exists() => Some(RouterDataset::load(draft, p)?).filter(|d| d.q_router.cols() == groups),
        _ => None,
    };
    let data = match cached {
        Some(d) => d,
        None => {
            let seqs = Corpus::windows(
                corpus.train(),
                draft_cfg.seq_len,
                draft_cfg.num_sequences,
                draft_cfg.seed ^ 0x5EED,
            )?;
            let data = build_router_dataset(target, draft, &seqs, draft_cfg, groups)?;
            if let Some(p) = cache {
                data.save(draft, p)?;
            }
            data
        }
    };
    let router_cfg = ModelConfig { head_groups: groups, ..target.config().clone() };
    let out = train_router_on(&data, &router_cfg, cfg)?;
    if (target.checksum(), draft.checksum()) != before {
        return Err(TrainError::FreezeViolated("draft or target weights changed during router training".into()));
    }
    Ok(out)
}

/// Fraction of rows where the router's top group equals `argmax(q_router)`.
pub fn router_accuracy(router: &RouterHead, data: &RouterDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(TrainError::Data("router dataset is empty".into()));
    }
    let mut hits = 0usize;
    for r in 0..data.len() {
        let p = router.probs(data.hidden.row(r))?;
        if argmax(&p) == argmax(data.q_router.row(r)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (TargetModel, DraftModel, Corpus, TrainConfig) {
        let cfg = ModelConfig {
            vocab_size: 32,
            hidden_size: 16,
            num_layers: 1,
            num_heads: 2,
            intermediate_size: 24,
            max_seq_len: 64,
            head_groups: 4,
            ..Default::default()
        };
        let t = TargetModel::init(cfg, 5).unwrap();
        let d = DraftModel::init(&t, 6);
        // Token ids stay below the vocabulary by construction.
        let bytes: Vec<u8> = (0..2000u32).map(|i| ((i * 7 + i / 3) % 32) as u8).collect();
        let corpus = Corpus::from_bytes(&bytes);
        let tc = TrainConfig { batch_size: 4, seq_len: 12, num_sequences: 16, steps: 2, ..Default::default() };
        (t, d, corpus, tc)
    }

    #[test]
    fn dataset_rows_cover_every_step_and_targets_sum_to_one() {
        let (t, d, corpus, tc) = setup();
        let seqs = Corpus::windows(corpus.train(), 12, 4, 1).unwrap();
        let data = build_router_dataset(&t, &d, &seqs, &tc, 4).unwrap();
        assert_eq!(data.len(), 2 * 4 * 11);
        for r in 0..data.len() {
            let s: f64 = data.q_router.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn training_freezes_models_and_is_reproducible_from_cache() {
        let (t, d, corpus, tc) = setup();
        let (dsum, tsum) = (d.checksum(), t.checksum());
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("feats.bin");
        let rc = RouterTrainConfig { epochs: 3, batch_size: 32, ..Default::default() };
        let (a, la) = train_router(&t, &d, &corpus, &tc, &rc, 4, Some(&cache)).unwrap();
        assert!(cache.exists());
        let (b, lb) = train_router(&t, &d, &corpus, &tc, &rc, 4, Some(&cache)).unwrap();
        assert_eq!(d.checksum(), dsum);
        assert_eq!(t.checksum(), tsum);
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(la, lb);
        assert!(la.last().unwrap() < la.first().unwrap());
    }

    #[test]
    fn cache_from_another_draft_is_rejected() {
        let (t, d, corpus, tc) = setup();
        let seqs = Corpus::windows(corpus.train(), 12, 2, 1).unwrap();
        let data = build_router_dataset(&t, &d, &seqs, &tc, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        data.save(&d, &p).unwrap();
        assert_eq!(RouterDataset::load(&d, &p).unwrap(), data);
        let other = DraftModel::init(&t, 99);
        assert!(matches!(RouterDataset::load(&other, &p), Err(TrainError::Data(_))));
    }

    #[test]
    fn accuracy_on_learnable_groups_beats_chance() {
        // Hidden states whose sign pattern determines the group.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 400;
        let d = 8;
        let h = Tensor::randn(&[n, d], 1.0, &mut rng);
        let mut q = vec![0.0; n * 4];
        for r in 0..n {
            let g = (h.row(r)[0] > 0.0) as usize * 2 + (h.row(r)[1] > 0.0) as usize;
            q[r * 4 + g] = 1.0;
        }
        let data = RouterDataset { hidden: h, q_router: Tensor::new(vec![n, 4], q).unwrap() };
        let mc = ModelConfig { hidden_size: d, vocab_size: 16, head_groups: 4, num_heads: 2, ..Default::default() };
        let rc = RouterTrainConfig { epochs: 30, batch_size: 32, lr: 1e-2, ..Default::default() };
        let (r, _) = train_router_on(&data, &mc, &rc).unwrap();
        let acc = router_accuracy(&r, &data).unwrap();
        assert!(acc > 0.8, "{acc}");
    }
}
