//! Multi-step draft rollout with training-time attention that mirrors
//! inference.
//!
//! Draft row `r` of a sequence holds token `t_{r+1}`. Step 1 pairs it with
//! the target feature at position `r`; step `j > 1` pairs it with the
//! step-`(j-1)` output of row `r - 1` (row 0 keeps the target feature, as no
//! earlier draft output exists). A step-`j` query at row `r` attends to row
//! `p <= r` through the keys computed at step `max(1, j - (r - p))`: exactly
//! the rows a drafter holds in its cache when it reaches depth `j` at that
//! position during generation.

use std::sync::Arc;

use crate::model::{DraftModel, DraftVars};
use crate::tensor::{AttnMask, Result as TResult, Tape, Tensor, Var};

use super::{Result, TrainBatch, TrainError};

/// Output features of each rollout step, each `[B*(S-1) x d]`.
#[derive(Clone, Debug)]
pub struct StepFeatures {
    pub steps: Vec<Tensor>,
}

/// Key visibility for step `j`: queries are this step's rows, keys are the
/// rows of steps `1..=j` stacked in order.
fn step_mask(batch: usize, n: usize, j: usize) -> AttnMask {
    let rows = batch * n;
    let keys = j * rows;
    let mut allowed = vec![false; rows * keys];
    for b in 0..batch {
        for r in 0..n {
            let q = b * n + r;
            for p in 0..=r {
                let m = j.saturating_sub(r - p).max(1);
                allowed[q * keys + (m - 1) * rows + b * n + p] = true;
            }
        }
    }
    AttnMask::Explicit { keys, allowed: Arc::new(allowed) }
}

/// Records the rollout on `tape`; returns one feature var per step.
pub(crate) fn rollout_tape(
    tape: &mut Tape,
    draft: &DraftModel,
    vars: &DraftVars,
    batch: &TrainBatch,
    steps: usize,
) -> TResult<Vec<Var>> {
    let (bsz, n, s) = (batch.batch_size(), batch.draft_len(), batch.seq_len);
    let rows = bsz * n;
    let tokens = batch.draft_tokens();
    let positions = Arc::new((0..bsz).flat_map(|_| 0..n).collect::<Vec<_>>());
    let target = tape.constant(batch.target_features.clone());
    let first_prev = tape.gather_rows(target, &batch.input_rows())?;
    // Row r >= 1 takes the previous step's row r - 1; row 0 the target feature.
    let feedback: Vec<usize> = (0..bsz)
        .flat_map(|b| (0..n).map(move |r| if r == 0 { rows + b * s } else { b * n + r - 1 }))
        .collect();

    let mut feats: Vec<Var> = Vec::with_capacity(steps);
    let mut keys: Vec<Var> = Vec::with_capacity(steps);
    let mut values: Vec<Var> = Vec::with_capacity(steps);
    for j in 1..=steps {
        let prev = match feats.last() {
            None => first_prev,
            Some(&g) => {
                let pool = tape.concat_rows(&[g, target])?;
                tape.gather_rows(pool, &feedback)?
            }
        };
        let past = if keys.is_empty() {
            None
        } else {
            Some((tape.concat_rows(&keys)?, tape.concat_rows(&values)?))
        };
        let (f, k, v) = draft.forward_tape(tape, vars, &tokens, prev, &positions, past, step_mask(bsz, n, j))?;
        feats.push(f);
        keys.push(k);
        values.push(v);
    }
    Ok(feats)
}

/// Runs the rollout without recording gradients.
pub fn multi_step_rollout(batch: &TrainBatch, draft: &DraftModel, steps: usize) -> Result<StepFeatures> {
    if steps == 0 || steps >= batch.seq_len.max(2) + 1 {
        return Err(TrainError::Config(format!(
            "steps must lie in [1, {}], got {steps}",
            batch.seq_len
        )));
    }
    let mut tape = Tape::new();
    let vars = draft.bind(&mut tape, false);
    let feats = rollout_tape(&mut tape, draft, &vars, batch, steps)?;
    Ok(StepFeatures {
        steps: feats.iter().map(|v| tape.value(*v).clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TargetModel};

    fn setup(seq_len: usize) -> (TargetModel, DraftModel, TrainBatch) {
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
        let t = TargetModel::init(cfg, 11).unwrap();
        let d = DraftModel::init(&t, 12);
        let seqs = vec![
            (0..seq_len).map(|i| (i * 5 + 1) % 32).collect::<Vec<_>>(),
            (0..seq_len).map(|i| (i * i + 3) % 32).collect::<Vec<_>>(),
        ];
        let b = TrainBatch::from_target(&t, &seqs).unwrap();
        (t, d, b)
    }

    #[test]
    fn single_step_consumes_target_features() {
        let (_, d, b) = setup(6);
        let one = multi_step_rollout(&b, &d, 1).unwrap();
        let prev = super::super::batch::gather(&b.target_features, &b.input_rows()).unwrap();
        let direct = d
            .forward_rows(&b.tokens[0][1..], &super::super::batch::gather(&prev, &[0, 1, 2, 3, 4]).unwrap(), &[0, 1, 2, 3, 4],
                &crate::model::KvRows::empty(1, 16), &crate::model::Visibility::Causal)
            .unwrap();
        for r in 0..5 {
            assert_eq!(one.steps[0].row(r), direct.features.row(r));
        }
    }

    #[test]
    fn one_position_sequences_cannot_diverge() {
        let (_, d, b) = setup(2);
        let f = multi_step_rollout(&b, &d, 2).unwrap();
        assert!(f.steps[0].bit_eq(&f.steps[1]));
    }

    #[test]
    fn rollout_matches_sequential_chaining() {
        let (_, d, b) = setup(8);
        let steps = 3;
        let f = multi_step_rollout(&b, &d, steps).unwrap();
        let n = b.draft_len();
        for (bi, seq) in b.tokens.iter().enumerate() {
            let feat = |p: usize| b.target_features.row(bi * b.seq_len + p).to_vec();
            for r in 0..n {
                for j in 1..=steps {
                    // Drafting reaches depth j at row r after committing rows < r + 1 - j.
                    let start = (r + 1).saturating_sub(j);
                    let mut cache = d.new_cache();
                    for p in 0..start {
                        d.step(&feat(p), seq[p + 1], &mut cache).unwrap();
                    }
                    let mut g = feat(start);
                    for p in start..=r {
                        g = d.step(&g, seq[p + 1], &mut cache).unwrap();
                    }
                    let got = f.steps[j - 1].row(bi * n + r);
                    for (a, e) in got.iter().zip(&g) {
                        assert!((a - e).abs() < 1e-10, "seq {bi} row {r} step {j}");
                    }
                }
            }
        }
    }

    #[test]
    fn too_many_steps_rejected() {
        let (_, d, b) = setup(3);
        assert!(multi_step_rollout(&b, &d, 0).is_err());
        assert!(multi_step_rollout(&b, &d, 4).is_err());
    }
}
