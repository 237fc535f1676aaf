use crate::model::TargetModel;
use crate::tensor::Tensor;

use super::{Result, TrainError};

/// Equal-length sequences with the frozen target's features and next-token
/// distributions at every position, stacked row-wise (`row = b * S + s`).
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub tokens: Vec<Vec<usize>>,
    /// `[B*S x d]`
    pub target_features: Tensor,
    /// `[B*S x V]`
    pub target_probs: Tensor,
    pub seq_len: usize,
}

impl TrainBatch {
    pub fn from_target(target: &TargetModel, sequences: &[Vec<usize>]) -> Result<Self> {
        let seq_len = sequences.first().map_or(0, Vec::len);
        if seq_len < 2 || sequences.iter().any(|s| s.len() != seq_len) {
            return Err(TrainError::Data("batch needs equal-length sequences of at least 2 tokens".into()));
        }
        let mut feats = Vec::new();
        let mut probs = Vec::new();
        for seq in sequences {
            let out = target.forward(seq, None)?;
            feats.extend_from_slice(out.features.data());
            for r in 0..seq_len {
                probs.extend(crate::tensor::softmax_slice(out.logits.row(r)));
            }
        }
        let (d, v) = (target.config().hidden_size, target.config().vocab_size);
        let rows = sequences.len() * seq_len;
        Ok(Self {
            tokens: sequences.to_vec(),
            target_features: Tensor::new(vec![rows, d], feats)?,
            target_probs: Tensor::new(vec![rows, v], probs)?,
            seq_len,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.tokens.len()
    }

    /// Draft rows per sequence: positions `1..S`.
    pub fn draft_len(&self) -> usize {
        self.seq_len - 1
    }

    pub fn draft_rows(&self) -> usize {
        self.batch_size() * self.draft_len()
    }

    /// Tokens `t_1..t_{S-1}` of every sequence.
    pub fn draft_tokens(&self) -> Vec<usize> {
        self.tokens.iter().flat_map(|s| s[1..].iter().copied()).collect()
    }

    /// Target rows at positions `s - 1` for each draft row.
    pub fn input_rows(&self) -> Vec<usize> {
        (0..self.batch_size())
            .flat_map(|b| (0..self.draft_len()).map(move |r| b * self.seq_len + r))
            .collect()
    }

    /// Target rows at positions `s` for each draft row (regression and
    /// classification labels).
    pub fn label_rows(&self) -> Vec<usize> {
        (0..self.batch_size())
            .flat_map(|b| (0..self.draft_len()).map(move |r| b * self.seq_len + r + 1))
            .collect()
    }

    pub fn label_features(&self) -> Result<Tensor> {
        gather(&self.target_features, &self.label_rows())
    }

    pub fn label_probs(&self) -> Result<Tensor> {
        gather(&self.target_probs, &self.label_rows())
    }
}

pub(crate) fn gather(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * t.cols());
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Ok(Tensor::new(vec![rows.len(), t.cols()], data)?)
}
