//! How far apart a drafter's features drift across rollout steps.

use serde::Serialize;

use crate::model::DraftModel;
use crate::tensor::{Tape, Tensor};
use crate::train::{info_nce, multi_step_rollout, TrainBatch};

use super::{AnalyticsError, Result};

/// Lower-triangular matrix: `entries[i][j]` (`i > j`, 0-based steps) is the
/// InfoNCE of step-`j` queries against their step-`i` counterparts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InfoNceMatrix {
    pub steps: usize,
    pub entries: Vec<Vec<Option<f64>>>,
}

impl InfoNceMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries.get(i).and_then(|r| r.get(j)).copied().flatten()
    }

    /// Every defined entry as `(i, j, value)`.
    pub fn off_diagonal(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.steps {
            for j in 0..i {
                if let Some(v) = self.get(i, j) {
                    out.push((i, j, v));
                }
            }
        }
        out
    }

    /// CSV with a header row; undefined cells are empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step");
        for j in 0..self.steps {
            s.push_str(&format!(",step{}", j + 1));
        }
        s.push('\n');
        for i in 0..self.steps {
            s.push_str(&format!("step{}", i + 1));
            for j in 0..self.steps {
                s.push(',');
                if let Some(v) = self.get(i, j) {
                    s.push_str(&format!("{v:.6}"));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Mean InfoNCE of `queries` (`[m x d]`) whose only positive is the same
/// row of `positives`; candidates are both sets minus the query itself.
pub fn step_pair_infonce(queries: &Tensor, positives: &Tensor, temperature: f64) -> Result<f64> {
    let m = queries.rows();
    if positives.shape() != queries.shape() || m == 0 {
        return Err(AnalyticsError::Parameter("step features must have one shape".into()));
    }
    let mut tape = Tape::new();
    let q = tape.constant(queries.clone());
    let p = tape.constant(positives.clone());
    let value = (|| {
        let cands = tape.concat_rows(&[q, p])?;
        let pos: Vec<(usize, usize)> = (0..m).map(|r| (r, m + r)).collect();
        let exc: Vec<(usize, usize)> = (0..m).map(|r| (r, r)).collect();
        info_nce(&mut tape, q, cands, &pos, &exc, temperature)
    })()
    .map_err(crate::train::TrainError::from)?;
    Ok(tape.value(value).item())
}

/// For each pair of steps `i > j` and each batch: queries are the step-`j`
/// features, the only positive of a query is the step-`i` feature at the
/// same row, and the candidates are all step-`j` and step-`i` features of
/// the batch apart from the query itself. Entries are averaged over rows.
pub fn cross_step_infonce(
    draft: &DraftModel,
    batches: &[TrainBatch],
    steps: usize,
    temperature: f64,
) -> Result<InfoNceMatrix> {
    if steps < 2 {
        return Err(AnalyticsError::Parameter("the diagnostic needs at least two steps".into()));
    }
    if batches.is_empty() || !(temperature > 0.0) {
        return Err(AnalyticsError::Parameter("need evaluation batches and a positive temperature".into()));
    }
    let mut sums = vec![vec![0.0; steps]; steps];
    let mut rows = 0usize;
    for b in batches {
        let f = multi_step_rollout(b, draft, steps)?;
        let m = f.steps[0].rows();
        for i in 1..steps {
            for j in 0..i {
                let l = step_pair_infonce(&f.steps[j], &f.steps[i], temperature)?;
                sums[i][j] += l * m as f64;
            }
        }
        rows += m;
    }
    let entries = (0..steps)
        .map(|i| (0..steps).map(|j| (j < i).then(|| sums[i][j] / rows as f64)).collect())
        .collect();
    Ok(InfoNceMatrix { steps, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TargetModel};
    use crate::tensor::Tensor;

    fn setup() -> (DraftModel, Vec<TrainBatch>) {
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
        let t = TargetModel::init(cfg, 2).unwrap();
        let d = DraftModel::init(&t, 3);
        let seqs: Vec<Vec<usize>> = (0..3).map(|b| (0..9).map(|i| (i * 5 + b * 3) % 32).collect()).collect();
        (d, vec![TrainBatch::from_target(&t, &seqs).unwrap()])
    }

    #[test]
    fn entries_are_nonnegative_and_reproducible() {
        let (d, b) = setup();
        let a = cross_step_infonce(&d, &b, 3, 0.07).unwrap();
        let again = cross_step_infonce(&d, &b, 3, 0.07).unwrap();
        assert_eq!(a, again);
        assert_eq!(a.off_diagonal().len(), 3);
        assert!(a.off_diagonal().iter().all(|&(_, _, v)| v >= 0.0));
        assert!(a.get(0, 1).is_none());
        assert!(cross_step_infonce(&d, &b, 1, 0.07).is_err());
        assert_eq!(a.to_csv().lines().count(), 4);
    }

    #[test]
    fn identical_steps_with_orthogonal_positions_give_zero() {
        let m = 6;
        let mut rows = vec![vec![0.0; 8]; m];
        for (r, row) in rows.iter_mut().enumerate() {
            row[r] = 1.0 + r as f64;
        }
        let f = Tensor::from_rows(&rows).unwrap();
        assert!(step_pair_infonce(&f, &f, 0.07).unwrap() < 1e-3);
        // Scaling features leaves cosine similarities unchanged.
        let scaled = Tensor::new(vec![m, 8], f.data().iter().map(|v| v * 3.5).collect()).unwrap();
        let a = step_pair_infonce(&f, &scaled, 0.07).unwrap();
        let b = step_pair_infonce(&f, &f, 0.07).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
