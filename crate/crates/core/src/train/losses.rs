//! Contrastive alignment loss and the router's group-level targets and loss.

use crate::tensor::{Result as TResult, Tape, Tensor, Var};

use super::{Result, StepFeatures, TrainConfig, TrainError};

/// Floor applied to router probabilities before taking logs.
pub const ROUTER_PROB_FLOOR: f64 = 1e-12;

/// InfoNCE over cosine similarities.
///
/// For every `(query, positive)` pair the term is
/// `-log(exp(s_qp / t) / sum_c exp(s_qc / t))`, where `c` ranges over all
/// candidates except the `(query, candidate)` pairs in `excluded`. Returns
/// the mean over pairs.
pub fn info_nce(
    tape: &mut Tape,
    queries: Var,
    candidates: Var,
    positives: &[(usize, usize)],
    excluded: &[(usize, usize)],
    temperature: f64,
) -> TResult<Var> {
    let nq = tape.value(queries).rows();
    let nc = tape.value(candidates).rows();
    let q = tape.normalize_rows(queries)?;
    let c = tape.normalize_rows(candidates)?;
    let sim = tape.matmul_nt(q, c)?;
    let logits = tape.scale(sim, 1.0 / temperature)?;
    let mut allowed = vec![true; nq * nc];
    for &(i, j) in excluded {
        allowed[i * nc + j] = false;
    }
    let lp = tape.masked_log_softmax(logits, std::sync::Arc::new(allowed))?;
    let picks = positives.iter().map(|&(i, j)| i * nc + j).collect();
    let m = tape.select_mean(lp, picks)?;
    tape.scale(m, -1.0)
}

/// Alignment loss over `steps` (each `[M x d]`) and `target` (`[M x d]`).
///
/// Candidates are every step feature and every target feature. A query is a
/// step feature; its positives are the same row in the other steps and,
/// when `target_positive`, the target row. The query itself is the only
/// excluded candidate.
pub fn csra_loss_tape(
    tape: &mut Tape,
    steps: &[Var],
    target: Var,
    temperature: f64,
    target_positive: bool,
) -> TResult<Var> {
    let t = steps.len();
    let m = tape.value(target).rows();
    let mut parts = steps.to_vec();
    parts.push(target);
    let all = tape.concat_rows(&parts)?;
    let queries = tape.slice_rows(all, 0, t * m)?;
    let mut positives = Vec::new();
    let mut excluded = Vec::with_capacity(t * m);
    for i in 0..t {
        for r in 0..m {
            let q = i * m + r;
            excluded.push((q, q));
            for i2 in (0..t).filter(|&i2| i2 != i) {
                positives.push((q, i2 * m + r));
            }
            if target_positive {
                positives.push((q, t * m + r));
            }
        }
    }
    info_nce(tape, queries, all, &positives, &excluded, temperature)
}

/// Value of the alignment loss for already computed step features
/// (`[M x d]` each) against target features at the same rows.
pub fn csra_loss(step_features: &StepFeatures, target_features: &Tensor, cfg: &TrainConfig) -> Result<f64> {
    csra_loss_values(&step_features.steps, target_features, cfg.csra_temperature, cfg.csra_target_positive)
}

pub fn csra_loss_values(steps: &[Tensor], target: &Tensor, temperature: f64, target_positive: bool) -> Result<f64> {
    if steps.len() < 2 {
        return Err(TrainError::Config("the alignment loss needs at least two steps".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = steps.iter().map(|s| tape.constant(s.clone())).collect();
    let tv = tape.constant(target.clone());
    let l = csra_loss_tape(&mut tape, &vars, tv, temperature, target_positive)?;
    Ok(tape.value(l).item())
}

/// Probability mass of each contiguous vocabulary group.
pub fn router_target(q: &[f64], groups: usize) -> Result<Vec<f64>> {
    if groups == 0 || q.is_empty() || q.len() % groups != 0 {
        return Err(TrainError::Distribution(format!(
            "a length-{} distribution cannot be split into {groups} equal groups",
            q.len()
        )));
    }
    if q.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(TrainError::Distribution("entries must be finite and nonnegative".into()));
    }
    let total: f64 = q.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(TrainError::Distribution(format!("entries sum to {total}, not 1")));
    }
    let size = q.len() / groups;
    Ok(q.chunks_exact(size).map(|c| c.iter().sum()).collect())
}

/// `-sum_n q_router(n) * log(max(p_router(n), 1e-12))`.
pub fn router_loss(q_router: &[f64], p_router: &[f64]) -> Result<f64> {
    if q_router.len() != p_router.len() {
        return Err(TrainError::Distribution("router distributions differ in length".into()));
    }
    Ok(-q_router
        .iter()
        .zip(p_router)
        .map(|(q, p)| q * p.max(ROUTER_PROB_FLOOR).ln())
        .sum::<f64>())
}

/// Mean router loss over rows of `logits` (`[n x N]`) against `q` (`[n x N]`).
pub fn router_loss_tape(tape: &mut Tape, logits: Var, q: Var) -> TResult<Var> {
    let p = tape.softmax(logits, 1)?;
    let lp = tape.log_clamped(p, ROUTER_PROB_FLOOR)?;
    tape.cross_entropy(lp, q)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::max_relative_error;

    #[test]
    fn info_nce_single_positive_example() {
        // Four orthogonal directions; query matches candidate 0 exactly.
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::row_vector(&[1.0, 0.0, 0.0, 0.0]).unwrap());
        let c = tape.constant(Tensor::identity(4));
        let l = info_nce(&mut tape, q, c, &[(0, 0)], &[], 0.07).unwrap();
        let expected = -((1.0f64 / 0.07).exp() / ((1.0f64 / 0.07).exp() + 3.0)).ln();
        let v = tape.value(l).item();
        assert!((v - expected).abs() < 1e-12);
        assert!(v < 1e-5, "{v}");
    }

    #[test]
    fn identical_features_give_log_k() {
        let f = Tensor::filled(&[3, 4], 0.5);
        let steps = [f.clone(), f.clone()];
        let v = csra_loss_values(&steps, &f, 0.07, true).unwrap();
        // 9 candidates, the query itself excluded.
        assert!((v - 8f64.ln()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn csra_needs_two_steps() {
        let f = Tensor::filled(&[2, 3], 1.0);
        assert!(matches!(csra_loss_values(&[f.clone()], &f, 0.07, true), Err(TrainError::Config(_))));
    }

    #[test]
    fn csra_ignores_feature_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let steps: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, 6], 1.0, &mut rng)).collect();
        let target = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let base = csra_loss_values(&steps, &target, 0.07, true).unwrap();
        let mut scaled = steps.clone();
        let mut data = scaled[1].to_vec();
        for v in &mut data[6..12] {
            *v *= 7.0;
        }
        scaled[1] = Tensor::new(vec![4, 6], data).unwrap();
        let after = csra_loss_values(&scaled, &target, 0.07, true).unwrap();
        assert!((base - after).abs() < 1e-10);
        assert!(base >= 0.0);
    }

    #[test]
    fn csra_gradient_matches_finite_differences() {
        for seed in 0..20 {
            for target_positive in [true, false] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[3, 8], 1.0, &mut rng)).collect();
                let err = max_relative_error(&inputs, 1e-5, |t, v| {
                    csra_loss_tape(t, &v[..2], v[2], 0.07, target_positive)
                })
                .unwrap();
                assert!(err < 1e-4, "seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn router_target_examples() {
        assert_eq!(router_target(&[0.1, 0.2, 0.3, 0.4], 2).unwrap(), vec![0.1 + 0.2, 0.3 + 0.4]);
        let onehot: Vec<f64> = (0..8).map(|i| if i == 5 { 1.0 } else { 0.0 }).collect();
        assert_eq!(router_target(&onehot, 4).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(router_target(&[0.5, 0.6], 1).is_err());
        assert!(router_target(&[0.5, 0.5, 0.0], 2).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let raw = Tensor::randn(&[64], 2.0, &mut rng);
            let q = crate::tensor::softmax_slice(raw.data());
            let s: f64 = router_target(&q, 16).unwrap().iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn router_loss_examples() {
        let v = router_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap();
        assert!((v - 0.6109).abs() < 5e-5);
        assert_eq!(router_loss(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn router_loss_gradient_through_logits() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [Tensor::randn(&[3, 4], 1.0, &mut rng)];
            let raw = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let q: Vec<f64> = (0..3).flat_map(|r| crate::tensor::softmax_slice(raw.row(r))).collect();
            let q = Tensor::new(vec![3, 4], q).unwrap();
            let err = max_relative_error(&inputs, 1e-5, |t, v| {
                let qv = t.constant(q.clone());
                router_loss_tape(t, v[0], qv)
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
