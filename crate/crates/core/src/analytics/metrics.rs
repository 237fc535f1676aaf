//! Acceptance statistics and measured speedups.

use std::time::Instant;

use serde::Serialize;

use crate::engine::{generate, vanilla_generate, CycleRecord, Drafter, EngineConfig};
use crate::model::{RouterHead, TargetModel};

use super::{AnalyticsError, Result};

/// Mean emitted tokens per cycle.
pub fn acceptance_length(records: &[CycleRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(AnalyticsError::Parameter("no cycles recorded".into()));
    }
    Ok(records.iter().map(|r| (r.accepted + 1) as f64).sum::<f64>() / records.len() as f64)
}

/// Entry `n - 1`: accepted depth-`n` drafts over cycles that reached depth
/// `n`. The vector ends at the deepest depth any cycle reached.
pub fn acceptance_rates(records: &[CycleRecord]) -> Vec<f64> {
    let depth = records.iter().map(|r| r.depth_accepted.len()).max().unwrap_or(0);
    let mut hit = vec![0usize; depth];
    let mut reached = vec![0usize; depth];
    for r in records {
        for (n, &ok) in r.depth_accepted.iter().enumerate() {
            reached[n] += 1;
            hit[n] += ok as usize;
        }
    }
    hit.iter().zip(&reached).map(|(&h, &n)| h as f64 / n as f64).collect()
}

/// Share of LM-head groups evaluated per draft step, over all steps.
pub fn activated_fraction(records: &[CycleRecord]) -> f64 {
    let mut used = 0usize;
    let mut total = 0usize;
    for r in records {
        used += r.active_groups.iter().sum::<usize>();
        total += r.active_groups.len() * r.num_groups;
    }
    if total == 0 {
        0.0
    } else {
        used as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub tau: f64,
    pub alpha: Vec<f64>,
    pub cycles: usize,
    pub generated_tokens: usize,
    /// LM-head columns evaluated while drafting, summed over all steps.
    pub draft_lm_head_columns: usize,
    pub activated_fraction: f64,
    pub draft_ms: f64,
    pub verify_ms: f64,
    pub vanilla_ms: f64,
    pub speculative_ms: f64,
    pub speedup_measured: f64,
    pub tau_over_speedup: f64,
    /// T = 0 only: speculative and vanilla outputs agree on every prompt.
    pub outputs_match: Option<bool>,
    pub warning: String,
}

impl Metrics {
    /// Copy with every wall-clock quantity zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        Self {
            draft_ms: 0.0,
            verify_ms: 0.0,
            vanilla_ms: 0.0,
            speculative_ms: 0.0,
            speedup_measured: 0.0,
            tau_over_speedup: 0.0,
            ..self.clone()
        }
    }

    /// One row per depth.
    pub fn alpha_csv(&self) -> String {
        let mut s = String::from("depth,alpha\n");
        for (i, a) in self.alpha.iter().enumerate() {
            s.push_str(&format!("{},{a:.6}\n", i + 1));
        }
        s
    }

    /// One row for the run.
    pub fn run_csv(&self) -> String {
        format!(
            "tau,speedup_measured,tau_over_speedup,activated_fraction,cycles\n{:.6},{:.6},{:.6},{:.6},{}\n",
            self.tau, self.speedup_measured, self.tau_over_speedup, self.activated_fraction, self.cycles
        )
    }
}

/// Vanilla and speculative decoding over the same prompts and seeds, run
/// back to back on this thread.
pub fn measured_speedup(
    prompts: &[Vec<usize>],
    target: &TargetModel,
    drafter: &mut dyn Drafter,
    router: Option<&RouterHead>,
    cfg: &EngineConfig,
) -> Result<Metrics> {
    if prompts.is_empty() {
        return Err(AnalyticsError::Parameter("no prompts".into()));
    }
    let mut vanilla_out = Vec::with_capacity(prompts.len());
    let t0 = Instant::now();
    for p in prompts {
        vanilla_out.push(vanilla_generate(p, target, cfg)?);
    }
    let vanilla_ms = t0.elapsed().as_secs_f64() * 1e3;

    let mut records = Vec::new();
    let mut matches = true;
    let mut generated = 0;
    let t1 = Instant::now();
    for (p, want) in prompts.iter().zip(&vanilla_out) {
        let g = generate(p, target, drafter, router, cfg)?;
        matches &= &g.tokens == want;
        generated += g.tokens.len();
        records.extend(g.cycles);
    }
    let speculative_ms = t1.elapsed().as_secs_f64() * 1e3;

    let tau = if records.is_empty() { 0.0 } else { acceptance_length(&records)? };
    let vocab = target.config().vocab_size;
    let columns = records
        .iter()
        .map(|r| r.active_groups.iter().map(|&g| g * vocab / r.num_groups).sum::<usize>())
        .sum();
    let speedup = if speculative_ms > 0.0 { vanilla_ms / speculative_ms } else { 0.0 };
    Ok(Metrics {
        tau,
        alpha: acceptance_rates(&records),
        cycles: records.len(),
        generated_tokens: generated,
        draft_lm_head_columns: columns,
        activated_fraction: activated_fraction(&records),
        draft_ms: records.iter().map(|r| r.draft_ms).sum(),
        verify_ms: records.iter().map(|r| r.verify_ms).sum(),
        vanilla_ms,
        speculative_ms,
        speedup_measured: speedup,
        tau_over_speedup: if speedup > 0.0 { tau / speedup } else { 0.0 },
        outputs_match: (cfg.temperature == 0.0).then_some(matches),
        warning: "wall-clock figures come from small CPU models and do not reflect GPU-scale latencies".into(),
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::engine::MirrorDrafter;
    use crate::model::ModelConfig;

    fn rec(accepted: usize, flags: &[bool]) -> CycleRecord {
        CycleRecord {
            drafted: flags.len(),
            accepted,
            emitted: vec![0; accepted + 1],
            depth_accepted: flags.to_vec(),
            active_groups: vec![2, 2],
            step_candidates: vec![1, 1],
            num_groups: 16,
            draft_ms: 0.0,
            verify_ms: 0.0,
        }
    }

    #[test]
    fn tau_examples() {
        let r: Vec<_> = [3, 5, 4].iter().map(|&k| rec(k, &[])).collect();
        assert_eq!(acceptance_length(&r).unwrap(), 5.0);
        assert_eq!(acceptance_length(&[rec(0, &[false])]).unwrap(), 1.0);
        assert!(acceptance_length(&[]).is_err());
    }

    #[test]
    fn alpha_is_conditional() {
        let r = vec![rec(2, &[true, true, false]); 4];
        assert_eq!(acceptance_rates(&r), vec![1.0, 1.0, 0.0]);
        let r = vec![rec(0, &[false]), rec(1, &[true, false])];
        assert_eq!(acceptance_rates(&r), vec![0.5, 0.0]);
        assert_eq!(activated_fraction(&r), 0.125);
    }

    #[test]
    fn bernoulli_construction_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rates = [0.8, 0.6];
        let records: Vec<_> = (0..10_000)
            .map(|_| {
                let mut flags = Vec::new();
                for &p in &rates {
                    let ok = rng.random::<f64>() < p;
                    flags.push(ok);
                    if !ok {
                        break;
                    }
                }
                let k = flags.iter().take_while(|&&f| f).count();
                rec(k, &flags)
            })
            .collect();
        let a = acceptance_rates(&records);
        assert!((a[0] - 0.8).abs() < 0.02 && (a[1] - 0.6).abs() < 0.03, "{a:?}");
    }

    #[test]
    fn mirror_benchmark_reaches_the_bound() {
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
        let t = TargetModel::init(cfg, 1).unwrap();
        let ec = EngineConfig { gamma: 6, max_new_tokens: 21, ..Default::default() };
        let prompts = vec![vec![1, 2], vec![5, 6, 7]];
        let m = measured_speedup(&prompts, &t, &mut MirrorDrafter::new(&t), None, &ec).unwrap();
        assert_eq!(m.tau, 7.0);
        assert_eq!(m.alpha, vec![1.0; 6]);
        assert_eq!(m.outputs_match, Some(true));
        assert_eq!(m.activated_fraction, 1.0);
        let json = serde_json::to_value(&m).unwrap();
        for key in ["tau", "alpha", "speedup_measured", "activated_fraction"] {
            assert!(json.get(key).is_some());
        }
    }
}
