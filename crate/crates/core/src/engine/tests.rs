use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{DraftModel, ModelConfig, RouterHead, TargetModel};
use crate::tensor::argmax;

fn tiny() -> (TargetModel, DraftModel, RouterHead) {
    let cfg = ModelConfig {
        vocab_size: 32,
        hidden_size: 16,
        num_layers: 2,
        num_heads: 2,
        intermediate_size: 32,
        max_seq_len: 96,
        head_groups: 8,
        router_top_n: 2,
        ..Default::default()
    };
    let t = TargetModel::init(cfg.clone(), 11).unwrap();
    let d = DraftModel::init(&t, 12);
    let r = RouterHead::init(&cfg, 13);
    (t, d, r)
}

fn prompt(seed: u64, len: usize, vocab: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

fn greedy_cfg(mode: DraftMode, use_router: bool) -> EngineConfig {
    EngineConfig {
        mode,
        gamma: 4,
        tree_depth: 4,
        tree_budget: 12,
        use_router,
        max_new_tokens: 20,
        ..Default::default()
    }
}

#[test]
fn greedy_speculation_matches_vanilla_for_every_drafter() {
    let (t, d, r) = tiny();
    for seed in 0..6 {
        let p = prompt(seed, 1 + seed as usize % 5, 32);
        for mode in [DraftMode::Chain, DraftMode::Tree] {
            for use_router in [false, true] {
                let cfg = greedy_cfg(mode, use_router);
                let want = vanilla_generate(&p, &t, &cfg).unwrap();
                let got = generate(&p, &t, &mut EagleDrafter::new(&d), Some(&r), &cfg).unwrap();
                assert_eq!(got.tokens, want, "eagle {mode:?} router={use_router}");
                let got = generate(&p, &t, &mut MirrorDrafter::new(&t), None, &greedy_cfg(mode, false)).unwrap();
                assert_eq!(got.tokens, want);
                let got = generate(&p, &t, &mut AdversarialDrafter::new(&t), None, &greedy_cfg(mode, false)).unwrap();
                assert_eq!(got.tokens, want);
            }
        }
    }
}

#[test]
fn mirror_accepts_everything_and_adversary_nothing() {
    let (t, _, _) = tiny();
    let cfg = EngineConfig { gamma: 4, max_new_tokens: 25, ..Default::default() };
    let g = generate(&[3, 1, 4], &t, &mut MirrorDrafter::new(&t), None, &cfg).unwrap();
    assert_eq!(g.cycles.len(), 5);
    assert!(g.cycles.iter().all(|c| c.accepted == 4 && c.emitted.len() == 5));
    let g = generate(&[3, 1, 4], &t, &mut AdversarialDrafter::new(&t), None, &cfg).unwrap();
    assert!(g.cycles.iter().all(|c| c.accepted == 0 && c.emitted.len() == 1));
    assert_eq!(g.tokens.len(), 25);
}

#[test]
fn mirror_sampling_accepts_with_probability_one() {
    let (t, _, _) = tiny();
    let cfg = EngineConfig { gamma: 3, temperature: 0.8, max_new_tokens: 24, seed: 5, ..Default::default() };
    let g = generate(&[7, 2], &t, &mut MirrorDrafter::new(&t), None, &cfg).unwrap();
    assert!(g.cycles.iter().all(|c| c.accepted == 3));
}

#[test]
fn incremental_target_cache_matches_recomputation() {
    let (t, d, r) = tiny();
    for mode in [DraftMode::Chain, DraftMode::Tree] {
        for temperature in [0.0, 1.0] {
            let cfg = EngineConfig { temperature, ..greedy_cfg(mode, true) };
            let mut drafter = EagleDrafter::new(&d);
            let mut s = Session::new(&[5, 9, 1, 30], &t, &mut drafter, Some(&r), &cfg).unwrap();
            while s.cycle().unwrap().is_some() {
                let toks = s.tokens().to_vec();
                let mut fresh = t.new_cache();
                t.forward(&toks[..toks.len() - 1], Some(&mut fresh)).unwrap();
                assert_eq!(fresh.tokens(), s.target_cache().tokens());
                assert!(fresh.rows().max_abs_diff(s.target_cache().rows()) < 1e-10);
            }
        }
    }
}

#[test]
fn chain_matches_sequential_single_steps() {
    let (t, d, _) = tiny();
    let p = vec![4, 8, 15, 16, 23];
    let out = t.forward(&p[..4], None).unwrap();
    let feats: Vec<Vec<f64>> = (0..4).map(|r| out.features.row(r).to_vec()).collect();
    // Oracle: one row at a time through the draft cache.
    let mut cache = d.new_cache();
    let mut h = Vec::new();
    for r in 0..4 {
        h = d.step(&feats[r], p[r + 1], &mut cache).unwrap();
    }
    let mut want = Vec::new();
    for _ in 0..5 {
        let logits = d.logits(&crate::tensor::Tensor::new(vec![1, 16], h.clone()).unwrap()).unwrap();
        let x = argmax(logits.data());
        want.push(x);
        h = d.step(&h.clone(), x, &mut cache).unwrap();
    }
    let settings = DraftSettings { head: HeadMode::Full, temperature: 0.0, num_groups: 8 };
    let input = RoundInput { tokens: &p, target_features: &feats };
    let mut s = ChaChaSampler::new(0);
    let tree = draft_chain(&mut EagleDrafter::new(&d), &input, &settings, 5, &mut s).unwrap();
    let got: Vec<usize> = tree.nodes.iter().map(|n| n.token).collect();
    assert_eq!(got, want);
    assert!(matches!(
        draft_chain(&mut EagleDrafter::new(&d), &input, &settings, 0, &mut s),
        Err(EngineError::Config(_))
    ));
}

#[test]
fn tree_with_budget_equal_to_depth_is_the_greedy_chain() {
    let (t, d, _) = tiny();
    let p = vec![1, 2, 3, 5, 8];
    let out = t.forward(&p[..4], None).unwrap();
    let feats: Vec<Vec<f64>> = (0..4).map(|r| out.features.row(r).to_vec()).collect();
    let input = RoundInput { tokens: &p, target_features: &feats };
    let settings = DraftSettings { head: HeadMode::Full, temperature: 0.0, num_groups: 8 };
    let chain = draft_chain(&mut EagleDrafter::new(&d), &input, &settings, 4, &mut ChaChaSampler::new(0)).unwrap();
    let tree = draft_tree(&mut EagleDrafter::new(&d), &input, &settings, 4, 4, 1).unwrap();
    assert_eq!(chain.nodes, tree.nodes);
    let wide = draft_tree(&mut EagleDrafter::new(&d), &input, &settings, 4, 20, 5).unwrap();
    assert!(wide.len() <= 20);
    for n in &wide.nodes {
        if let Some(pa) = n.parent {
            assert!(n.log_prob <= wide.nodes[pa].log_prob);
            assert_eq!(n.depth, wide.nodes[pa].depth + 1);
        }
    }
}

/// Logits that depend only on the path drafted so far.
struct TableDrafter {
    paths: Vec<Vec<usize>>,
}

fn table_logits(path: &[usize]) -> Vec<f64> {
    let mut h: u64 = 1469598103934665603;
    for &t in path {
        h = (h ^ (t as u64 + 1)).wrapping_mul(1099511628211);
    }
    (0..3).map(|i| ((h >> (i * 13)) % 1000) as f64 / 250.0).collect()
}

impl Drafter for TableDrafter {
    fn begin_round(&mut self, _: &RoundInput<'_>) -> Result<Option<DraftScores>> {
        self.paths.clear();
        Ok(Some(DraftScores::Logits(table_logits(&[]))))
    }

    fn extend(&mut self, nodes: &[(Option<usize>, usize)]) -> Result<Vec<DraftScores>> {
        let mut out = Vec::new();
        for &(p, tok) in nodes {
            let mut path = p.map(|i| self.paths[i].clone()).unwrap_or_default();
            path.push(tok);
            out.push(DraftScores::Logits(table_logits(&path)));
            self.paths.push(path);
        }
        Ok(out)
    }

    fn end_round(&mut self) {}

    fn reset(&mut self) {}
}

#[test]
fn unpruned_tree_equals_brute_force_top_budget() {
    let depth = 4;
    let settings = DraftSettings { head: HeadMode::Full, temperature: 0.0, num_groups: 1 };
    let input = RoundInput { tokens: &[0, 0], target_features: &[] };
    for budget in [4, 7, 15, 40] {
        let tree = draft_tree(&mut TableDrafter { paths: vec![] }, &input, &settings, depth, budget, 81).unwrap();
        // Enumerate every path up to `depth`.
        let mut all: Vec<(f64, Vec<usize>)> = Vec::new();
        let mut stack = vec![(0.0, Vec::<usize>::new())];
        while let Some((lp, path)) = stack.pop() {
            if path.len() == depth {
                continue;
            }
            let probs = temperature_probs(&table_logits(&path), 0.0);
            for (t, p) in probs.iter().enumerate() {
                let mut np = path.clone();
                np.push(t);
                all.push((lp + p.ln(), np.clone()));
                stack.push((lp + p.ln(), np));
            }
        }
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.len().cmp(&b.1.len())));
        let mut want: Vec<Vec<usize>> = all[..budget].iter().map(|x| x.1.clone()).collect();
        let mut got: Vec<Vec<usize>> = (0..tree.len()).map(|i| tree.path_tokens(i)).collect();
        want.sort();
        got.sort();
        assert_eq!(got, want, "budget {budget}");
    }
}

#[test]
fn router_accounting_in_chain_and_tree() {
    let (t, d, r) = tiny();
    let cfg = EngineConfig { use_router: true, router_top_n: 2, ..greedy_cfg(DraftMode::Chain, true) };
    let g = generate(&[1, 2, 3], &t, &mut EagleDrafter::new(&d), Some(&r), &cfg).unwrap();
    assert!(g.cycles.iter().flat_map(|c| &c.active_groups).all(|&a| a == 2));
    let cfg = EngineConfig { mode: DraftMode::Tree, tree_budget: 16, ..cfg };
    let g = generate(&[1, 2, 3], &t, &mut EagleDrafter::new(&d), Some(&r), &cfg).unwrap();
    for c in &g.cycles {
        for (&a, &n) in c.active_groups.iter().zip(&c.step_candidates) {
            assert!(a >= 2 && a <= (n * 2).min(8), "{a} groups for {n} candidates");
        }
    }
}

#[test]
fn seeded_sampling_runs_are_reproducible() {
    let (t, d, r) = tiny();
    for mode in [DraftMode::Chain, DraftMode::Tree] {
        let cfg = EngineConfig { temperature: 1.0, seed: 9, ..greedy_cfg(mode, true) };
        let a = generate(&[3, 3, 7], &t, &mut EagleDrafter::new(&d), Some(&r), &cfg).unwrap();
        let b = generate(&[3, 3, 7], &t, &mut EagleDrafter::new(&d), Some(&r), &cfg).unwrap();
        assert_eq!(a.tokens, b.tokens);
        let mut ta = Vec::new();
        let mut tb = Vec::new();
        write_trace(&a.cycles, false, &mut ta).unwrap();
        write_trace(&b.cycles, false, &mut tb).unwrap();
        assert_eq!(ta, tb);
    }
}

#[test]
fn zero_and_one_token_budgets() {
    let (t, d, _) = tiny();
    let cfg = EngineConfig { max_new_tokens: 0, ..Default::default() };
    let g = generate(&[1], &t, &mut EagleDrafter::new(&d), None, &cfg).unwrap();
    assert!(g.tokens.is_empty() && g.cycles.is_empty());
    let cfg = EngineConfig { max_new_tokens: 1, ..Default::default() };
    let g = generate(&[1, 4], &t, &mut EagleDrafter::new(&d), None, &cfg).unwrap();
    assert_eq!(g.cycles.len(), 1);
    assert_eq!(g.tokens.len(), 1);
    assert!(generate(&[], &t, &mut EagleDrafter::new(&d), None, &cfg).is_err());
    assert!(generate(&[99], &t, &mut EagleDrafter::new(&d), None, &cfg).is_err());
}

#[test]
fn generation_stops_at_the_context_limit() {
    let (t, _, _) = tiny();
    let cfg = EngineConfig { max_new_tokens: 500, ..Default::default() };
    let p = prompt(1, 90, 32);
    let g = generate(&p, &t, &mut MirrorDrafter::new(&t), None, &cfg).unwrap();
    assert_eq!(p.len() + g.tokens.len(), 96);
    assert_eq!(g.tokens, vanilla_generate(&p, &t, &cfg).unwrap());
}
