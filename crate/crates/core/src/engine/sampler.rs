//! Randomness behind drafting and verification, either seeded or
//! exhaustively enumerated.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Source of the two kinds of random decisions the engine makes.
pub trait Sampler {
    /// Index drawn from nonnegative weights summing to one.
    fn categorical(&mut self, probs: &[f64]) -> usize;
    /// `true` with probability `p` (clamped to `[0, 1]`).
    fn bernoulli(&mut self, p: f64) -> bool;
}

pub struct ChaChaSampler {
    rng: ChaCha8Rng,
}

impl ChaChaSampler {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Sampler for ChaChaSampler {
    fn categorical(&mut self, probs: &[f64]) -> usize {
        let u: f64 = self.rng.random();
        let total: f64 = probs.iter().sum();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = i;
            if u * total < acc {
                return i;
            }
        }
        last
    }

    fn bernoulli(&mut self, p: f64) -> bool {
        let u: f64 = self.rng.random();
        u < p
    }
}

/// Replays a fixed prefix of decisions, then takes the first outcome of
/// every new decision while recording how many outcomes it had.
struct Scripted {
    script: Vec<(usize, usize)>,
    pos: usize,
    weight: f64,
}

impl Scripted {
    fn choose(&mut self, outcomes: &[(usize, f64)]) -> usize {
        let pick = if self.pos < self.script.len() {
            self.script[self.pos].0
        } else {
            self.script.push((0, outcomes.len()));
            0
        };
        self.pos += 1;
        let (value, p) = outcomes[pick];
        self.weight *= p;
        value
    }
}

impl Sampler for Scripted {
    fn categorical(&mut self, probs: &[f64]) -> usize {
        let total: f64 = probs.iter().sum();
        let outcomes: Vec<(usize, f64)> =
            probs.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(i, &p)| (i, p / total)).collect();
        self.choose(&outcomes)
    }

    fn bernoulli(&mut self, p: f64) -> bool {
        let p = p.clamp(0.0, 1.0);
        let mut outcomes = Vec::with_capacity(2);
        if p > 0.0 {
            outcomes.push((1, p));
        }
        if p < 1.0 {
            outcomes.push((0, 1.0 - p));
        }
        self.choose(&outcomes) == 1
    }
}

/// Exact law of `run`'s result over every sequence of random decisions.
/// `run` must make finitely many decisions on every path.
pub fn enumerate_law<T: Ord, F: FnMut(&mut dyn Sampler) -> T>(mut run: F) -> BTreeMap<T, f64> {
    let mut law = BTreeMap::new();
    let mut script: Vec<(usize, usize)> = Vec::new();
    loop {
        let mut s = Scripted { script, pos: 0, weight: 1.0 };
        let out = run(&mut s);
        *law.entry(out).or_insert(0.0) += s.weight;
        script = s.script;
        script.truncate(s.pos);
        while let Some(&(c, n)) = script.last() {
            if c + 1 < n {
                break;
            }
            script.pop();
        }
        match script.last_mut() {
            Some(last) => last.0 += 1,
            None => return law,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_of_two_draws_is_exact() {
        let law = enumerate_law(|s| {
            let a = s.categorical(&[0.25, 0.0, 0.75]);
            let b = s.bernoulli(0.4);
            (a, b)
        });
        assert_eq!(law.len(), 4);
        assert!((law[&(0, true)] - 0.1).abs() < 1e-15);
        assert!((law[&(2, false)] - 0.45).abs() < 1e-15);
        assert!((law.values().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn enumeration_handles_path_dependent_decisions() {
        // Geometric-like process truncated at three flips.
        let law = enumerate_law(|s| {
            let mut n = 0;
            while n < 3 && s.bernoulli(0.5) {
                n += 1;
            }
            n
        });
        assert_eq!(law[&0], 0.5);
        assert_eq!(law[&1], 0.25);
        assert_eq!(law[&3], 0.125);
    }

    #[test]
    fn chacha_categorical_skips_zero_mass() {
        let mut s = ChaChaSampler::new(1);
        for _ in 0..200 {
            assert_ne!(s.categorical(&[0.5, 0.0, 0.5]), 1);
        }
        let mut a = ChaChaSampler::new(7);
        let mut b = ChaChaSampler::new(7);
        let xs: Vec<_> = (0..20).map(|_| a.categorical(&[0.2, 0.3, 0.5])).collect();
        let ys: Vec<_> = (0..20).map(|_| b.categorical(&[0.2, 0.3, 0.5])).collect();
        assert_eq!(xs, ys);
    }
}
