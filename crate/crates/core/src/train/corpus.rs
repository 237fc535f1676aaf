//! Token sources: a seeded order-2 Markov generator and raw byte files.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, TrainError};

/// Order-2 Markov chain over a small alphabet spread across byte values,
/// so that symbol `i` is byte `i * (256 / alphabet)`.
#[derive(Clone, Debug)]
pub struct MarkovSource {
    alphabet: usize,
    /// `[alphabet^2]` contexts, each with `(successor, probability)` pairs.
    table: Vec<Vec<(usize, f64)>>,
}

/// Successor weights by rank; each context favours one continuation.
const SKEW: [f64; 3] = [0.72, 0.20, 0.08];

impl MarkovSource {
    pub fn new(alphabet: usize, seed: u64) -> Result<Self> {
        if !(SKEW.len()..=256).contains(&alphabet) {
            return Err(TrainError::Config(format!("alphabet size {alphabet} must lie in [3, 256]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..alphabet * alphabet)
            .map(|_| {
                let mut chosen: Vec<usize> = Vec::with_capacity(SKEW.len());
                while chosen.len() < SKEW.len() {
                    let s = rng.random_range(0..alphabet);
                    if !chosen.contains(&s) {
                        chosen.push(s);
                    }
                }
                chosen.into_iter().zip(SKEW).collect()
            })
            .collect();
        Ok(Self { alphabet, table })
    }

    pub fn byte_of(&self, symbol: usize) -> u8 {
        (symbol * (256 / self.alphabet)) as u8
    }

    /// Entropy rate in nats per symbol (all contexts share one weight profile).
    pub fn entropy_rate(&self) -> f64 {
        -SKEW.iter().map(|p| p * p.ln()).sum::<f64>()
    }

    pub fn generate(&self, len: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = rng.random_range(0..self.alphabet);
        let mut b = rng.random_range(0..self.alphabet);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.byte_of(a));
            let u: f64 = rng.random();
            let succ = &self.table[a * self.alphabet + b];
            let mut acc = 0.0;
            let mut next = succ[succ.len() - 1].0;
            for &(s, p) in succ {
                acc += p;
                if u < acc {
                    next = s;
                    break;
                }
            }
            a = b;
            b = next;
        }
        out
    }
}

/// Byte-level token stream with a fixed train / held-out split
/// (the last tenth is held out).
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    tokens: Vec<usize>,
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self {
            tokens: bytes.iter().map(|&b| b as usize).collect(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| TrainError::Data(format!("cannot read corpus {}: {e}", path.display())))?;
        if bytes.is_empty() {
            return Err(TrainError::Data(format!("corpus {} is empty", path.display())));
        }
        Ok(Self::from_bytes(&bytes))
    }

    pub fn markov(alphabet: usize, len: usize, seed: u64) -> Result<Self> {
        let src = MarkovSource::new(alphabet, seed)?;
        Ok(Self::from_bytes(&src.generate(len, seed.wrapping_add(1))))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn cut(&self) -> usize {
        self.tokens.len() - self.tokens.len() / 10
    }

    pub fn train(&self) -> &[usize] {
        &self.tokens[..self.cut()]
    }

    pub fn heldout(&self) -> &[usize] {
        &self.tokens[self.cut()..]
    }

    /// `count` windows of `len` tokens at seeded offsets within `split`.
    pub fn windows(split: &[usize], len: usize, count: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        if split.len() < len {
            return Err(TrainError::Data(format!(
                "corpus split has {} tokens, fewer than the window length {len}",
                split.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..count)
            .map(|_| {
                let start = rng.random_range(0..=split.len() - len);
                split[start..start + len].to_vec()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markov_corpus_is_seeded_and_spread() {
        let a = Corpus::markov(32, 5000, 3).unwrap();
        let b = Corpus::markov(32, 5000, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Corpus::markov(32, 5000, 4).unwrap());
        assert!(a.tokens().iter().all(|&t| t % 8 == 0));
        let distinct: std::collections::BTreeSet<_> = a.tokens().iter().map(|t| t / 16).collect();
        assert!(distinct.len() > 8);
        assert_eq!(a.heldout().len(), 500);
    }

    #[test]
    fn windows_need_enough_tokens() {
        let c = Corpus::from_bytes(b"abc");
        assert!(Corpus::windows(c.train(), 5, 1, 0).is_err());
        let w = Corpus::windows(&[1, 2, 3, 4, 5, 6], 4, 3, 0).unwrap();
        assert!(w.iter().all(|x| x.len() == 4 && x.windows(2).all(|p| p[1] == p[0] + 1)));
    }
}
