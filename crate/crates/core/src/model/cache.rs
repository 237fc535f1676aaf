//! Per-layer key/value rows kept between forward calls.

use crate::tensor::Tensor;

use super::{ModelError, Result};

/// Post-rotary key and value rows for each layer, `width` floats per row.
#[derive(Clone, Debug, PartialEq)]
pub struct KvRows {
    width: usize,
    rows: usize,
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl KvRows {
    pub fn empty(layers: usize, width: usize) -> Self {
        Self {
            width,
            rows: 0,
            layers: vec![(Vec::new(), Vec::new()); layers],
        }
    }

    pub(crate) fn from_layers(width: usize, rows: usize, layers: Vec<(Vec<f64>, Vec<f64>)>) -> Self {
        debug_assert!(layers.iter().all(|(k, v)| k.len() == rows * width && v.len() == rows * width));
        Self { width, rows, layers }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Keys and values of one layer as `[rows x width]` tensors.
    pub fn layer(&self, l: usize) -> (Tensor, Tensor) {
        let (k, v) = &self.layers[l];
        (
            Tensor::from_parts(vec![self.rows, self.width], k.clone()),
            Tensor::from_parts(vec![self.rows, self.width], v.clone()),
        )
    }

    /// Appends the selected rows of `other` in the given order.
    pub fn append_selected(&mut self, other: &KvRows, indices: &[usize]) -> Result<()> {
        if other.width != self.width || other.layers.len() != self.layers.len() {
            return Err(ModelError::State("key/value layouts differ".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= other.rows) {
            return Err(ModelError::State(format!("row {bad} out of {}", other.rows)));
        }
        let w = self.width;
        for ((sk, sv), (ok, ov)) in self.layers.iter_mut().zip(&other.layers) {
            for &i in indices {
                sk.extend_from_slice(&ok[i * w..(i + 1) * w]);
                sv.extend_from_slice(&ov[i * w..(i + 1) * w]);
            }
        }
        self.rows += indices.len();
        Ok(())
    }

    pub fn append_all(&mut self, other: &KvRows) -> Result<()> {
        let all: Vec<usize> = (0..other.rows).collect();
        self.append_selected(other, &all)
    }

    pub fn truncate(&mut self, rows: usize) {
        if rows >= self.rows {
            return;
        }
        for (k, v) in &mut self.layers {
            k.truncate(rows * self.width);
            v.truncate(rows * self.width);
        }
        self.rows = rows;
    }

    /// Largest absolute difference to another row set; infinite on layout mismatch.
    pub fn max_abs_diff(&self, other: &KvRows) -> f64 {
        if self.rows != other.rows || self.width != other.width || self.layers.len() != other.layers.len() {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for ((ak, av), (bk, bv)) in self.layers.iter().zip(&other.layers) {
            for (a, b) in ak.iter().chain(av).zip(bk.iter().chain(bv)) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }
}

/// Key/value rows together with the token ids they were computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    tokens: Vec<usize>,
    kv: KvRows,
}

impl KvCache {
    pub fn new(layers: usize, width: usize) -> Self {
        Self {
            tokens: Vec::new(),
            kv: KvRows::empty(layers, width),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn rows(&self) -> &KvRows {
        &self.kv
    }

    /// Fails unless the cached tokens are a prefix of `tokens`.
    pub fn check_prefix_of(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() < self.tokens.len() || tokens[..self.tokens.len()] != self.tokens[..] {
            return Err(ModelError::State(format!(
                "cache of {} tokens is not a prefix of the {}-token input",
                self.tokens.len(),
                tokens.len()
            )));
        }
        Ok(())
    }

    /// Commits selected rows of a forward pass along with their tokens.
    pub fn commit(&mut self, rows: &KvRows, indices: &[usize], tokens: &[usize]) -> Result<()> {
        if indices.len() != tokens.len() {
            return Err(ModelError::State("one token per committed row required".into()));
        }
        self.kv.append_selected(rows, indices)?;
        self.tokens.extend_from_slice(tokens);
        if self.kv.rows() != self.tokens.len() {
            return Err(ModelError::State("cache rows and tokens out of step".into()));
        }
        Ok(())
    }

    pub fn truncate(&mut self, len: usize) {
        self.tokens.truncate(len);
        self.kv.truncate(len);
    }
}
