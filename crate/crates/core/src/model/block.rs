//! Pre-norm decoder block: rotary multi-head attention and a SwiGLU MLP,
//! both residual, no biases.

use std::sync::Arc;

use rand::Rng;

use crate::tensor::{AttnMask, Result as TResult, Tape, Tensor, Var};

use super::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

pub(crate) struct BlockVars {
    attn_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    mlp_norm: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
}

/// Output rows of one block call plus the new (post-rotary) key/value rows.
pub(crate) struct BlockOut {
    pub hidden: Var,
    pub k: Var,
    pub v: Var,
}

const NAMES: [&str; 9] = [
    "attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down",
];

impl BlockWeights {
    /// `depth_scale` shrinks the residual output projections of deep stacks.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, depth_scale: f64, rng: &mut R) -> Self {
        let d = cfg.hidden_size;
        let i = cfg.intermediate_size;
        let sd = 1.0 / (d as f64).sqrt();
        let si = 1.0 / (i as f64).sqrt();
        Self {
            attn_norm: Tensor::filled(&[d], 1.0),
            wq: Tensor::randn(&[d, d], sd, rng),
            wk: Tensor::randn(&[d, d], sd, rng),
            wv: Tensor::randn(&[d, d], sd, rng),
            wo: Tensor::randn(&[d, d], sd * depth_scale, rng),
            mlp_norm: Tensor::filled(&[d], 1.0),
            w_gate: Tensor::randn(&[d, i], sd, rng),
            w_up: Tensor::randn(&[d, i], sd, rng),
            w_down: Tensor::randn(&[i, d], si * depth_scale, rng),
        }
    }

    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.attn_norm, &self.wq, &self.wk, &self.wv, &self.wo,
            &self.mlp_norm, &self.w_gate, &self.w_up, &self.w_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm, &mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo,
            &mut self.mlp_norm, &mut self.w_gate, &mut self.w_up, &mut self.w_down,
        ]
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        NAMES
            .iter()
            .zip(self.tensors())
            .map(|(n, t)| (format!("{prefix}.{n}"), t))
            .collect()
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        NAMES
            .iter()
            .zip(self.tensors_mut())
            .map(|(n, t)| (format!("{prefix}.{n}"), t))
            .collect()
    }

    pub fn num_params(&self) -> u64 {
        self.tensors().iter().map(|t| t.numel() as u64).sum()
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> BlockVars {
        let [a, q, k, v, o, m, g, u, dn] = self.tensors().map(|t| tape.leaf(t.clone(), trainable));
        BlockVars {
            attn_norm: a,
            wq: q,
            wk: k,
            wv: v,
            wo: o,
            mlp_norm: m,
            w_gate: g,
            w_up: u,
            w_down: dn,
        }
    }
}

impl BlockVars {
    pub(crate) fn vars(&self) -> [Var; 9] {
        [
            self.attn_norm, self.wq, self.wk, self.wv, self.wo,
            self.mlp_norm, self.w_gate, self.w_up, self.w_down,
        ]
    }

    #[cfg(test)]
    /// Inverse of [`BlockVars::vars`].
    pub(crate) fn from_vars(v: [Var; 9]) -> Self {
        let [attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down] = v;
        Self { attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down }
    }
}

/// Runs one block over `x` (`[n x d]`). `past` holds earlier key/value rows
/// that precede the new rows in the key index space of `mask`.
pub(crate) fn block_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &BlockVars,
    x: Var,
    positions: &Arc<Vec<usize>>,
    past: Option<(Var, Var)>,
    mask: AttnMask,
) -> TResult<BlockOut> {
    let heads = cfg.num_heads;
    let h = tape.rms_norm(x, w.attn_norm, cfg.norm_eps)?;
    let q = tape.matmul(h, w.wq)?;
    let q = tape.rope(q, positions.clone(), heads, cfg.rope_base)?;
    let k = tape.matmul(h, w.wk)?;
    let k = tape.rope(k, positions.clone(), heads, cfg.rope_base)?;
    let v = tape.matmul(h, w.wv)?;
    let (keys, values) = match past {
        Some((pk, pv)) => (tape.concat_rows(&[pk, k])?, tape.concat_rows(&[pv, v])?),
        None => (k, v),
    };
    let a = tape.attention(q, keys, values, mask, heads)?;
    let o = tape.matmul(a, w.wo)?;
    let x2 = tape.add(x, o)?;
    let h2 = tape.rms_norm(x2, w.mlp_norm, cfg.norm_eps)?;
    let gate = tape.matmul(h2, w.w_gate)?;
    let gate = tape.silu(gate)?;
    let up = tape.matmul(h2, w.w_up)?;
    let m = tape.mul(gate, up)?;
    let down = tape.matmul(m, w.w_down)?;
    let hidden = tape.add(x2, down)?;
    Ok(BlockOut { hidden, k, v })
}
