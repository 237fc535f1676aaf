//! Slice-level numeric kernels shared by the tape and by inference code.
//!
//! Reduction order is fixed per output element and never depends on how many
//! rows are processed together.

/// `c[m x n] += a[m x k] * b[k x n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// Dot product with four fixed-order partial sums.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c[m x n] += a[m x k] * b[n x k]^T`
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k x n] += a[m x k]^T * g[m x n]`
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, &gj) in crow.iter_mut().zip(grow) {
                *cj += aip * gj;
            }
        }
    }
}

/// Numerically stable softmax of one slice.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Numerically stable log-softmax of one slice.
pub fn log_softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = x.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    x.iter().map(|v| v - lse).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Index of the smallest entry; the lowest index wins ties.
pub fn argmin(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v < x[best] {
            best = i;
        }
    }
    best
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rotary position rotation applied in place to a `[rows x (heads*head_dim)]`
/// buffer. Each head rotates pairs `(i, i + head_dim/2)`; `sign = -1.0`
/// applies the inverse rotation.
pub(crate) fn rope_in_place(
    x: &mut [f64],
    positions: &[usize],
    heads: usize,
    head_dim: usize,
    base: f64,
    sign: f64,
) {
    let half = head_dim / 2;
    let width = heads * head_dim;
    for (r, &pos) in positions.iter().enumerate() {
        let row = &mut x[r * width..(r + 1) * width];
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
            let (s, c) = (pos as f64 * freq).sin_cos();
            let s = s * sign;
            for h in 0..heads {
                let o = h * head_dim;
                let a = row[o + i];
                let b = row[o + i + half];
                row[o + i] = a * c - b * s;
                row[o + i + half] = a * s + b * c;
            }
        }
    }
}

/// Multi-head attention forward for one query block.
///
/// `visible(i)` lists, in increasing order, the key rows query `i` may
/// attend to. Returns the output `[sq x width]` and per-head probabilities
/// `[heads x sq x sk]` (zeros on masked keys).
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    sq: usize,
    sk: usize,
    heads: usize,
    head_dim: usize,
    visible: &dyn Fn(usize) -> Vec<usize>,
    keep_probs: bool,
) -> (Vec<f64>, Vec<f64>) {
    let width = heads * head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = vec![0.0; sq * width];
    let mut probs = if keep_probs {
        vec![0.0; heads * sq * sk]
    } else {
        Vec::new()
    };
    let mut scores = Vec::with_capacity(sk);
    for i in 0..sq {
        let vis = visible(i);
        for h in 0..heads {
            let o = h * head_dim;
            let qi = &q[i * width + o..i * width + o + head_dim];
            scores.clear();
            let mut max = f64::NEG_INFINITY;
            for &r in &vis {
                let s = dot(qi, &k[r * width + o..r * width + o + head_dim]) * scale;
                max = max.max(s);
                scores.push(s);
            }
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let orow = &mut out[i * width + o..i * width + o + head_dim];
            for (idx, &r) in vis.iter().enumerate() {
                let p = scores[idx] / sum;
                if keep_probs {
                    probs[(h * sq + i) * sk + r] = p;
                }
                let vr = &v[r * width + o..r * width + o + head_dim];
                for (oj, &vj) in orow.iter_mut().zip(vr) {
                    *oj += p * vj;
                }
            }
        }
    }
    (out, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_rows_are_batch_independent() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut full = vec![0.0; 3 * 5];
        matmul_acc(&a, &b, &mut full, 3, 4, 5);
        for r in 0..3 {
            let mut single = vec![0.0; 5];
            matmul_acc(&a[r * 4..(r + 1) * 4], &b, &mut single, 1, 4, 5);
            assert_eq!(&full[r * 5..(r + 1) * 5], &single[..]);
        }
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmin(&[2.0, 0.5, 0.5]), 1);
    }

    #[test]
    fn rope_inverse_restores_input() {
        let orig: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.4).collect();
        let mut x = orig.clone();
        rope_in_place(&mut x, &[3, 7], 2, 4, 10000.0, 1.0);
        assert_ne!(x, orig);
        rope_in_place(&mut x, &[3, 7], 2, 4, 10000.0, -1.0);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
