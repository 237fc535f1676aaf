//! Central finite-difference oracle for tape gradients.

use super::{Result, Tape, Tensor, Var};

/// Relative error between the tape gradient and central differences,
/// measured per input as `||analytic - numeric|| / max(||analytic||, ||numeric||)`
/// and maximised over inputs. Both gradients being exactly zero counts as
/// error 0.
///
/// `build` records a scalar loss on a fresh tape from leaves holding `inputs`.
pub fn max_relative_error<F>(inputs: &[Tensor], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[idx], input);
        let mut numeric = vec![0.0; input.numel()];
        let mut shifted: Vec<Tensor> = inputs.to_vec();
        for (e, slot) in numeric.iter_mut().enumerate() {
            let mut plus = input.to_vec();
            plus[e] += eps;
            shifted[idx] = Tensor::new(input.shape().to_vec(), plus)?;
            let fp = eval(&shifted)?;
            let mut minus = input.to_vec();
            minus[e] -= eps;
            shifted[idx] = Tensor::new(input.shape().to_vec(), minus)?;
            let fm = eval(&shifted)?;
            *slot = (fp - fm) / (2.0 * eps);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}
