//! Central finite-difference gradient checking.
//!
//! Only the forward pass is used to build the numeric gradient, so these
//! checks stay independent of every backward rule they verify.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-input comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` per input,
    /// over the checked entries.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Norm-wise relative error; 0 when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-30 {
        0.0
    } else {
        diff / scale
    }
}

/// Builds `f` on a fresh tape, differentiates it, and compares against
/// central differences with step `h` on every entry of every input
/// (or on `stride`-spaced entries when `stride > 1`).
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, stride: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_with(inputs, h, stride, &f, &f)
}

/// Like [`check_gradients`], but the analytic gradient comes from `analytic`
/// running in `T` while the central differences run `reference` in `f64`
/// at the same (already `T`-rounded) input values.
///
/// This is how `f32` gradients are checked: differencing an `f32` forward
/// pass with `h = 1e-4` is dominated by rounding noise of order `1e-3`.
pub fn check_gradients_with<T, F, G>(
    inputs: &[Tensor<T>],
    h: f64,
    stride: usize,
    analytic: &F,
    reference: &G,
) -> Result<GradCheck>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let f = analytic;
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = reference(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Contract("gradient check needs a scalar function".into()));
        }
        Ok(tape.scalar_value(out).as_f64())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let stride = stride.max(1);
    let mut work: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    let mut report = GradCheck {
        rel_errors: Vec::new(),
        analytic: Vec::new(),
        numeric: Vec::new(),
    };
    for (i, var) in vars.iter().enumerate() {
        let zeros = vec![T::zero(); inputs[i].numel()];
        let grad = tape.grad(*var).unwrap_or(&zeros);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for j in (0..inputs[i].numel()).step_by(stride) {
            let x = inputs[i].data()[j].as_f64();
            let (plus, minus) = (x + h, x - h);
            work[i].data_mut()[j] = plus;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = minus;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x;
            // the representable step, not the nominal 2h
            let step = plus - minus;
            numeric.push((fp - fm) / step);
            analytic.push(grad[j].as_f64());
        }
        report.rel_errors.push(relative_error(&analytic, &numeric));
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}

/// Step used by [`op_suite`].
pub const SUITE_STEP: f64 = 1e-4;

/// Gradient-check result of one op in both precisions.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub rel64: f64,
    pub rel32: f64,
}

// Entries of magnitude in [0.2, 1) with random sign, keeping relu and
// max-pool inputs away from their kinks and ties.
fn suite_input<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.gen_range(0.2..1.0);
        T::of(if rng.gen_bool(0.5) { m } else { -m })
    })
}

// Weighted sum with fixed weights so each output entry gets its own
// upstream gradient.
fn suite_probe<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(suite_input(&shape, 0xBEEF));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

macro_rules! suite {
    ($($name:literal, [$($shape:expr),+], |$t:ident, $v:ident| $body:expr;)+) => {{
        let mut out = Vec::new();
        $(
            let shapes: Vec<Vec<usize>> = vec![$($shape.to_vec()),+];
            let in64: Vec<Tensor<f64>> =
                shapes.iter().enumerate().map(|(i, s)| suite_input(s, 17 * i as u64 + 1)).collect();
            let in32: Vec<Tensor<f32>> = in64.iter().map(Tensor::cast).collect();
            let f64_fn = |$t: &mut Tape<f64>, $v: &[Var]| -> Result<Var> {
                let y = $body;
                suite_probe($t, y)
            };
            let f32_fn = |$t: &mut Tape<f32>, $v: &[Var]| -> Result<Var> {
                let y = $body;
                suite_probe($t, y)
            };
            let rel64 = check_gradients(&in64, SUITE_STEP, 1, f64_fn)?.max_rel_error();
            let rel32 = check_gradients_with(&in32, SUITE_STEP, 1, &f32_fn, &f64_fn)?.max_rel_error();
            out.push(OpCheck { op: $name, rel64, rel32 });
        )+
        out
    }};
}

/// Checks every differentiable op of the tape against central differences,
/// in `f64` and (analytic `f32` vs `f64` reference) in `f32`.
pub fn op_suite() -> Result<Vec<OpCheck>> {
    use std::sync::Arc;
    let gather_index: Arc<[usize]> = vec![3, 0, 5, 5, 1, 2, 3, 4].into();
    Ok(suite![
        "add", [[3, 4], [3, 4]], |t, v| t.add(v[0], v[1])?;
        "sub", [[3, 4], [3, 4]], |t, v| t.sub(v[0], v[1])?;
        "mul", [[3, 4], [3, 4]], |t, v| t.mul(v[0], v[1])?;
        "scale", [[3, 4]], |t, v| t.scale(v[0], 1.7f64 as _);
        "add_scalar", [[3, 4]], |t, v| { let y = t.add_scalar(v[0], 0.3f64 as _); t.mul(y, y)? };
        "bias_add", [[2, 3, 4], [3]], |t, v| t.bias_add(v[0], v[1], 1)?;
        "axis_mul", [[2, 3, 4], [3]], |t, v| t.axis_mul(v[0], v[1], 1)?;
        "matmul", [[3, 4], [4, 5]], |t, v| t.matmul(v[0], v[1])?;
        "matmul_nt", [[3, 4], [5, 4]], |t, v| t.matmul_nt(v[0], v[1])?;
        "transpose", [[3, 4]], |t, v| t.transpose(v[0])?;
        "conv2d", [[2, 5, 5], [3, 2, 3, 3], [3]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        "conv2d_strided", [[2, 6, 6], [2, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], None, 2, 0)?;
        "conv_transpose2d", [[3, 3, 3], [3, 2, 2, 2], [2]], |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2)?;
        "max_pool2", [[2, 4, 4]], |t, v| t.max_pool2(v[0])?;
        "relu", [[3, 4]], |t, v| t.relu(v[0]);
        "gelu", [[3, 4]], |t, v| t.gelu(v[0]);
        "sigmoid", [[3, 4]], |t, v| t.sigmoid(v[0]);
        "softmax", [[3, 4]], |t, v| t.softmax(v[0], 1)?;
        "softmax_axis0", [[3, 4]], |t, v| t.softmax(v[0], 0)?;
        "layer_norm", [[3, 5]], |t, v| t.layer_norm(v[0], 1, 1e-5f64 as _)?;
        "sum", [[3, 4]], |t, v| { let y = t.mul(v[0], v[0])?; let s = t.sum(y); t.mul(s, s)? };
        "mean", [[3, 4]], |t, v| { let y = t.mul(v[0], v[0])?; let s = t.mean(y); t.mul(s, s)? };
        "sum_axis", [[2, 3, 4]], |t, v| t.sum_axis(v[0], 1)?;
        "reshape", [[3, 4]], |t, v| t.reshape(v[0], &[2, 6])?;
        "gather", [[6]], |t, v| t.gather(v[0], gather_index.clone(), &[2, 4])?;
        "concat", [[2, 3], [2, 2]], |t, v| t.concat(&[v[0], v[1]], 1)?;
        "slice", [[4, 5]], |t, v| t.slice(v[0], 1, 1, 3)?;
        "mse_loss", [[3, 4], [3, 4]], |t, v| t.mse_loss(v[0], v[1])?;
        "bce_with_logits", [[1]], |t, v| { let a = t.bce_with_logits(v[0], 1f64 as _)?; let b = t.bce_with_logits(v[0], 0f64 as _)?; let b = t.scale(b, 0.5f64 as _); t.add(a, b)? };
    ])
}
