use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::{check_gradients, check_gradients_with};
use super::*;

fn rand_tensor<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-1.0..1.0)))
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

// Weighted sum with fixed pseudo-random weights, so every output entry
// receives a distinct upstream gradient.
fn probe<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = rand_tensor::<T>(&shape, 999);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

const H: f64 = 1e-4;

fn assert_grad64(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let report = check_gradients(inputs, H, 1, f).unwrap();
    assert!(
        report.max_rel_error() < 1e-6,
        "64-bit rel err {:?}",
        report.rel_errors
    );
}

// f32 analytic gradients against f64 central differences; the body is
// instantiated once per precision.
macro_rules! assert_grad32 {
    ($inputs:expr, |$t:ident, $v:ident| $body:expr) => {{
        let report = check_gradients_with(
            $inputs,
            H,
            1,
            &|$t: &mut Tape<f32>, $v: &[Var]| -> Result<Var> { $body },
            &|$t: &mut Tape<f64>, $v: &[Var]| -> Result<Var> { $body },
        )
        .unwrap();
        assert!(
            report.max_rel_error() < 1e-3,
            "32-bit rel err {:?}",
            report.rel_errors
        );
    }};
}

#[test]
fn matmul_identity_and_row_sums() {
    let mut tape = Tape::<f64>::new();
    let eye = tape.constant(t64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let b = rand_tensor::<f64>(&[3, 3], 1);
    let bv = tape.constant(b.clone());
    let c = tape.matmul(eye, bv).unwrap();
    assert_eq!(tape.value(c), b.data());

    let a = tape.constant(t64(&[2, 2], &[1., 2., 3., 4.]));
    let ones = tape.constant(t64(&[2, 1], &[1., 1.]));
    let c = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.shape(c), &[2, 1]);
    assert_eq!(tape.value(c), &[3., 7.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
    assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
}

#[test]
fn matmul_gradients() {
    let a = rand_tensor::<f64>(&[3, 4], 2);
    let b = rand_tensor::<f64>(&[4, 2], 3);
    assert_grad64(&[a.clone(), b.clone()], |t, v| {
        let c = t.matmul(v[0], v[1])?;
        Ok(t.sum(c))
    });
    assert_grad64(&[a.clone(), b.clone()], |t, v| {
        let c = t.matmul(v[0], v[1])?;
        probe(t, c)
    });
    let bt = rand_tensor::<f64>(&[5, 4], 4);
    assert_grad64(&[a.clone(), bt], |t, v| {
        let c = t.matmul_nt(v[0], v[1])?;
        probe(t, c)
    });
    assert_grad32!(&[a.cast(), b.cast()], |t, v| {
        let c = t.matmul(v[0], v[1])?;
        Ok(t.sum(c))
    });
}

#[test]
fn conv2d_identity_and_counting() {
    let mut tape = Tape::<f64>::new();
    let x = rand_tensor::<f64>(&[1, 4, 5], 5);
    let xv = tape.constant(x.clone());
    let k = tape.constant(t64(&[1, 1, 1, 1], &[1.0]));
    let y = tape.conv2d(xv, k, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), x.data());

    let ones = tape.constant(Tensor::full(&[1, 5, 5], 1.0));
    let k3 = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.conv2d(ones, k3, None, 1, 1).unwrap();
    let out = tape.tensor(y);
    assert_eq!(out.shape(), &[1, 5, 5]);
    assert_eq!(out.at(&[0, 2, 2]), 9.0);
    assert_eq!(out.at(&[0, 0, 0]), 4.0);
}

#[test]
fn conv2d_kernel_larger_than_padded_input() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 2]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(tape.conv2d(x, k, None, 1, 0), Err(Error::Dimension(_))));
    assert!(tape.conv2d(x, k, None, 1, 2).is_ok());
}

#[test]
fn conv2d_gradients() {
    let x = rand_tensor::<f64>(&[2, 5, 5], 6);
    let w = rand_tensor::<f64>(&[3, 2, 3, 3], 7);
    let b = rand_tensor::<f64>(&[3], 8);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        assert_grad64(&[x.clone(), w.clone(), b.clone()], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            probe(t, y)
        });
    }
    assert_grad32!(&[x.cast(), w.cast(), b.cast()], |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        probe(t, y)
    });
}

#[test]
fn conv_transpose_identity_and_broadcast() {
    let mut tape = Tape::<f64>::new();
    let x = rand_tensor::<f64>(&[1, 3, 3], 9);
    let xv = tape.constant(x.clone());
    let k = tape.constant(t64(&[1, 1, 1, 1], &[1.0]));
    let y = tape.conv_transpose2d(xv, k, None, 1).unwrap();
    assert_eq!(tape.value(y), x.data());

    let v = tape.constant(t64(&[1, 1, 1], &[2.5]));
    let k2 = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = tape.conv_transpose2d(v, k2, None, 2).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 2]);
    assert_eq!(tape.value(y), &[2.5; 4]);

    let x4 = tape.constant(Tensor::zeros(&[3, 4, 4]));
    let k4 = tape.constant(Tensor::zeros(&[3, 5, 2, 2]));
    let y = tape.conv_transpose2d(x4, k4, None, 2).unwrap();
    assert_eq!(tape.shape(y), &[5, 8, 8]);
}

#[test]
fn conv_transpose_gradients() {
    let x = rand_tensor::<f64>(&[2, 3, 3], 10);
    let w = rand_tensor::<f64>(&[2, 3, 2, 2], 11);
    let b = rand_tensor::<f64>(&[3], 12);
    assert_grad64(&[x.clone(), w.clone(), b.clone()], |t, v| {
        let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2)?;
        probe(t, y)
    });
    let w3 = rand_tensor::<f64>(&[2, 3, 3, 3], 13);
    assert_grad64(&[x.clone(), w3], |t, v| {
        let y = t.conv_transpose2d(v[0], v[1], None, 1)?;
        probe(t, y)
    });
    assert_grad32!(&[x.cast(), w.cast(), b.cast()], |t, v| {
        let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2)?;
        probe(t, y)
    });
}

#[test]
fn max_pool_gradients() {
    // distinct values keep the argmax away from ties
    let x = Tensor::<f64>::from_fn(&[2, 4, 4], |i| ((i * 7919) % 32) as f64 * 0.1);
    assert_grad64(&[x], |t, v| {
        let y = t.max_pool2(v[0])?;
        probe(t, y)
    });
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[9], 0.3));
    let y = tape.softmax(x, 0).unwrap();
    assert!(tape.value(y).iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));

    let x = tape.constant(t64(&[2], &[0.0, 2f64.ln()]));
    let y = tape.softmax(x, 0).unwrap();
    assert!((tape.value(y)[0] - 1.0 / 3.0).abs() < 1e-12);
    assert!((tape.value(y)[1] - 2.0 / 3.0).abs() < 1e-12);

    let base = rand_tensor::<f64>(&[3, 5], 14);
    let shifted = Tensor::from_fn(&[3, 5], |i| base.data()[i] + 17.25);
    let a = tape.constant(base);
    let b = tape.constant(shifted);
    let ya = tape.softmax(a, 1).unwrap();
    let yb = tape.softmax(b, 1).unwrap();
    let diff = tape.tensor(ya).max_abs_diff(&tape.tensor(yb));
    assert!(diff < 1e-6);

    let x = tape.constant(t64(&[1], &[1.0]));
    assert!(tape.softmax(x, 1).is_err());
}

#[test]
fn softmax_rows_sum_to_one_and_gradients() {
    let x = rand_tensor::<f64>(&[4, 6], 15);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(Tensor::from_fn(&[4, 6], |i| x.data()[i] * 30.0));
    let y = tape.softmax(xv, 1).unwrap();
    for row in tape.value(y).chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
    }
    for axis in [0, 1] {
        assert_grad64(std::slice::from_ref(&x), |t, v| {
            let y = t.softmax(v[0], axis)?;
            probe(t, y)
        });
    }
    assert_grad32!(&[x.cast()], |t, v| {
        let y = t.softmax(v[0], 1)?;
        probe(t, y)
    });
}

#[test]
fn pointwise_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3], &[-1.0, 2.0, 0.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r), &[0.0, 2.0, 0.0]);
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(s)[2], 0.5);
    assert!(matches!("tanh".parse::<Activation>(), Err(Error::Config(_))));
    assert_eq!("gelu".parse::<Activation>().unwrap(), Activation::Gelu);
}

#[test]
fn pointwise_gradients_at_random_points() {
    // 100 random points, kept away from the relu kink
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = Tensor::<f64>::from_fn(&[100], |_| {
        let v: f64 = rng.gen_range(0.05..3.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    for kind in [Activation::Relu, Activation::Gelu, Activation::Sigmoid] {
        assert_grad64(std::slice::from_ref(&x), |t, v| {
            let y = t.activation(v[0], kind);
            probe(t, y)
        });
        assert_grad32!(&[x.cast()], |t, v| {
            let y = t.activation(v[0], kind);
            probe(t, y)
        });
    }
}

#[test]
fn loss_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(rand_tensor(&[7], 17));
    let m = tape.mse_loss(x, x).unwrap();
    assert_eq!(tape.scalar_value(m), 0.0);

    let p = tape.constant(t64(&[2], &[0.0, 2.0]));
    let q = tape.constant(t64(&[2], &[1.0, 1.0]));
    let m = tape.mse_loss(p, q).unwrap();
    assert_eq!(tape.scalar_value(m), 1.0);

    let z = tape.constant(t64(&[1], &[0.0]));
    let b = tape.bce_with_logits(z, 1.0).unwrap();
    assert!((tape.scalar_value(b) - 2f64.ln()).abs() < 1e-15);

    // far tail stays finite
    let z = tape.constant(t64(&[1], &[-800.0]));
    let b = tape.bce_with_logits(z, 1.0).unwrap();
    assert!((tape.scalar_value(b) - 800.0).abs() < 1e-9);

    assert!(matches!(tape.bce_with_logits(z, 0.5), Err(Error::Contract(_))));
    let r = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(tape.mse_loss(p, r), Err(Error::Dimension(_))));
}

#[test]
fn loss_gradients() {
    let p = rand_tensor::<f64>(&[6], 18);
    let q = rand_tensor::<f64>(&[6], 19);
    assert_grad64(&[p.clone(), q.clone()], |t, v| t.mse_loss(v[0], v[1]));
    for label in [0.0, 1.0] {
        assert_grad64(&[t64(&[1], &[0.7])], |t, v| t.bce_with_logits(v[0], label));
        assert_grad64(&[t64(&[1], &[-2.3])], |t, v| t.bce_with_logits(v[0], label));
    }
    assert_grad32!(&[p.cast(), q.cast()], |t, v| t.mse_loss(v[0], v[1]));
}

#[test]
fn layer_norm_statistics_and_gradients() {
    let x = rand_tensor::<f64>(&[5, 8], 20);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let y = tape.layer_norm(xv, 1, 1e-5).unwrap();
    for row in tape.value(y).chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
    for axis in [0, 1] {
        assert_grad64(std::slice::from_ref(&x), |t, v| {
            let y = t.layer_norm(v[0], axis, 1e-5)?;
            probe(t, y)
        });
    }
    assert_grad32!(&[x.cast()], |t, v| {
        let y = t.layer_norm(v[0], 1, 1e-5)?;
        probe(t, y)
    });
}

#[test]
fn shape_op_gradients() {
    let x = rand_tensor::<f64>(&[2, 3, 4], 21);
    let y = rand_tensor::<f64>(&[2, 5, 4], 22);
    let b = rand_tensor::<f64>(&[3], 23);
    assert_grad64(&[x.clone(), y.clone()], |t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        probe(t, c)
    });
    assert_grad64(std::slice::from_ref(&x), |t, v| {
        let s = t.slice(v[0], 2, 1, 2)?;
        probe(t, s)
    });
    assert_grad64(std::slice::from_ref(&x), |t, v| {
        let s = t.sum_axis(v[0], 1)?;
        probe(t, s)
    });
    assert_grad64(&[x.clone(), b.clone()], |t, v| {
        let s = t.bias_add(v[0], v[1], 1)?;
        probe(t, s)
    });
    assert_grad64(&[x.clone(), b], |t, v| {
        let s = t.axis_mul(v[0], v[1], 1)?;
        probe(t, s)
    });
    assert_grad64(std::slice::from_ref(&x), |t, v| {
        let r = t.reshape(v[0], &[6, 4])?;
        let tr = t.transpose(r)?;
        probe(t, tr)
    });
    let index: Arc<[usize]> = vec![0, 0, 5, 23, 5, 5].into();
    assert_grad64(std::slice::from_ref(&x), |t, v| {
        let g = t.gather(v[0], index.clone(), &[2, 3])?;
        probe(t, g)
    });
    assert_grad64(&[x.clone(), x.clone()], |t, v| {
        let a = t.sub(v[0], v[1])?;
        let a = t.scale(a, 1.5);
        let a = t.add_scalar(a, 0.25);
        let m = t.mean(a);
        let p = probe(t, a)?;
        t.add(m, p)
    });
}

#[test]
fn reused_tensor_sums_both_paths() {
    let x = rand_tensor::<f64>(&[4], 24);
    // f(x) = sum(x*x) + sum(sigmoid(x)*x)
    assert_grad64(std::slice::from_ref(&x), |t, v| {
        let sq = t.mul(v[0], v[0])?;
        let s = t.sigmoid(v[0]);
        let p = t.mul(s, v[0])?;
        let a = t.sum(sq);
        let b = t.sum(p);
        t.add(a, b)
    });
    let mut tape = Tape::<f64>::new();
    let w = tape.variable(x.clone());
    let sq = tape.mul(w, w).unwrap();
    let l = tape.sum(sq);
    tape.backward(l).unwrap();
    for (g, v) in tape.grad(w).unwrap().iter().zip(x.data()) {
        assert!((g - 2.0 * v).abs() < 1e-15);
    }
}

#[test]
fn backward_sum_gives_ones_and_accumulates() {
    let mut tape = Tape::<f32>::new();
    let w = tape.variable(rand_tensor(&[2, 3], 25));
    let l = tape.sum(w);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[1.0; 6]);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[2.0; 6]);
    tape.zero_grad();
    assert!(tape.grad(w).is_none());
}

#[test]
fn backward_populates_every_reachable_grad() {
    let mut tape = Tape::<f64>::new();
    let a = tape.variable(rand_tensor(&[3, 3], 26));
    let b = tape.constant(rand_tensor(&[3, 3], 27));
    let c = tape.matmul(a, b).unwrap();
    let d = tape.relu(c);
    let l = tape.mean(d);
    tape.backward(l).unwrap();
    for v in [a, c, d, l] {
        assert!(tape.grad(v).is_some());
    }
    assert!(tape.grad(b).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f32>::new();
    let w = tape.variable(Tensor::zeros(&[2]));
    let y = tape.scale(w, 2.0);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn linear_model_matches_closed_form() {
    // loss = mse(Xw, y); grad = 2/N X^T (Xw - y)
    let (n, d) = (8, 3);
    let x = rand_tensor::<f64>(&[n, d], 28);
    let w = rand_tensor::<f64>(&[d, 1], 29);
    let y = rand_tensor::<f64>(&[n, 1], 30);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let wv = tape.variable(w.clone());
    let yv = tape.constant(y.clone());
    let pred = tape.matmul(xv, wv).unwrap();
    let l = tape.mse_loss(pred, yv).unwrap();
    tape.backward(l).unwrap();

    let mut expected = vec![0.0; d];
    for i in 0..n {
        let mut r = -y.data()[i];
        for k in 0..d {
            r += x.data()[i * d + k] * w.data()[k];
        }
        for (k, e) in expected.iter_mut().enumerate() {
            *e += 2.0 / n as f64 * x.data()[i * d + k] * r;
        }
    }
    for (g, e) in tape.grad(wv).unwrap().iter().zip(&expected) {
        assert!(((g - e) / e).abs() < 1e-5, "{g} vs {e}");
    }
}

#[test]
fn op_suite_covers_every_op_within_tolerance() {
    let suite = super::check::op_suite().unwrap();
    assert!(suite.len() >= 25);
    for c in &suite {
        assert!(c.rel64 < 1e-6, "{}: 64-bit rel err {}", c.op, c.rel64);
        assert!(c.rel32 < 1e-3, "{}: 32-bit rel err {}", c.op, c.rel32);
    }
}
