//! Backward passes against central finite differences on randomized tiny
//! shapes, plus the independent brute-force convolution oracle and the
//! analytic bias-gradient summation oracle.

mod common;

use common::{
    cotangent_for, finite_difference, gradient_rel_error, lcg_labels, lcg_tensor, seq_pool,
    weighted_sum, FD_REL_TOL,
};
use tla_core::dl::{
    conv1d_backward, conv1d_forward, dense_backward, dense_forward, max_pool1d_backward,
    max_pool1d_forward, relu_backward, relu_forward, softmax_xent,
};
use tla_core::value::{DenseTensor, Shape};

/// Naive convolution written independently of the library kernel: explicit
/// scalar loops over (sample, out-channel, position), accumulating in the
/// same (channel, offset) order the definition fixes.
fn conv_oracle(x: &DenseTensor, w: &DenseTensor, b: &DenseTensor) -> DenseTensor {
    let (n, c_in, l) = (x.shape().dim(0), x.shape().dim(1), x.shape().dim(2));
    let (c_out, _, k) = (w.shape().dim(0), w.shape().dim(1), w.shape().dim(2));
    let l_out = l - k + 1;
    let xv = x.as_slice();
    let wv = w.as_slice();
    let mut out = Vec::new();
    for nn in 0..n {
        for o in 0..c_out {
            for t in 0..l_out {
                let mut acc = b.as_slice()[o];
                for c in 0..c_in {
                    for kk in 0..k {
                        acc += xv[(nn * c_in + c) * l + t + kk] * wv[(o * c_in + c) * k + kk];
                    }
                }
                out.push(acc);
            }
        }
    }
    DenseTensor::new(Shape::new(vec![n, c_out, l_out]), out)
}

#[test]
fn conv_forward_equals_brute_force_oracle_bitwise() {
    let mut seed = 42;
    for trial in 0..30 {
        let n = 1 + trial % 3;
        let c_in = 1 + trial % 2;
        let c_out = 1 + (trial / 2) % 3;
        let k = 1 + trial % 4;
        let l = k + trial % 5;
        let x = lcg_tensor(vec![n, c_in, l], &mut seed);
        let w = lcg_tensor(vec![c_out, c_in, k], &mut seed);
        let b = lcg_tensor(vec![c_out], &mut seed);
        let got = conv1d_forward(&x, &w, &b, &seq_pool()).unwrap();
        assert!(got.bit_eq(&conv_oracle(&x, &w, &b)), "trial {trial}");
    }
}

#[test]
fn conv_grad_bias_equals_summation_oracle() {
    let mut seed = 7;
    let x = lcg_tensor(vec![3, 2, 9], &mut seed);
    let w = lcg_tensor(vec![4, 2, 3], &mut seed);
    let go = lcg_tensor(vec![3, 4, 7], &mut seed);
    let (_, _, gb) = conv1d_backward(&x, &w, &go, &seq_pool()).unwrap();
    // grad_b[o] = sum over samples and positions of grad_out[n,o,t].
    let gov = go.as_slice();
    for o in 0..4 {
        let mut acc = 0.0;
        for n in 0..3 {
            for t in 0..7 {
                acc += gov[(n * 4 + o) * 7 + t];
            }
        }
        assert_eq!(gb.as_slice()[o], acc);
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut seed = 1000;
    let mut instances = 0;
    for trial in 0..12 {
        let n = 1 + trial % 2;
        let c_in = 1 + trial % 2;
        let c_out = 1 + (trial / 3) % 2;
        let k = 1 + trial % 3;
        let l = k + 1 + trial % 3;
        let x = lcg_tensor(vec![n, c_in, l], &mut seed);
        let w = lcg_tensor(vec![c_out, c_in, k], &mut seed);
        let b = lcg_tensor(vec![c_out], &mut seed);
        let cot = cotangent_for(
            &Shape::new(vec![n, c_out, l - k + 1]),
            &mut seed,
        );
        let (gx, gw, gb) = conv1d_backward(&x, &w, &cot, &seq_pool()).unwrap();

        let loss_x = |xx: &DenseTensor| {
            weighted_sum(&conv1d_forward(xx, &w, &b, &seq_pool()).unwrap(), &cot)
        };
        let loss_w = |ww: &DenseTensor| {
            weighted_sum(&conv1d_forward(&x, ww, &b, &seq_pool()).unwrap(), &cot)
        };
        let loss_b = |bb: &DenseTensor| {
            weighted_sum(&conv1d_forward(&x, &w, bb, &seq_pool()).unwrap(), &cot)
        };
        assert!(gradient_rel_error(&gx, &finite_difference(&x, loss_x)) <= FD_REL_TOL);
        assert!(gradient_rel_error(&gw, &finite_difference(&w, loss_w)) <= FD_REL_TOL);
        assert!(gradient_rel_error(&gb, &finite_difference(&b, loss_b)) <= FD_REL_TOL);
        instances += 3;
    }
    assert!(instances >= 36);
}

#[test]
fn dense_gradients_match_finite_differences() {
    let mut seed = 2000;
    for trial in 0..12 {
        let n = 1 + trial % 3;
        let f_in = 1 + trial % 4;
        let f_out = 1 + (trial / 2) % 3;
        let x = lcg_tensor(vec![n, f_in], &mut seed);
        let w = lcg_tensor(vec![f_in, f_out], &mut seed);
        let b = lcg_tensor(vec![f_out], &mut seed);
        let cot = cotangent_for(&Shape::new(vec![n, f_out]), &mut seed);
        let (gx, gw, gb) = dense_backward(&x, &w, &cot, &seq_pool()).unwrap();
        assert!(
            gradient_rel_error(
                &gx,
                &finite_difference(&x, |xx| weighted_sum(
                    &dense_forward(xx, &w, &b, &seq_pool()).unwrap(),
                    &cot
                ))
            ) <= FD_REL_TOL
        );
        assert!(
            gradient_rel_error(
                &gw,
                &finite_difference(&w, |ww| weighted_sum(
                    &dense_forward(&x, ww, &b, &seq_pool()).unwrap(),
                    &cot
                ))
            ) <= FD_REL_TOL
        );
        assert!(
            gradient_rel_error(
                &gb,
                &finite_difference(&b, |bb| weighted_sum(
                    &dense_forward(&x, &w, bb, &seq_pool()).unwrap(),
                    &cot
                ))
            ) <= FD_REL_TOL
        );
    }
}

#[test]
fn relu_and_pool_gradients_match_finite_differences() {
    let mut seed = 3000;
    for trial in 0..10 {
        // Keep values away from the relu kink and pool ties so the numeric
        // derivative is well defined.
        let shape = vec![1 + trial % 2, 1 + trial % 3, 4 + 2 * (trial % 3)];
        let x = lcg_tensor(shape.clone(), &mut seed)
            .map(|v| if v.abs() < 1e-3 { v + 0.1 } else { v });
        let cot = cotangent_for(x.shape(), &mut seed);
        let g = relu_backward(&x, &cot, &seq_pool()).unwrap();
        let numeric = finite_difference(&x, |xx| {
            weighted_sum(&relu_forward(xx, &seq_pool()).unwrap(), &cot)
        });
        assert!(gradient_rel_error(&g, &numeric) <= FD_REL_TOL, "relu trial {trial}");

        let width = 2;
        let l_out = x.shape().dim(2) / width;
        let cot = cotangent_for(
            &Shape::new(vec![x.shape().dim(0), x.shape().dim(1), l_out]),
            &mut seed,
        );
        let g = max_pool1d_backward(&x, width, &cot, &seq_pool()).unwrap();
        let numeric = finite_difference(&x, |xx| {
            weighted_sum(&max_pool1d_forward(xx, width, &seq_pool()).unwrap(), &cot)
        });
        assert!(gradient_rel_error(&g, &numeric) <= FD_REL_TOL, "pool trial {trial}");
    }
}

#[test]
fn softmax_xent_gradient_matches_finite_differences() {
    let mut seed = 4000;
    for trial in 0..10 {
        let n = 1 + trial % 4;
        let k = 2 + trial % 4;
        let logits = lcg_tensor(vec![n, k], &mut seed);
        let labels = lcg_labels(n, k, &mut seed);
        let (_, grad) = softmax_xent(&logits, &labels, &seq_pool()).unwrap();
        let numeric = finite_difference(&logits, |z| {
            softmax_xent(z, &labels, &seq_pool()).unwrap().0
        });
        assert!(gradient_rel_error(&grad, &numeric) <= FD_REL_TOL, "trial {trial}");
    }
}
