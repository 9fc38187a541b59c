//! Shared test fixtures: the script corpus and finite-difference oracles.

#![allow(dead_code)]

use tla_core::dl::Batch;
use tla_core::exec::ExecPool;
use tla_core::value::{DenseTensor, Shape};

/// Scripts that must round-trip through tokenize/parse/print/parse and (for
/// the first section) evaluate identically across worker counts and grains.
pub const CORPUS: &[&str] = &[
    "(add 1 2)",
    "42",
    "-0.5",
    "(define x (mul 2 3)) x",
    "(mul (add 1 2) (sub 5 2))",
    "(div 10 4)",
    "(sum (iota 10))",
    "(max (random 8))",
    "(dot (constant 1 2 2) (constant 1 2 2))",
    "(define m (random 4 4)) (sum (dot m m))",
    "(sum (relu (sub (iota 5) 2)))",
    "(sum (flatten (constant 1 2 3 4)))",
    "(max (max-pool1d (random 2 3 8) 2))",
    "(sum (conv1d (random 1 1 8) (random 1 1 3) (constant 0 1)))",
    "(sum (dense (random 2 4) (random 4 3) (constant 0 3)))",
    "(softmax-xent (random 4 3) (constant 1 4))",
    "(define a 1) (define b (add a 1)) (add a b)",
    "; leading comment\n(add 1 2) ; trailing comment",
    "(sub 0 1.5e-3)",
    "(add -1 +2)",
    "(define w (random 2 2)) (sum (dot w (dot w w)))",
    "(resilient (sum (iota 100)))",
    "(sum (transpose (random 3 5)))",
    "(max (iota 4 4))",
    "(div (sum (random 100)) 100)",
    "(define t (random 16)) (sub (sum t) (sum t))",
    "(add (softmax-xent (constant 0 2 4) (constant 3 2)) 1)",
    "(sum (mul (iota 2 3) (constant 2 2 3)))",
];

/// Scripts whose evaluation involves inter-locality communication; they must
/// still print the same value for every world size and transport.
pub const DIST_CORPUS: &[&str] = &[
    "(sum (tile (iota 12) 0 0))",
    "(gather (tile (iota 12) 0 0))",
    "(gather (halo-exchange (tile (iota 12) 0 1)))",
    "(div (all-reduce 1) (world-size))",
    "(define t (tile (random 24) 0 0)) (sum t)",
    "(max (gather (spatial-conv1d (tile (random 1 2 16) 2 2) (random 1 2 3) (constant 0 1))))",
    "(sum (gather (add (tile (iota 12) 0 0) (tile (iota 12) 0 0))))",
];

pub fn tensor(shape: Vec<usize>, data: Vec<f64>) -> DenseTensor {
    DenseTensor::new(Shape::new(shape), data)
}

/// Deterministic pseudo-random tensor for oracle inputs (not the library
/// RNG; keeps the oracle path independent).
pub fn lcg_tensor(shape: Vec<usize>, seed: &mut u64) -> DenseTensor {
    let shape = Shape::new(shape);
    let n = shape.len();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((*seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        })
        .collect();
    DenseTensor::new(shape, data)
}

pub fn lcg_labels(n: usize, classes: usize, seed: &mut u64) -> DenseTensor {
    let data: Vec<f64> = (0..n)
        .map(|_| {
            *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((*seed >> 33) as usize % classes) as f64
        })
        .collect();
    DenseTensor::new(Shape::new(vec![n]), data)
}

pub fn lcg_batch(shape: Vec<usize>, classes: usize, seed: &mut u64) -> Batch {
    let n = shape[0];
    Batch { features: lcg_tensor(shape, seed), labels: lcg_labels(n, classes, seed) }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-6;

/// Central finite differences of a scalar function with respect to one
/// tensor argument.
pub fn finite_difference(
    x: &DenseTensor,
    mut f: impl FnMut(&DenseTensor) -> f64,
) -> DenseTensor {
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.as_slice().to_vec();
        let mut minus = x.as_slice().to_vec();
        plus[i] += FD_STEP;
        minus[i] -= FD_STEP;
        let fp = f(&DenseTensor::new(x.shape().clone(), plus));
        let fm = f(&DenseTensor::new(x.shape().clone(), minus));
        grad.push((fp - fm) / (2.0 * FD_STEP));
    }
    DenseTensor::new(x.shape().clone(), grad)
}

/// Relative error of an analytic gradient against its numeric reference,
/// normalized by the reference scale.
pub fn gradient_rel_error(analytic: &DenseTensor, numeric: &DenseTensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let scale = numeric
        .as_slice()
        .iter()
        .fold(1.0f64, |m, &x| m.max(x.abs()));
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .fold(0.0f64, |worst, (&a, &n)| worst.max((a - n).abs() / scale))
}

/// Fixed cotangent for reducing a tensor-valued op to a scalar: sum of
/// elementwise products with a deterministic weight pattern.
pub fn cotangent_for(shape: &Shape, seed: &mut u64) -> DenseTensor {
    lcg_tensor(shape.dims().to_vec(), seed)
}

pub fn weighted_sum(t: &DenseTensor, w: &DenseTensor) -> f64 {
    t.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
}

pub fn seq_pool() -> ExecPool {
    ExecPool::sequential()
}
