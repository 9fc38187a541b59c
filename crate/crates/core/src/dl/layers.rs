//! Layer kernels: 1-D convolution, dense, relu, max-pool, flatten, and
//! softmax cross-entropy, each with exact backward passes.
//!
//! Every output element is a self-contained fixed-order sum, so kernels are
//! bitwise deterministic under any grain split or worker count. Kernels
//! fan out over flat output ranges via the shared `ExecPool`.

use crate::error::{Result, RuntimeError};
use crate::exec::grain::sum_canonical;
use crate::exec::ExecPool;
use crate::value::{DenseTensor, Shape};

fn shape_err(expected: impl Into<String>, found: &Shape) -> RuntimeError {
    RuntimeError::ShapeMismatch { expected: expected.into(), found: found.to_string() }
}

fn want_rank(t: &DenseTensor, rank: usize, what: &str) -> Result<()> {
    if t.shape().rank() != rank {
        return Err(shape_err(format!("{what} of rank {rank}"), t.shape()));
    }
    Ok(())
}

/// out[n,o,t] = b[o] + sum_{c,k} x[n,c,t+k] * w[o,c,k]
/// (stride 1, no padding, cross-correlation convention).
pub fn conv1d_forward(
    x: &DenseTensor,
    w: &DenseTensor,
    b: &DenseTensor,
    pool: &ExecPool,
) -> Result<DenseTensor> {
    want_rank(x, 3, "input")?;
    want_rank(w, 3, "kernel")?;
    want_rank(b, 1, "bias")?;
    let (n, c_in, l) = (x.shape().dim(0), x.shape().dim(1), x.shape().dim(2));
    let (c_out, wc_in, k) = (w.shape().dim(0), w.shape().dim(1), w.shape().dim(2));
    if wc_in != c_in || b.shape().dim(0) != c_out || k < 1 || l < k {
        return Err(shape_err(format!("kernel ({c_out},{c_in},K<= {l})"), w.shape()));
    }
    let l_out = l - k + 1;
    let (xd, wd, bd) = (x.clone(), w.clone(), b.clone());
    let out = pool.run(n * c_out * l_out, move |range| {
        let x = xd.as_slice();
        let w = wd.as_slice();
        let b = bd.as_slice();
        range
            .map(|flat| {
                let t = flat % l_out;
                let o = (flat / l_out) % c_out;
                let nn = flat / (l_out * c_out);
                let mut acc = b[o];
                for c in 0..c_in {
                    let x_base = (nn * c_in + c) * l + t;
                    let w_base = (o * c_in + c) * k;
                    for kk in 0..k {
                        acc += x[x_base + kk] * w[w_base + kk];
                    }
                }
                acc
            })
            .collect()
    })?;
    Ok(DenseTensor::new(Shape::new(vec![n, c_out, l_out]), out))
}

/// Exact gradients of `conv1d_forward`: (grad_x, grad_w, grad_b).
pub fn conv1d_backward(
    x: &DenseTensor,
    w: &DenseTensor,
    grad_out: &DenseTensor,
    pool: &ExecPool,
) -> Result<(DenseTensor, DenseTensor, DenseTensor)> {
    want_rank(x, 3, "input")?;
    want_rank(w, 3, "kernel")?;
    want_rank(grad_out, 3, "output gradient")?;
    let (n, c_in, l) = (x.shape().dim(0), x.shape().dim(1), x.shape().dim(2));
    let (c_out, wc_in, k) = (w.shape().dim(0), w.shape().dim(1), w.shape().dim(2));
    let l_out = l + 1 - k;
    if wc_in != c_in
        || grad_out.shape().dims() != [n, c_out, l_out]
    {
        return Err(shape_err(format!("gradient ({n},{c_out},{l_out})"), grad_out.shape()));
    }

    let (wd, god) = (w.clone(), grad_out.clone());
    let grad_x = pool.run(n * c_in * l, move |range| {
        let w = wd.as_slice();
        let go = god.as_slice();
        range
            .map(|flat| {
                let t = flat % l;
                let c = (flat / l) % c_in;
                let nn = flat / (l * c_in);
                let mut acc = 0.0;
                for o in 0..c_out {
                    let go_base = (nn * c_out + o) * l_out;
                    let w_base = (o * c_in + c) * k;
                    let k_lo = (t + 1).saturating_sub(l_out);
                    let k_hi = k.min(t + 1);
                    for kk in k_lo..k_hi {
                        acc += w[w_base + kk] * go[go_base + (t - kk)];
                    }
                }
                acc
            })
            .collect()
    })?;

    let (xd, god) = (x.clone(), grad_out.clone());
    let grad_w = pool.run(c_out * c_in * k, move |range| {
        let x = xd.as_slice();
        let go = god.as_slice();
        range
            .map(|flat| {
                let kk = flat % k;
                let c = (flat / k) % c_in;
                let o = flat / (k * c_in);
                let mut acc = 0.0;
                for nn in 0..n {
                    let x_base = (nn * c_in + c) * l + kk;
                    let go_base = (nn * c_out + o) * l_out;
                    for t in 0..l_out {
                        acc += x[x_base + t] * go[go_base + t];
                    }
                }
                acc
            })
            .collect()
    })?;

    let god = grad_out.clone();
    let grad_b = pool.run(c_out, move |range| {
        let go = god.as_slice();
        range
            .map(|o| {
                let mut acc = 0.0;
                for nn in 0..n {
                    let base = (nn * c_out + o) * l_out;
                    for t in 0..l_out {
                        acc += go[base + t];
                    }
                }
                acc
            })
            .collect()
    })?;

    Ok((
        DenseTensor::new(x.shape().clone(), grad_x),
        DenseTensor::new(w.shape().clone(), grad_w),
        DenseTensor::new(Shape::new(vec![c_out]), grad_b),
    ))
}

/// out = x . w + b over (N, F_in) x (F_in, F_out).
pub fn dense_forward(
    x: &DenseTensor,
    w: &DenseTensor,
    b: &DenseTensor,
    pool: &ExecPool,
) -> Result<DenseTensor> {
    want_rank(x, 2, "input")?;
    want_rank(w, 2, "weights")?;
    want_rank(b, 1, "bias")?;
    let (n, f_in) = (x.shape().dim(0), x.shape().dim(1));
    let (wf_in, f_out) = (w.shape().dim(0), w.shape().dim(1));
    if wf_in != f_in || b.shape().dim(0) != f_out {
        return Err(shape_err(format!("weights ({f_in},F)"), w.shape()));
    }
    let (xd, wd, bd) = (x.clone(), w.clone(), b.clone());
    let out = pool.run(n * f_out, move |range| {
        let x = xd.as_slice();
        let w = wd.as_slice();
        let b = bd.as_slice();
        range
            .map(|flat| {
                let g = flat % f_out;
                let nn = flat / f_out;
                let mut acc = b[g];
                for f in 0..f_in {
                    acc += x[nn * f_in + f] * w[f * f_out + g];
                }
                acc
            })
            .collect()
    })?;
    Ok(DenseTensor::new(Shape::new(vec![n, f_out]), out))
}

pub fn dense_backward(
    x: &DenseTensor,
    w: &DenseTensor,
    grad_out: &DenseTensor,
    pool: &ExecPool,
) -> Result<(DenseTensor, DenseTensor, DenseTensor)> {
    let (n, f_in) = (x.shape().dim(0), x.shape().dim(1));
    let (wf_in, f_out) = (w.shape().dim(0), w.shape().dim(1));
    if wf_in != f_in || grad_out.shape().dims() != [n, f_out] {
        return Err(shape_err(format!("gradient ({n},{f_out})"), grad_out.shape()));
    }

    let (wd, god) = (w.clone(), grad_out.clone());
    let grad_x = pool.run(n * f_in, move |range| {
        let w = wd.as_slice();
        let go = god.as_slice();
        range
            .map(|flat| {
                let f = flat % f_in;
                let nn = flat / f_in;
                let mut acc = 0.0;
                for g in 0..f_out {
                    acc += go[nn * f_out + g] * w[f * f_out + g];
                }
                acc
            })
            .collect()
    })?;

    let (xd, god) = (x.clone(), grad_out.clone());
    let grad_w = pool.run(f_in * f_out, move |range| {
        let x = xd.as_slice();
        let go = god.as_slice();
        range
            .map(|flat| {
                let g = flat % f_out;
                let f = flat / f_out;
                let mut acc = 0.0;
                for nn in 0..n {
                    acc += x[nn * f_in + f] * go[nn * f_out + g];
                }
                acc
            })
            .collect()
    })?;

    let god = grad_out.clone();
    let grad_b = pool.run(f_out, move |range| {
        let go = god.as_slice();
        range
            .map(|g| {
                let mut acc = 0.0;
                for nn in 0..n {
                    acc += go[nn * f_out + g];
                }
                acc
            })
            .collect()
    })?;

    Ok((
        DenseTensor::new(x.shape().clone(), grad_x),
        DenseTensor::new(w.shape().clone(), grad_w),
        DenseTensor::new(Shape::new(vec![f_out]), grad_b),
    ))
}

/// max(0, x); the subgradient at 0 is 0.
pub fn relu_forward(x: &DenseTensor, pool: &ExecPool) -> Result<DenseTensor> {
    let xd = x.clone();
    let out = pool.run(x.len(), move |range| {
        let x = xd.as_slice();
        range.map(|i| if x[i] > 0.0 { x[i] } else { 0.0 }).collect()
    })?;
    Ok(DenseTensor::new(x.shape().clone(), out))
}

pub fn relu_backward(x: &DenseTensor, grad_out: &DenseTensor, pool: &ExecPool) -> Result<DenseTensor> {
    if x.shape() != grad_out.shape() {
        return Err(shape_err(x.shape().to_string(), grad_out.shape()));
    }
    let (xd, god) = (x.clone(), grad_out.clone());
    let out = pool.run(x.len(), move |range| {
        let x = xd.as_slice();
        let go = god.as_slice();
        range.map(|i| if x[i] > 0.0 { go[i] } else { 0.0 }).collect()
    })?;
    Ok(DenseTensor::new(x.shape().clone(), out))
}

/// Window max with width = stride = `width`; ties break to the lowest index.
/// A trailing remainder shorter than the window is dropped.
pub fn max_pool1d_forward(x: &DenseTensor, width: usize, pool: &ExecPool) -> Result<DenseTensor> {
    want_rank(x, 3, "input")?;
    let (n, c, l) = (x.shape().dim(0), x.shape().dim(1), x.shape().dim(2));
    if width < 1 || l < width {
        return Err(shape_err(format!("pool width within 1..={l}"), x.shape()));
    }
    let l_out = l / width;
    let xd = x.clone();
    let out = pool.run(n * c * l_out, move |range| {
        let x = xd.as_slice();
        range
            .map(|flat| {
                let j = flat % l_out;
                let row = flat / l_out; // n*c combined
                let base = row * l + j * width;
                let mut best = x[base];
                for idx in 1..width {
                    if x[base + idx] > best {
                        best = x[base + idx];
                    }
                }
                best
            })
            .collect()
    })?;
    Ok(DenseTensor::new(Shape::new(vec![n, c, l_out]), out))
}

/// Routes each output gradient to its window's argmax (lowest index on ties).
pub fn max_pool1d_backward(
    x: &DenseTensor,
    width: usize,
    grad_out: &DenseTensor,
    pool: &ExecPool,
) -> Result<DenseTensor> {
    want_rank(x, 3, "input")?;
    let (n, c, l) = (x.shape().dim(0), x.shape().dim(1), x.shape().dim(2));
    let l_out = l / width;
    if grad_out.shape().dims() != [n, c, l_out] {
        return Err(shape_err(format!("gradient ({n},{c},{l_out})"), grad_out.shape()));
    }
    let (xd, god) = (x.clone(), grad_out.clone());
    let out = pool.run(n * c * l, move |range| {
        let x = xd.as_slice();
        let go = god.as_slice();
        range
            .map(|flat| {
                let t = flat % l;
                let row = flat / l;
                let j = t / width;
                if j >= l_out {
                    return 0.0; // dropped remainder
                }
                let base = row * l + j * width;
                let mut arg = 0;
                for idx in 1..width {
                    if x[base + idx] > x[base + arg] {
                        arg = idx;
                    }
                }
                if base + arg == row * l + t {
                    go[row * l_out + j]
                } else {
                    0.0
                }
            })
            .collect()
    })?;
    Ok(DenseTensor::new(x.shape().clone(), out))
}

/// (N, C, L) -> (N, C*L), row-major; a reshape of the same buffer.
pub fn flatten_forward(x: &DenseTensor) -> Result<DenseTensor> {
    want_rank(x, 3, "input")?;
    let (n, c, l) = (x.shape().dim(0), x.shape().dim(1), x.shape().dim(2));
    Ok(x.reshaped(Shape::new(vec![n, c * l])))
}

pub fn unflatten(x: &DenseTensor, c: usize, l: usize) -> Result<DenseTensor> {
    want_rank(x, 2, "input")?;
    let n = x.shape().dim(0);
    if x.shape().dim(1) != c * l {
        return Err(shape_err(format!("({n},{})", c * l), x.shape()));
    }
    Ok(x.reshaped(Shape::new(vec![n, c, l])))
}

/// Numerically stabilized softmax cross-entropy.
/// Returns (mean loss, grad wrt logits = (softmax - onehot) / N).
pub fn softmax_xent(
    logits: &DenseTensor,
    labels: &DenseTensor,
    pool: &ExecPool,
) -> Result<(f64, DenseTensor)> {
    want_rank(logits, 2, "logits")?;
    want_rank(labels, 1, "labels")?;
    let (n, k) = (logits.shape().dim(0), logits.shape().dim(1));
    if labels.shape().dim(0) != n {
        return Err(shape_err(format!("labels ({n})"), labels.shape()));
    }
    let mut label_idx = Vec::with_capacity(n);
    for &raw in labels.as_slice() {
        let idx = raw as i64;
        if idx as f64 != raw || idx < 0 || idx as usize >= k {
            return Err(RuntimeError::LabelOutOfRange { label: idx, classes: k });
        }
        label_idx.push(idx as usize);
    }

    let (ld, labels_arc) = (logits.clone(), std::sync::Arc::new(label_idx));
    let labels2 = std::sync::Arc::clone(&labels_arc);
    // Row layout: k grad values then the row loss, so one pass fans out.
    let packed = pool.run(n * (k + 1), move |range| {
        let z = ld.as_slice();
        range
            .map(|flat| {
                let slot = flat % (k + 1);
                let row = flat / (k + 1);
                let base = row * k;
                let mut m = z[base];
                for i in 1..k {
                    if z[base + i] > m {
                        m = z[base + i];
                    }
                }
                let mut denom = 0.0;
                for i in 0..k {
                    denom += (z[base + i] - m).exp();
                }
                if slot == k {
                    // -log softmax[label], stabilized.
                    denom.ln() - (z[base + labels2[row]] - m)
                } else {
                    let p = (z[base + slot] - m).exp() / denom;
                    let onehot = if slot == labels2[row] { 1.0 } else { 0.0 };
                    (p - onehot) / n as f64
                }
            })
            .collect()
    })?;

    let mut grad = Vec::with_capacity(n * k);
    let mut row_losses = Vec::with_capacity(n);
    for row in 0..n {
        let base = row * (k + 1);
        grad.extend_from_slice(&packed[base..base + k]);
        row_losses.push(packed[base + k]);
    }
    let loss = sum_canonical(&row_losses) / n as f64;
    Ok((loss, DenseTensor::new(logits.shape().clone(), grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq() -> ExecPool {
        ExecPool::sequential()
    }

    fn t(shape: Vec<usize>, data: Vec<f64>) -> DenseTensor {
        DenseTensor::new(Shape::new(shape), data)
    }

    #[test]
    fn conv_hand_example() {
        // x=[1,2,3], w=[1,1], b=0 -> [1*1+2*1, 2*1+3*1] = [3,5]
        let x = t(vec![1, 1, 3], vec![1.0, 2.0, 3.0]);
        let w = t(vec![1, 1, 2], vec![1.0, 1.0]);
        let b = t(vec![1], vec![0.0]);
        let out = conv1d_forward(&x, &w, &b, &seq()).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 5.0]);
    }

    #[test]
    fn conv_identity_impulse() {
        let x = t(vec![2, 1, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let w = t(vec![1, 1, 1], vec![1.0]);
        let b = t(vec![1], vec![0.0]);
        let out = conv1d_forward(&x, &w, &b, &seq()).unwrap();
        assert_eq!(out.as_slice(), x.as_slice());
    }

    #[test]
    fn conv_scalar_chain_rule() {
        // N=C=K=L=1: grad_w = x * grad_out.
        let x = t(vec![1, 1, 1], vec![3.0]);
        let w = t(vec![1, 1, 1], vec![0.5]);
        let go = t(vec![1, 1, 1], vec![2.0]);
        let (_, gw, gb) = conv1d_backward(&x, &w, &go, &seq()).unwrap();
        assert_eq!(gw.as_slice(), &[6.0]);
        assert_eq!(gb.as_slice(), &[2.0]);
    }

    #[test]
    fn conv_shape_errors() {
        let x = t(vec![1, 1, 3], vec![1.0, 2.0, 3.0]);
        let w = t(vec![1, 2, 2], vec![1.0; 4]); // c_in mismatch
        let b = t(vec![1], vec![0.0]);
        assert!(matches!(
            conv1d_forward(&x, &w, &b, &seq()),
            Err(RuntimeError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dense_hand_example() {
        // [[1,2]] . [[1],[1]] + [0] = [[3]]
        let x = t(vec![1, 2], vec![1.0, 2.0]);
        let w = t(vec![2, 1], vec![1.0, 1.0]);
        let b = t(vec![1], vec![0.0]);
        let out = dense_forward(&x, &w, &b, &seq()).unwrap();
        assert_eq!(out.as_slice(), &[3.0]);
    }

    #[test]
    fn dense_identity() {
        let x = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = t(vec![2], vec![0.0, 0.0]);
        let out = dense_forward(&x, &w, &b, &seq()).unwrap();
        assert_eq!(out.as_slice(), x.as_slice());
    }

    #[test]
    fn relu_and_pool_hand_examples() {
        let x = t(vec![1, 1, 3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&x, &seq()).unwrap().as_slice(), &[0.0, 0.0, 2.0]);

        // max_pool1d([1,3,2,2], p=2) -> [3,2]; grads route to indices 1 and 2.
        let x = t(vec![1, 1, 4], vec![1.0, 3.0, 2.0, 2.0]);
        let out = max_pool1d_forward(&x, 2, &seq()).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 2.0]);
        let go = t(vec![1, 1, 2], vec![10.0, 20.0]);
        let gx = max_pool1d_backward(&x, 2, &go, &seq()).unwrap();
        assert_eq!(gx.as_slice(), &[0.0, 10.0, 20.0, 0.0]);
    }

    #[test]
    fn flatten_round_trips() {
        let x = t(vec![2, 3, 4], (0..24).map(|i| i as f64).collect());
        let flat = flatten_forward(&x).unwrap();
        assert_eq!(flat.shape().dims(), &[2, 12]);
        let back = unflatten(&flat, 3, 4).unwrap();
        assert!(back.bit_eq(&x));
    }

    #[test]
    fn softmax_uniform_logits_loss_is_ln_k() {
        let logits = t(vec![3, 4], vec![0.5; 12]);
        let labels = t(vec![3], vec![0.0, 1.0, 3.0]);
        let (loss, _) = softmax_xent(&logits, &labels, &seq()).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_confident_correct_logit_drives_loss_to_zero() {
        let logits = t(vec![1, 3], vec![50.0, 0.0, 0.0]);
        let labels = t(vec![1], vec![0.0]);
        let (loss, _) = softmax_xent(&logits, &labels, &seq()).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn softmax_label_out_of_range() {
        let logits = t(vec![1, 3], vec![0.0; 3]);
        for bad in [3.0, -1.0, 0.5] {
            let labels = t(vec![1], vec![bad]);
            assert!(matches!(
                softmax_xent(&logits, &labels, &seq()),
                Err(RuntimeError::LabelOutOfRange { .. })
            ));
        }
    }
}
