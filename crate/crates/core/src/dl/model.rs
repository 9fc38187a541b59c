//! Model composition: layer sequences, the three training stages (forward,
//! backward, solver), and the reference 4-layer CNN benchmark model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dl::layers;
use crate::error::{Result, RuntimeError};
use crate::exec::ExecPool;
use crate::resilience::checksum::fnv1a64;
use crate::value::{DenseTensor, Shape};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv1d { w: DenseTensor, b: DenseTensor },
    Relu,
    MaxPool1d { width: usize },
    Flatten,
    Dense { w: DenseTensor, b: DenseTensor },
    SoftmaxXent,
}

impl LayerSpec {
    pub fn conv1d(c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> LayerSpec {
        let fan_in = (c_in * k) as f64;
        let s = (6.0 / fan_in).sqrt();
        let w: Vec<f64> = (0..c_out * c_in * k).map(|_| rng.random_range(-s..s)).collect();
        LayerSpec::Conv1d {
            w: DenseTensor::new(Shape::new(vec![c_out, c_in, k]), w),
            b: DenseTensor::zeros(Shape::new(vec![c_out])),
        }
    }

    pub fn dense(f_in: usize, f_out: usize, rng: &mut ChaCha8Rng) -> LayerSpec {
        let s = (6.0 / f_in as f64).sqrt();
        let w: Vec<f64> = (0..f_in * f_out).map(|_| rng.random_range(-s..s)).collect();
        LayerSpec::Dense {
            w: DenseTensor::new(Shape::new(vec![f_in, f_out]), w),
            b: DenseTensor::zeros(Shape::new(vec![f_out])),
        }
    }

    /// Parameter tensors in a fixed order (weights then bias), if any.
    pub fn params(&self) -> Vec<&DenseTensor> {
        match self {
            LayerSpec::Conv1d { w, b } | LayerSpec::Dense { w, b } => vec![w, b],
            _ => vec![],
        }
    }
}

/// An ordered layer sequence plus a parameter generation counter that
/// increments on every solver step.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub generation: u64,
}

impl ModelSpec {
    pub fn new(layers: Vec<LayerSpec>) -> ModelSpec {
        ModelSpec { layers, generation: 0 }
    }

    /// Digest over every parameter tensor; bitwise-identical replicas agree.
    pub fn param_checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for layer in &self.layers {
            for p in layer.params() {
                bytes.extend_from_slice(&p.canonical_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(|p| p.len()).sum()
    }
}

/// The reference benchmark model: Conv1d(9->32, K=5), Relu,
/// Conv1d(32->32, K=5), Relu, MaxPool1d(2), Flatten, Dense(->6 classes),
/// with (N, 9, 128) raw-signal inputs.
pub const CNN4_CHANNELS: usize = 9;
pub const CNN4_LENGTH: usize = 128;
pub const CNN4_CLASSES: usize = 6;

pub fn reference_cnn4(seed: u64) -> ModelSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l_after = CNN4_LENGTH - 4 - 4; // two K=5 convolutions
    let flat = 32 * (l_after / 2);
    ModelSpec::new(vec![
        LayerSpec::conv1d(CNN4_CHANNELS, 32, 5, &mut rng),
        LayerSpec::Relu,
        LayerSpec::conv1d(32, 32, 5, &mut rng),
        LayerSpec::Relu,
        LayerSpec::MaxPool1d { width: 2 },
        LayerSpec::Flatten,
        LayerSpec::dense(flat, CNN4_CLASSES, &mut rng),
        LayerSpec::SoftmaxXent,
    ])
}

/// Update rule for the solver stage. Gradients are always reduced as a mean
/// over the global batch; updates are synchronous.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub learning_rate: f64,
    pub mode: SolverMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMode {
    Local,
    DataParallel,
}

impl SolverConfig {
    pub fn local(learning_rate: f64) -> SolverConfig {
        assert!(learning_rate >= 0.0);
        SolverConfig { learning_rate, mode: SolverMode::Local }
    }

    pub fn data_parallel(learning_rate: f64) -> SolverConfig {
        assert!(learning_rate >= 0.0);
        SolverConfig { learning_rate, mode: SolverMode::DataParallel }
    }
}

/// One step's samples: features shaped (N, C, L) or (N, F), integer labels
/// shaped (N).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: DenseTensor,
    pub labels: DenseTensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.features.shape().dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-layer parameter gradients, aligned with the model's layer order.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads {
    None,
    Pair { w: DenseTensor, b: DenseTensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrads>,
}

impl ModelGrads {
    pub fn scale(&self, factor: f64) -> ModelGrads {
        let layers = self
            .layers
            .iter()
            .map(|g| match g {
                LayerGrads::None => LayerGrads::None,
                LayerGrads::Pair { w, b } => LayerGrads::Pair {
                    w: w.map(|x| x * factor),
                    b: b.map(|x| x * factor),
                },
            })
            .collect();
        ModelGrads { layers }
    }

    /// Flat list of gradient tensors in layer order (weights then bias).
    pub fn tensors(&self) -> Vec<&DenseTensor> {
        self.layers
            .iter()
            .flat_map(|g| match g {
                LayerGrads::None => vec![],
                LayerGrads::Pair { w, b } => vec![w, b],
            })
            .collect()
    }

    pub fn from_tensors(model: &ModelSpec, mut tensors: Vec<DenseTensor>) -> ModelGrads {
        tensors.reverse();
        let layers = model
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv1d { .. } | LayerSpec::Dense { .. } => LayerGrads::Pair {
                    w: tensors.pop().expect("gradient tensor"),
                    b: tensors.pop().expect("gradient tensor"),
                },
                _ => LayerGrads::None,
            })
            .collect();
        ModelGrads { layers }
    }
}

/// The forward stage: activations (the input of every layer, in order) and
/// the mean loss from the terminal softmax cross-entropy layer.
pub fn forward_pass(
    model: &ModelSpec,
    batch: &Batch,
    pool: &ExecPool,
) -> Result<(Vec<DenseTensor>, f64)> {
    let mut activations = Vec::with_capacity(model.layers.len());
    let mut current = batch.features.clone();
    let mut loss = None;
    for layer in &model.layers {
        activations.push(current.clone());
        current = match layer {
            LayerSpec::Conv1d { w, b } => layers::conv1d_forward(&current, w, b, pool)?,
            LayerSpec::Relu => layers::relu_forward(&current, pool)?,
            LayerSpec::MaxPool1d { width } => layers::max_pool1d_forward(&current, *width, pool)?,
            LayerSpec::Flatten => layers::flatten_forward(&current)?,
            LayerSpec::Dense { w, b } => layers::dense_forward(&current, w, b, pool)?,
            LayerSpec::SoftmaxXent => {
                let (l, _) = layers::softmax_xent(&current, &batch.labels, pool)?;
                loss = Some(l);
                break;
            }
        };
    }
    let loss = loss.ok_or_else(|| {
        RuntimeError::Type("model has no terminal softmax cross-entropy layer".into())
    })?;
    Ok((activations, loss))
}

/// Forward without storing activations (two live buffers); for inference and
/// the forward-pass benchmark.
pub fn forward_loss(model: &ModelSpec, batch: &Batch, pool: &ExecPool) -> Result<f64> {
    let mut current = batch.features.clone();
    for layer in &model.layers {
        current = match layer {
            LayerSpec::Conv1d { w, b } => layers::conv1d_forward(&current, w, b, pool)?,
            LayerSpec::Relu => layers::relu_forward(&current, pool)?,
            LayerSpec::MaxPool1d { width } => layers::max_pool1d_forward(&current, *width, pool)?,
            LayerSpec::Flatten => layers::flatten_forward(&current)?,
            LayerSpec::Dense { w, b } => layers::dense_forward(&current, w, b, pool)?,
            LayerSpec::SoftmaxXent => {
                let (l, _) = layers::softmax_xent(&current, &batch.labels, pool)?;
                return Ok(l);
            }
        };
    }
    Err(RuntimeError::Type("model has no terminal softmax cross-entropy layer".into()))
}

/// The backward stage: exact gradients of the forward definition, computed
/// from the stored activations.
pub fn backward_pass(
    model: &ModelSpec,
    activations: &[DenseTensor],
    labels: &DenseTensor,
    pool: &ExecPool,
) -> Result<ModelGrads> {
    let n_layers = model.layers.len();
    if activations.len() != n_layers {
        return Err(RuntimeError::Type(format!(
            "expected {n_layers} stored activations, got {}",
            activations.len()
        )));
    }
    match model.layers.last() {
        Some(LayerSpec::SoftmaxXent) => {}
        _ => {
            return Err(RuntimeError::Type(
                "model has no terminal softmax cross-entropy layer".into(),
            ))
        }
    }
    let logits = &activations[n_layers - 1];
    let (_, mut grad) = layers::softmax_xent(logits, labels, pool)?;
    let mut grads = vec![LayerGrads::None; n_layers];
    for i in (0..n_layers - 1).rev() {
        let x = &activations[i];
        grad = match &model.layers[i] {
            LayerSpec::Conv1d { w, .. } => {
                let (gx, gw, gb) = layers::conv1d_backward(x, w, &grad, pool)?;
                grads[i] = LayerGrads::Pair { w: gw, b: gb };
                gx
            }
            LayerSpec::Dense { w, .. } => {
                let (gx, gw, gb) = layers::dense_backward(x, w, &grad, pool)?;
                grads[i] = LayerGrads::Pair { w: gw, b: gb };
                gx
            }
            LayerSpec::Relu => layers::relu_backward(x, &grad, pool)?,
            LayerSpec::MaxPool1d { width } => {
                layers::max_pool1d_backward(x, *width, &grad, pool)?
            }
            LayerSpec::Flatten => {
                let (c, l) = (x.shape().dim(1), x.shape().dim(2));
                layers::unflatten(&grad, c, l)?
            }
            LayerSpec::SoftmaxXent => unreachable!("terminal layer handled above"),
        };
    }
    Ok(ModelGrads { layers: grads })
}

/// The solver stage: p <- p - lr * g; bumps the parameter generation.
pub fn sgd_step(model: &ModelSpec, grads: &ModelGrads, cfg: &SolverConfig) -> Result<ModelSpec> {
    if grads.layers.len() != model.layers.len() {
        return Err(RuntimeError::Type("gradient/layer count mismatch".into()));
    }
    let lr = cfg.learning_rate;
    let layers = model
        .layers
        .iter()
        .zip(&grads.layers)
        .map(|(layer, grad)| match (layer, grad) {
            (LayerSpec::Conv1d { w, b }, LayerGrads::Pair { w: gw, b: gb }) => {
                Ok(LayerSpec::Conv1d { w: apply_sgd(w, gw, lr)?, b: apply_sgd(b, gb, lr)? })
            }
            (LayerSpec::Dense { w, b }, LayerGrads::Pair { w: gw, b: gb }) => {
                Ok(LayerSpec::Dense { w: apply_sgd(w, gw, lr)?, b: apply_sgd(b, gb, lr)? })
            }
            (other, LayerGrads::None) => Ok(other.clone()),
            _ => Err(RuntimeError::Type("gradient does not match layer kind".into())),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelSpec { layers, generation: model.generation + 1 })
}

fn apply_sgd(p: &DenseTensor, g: &DenseTensor, lr: f64) -> Result<DenseTensor> {
    if p.shape() != g.shape() {
        return Err(RuntimeError::ShapeMismatch {
            expected: p.shape().to_string(),
            found: g.shape().to_string(),
        });
    }
    let data: Vec<f64> =
        p.as_slice().iter().zip(g.as_slice()).map(|(&p, &g)| p - lr * g).collect();
    Ok(DenseTensor::new(p.shape().clone(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dl::data::synthetic_batch;

    fn pool() -> ExecPool {
        ExecPool::sequential()
    }

    #[test]
    fn cnn4_shapes_compose() {
        let model = reference_cnn4(42);
        let batch = synthetic_batch(7, 3, CNN4_CHANNELS, CNN4_LENGTH, CNN4_CLASSES);
        let (activations, loss) = forward_pass(&model, &batch, &pool()).unwrap();
        assert_eq!(activations.len(), model.layers.len());
        assert!(loss.is_finite());
        // Logits enter the terminal layer with (N, classes).
        assert_eq!(activations.last().unwrap().shape().dims(), &[3, CNN4_CLASSES]);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let model = reference_cnn4(1);
        let batch = synthetic_batch(2, 4, CNN4_CHANNELS, CNN4_LENGTH, CNN4_CLASSES);
        let (acts, _) = forward_pass(&model, &batch, &pool()).unwrap();
        let grads = backward_pass(&model, &acts, &batch.labels, &pool()).unwrap();
        let stepped = sgd_step(&model, &grads, &SolverConfig::local(0.0)).unwrap();
        assert_eq!(stepped.param_checksum(), model.param_checksum());
        assert_eq!(stepped.generation, model.generation + 1);
    }

    #[test]
    fn single_dense_layer_matches_hand_calculation() {
        // Two samples, two features, two classes; parameters chosen by hand.
        let w = DenseTensor::new(Shape::new(vec![2, 2]), vec![1.0, 0.0, 0.0, 1.0]);
        let b = DenseTensor::new(Shape::new(vec![2]), vec![0.0, 0.0]);
        let model = ModelSpec::new(vec![LayerSpec::Dense { w, b }, LayerSpec::SoftmaxXent]);
        let batch = Batch {
            features: DenseTensor::new(Shape::new(vec![2, 2]), vec![2.0, 0.0, 0.0, 2.0]),
            labels: DenseTensor::new(Shape::new(vec![2]), vec![0.0, 1.0]),
        };
        let (_, loss) = forward_pass(&model, &batch, &pool()).unwrap();
        // Each sample: logits (2,0) with the correct class at 2.
        // loss = -ln(e^2 / (e^2 + 1)) = ln(1 + e^-2)
        let expect = (1.0 + (-2.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn loss_decreases_on_linearly_separable_toy_set() {
        // Two well-separated clusters, one dense layer.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 32;
        let mut feats = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let center = if class == 0 { -2.0 } else { 2.0 };
            feats.push(center + rng.random_range(-0.5..0.5));
            feats.push(center + rng.random_range(-0.5..0.5));
            labels.push(class as f64);
        }
        let batch = Batch {
            features: DenseTensor::new(Shape::new(vec![n, 2]), feats),
            labels: DenseTensor::new(Shape::new(vec![n]), labels),
        };
        let mut model = ModelSpec::new(vec![
            LayerSpec::dense(2, 2, &mut rng),
            LayerSpec::SoftmaxXent,
        ]);
        let cfg = SolverConfig::local(0.5);
        let (_, first_loss) = forward_pass(&model, &batch, &pool()).unwrap();
        let mut last = first_loss;
        for _ in 0..50 {
            let (acts, _) = forward_pass(&model, &batch, &pool()).unwrap();
            let grads = backward_pass(&model, &acts, &batch.labels, &pool()).unwrap();
            model = sgd_step(&model, &grads, &cfg).unwrap();
            let (_, loss) = forward_pass(&model, &batch, &pool()).unwrap();
            last = loss;
        }
        assert!(last < first_loss * 0.5, "loss {first_loss} -> {last}");
    }

    #[test]
    fn grads_tensor_round_trip() {
        let model = reference_cnn4(9);
        let batch = synthetic_batch(3, 2, CNN4_CHANNELS, CNN4_LENGTH, CNN4_CLASSES);
        let (acts, _) = forward_pass(&model, &batch, &pool()).unwrap();
        let grads = backward_pass(&model, &acts, &batch.labels, &pool()).unwrap();
        let tensors: Vec<DenseTensor> = grads.tensors().into_iter().cloned().collect();
        let back = ModelGrads::from_tensors(&model, tensors);
        assert_eq!(back, grads);
    }
}
