//! The builtin primitive registry: arithmetic, array constructors,
//! reductions, the DL operator set, and the distributed-array primitives.
//! The registry is fixed at startup and identical on every locality.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::comm::ReduceOp;
use crate::dist::tiling::tiled_meta;
use crate::dist::DistArray;
use crate::dl::layers;
use crate::dl::parallel::spatial_conv_with_halo;
use crate::error::{Result, RuntimeError};
use crate::exec::grain::max_canonical;
use crate::exec::{ExecPool, NodeId, Registry};
use crate::resilience::fnv1a64;
use crate::runtime::{node_tag, Env};
use crate::value::{DenseTensor, Shape, Value};

fn pool(env: &Env) -> ExecPool {
    env.pool()
}

fn type_err(what: &str, v: &Value) -> RuntimeError {
    RuntimeError::Type(format!("{what}, got {}", v.kind()))
}

fn dims_from_args(args: &[Value]) -> Result<Shape> {
    let mut dims = Vec::with_capacity(args.len());
    for a in args {
        let x = a.as_scalar()?;
        if x < 0.0 || x.fract() != 0.0 || !x.is_finite() {
            return Err(RuntimeError::Type(format!("dimension must be a non-negative integer, got {x}")));
        }
        dims.push(x as usize);
    }
    Shape::checked(dims)
}

/// Same tile geometry is required to combine distributed operands
/// elementwise.
fn same_layout(a: &DistArray, b: &DistArray) -> bool {
    let (ma, mb) = (a.meta(), b.meta());
    ma.global_shape == mb.global_shape
        && ma.tiled_axis == mb.tiled_axis
        && ma.tile_map == mb.tile_map
}

fn derived_dist(node: NodeId, template: &DistArray, local: DenseTensor) -> DistArray {
    let mut meta = template.meta().clone();
    meta.array_name = format!("n{node}");
    meta.generation = 1;
    DistArray::from_parts(Arc::new(meta), local, template.owner())
}

fn elementwise(
    env: &Env,
    node: NodeId,
    name: &'static str,
    op: fn(f64, f64) -> f64,
    lhs: &Value,
    rhs: &Value,
) -> Result<Value> {
    let pool = pool(env);
    let map_pair = |a: &DenseTensor, b: &DenseTensor| -> Result<DenseTensor> {
        if a.shape() != b.shape() {
            return Err(RuntimeError::ShapeMismatch {
                expected: a.shape().to_string(),
                found: b.shape().to_string(),
            });
        }
        let (ad, bd) = (a.clone(), b.clone());
        let out = pool.run(a.len(), move |r| {
            let (a, b) = (ad.as_slice(), bd.as_slice());
            r.map(|i| op(a[i], b[i])).collect()
        })?;
        Ok(DenseTensor::new(a.shape().clone(), out))
    };
    let map_scalar = |a: &DenseTensor, s: f64, scalar_on_left: bool| -> Result<DenseTensor> {
        let ad = a.clone();
        let out = pool.run(a.len(), move |r| {
            let a = ad.as_slice();
            r.map(|i| if scalar_on_left { op(s, a[i]) } else { op(a[i], s) }).collect()
        })?;
        Ok(DenseTensor::new(a.shape().clone(), out))
    };
    match (lhs, rhs) {
        (Value::Scalar(a), Value::Scalar(b)) => Ok(Value::Scalar(op(*a, *b))),
        (Value::Tensor(a), Value::Tensor(b)) => Ok(Value::Tensor(map_pair(a, b)?)),
        (Value::Tensor(a), Value::Scalar(s)) => Ok(Value::Tensor(map_scalar(a, *s, false)?)),
        (Value::Scalar(s), Value::Tensor(b)) => Ok(Value::Tensor(map_scalar(b, *s, true)?)),
        (Value::Dist(a), Value::Dist(b)) => {
            if !same_layout(a, b) {
                return Err(RuntimeError::ShapeMismatch {
                    expected: a.meta().global_shape.to_string(),
                    found: b.meta().global_shape.to_string(),
                });
            }
            let local = map_pair(a.local(), b.local())?;
            Ok(Value::Dist(derived_dist(node, a, local)))
        }
        (Value::Dist(a), Value::Scalar(s)) => {
            let local = map_scalar(a.local(), *s, false)?;
            Ok(Value::Dist(derived_dist(node, a, local)))
        }
        (Value::Scalar(s), Value::Dist(b)) => {
            let local = map_scalar(b.local(), *s, true)?;
            Ok(Value::Dist(derived_dist(node, b, local)))
        }
        (a, b) => Err(RuntimeError::Type(format!(
            "`{name}` cannot combine {} with {}",
            a.kind(),
            b.kind()
        ))),
    }
}

fn matmul(env: &Env, a: &DenseTensor, b: &DenseTensor) -> Result<Value> {
    let pool = pool(env);
    match (a.shape().rank(), b.shape().rank()) {
        (1, 1) => {
            let (n, m) = (a.shape().dim(0), b.shape().dim(0));
            if n != m {
                return Err(RuntimeError::ShapeMismatch {
                    expected: a.shape().to_string(),
                    found: b.shape().to_string(),
                });
            }
            let mut acc = 0.0;
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                acc += x * y;
            }
            Ok(Value::Scalar(acc))
        }
        (2, 1) => {
            let (n, k) = (a.shape().dim(0), a.shape().dim(1));
            if b.shape().dim(0) != k {
                return Err(RuntimeError::ShapeMismatch {
                    expected: format!("{k}"),
                    found: b.shape().to_string(),
                });
            }
            let (ad, bd) = (a.clone(), b.clone());
            let out = pool.run(n, move |r| {
                let (a, b) = (ad.as_slice(), bd.as_slice());
                r.map(|i| {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += a[i * k + kk] * b[kk];
                    }
                    acc
                })
                .collect()
            })?;
            Ok(Value::Tensor(DenseTensor::new(Shape::new(vec![n]), out)))
        }
        (2, 2) => {
            let (n, k) = (a.shape().dim(0), a.shape().dim(1));
            let (k2, m) = (b.shape().dim(0), b.shape().dim(1));
            if k != k2 {
                return Err(RuntimeError::ShapeMismatch {
                    expected: format!("({k},M)"),
                    found: b.shape().to_string(),
                });
            }
            let (ad, bd) = (a.clone(), b.clone());
            let out = pool.run(n * m, move |r| {
                let (a, b) = (ad.as_slice(), bd.as_slice());
                r.map(|flat| {
                    let (i, j) = (flat / m, flat % m);
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += a[i * k + kk] * b[kk * m + j];
                    }
                    acc
                })
                .collect()
            })?;
            Ok(Value::Tensor(DenseTensor::new(Shape::new(vec![n, m]), out)))
        }
        _ => Err(RuntimeError::Type("`dot` takes vectors or matrices".into())),
    }
}

pub fn default_registry() -> Registry {
    let mut r = Registry::new();

    for (name, op) in [
        ("add", (|a, b| a + b) as fn(f64, f64) -> f64),
        ("sub", |a, b| a - b),
        ("mul", |a, b| a * b),
        ("div", |a, b| a / b),
    ] {
        r.register(name, 2, Some(2), false, move |env, node, args| {
            elementwise(env, node, name, op, &args[0], &args[1])
        });
    }

    r.register("sum", 1, Some(1), false, |env, node, args| match &args[0] {
        Value::Scalar(x) => Ok(Value::Scalar(*x)),
        Value::Tensor(t) => Ok(Value::Scalar(pool(env).reduce_sum(t.as_slice())?)),
        Value::Dist(d) => {
            let partial = pool(env).reduce_sum(d.local_core().as_slice())?;
            let cell = env.comm.all_reduce(
                &DenseTensor::from_vec(vec![partial]),
                ReduceOp::Sum,
                node_tag(node, 0),
            );
            Ok(Value::Scalar(env.scheduler.help_until(&cell)?.as_slice()[0]))
        }
        other => Err(type_err("`sum` expects an array", other)),
    });

    r.register("max", 1, Some(1), false, |env, node, args| match &args[0] {
        Value::Scalar(x) => Ok(Value::Scalar(*x)),
        Value::Tensor(t) => Ok(Value::Scalar(max_canonical(t.as_slice()))),
        Value::Dist(d) => {
            let partial = max_canonical(d.local_core().as_slice());
            let cell = env.comm.all_reduce(
                &DenseTensor::from_vec(vec![partial]),
                ReduceOp::Max,
                node_tag(node, 0),
            );
            Ok(Value::Scalar(env.scheduler.help_until(&cell)?.as_slice()[0]))
        }
        other => Err(type_err("`max` expects an array", other)),
    });

    r.register("constant", 1, Some(5), false, |_, _, args| {
        let v = args[0].as_scalar()?;
        if args.len() == 1 {
            return Ok(Value::Scalar(v));
        }
        let shape = dims_from_args(&args[1..])?;
        Ok(Value::Tensor(DenseTensor::filled(shape, v)))
    });

    r.register("iota", 1, Some(4), false, |_, _, args| {
        let shape = dims_from_args(args)?;
        let n = shape.len();
        Ok(Value::Tensor(DenseTensor::new(shape, (0..n).map(|i| i as f64).collect())))
    });

    // Seeded per (job seed, node id): identical on every locality and on
    // every re-evaluation, independent of worker count.
    r.register("random", 1, Some(4), false, |env, node, args| {
        let shape = dims_from_args(args)?;
        let n = shape.len();
        let mut seed_bytes = env.seed.to_le_bytes().to_vec();
        seed_bytes.extend_from_slice(&(node as u64).to_le_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&seed_bytes));
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        Ok(Value::Tensor(DenseTensor::new(shape, data)))
    });

    r.register("dot", 2, Some(2), false, |env, _, args| {
        matmul(env, args[0].as_tensor()?, args[1].as_tensor()?)
    });

    r.register("transpose", 1, Some(1), false, |env, _, args| {
        let t = args[0].as_tensor()?;
        if t.shape().rank() != 2 {
            return Err(RuntimeError::Type("`transpose` expects a matrix".into()));
        }
        let (n, m) = (t.shape().dim(0), t.shape().dim(1));
        let td = t.clone();
        let out = pool(env).run(n * m, move |r| {
            let t = td.as_slice();
            r.map(|flat| {
                let (j, i) = (flat / n, flat % n);
                t[i * m + j]
            })
            .collect()
        })?;
        Ok(Value::Tensor(DenseTensor::new(Shape::new(vec![m, n]), out)))
    });

    r.register("relu", 1, Some(1), false, |env, node, args| match &args[0] {
        Value::Tensor(t) => Ok(Value::Tensor(layers::relu_forward(t, &pool(env))?)),
        Value::Dist(d) => {
            let local = layers::relu_forward(d.local(), &pool(env))?;
            Ok(Value::Dist(derived_dist(node, d, local)))
        }
        other => Err(type_err("`relu` expects an array", other)),
    });

    r.register("conv1d", 3, Some(3), false, |env, _, args| {
        Ok(Value::Tensor(layers::conv1d_forward(
            args[0].as_tensor()?,
            args[1].as_tensor()?,
            args[2].as_tensor()?,
            &pool(env),
        )?))
    });

    r.register("max-pool1d", 2, Some(2), false, |env, _, args| {
        let width = args[1].as_scalar()?;
        if width < 1.0 || width.fract() != 0.0 {
            return Err(RuntimeError::Type(format!("pool width must be a positive integer, got {width}")));
        }
        Ok(Value::Tensor(layers::max_pool1d_forward(
            args[0].as_tensor()?,
            width as usize,
            &pool(env),
        )?))
    });

    r.register("flatten", 1, Some(1), false, |_, _, args| {
        Ok(Value::Tensor(layers::flatten_forward(args[0].as_tensor()?)?))
    });

    r.register("dense", 3, Some(3), false, |env, _, args| {
        Ok(Value::Tensor(layers::dense_forward(
            args[0].as_tensor()?,
            args[1].as_tensor()?,
            args[2].as_tensor()?,
            &pool(env),
        )?))
    });

    r.register("softmax-xent", 2, Some(2), false, |env, _, args| {
        let (loss, _) =
            layers::softmax_xent(args[0].as_tensor()?, args[1].as_tensor()?, &pool(env))?;
        Ok(Value::Scalar(loss))
    });

    // --- Distributed primitives ------------------------------------------

    r.register("tile", 3, Some(3), true, |env, node, args| {
        let t = args[0].as_tensor()?;
        let axis = args[1].as_scalar()?;
        let overlap = args[2].as_scalar()?;
        if axis < 0.0 || axis.fract() != 0.0 || axis as usize >= t.shape().rank() {
            return Err(RuntimeError::Type(format!("bad tile axis {axis}")));
        }
        if overlap < 0.0 || overlap.fract() != 0.0 {
            return Err(RuntimeError::Type(format!("bad tile overlap {overlap}")));
        }
        let meta = Arc::new(tiled_meta(
            &format!("n{node}"),
            t.shape().clone(),
            env.world(),
            axis as usize,
            overlap as usize,
            1,
        )?);
        Ok(Value::Dist(DistArray::from_global(meta, t, env.rank())?))
    });

    r.register("gather", 1, Some(1), true, |env, _, args| {
        let d = args[0].as_dist()?;
        let cell = d.gather_global(&env.comm);
        Ok(Value::Tensor(env.scheduler.help_until(&cell)?))
    });

    r.register("halo-exchange", 1, Some(1), true, |env, _, args| {
        let d = args[0].as_dist()?;
        let cell = d.halo_exchange(&env.comm);
        Ok(Value::Dist(env.scheduler.help_until(&cell)?))
    });

    r.register("spatial-conv1d", 3, Some(3), true, |env, _, args| {
        Ok(Value::Dist(spatial_conv_with_halo(
            args[0].as_dist()?,
            args[1].as_tensor()?,
            args[2].as_tensor()?,
            &env.comm,
            &pool(env),
        )?))
    });

    r.register("all-reduce", 1, Some(1), true, |env, node, args| {
        let local = match &args[0] {
            Value::Scalar(x) => DenseTensor::from_vec(vec![*x]),
            Value::Tensor(t) => t.clone(),
            other => return Err(type_err("`all-reduce` expects a scalar or tensor", other)),
        };
        let cell = env.comm.all_reduce(&local, ReduceOp::Sum, node_tag(node, 0));
        let out = env.scheduler.help_until(&cell)?;
        match &args[0] {
            Value::Scalar(_) => Ok(Value::Scalar(out.as_slice()[0])),
            _ => Ok(Value::Tensor(out)),
        }
    });

    r.register("locality-rank", 0, Some(0), false, |env, _, _| {
        Ok(Value::Scalar(env.rank() as f64))
    });

    r.register("world-size", 0, Some(0), false, |env, _, _| {
        Ok(Value::Scalar(env.world() as f64))
    });

    r
}
