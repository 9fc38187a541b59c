//! Seeded synthetic sample generation and the binary dataset format:
//! header `N u32, C u32, L u32, K_classes u32` (little-endian), then N*C*L
//! f64 features, then N u32 labels.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dl::model::Batch;
use crate::error::{Result, RuntimeError};
use crate::value::{DenseTensor, Shape};

/// Deterministic synthetic batch: features uniform in [-1, 1), labels
/// uniform in [0, classes).
pub fn synthetic_batch(seed: u64, n: usize, channels: usize, length: usize, classes: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<f64> =
        (0..n * channels * length).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0..classes) as f64).collect();
    Batch {
        features: DenseTensor::new(Shape::new(vec![n, channels, length]), features),
        labels: DenseTensor::new(Shape::new(vec![n]), labels),
    }
}

pub fn write_dataset(path: &std::path::Path, batch: &Batch, classes: usize) -> Result<()> {
    let dims = batch.features.shape().dims();
    if dims.len() != 3 {
        return Err(RuntimeError::Type("dataset features must be (N, C, L)".into()));
    }
    let mut f = std::fs::File::create(path)?;
    for d in [dims[0], dims[1], dims[2], classes] {
        f.write_all(&(d as u32).to_le_bytes())?;
    }
    for &x in batch.features.as_slice() {
        f.write_all(&x.to_le_bytes())?;
    }
    for &label in batch.labels.as_slice() {
        f.write_all(&(label as u32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dataset(path: &std::path::Path) -> Result<(Batch, usize)> {
    let mut f = std::fs::File::open(path)?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header)?;
    let n = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let l = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let classes = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut feat_bytes = vec![0u8; n * c * l * 8];
    f.read_exact(&mut feat_bytes)?;
    let features: Vec<f64> = feat_bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mut label_bytes = vec![0u8; n * 4];
    f.read_exact(&mut label_bytes)?;
    let labels: Vec<f64> = label_bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok((
        Batch {
            features: DenseTensor::new(Shape::new(vec![n, c, l]), features),
            labels: DenseTensor::new(Shape::new(vec![n]), labels),
        },
        classes,
    ))
}
