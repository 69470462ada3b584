//! Procedural texture proxy task for expert pretraining: four classes
//! (stripes, blobs, checker, speckle) whose discrimination needs the same
//! early edge/texture filters the nodule task does.

use crate::nn::DataSet;
use crate::seed::derive;
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn stripes(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let freq = rng.random_range(2.0..5.0) * std::f64::consts::TAU / size as f64;
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (sin, cos) = angle.sin_cos();
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            0.5 + 0.5 * ((x * cos + y * sin) * freq + phase).sin()
        })
        .collect()
}

fn blobs(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let n = rng.random_range(3..=6);
    let centers: Vec<(f64, f64, f64)> = (0..n)
        .map(|_| {
            (
                rng.random_range(0.0..size as f64),
                rng.random_range(0.0..size as f64),
                rng.random_range(0.08..0.2) * size as f64,
            )
        })
        .collect();
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            let v: f64 = centers
                .iter()
                .map(|&(cx, cy, r)| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp())
                .sum();
            v.min(1.0)
        })
        .collect()
}

fn checker(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let cell = rng.random_range(2..=4).max(1);
    let off_x = rng.random_range(0..cell);
    let off_y = rng.random_range(0..cell);
    (0..size * size)
        .map(|i| {
            let (x, y) = (i % size, i / size);
            let parity = ((x + off_x) / cell + (y + off_y) / cell) % 2;
            if parity == 0 {
                0.15
            } else {
                0.85
            }
        })
        .collect()
}

fn speckle(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    (0..size * size).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// `n` labeled texture images (`channels` copies of one pattern with small
/// per-channel jitter), labels 0..4, deterministic in the seed.
pub fn proxy_texture_set(n: usize, channels: usize, size: usize, seed: u64) -> DataSet {
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0x9e, i as u64]));
        let class = i % 4;
        let base = match class {
            0 => stripes(&mut rng, size),
            1 => blobs(&mut rng, size),
            2 => checker(&mut rng, size),
            _ => speckle(&mut rng, size),
        };
        let mut data = Vec::with_capacity(channels * base.len());
        for _ in 0..channels {
            data.extend(base.iter().map(|v| (v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)));
        }
        inputs.push(
            Tensor::new(vec![channels, size, size], data).expect("texture dimensions"),
        );
        labels.push(class);
    }
    DataSet::new(inputs, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covers_four_classes_and_is_deterministic() {
        let a = proxy_texture_set(16, 3, 16, 5);
        let b = proxy_texture_set(16, 3, 16, 5);
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.inputs.iter().zip(&b.inputs) {
            assert_eq!(x.data(), y.data());
        }
        for class in 0..4 {
            assert!(a.labels.iter().any(|&l| l == class));
        }
        for t in &a.inputs {
            assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
