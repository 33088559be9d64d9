//! Procedural shape dataset: ten parametric pattern classes with randomized
//! geometry, color, and background noise. Fully determined by a seed, so the
//! whole pipeline stays hermetic.

use thiserror::Error;

use crate::rng::{derive_seed, gaussian_image, SeedStream};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("need at least {classes} samples to cover {classes} classes, got {count}")]
    TooFewSamples { count: usize, classes: usize },
    #[error("subset of {requested} exceeds dataset size {available}")]
    SubsetTooLarge {
        requested: usize,
        available: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472,
            Split::Test => 0x7465,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub seed: u64,
}

pub const NUM_CLASSES: usize = 10;

/// Balanced labels (class = index mod C) with per-sample derived streams;
/// train and test never share a stream.
pub fn generate(
    seed: u64,
    count: usize,
    image_size: usize,
    split: Split,
) -> Result<ToyDataset, DataError> {
    if count < NUM_CLASSES {
        return Err(DataError::TooFewSamples {
            count,
            classes: NUM_CLASSES,
        });
    }
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for idx in 0..count {
        let class = idx % NUM_CLASSES;
        let mut stream = SeedStream::new(derive_seed(seed, &[split.tag(), idx as u64]));
        images.push(draw_sample(&mut stream, class, image_size));
        labels.push(class);
    }
    Ok(ToyDataset {
        images,
        labels,
        split,
        seed,
    })
}

fn draw_sample(stream: &mut SeedStream, class: usize, size: usize) -> Tensor {
    let s = size as f64;
    // Background: dim base color plus pixel noise.
    let base: [f64; 3] = [
        stream.uniform_range(0.05, 0.30),
        stream.uniform_range(0.05, 0.30),
        stream.uniform_range(0.05, 0.30),
    ];
    // Foreground clearly brighter than any background value.
    let fg: [f64; 3] = [
        stream.uniform_range(0.55, 0.95),
        stream.uniform_range(0.55, 0.95),
        stream.uniform_range(0.55, 0.95),
    ];
    let cx = s / 2.0 + stream.uniform_range(-4.0, 4.0);
    let cy = s / 2.0 + stream.uniform_range(-4.0, 4.0);
    let r = stream.uniform_range(0.22 * s, 0.38 * s);
    let period = stream.uniform_range(5.0, 8.0);
    let phase = stream.uniform_range(0.0, period);
    let bar = stream.uniform_range(1.5, 2.5);

    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = match class {
                0 => dx * dx + dy * dy <= r * r,
                1 => dx.abs().max(dy.abs()) <= r * 0.85,
                2 => {
                    // Upward triangle: widens toward the bottom edge.
                    dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0
                }
                3 => {
                    let d2 = (dx * dx + dy * dy).sqrt();
                    d2 <= r && d2 >= 0.55 * r
                }
                4 => ((y as f64 + phase) / period).floor() as i64 % 2 == 0,
                5 => ((x as f64 + phase) / period).floor() as i64 % 2 == 0,
                6 => {
                    (dx.abs() <= bar && dy.abs() <= r) || (dy.abs() <= bar && dx.abs() <= r)
                }
                7 => {
                    dx.abs().max(dy.abs()) <= r
                        && ((dx - dy).abs() <= bar * 1.5 || (dx + dy).abs() <= bar * 1.5)
                }
                8 => {
                    (((x as f64 + phase) / period).floor() as i64
                        + ((y as f64 + phase) / period).floor() as i64)
                        % 2
                        == 0
                }
                9 => dx.abs() + dy.abs() <= r,
                _ => unreachable!("class out of range"),
            };
            for c in 0..3 {
                let noise = stream.gaussian(0.0, 0.04);
                let v = if inside { fg[c] } else { base[c] } + noise;
                data[(c * size + y) * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("image shape")
}

/// Uniform sample without replacement, for the real-data calibration arm.
pub fn real_calibration_subset(
    dataset: &ToyDataset,
    n: usize,
    seed: u64,
) -> Result<Vec<Tensor>, DataError> {
    if n > dataset.images.len() {
        return Err(DataError::SubsetTooLarge {
            requested: n,
            available: dataset.images.len(),
        });
    }
    let mut order: Vec<usize> = (0..dataset.images.len()).collect();
    let mut stream = SeedStream::new(derive_seed(seed, &[0x737562]));
    stream.shuffle(&mut order);
    Ok(order[..n]
        .iter()
        .map(|&i| dataset.images[i].detached())
        .collect())
}

/// Unoptimized per-pixel Gaussian images with the same init convention as
/// synthesis (mean 0.5, std 0.25, clipped to [0, 1]).
pub fn gaussian_noise_images(
    n: usize,
    image_size: usize,
    seed: u64,
    mean: f64,
    std: f64,
) -> Vec<Tensor> {
    (0..n)
        .map(|idx| {
            let mut stream = SeedStream::new(derive_seed(seed, &[0x6e6f697365, idx as u64]));
            gaussian_image(&mut stream, 3, image_size, mean, std, true)
        })
        .collect()
}
