//! Deterministic synthetic flood/no-flood samples.
//!
//! Flood images carry a bright, smooth blob on a mid-grey background; dry
//! images carry a zero-mean checkerboard texture on the same background, so
//! at difficulty 0 the mean brightness alone separates the classes. Captions
//! draw from a flood band `[0, V/4)`, a dry band `[V/4, V/2)` and a neutral
//! band `[V/2, V)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BASE_BRIGHTNESS: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub tokens: Vec<usize>,
    /// `H × W × 3`.
    pub image: Tensor,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataShape {
    pub image_size: [usize; 2],
    pub n_t: usize,
    pub vocab: usize,
}

impl From<&ModelConfig> for DataShape {
    fn from(c: &ModelConfig) -> Self {
        DataShape {
            image_size: c.image_size,
            n_t: c.n_t,
            vocab: c.vocab,
        }
    }
}

/// `n` samples, `⌈n/2⌉` of them floods, in a seed-determined order.
pub fn generate(n: usize, seed: u64, difficulty: f64, shape: DataShape) -> Result<Vec<SyntheticSample>> {
    if n < 2 {
        return Err(Error::Input(format!("need at least 2 samples, got {n}")));
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::Input(format!("difficulty {difficulty} outside [0, 1]")));
    }
    if shape.vocab < 4 || shape.n_t == 0 {
        return Err(Error::Input("vocabulary must have at least 4 ids and captions at least 1 token".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n.div_ceil(2))).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .map(|label| {
            Ok(SyntheticSample {
                tokens: caption(&mut rng, label, difficulty, shape),
                image: image(&mut rng, label, difficulty, shape.image_size)?,
                label,
            })
        })
        .collect()
}

fn caption(rng: &mut ChaCha8Rng, label: u8, d: f64, shape: DataShape) -> Vec<usize> {
    let band = shape.vocab / 4;
    let neutral = 0.3 + 0.5 * d;
    let flip = 0.5 * d;
    (0..shape.n_t)
        .map(|_| {
            if rng.gen::<f64>() < neutral {
                rng.gen_range(2 * band..shape.vocab)
            } else {
                let flood = (label == 1) != (rng.gen::<f64>() < flip);
                let start = if flood { 0 } else { band };
                rng.gen_range(start..start + band)
            }
        })
        .collect()
}

fn image(rng: &mut ChaCha8Rng, label: u8, d: f64, [h, w]: [usize; 2]) -> Result<Tensor> {
    let noise = Normal::new(0.0, 0.02 + 0.15 * d).expect("positive deviation");
    let base = BASE_BRIGHTNESS + 0.1 * d * rng.gen_range(-1.0..1.0);
    let mut data = vec![0.0; h * w * 3];
    if label == 1 {
        let amp = 0.6 * (1.0 - 0.5 * d);
        let sigma = h.min(w) as f64 / 6.0;
        let cy = rng.gen_range(h as f64 * 0.25..h as f64 * 0.75);
        let cx = rng.gen_range(w as f64 * 0.25..w as f64 * 0.75);
        let tint = [0.8, 0.9, 1.0];
        for y in 0..h {
            for x in 0..w {
                let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let blob = amp * (-r2 / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    data[(y * w + x) * 3 + c] = base + tint[c] * blob + noise.sample(rng);
                }
            }
        }
    } else {
        let amp = 0.2;
        let period = if rng.gen::<bool>() { 1 } else { 2 };
        for y in 0..h {
            for x in 0..w {
                let sign = if ((y / period) + (x / period)) % 2 == 0 { 1.0 } else { -1.0 };
                for c in 0..3 {
                    data[(y * w + x) * 3 + c] = base + sign * amp + noise.sample(rng);
                }
            }
        }
    }
    Tensor::new(&[h, w, 3], data)
}

/// Mean over every pixel and channel.
pub fn mean_brightness(image: &Tensor) -> f64 {
    image.mean()
}
