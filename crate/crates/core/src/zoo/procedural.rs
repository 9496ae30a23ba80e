//! Procedural content families standing in for natural-image datasets.
//! Every sample lies in [-1, 1].

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContentFamily {
    Blobs,
    Checker,
    Stripes,
}

impl ContentFamily {
    pub const ALL: [ContentFamily; 3] = [ContentFamily::Blobs, ContentFamily::Checker, ContentFamily::Stripes];

    pub fn name(self) -> &'static str {
        match self {
            ContentFamily::Blobs => "blobs",
            ContentFamily::Checker => "checker",
            ContentFamily::Stripes => "stripes",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One `[C, H, W]` sample, row-major, channels identical.
pub fn sample_target<R: Rng>(family: ContentFamily, image: [usize; 3], rng: &mut R) -> Vec<f64> {
    let [c, h, w] = image;
    let scale = h.min(w) as f64 / 16.0;
    let plane: Vec<f64> = match family {
        ContentFamily::Blobs => {
            let n = rng.gen_range(1..=3);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.gen_range(0.2..0.8) * h as f64,
                        rng.gen_range(0.2..0.8) * w as f64,
                        rng.gen_range(1.5..3.5) * scale,
                        rng.gen_range(0.6..1.0),
                    )
                })
                .collect();
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    let v: f64 = blobs
                        .iter()
                        .map(|&(cy, cx, s, a)| a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp())
                        .sum();
                    2.0 * v.min(1.0) - 1.0
                })
                .collect()
        }
        ContentFamily::Checker => {
            let period = rng.gen_range(3.0..6.0) * scale;
            let (py, px) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    let s = (PI * y / period + py).sin() * (PI * x / period + px).sin();
                    0.8 * (4.0 * s).tanh()
                })
                .collect()
        }
        ContentFamily::Stripes => {
            let freq = rng.gen_range(1.5..4.0);
            let theta = rng.gen_range(0.0..PI);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let side = h.min(w) as f64;
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    0.8 * (2.0 * PI * freq * (x * theta.cos() + y * theta.sin()) / side + phase).sin()
                })
                .collect()
        }
    };
    (0..c).flat_map(|_| plane.iter().copied()).collect()
}

/// `n` samples stacked into `[n, C, H, W]`.
pub fn sample_batch<T: Scalar, R: Rng>(family: ContentFamily, image: [usize; 3], n: usize, rng: &mut R) -> Tensor<T> {
    let [c, h, w] = image;
    let data = (0..n)
        .flat_map(|_| sample_target(family, image, rng))
        .map(T::c)
        .collect();
    Tensor::new(vec![n, c, h, w], data).expect("sample_target fills the declared shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn samples_in_range_and_seeded() {
        for fam in ContentFamily::ALL {
            let a: Tensor<f64> = sample_batch(fam, [1, 16, 16], 8, &mut rng_for(1, "t"));
            let b: Tensor<f64> = sample_batch(fam, [1, 16, 16], 8, &mut rng_for(1, "t"));
            assert_eq!(a, b);
            assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(a.data().iter().any(|&v| v > -0.9), "{fam:?} is blank");
        }
    }
}
