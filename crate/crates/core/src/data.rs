//! In-memory datasets and the synthetic generators used for the fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A batch of samples with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N×…` samples.
    pub inputs: Tensor,
    pub labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Option<Vec<u32>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != inputs.batch_size() {
                return Err(Error::Data(format!(
                    "{} labels for {} samples",
                    l.len(),
                    inputs.batch_size()
                )));
            }
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.batch_size()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.inputs.sample_shape()
    }

    pub fn labels_required(&self) -> Result<&[u32]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Data("dataset has no labels".into()))
    }

    /// One more than the largest label (0 when unlabeled).
    pub fn classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m as usize + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_samples(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Splits off the first `fraction` of samples; the rest is the second part.
    pub fn split(&self, fraction: f64) -> (Dataset, Dataset) {
        let cut = ((self.len() as f64) * fraction).round() as usize;
        let first: Vec<usize> = (0..cut).collect();
        let second: Vec<usize> = (cut..self.len()).collect();
        (self.subset(&first), self.subset(&second))
    }

    /// `n` distinct samples drawn with a seeded shuffle.
    pub fn sample_subset(&self, n: usize, seed: u64) -> Dataset {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n.min(self.len()));
        self.subset(&idx)
    }
}

/// Gaussian blobs in `dim` dimensions, one well-separated centre per class.
pub fn blobs(n: usize, classes: usize, dim: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect())
        .collect();
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        data.extend(centres[class].iter().map(|c| c + noise.sample(&mut rng)));
        labels.push(class as u32);
    }
    Dataset {
        inputs: Tensor::new(vec![n, dim], data).unwrap(),
        labels: Some(labels),
    }
}

/// Side length of the synthetic digit images.
pub const DIGIT_SIZE: usize = 16;

/// Stroke skeletons for the ten digit classes in a unit box (x right, y down).
fn digit_strokes(class: usize) -> Vec<Vec<(f64, f64)>> {
    let arc = |cx: f64, cy: f64, rx: f64, ry: f64, a0: f64, a1: f64, steps: usize| {
        (0..=steps)
            .map(|k| {
                let a = (a0 + (a1 - a0) * k as f64 / steps as f64).to_radians();
                (cx + rx * a.cos(), cy + ry * a.sin())
            })
            .collect::<Vec<_>>()
    };
    match class {
        0 => vec![arc(0.5, 0.5, 0.28, 0.4, 0.0, 360.0, 12)],
        1 => vec![
            vec![(0.35, 0.25), (0.55, 0.1), (0.55, 0.9)],
            vec![(0.35, 0.9), (0.75, 0.9)],
        ],
        2 => {
            let mut s = arc(0.5, 0.32, 0.25, 0.22, 200.0, 380.0, 6);
            s.extend([(0.25, 0.9), (0.78, 0.9)]);
            vec![s]
        }
        3 => vec![
            arc(0.48, 0.3, 0.24, 0.2, 200.0, 450.0, 7),
            arc(0.48, 0.7, 0.27, 0.2, 270.0, 520.0, 7),
        ],
        4 => vec![vec![(0.62, 0.9), (0.62, 0.1), (0.22, 0.65), (0.8, 0.65)]],
        5 => {
            let mut s = vec![(0.75, 0.1), (0.3, 0.1), (0.28, 0.45)];
            s.extend(arc(0.48, 0.65, 0.27, 0.25, 230.0, 490.0, 8));
            vec![s]
        }
        6 => {
            let mut s = vec![(0.68, 0.1), (0.35, 0.4)];
            s.extend(arc(0.5, 0.67, 0.23, 0.23, 200.0, 560.0, 10));
            vec![s]
        }
        7 => vec![
            vec![(0.22, 0.1), (0.78, 0.1), (0.42, 0.9)],
            vec![(0.38, 0.5), (0.68, 0.5)],
        ],
        8 => vec![
            arc(0.5, 0.3, 0.2, 0.2, 0.0, 360.0, 10),
            arc(0.5, 0.7, 0.25, 0.2, 0.0, 360.0, 10),
        ],
        _ => {
            let mut s = arc(0.5, 0.33, 0.23, 0.23, 0.0, 360.0, 10);
            s.extend([(0.73, 0.33), (0.55, 0.9)]);
            vec![s]
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Ten-class handwritten-style digits, `1×16×16`, values roughly in `[0, 1]`.
///
/// Each sample is a stroke skeleton under a random affine jitter (scale,
/// rotation, shear, shift) rendered with random stroke width and contrast,
/// plus one short distractor stroke and pixel noise.
pub fn digits(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixel_noise = Normal::new(0.0, 0.08).unwrap();
    let size = DIGIT_SIZE as f64;
    let mut data = Vec::with_capacity(n * DIGIT_SIZE * DIGIT_SIZE);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.gen_range(0..10);
        let scale = rng.gen_range(0.72..1.0);
        let aspect = rng.gen_range(0.85..1.15);
        let rot = rng.gen_range(-0.25f64..0.25);
        let shear = rng.gen_range(-0.25..0.25);
        let (tx, ty) = (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
        let width = rng.gen_range(0.6..1.3);
        let ink = rng.gen_range(0.6..1.0);
        let map = |(x, y): (f64, f64)| {
            let (u, v) = ((x - 0.5) * scale * aspect, (y - 0.5) * scale);
            let u = u + shear * v;
            let (c, s) = (rot.cos(), rot.sin());
            let (u, v) = (c * u - s * v, s * u + c * v);
            (size * (0.5 + u) + tx, size * (0.5 + v) + ty)
        };
        let mut strokes: Vec<Vec<(f64, f64)>> = digit_strokes(class)
            .into_iter()
            .map(|s| s.into_iter().map(map).collect())
            .collect();
        let (ax, ay) = (rng.gen_range(0.0..size), rng.gen_range(0.0..size));
        let ang = rng.gen_range(0.0..std::f64::consts::TAU);
        let len = rng.gen_range(1.5..3.5);
        strokes.push(vec![(ax, ay), (ax + len * ang.cos(), ay + len * ang.sin())]);

        for py in 0..DIGIT_SIZE {
            for px in 0..DIGIT_SIZE {
                let p = (px as f64 + 0.5, py as f64 + 0.5);
                let d = strokes
                    .iter()
                    .flat_map(|s| s.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                    .fold(f64::INFINITY, f64::min);
                let v = ink * (1.0 - (d - width * 0.5).max(0.0) / 0.9).clamp(0.0, 1.0);
                data.push(v + pixel_noise.sample(&mut rng));
            }
        }
        labels.push(class as u32);
    }
    Dataset {
        inputs: Tensor::new(vec![n, 1, DIGIT_SIZE, DIGIT_SIZE], data).unwrap(),
        labels: Some(labels),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(digits(8, 3), digits(8, 3));
        assert_ne!(digits(8, 3), digits(8, 4));
        assert_eq!(blobs(10, 3, 2, 1), blobs(10, 3, 2, 1));
    }

    #[test]
    fn digits_cover_all_classes() {
        let d = digits(300, 1);
        assert_eq!(d.classes(), 10);
        assert_eq!(d.sample_shape(), &[1, 16, 16]);
        assert!(d.inputs.is_finite());
    }

    #[test]
    fn split_and_subset() {
        let d = blobs(10, 2, 3, 0);
        let (a, b) = d.split(0.7);
        assert_eq!((a.len(), b.len()), (7, 3));
        let s = d.sample_subset(4, 9);
        assert_eq!(s.len(), 4);
        assert_eq!(s, d.sample_subset(4, 9));
        assert_eq!(d.take(20).len(), 10);
    }
}
