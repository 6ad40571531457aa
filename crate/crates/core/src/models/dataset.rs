//! Procedural texture classes for the built-in classifier.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::imaging::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TextureClass {
    HorizontalStripes,
    VerticalStripes,
    Checkerboard,
    RadialGradient,
    UniformSpeckle,
    LargeBlobs,
}

impl TextureClass {
    pub const ALL: [TextureClass; 6] = [
        TextureClass::HorizontalStripes,
        TextureClass::VerticalStripes,
        TextureClass::Checkerboard,
        TextureClass::RadialGradient,
        TextureClass::UniformSpeckle,
        TextureClass::LargeBlobs,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TextureClass::HorizontalStripes => "horizontal_stripes",
            TextureClass::VerticalStripes => "vertical_stripes",
            TextureClass::Checkerboard => "checkerboard",
            TextureClass::RadialGradient => "radial_gradient",
            TextureClass::UniformSpeckle => "uniform_speckle",
            TextureClass::LargeBlobs => "large_blobs",
        }
    }

    /// Directory name whose lexicographic order matches [`TextureClass::index`].
    pub fn dir_name(self) -> String {
        format!("{}_{}", self.index(), self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub images: Vec<LabeledImage>,
    pub size: usize,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_names() -> Vec<String> {
        TextureClass::ALL.iter().map(|c| c.name().to_string()).collect()
    }
}

/// `6 * n_per_class` square RGB images of side `size`, classes interleaved
/// (image `i` has label `i % 6`).
pub fn synth_dataset(n_per_class: usize, size: usize, seed: u64) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(6 * n_per_class);
    for _ in 0..n_per_class {
        for class in TextureClass::ALL {
            images.push(LabeledImage { image: render_texture(class, size, &mut rng), label: class.index() });
        }
    }
    SyntheticDataset { images, size, seed }
}

fn render_texture(class: TextureClass, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let size = size.max(1);
    let base = rng.gen_range(0.49..0.51);
    let amp = rng.gen_range(0.04..0.07);
    let phase_u = rng.gen_range(-0.3..0.3);
    let phase_v = rng.gen_range(-0.3..0.3);
    let shift: [f64; 2] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
    let gain: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.99..1.01));
    let speckle_cells = (size / 2).max(1);
    let speckle: Vec<f64> = match class {
        TextureClass::UniformSpeckle => (0..speckle_cells * speckle_cells).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        _ => Vec::new(),
    };
    let noise = Normal::new(0.0, 0.04).expect("valid sigma");
    let pixel_noise: Vec<f64> = (0..size * size).map(|_| noise.sample(rng)).collect();

    let blobs = [(0.3, 0.3), (0.7, 0.4), (0.45, 0.75)];
    let side = size as f64;
    Image::from_fn(size, size, 3, |y, x, c| {
        let u = (x as f64 + 0.5) / side;
        let v = (y as f64 + 0.5) / side;
        let pattern = match class {
            TextureClass::HorizontalStripes => (2.0 * PI * 3.0 * v + phase_v).sin(),
            TextureClass::VerticalStripes => (2.0 * PI * 3.0 * u + phase_u).sin(),
            TextureClass::Checkerboard => {
                (2.0 * (2.0 * PI * 2.0 * u + phase_u).sin() * (2.0 * PI * 2.0 * v + phase_v).sin()).clamp(-1.0, 1.0)
            }
            TextureClass::RadialGradient => {
                let r = ((u - 0.5 - shift[0]).powi(2) + (v - 0.5 - shift[1]).powi(2)).sqrt();
                (PI * (r / 0.7).min(1.0)).cos()
            }
            TextureClass::UniformSpeckle => {
                let cy = (y * speckle_cells / size).min(speckle_cells - 1);
                let cx = (x * speckle_cells / size).min(speckle_cells - 1);
                speckle[cy * speckle_cells + cx]
            }
            TextureClass::LargeBlobs => {
                let bump: f64 = blobs
                    .iter()
                    .map(|&(bu, bv)| {
                        let d2 = (u - bu - shift[0]).powi(2) + (v - bv - shift[1]).powi(2);
                        (-d2 / (2.0 * 0.12f64.powi(2))).exp()
                    })
                    .sum();
                2.0 * bump.min(1.0) - 1.0
            }
        };
        (base + amp * pattern) * gain[c] + pixel_noise[y * size + x]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = synth_dataset(4, 32, 9);
        assert_eq!(a, synth_dataset(4, 32, 9));
        assert_ne!(a, synth_dataset(4, 32, 10));
        assert_eq!(a.len(), 24);
        for class in 0..6 {
            assert_eq!(a.images.iter().filter(|l| l.label == class).count(), 4);
        }
        for l in &a.images {
            assert_eq!((l.image.height(), l.image.width(), l.image.channels()), (32, 32, 3));
            assert!(l.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn dir_names_sort_by_index() {
        let mut names: Vec<String> = TextureClass::ALL.iter().map(|c| c.dir_name()).collect();
        let expected = names.clone();
        names.sort();
        assert_eq!(names, expected);
        for (i, c) in TextureClass::ALL.iter().enumerate() {
            assert_eq!(TextureClass::from_index(i), Some(*c));
        }
    }

    #[test]
    fn nearest_mean_beats_chance() {
        let train = synth_dataset(20, 32, 1);
        let test = synth_dataset(10, 32, 2);
        let dim = 32 * 32 * 3;
        let mut means = vec![vec![0.0; dim]; 6];
        for l in &train.images {
            for (m, v) in means[l.label].iter_mut().zip(l.image.data()) {
                *m += v / 20.0;
            }
        }
        let correct = test
            .images
            .iter()
            .filter(|l| {
                let dist = |m: &Vec<f64>| m.iter().zip(l.image.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..6).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
                best == l.label
            })
            .count();
        assert!(correct as f64 / test.len() as f64 > 1.0 / 6.0, "accuracy {correct}/{}", test.len());
    }
}
