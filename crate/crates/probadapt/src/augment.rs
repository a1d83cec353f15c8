//! Intensity augmentations for self-training: Gaussian blur, additive
//! noise and contrast scaling. All geometry is left untouched so teacher
//! and student predictions stay pixel-aligned; every draw comes from the
//! caller's seeded generator.

use crate::error::Result;
use crate::image::ImagePatch;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// One augmentation policy. Each transform fires independently with its
/// probability, drawing its parameter uniformly from the given range.
/// Application order: blur, then noise, then contrast.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationSpec {
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub noise_prob: f64,
    pub noise_sigma: (f64, f64),
    pub contrast_prob: f64,
    pub contrast_gamma: (f64, f64),
}

impl AugmentationSpec {
    /// Mild distortions; the teacher view and the mean-teacher student view.
    pub fn weak() -> Self {
        Self {
            blur_prob: 0.25,
            blur_sigma: (0.5, 1.5),
            noise_prob: 0.25,
            noise_sigma: (0.01, 0.05),
            contrast_prob: 0.0,
            contrast_gamma: (1.0, 1.0),
        }
    }

    /// Heavy distortions for the fixmatch student view.
    pub fn strong() -> Self {
        Self {
            blur_prob: 0.5,
            blur_sigma: (0.5, 3.0),
            noise_prob: 0.5,
            noise_sigma: (0.02, 0.1),
            contrast_prob: 0.5,
            contrast_gamma: (0.6, 1.4),
        }
    }

    /// Never fires; augment() becomes the identity.
    pub fn identity() -> Self {
        Self {
            blur_prob: 0.0,
            blur_sigma: (1.0, 1.0),
            noise_prob: 0.0,
            noise_sigma: (0.0, 0.0),
            contrast_prob: 0.0,
            contrast_gamma: (1.0, 1.0),
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

/// Applies the policy to one patch. The result is clamped back into
/// `[0, 1]`.
pub fn augment(x: &ImagePatch, spec: &AugmentationSpec, rng: &mut ChaCha8Rng) -> Result<ImagePatch> {
    let mut pixels = x.pixels().clone();
    if rng.random::<f64>() < spec.blur_prob {
        let sigma = draw(rng, spec.blur_sigma);
        pixels = gaussian_blur(&pixels, sigma);
    }
    if rng.random::<f64>() < spec.noise_prob {
        let sigma = draw(rng, spec.noise_sigma);
        pixels.map_inplace(|v| {
            let n: f64 = rng.sample(StandardNormal);
            *v += sigma * n;
        });
    }
    if rng.random::<f64>() < spec.contrast_prob {
        let gamma = draw(rng, spec.contrast_gamma);
        pixels.map_inplace(|v| *v = gamma * (*v - 0.5) + 0.5);
    }
    ImagePatch::clamped(pixels)
}

pub fn weak_augment(x: &ImagePatch, rng: &mut ChaCha8Rng) -> Result<ImagePatch> {
    augment(x, &AugmentationSpec::weak(), rng)
}

pub fn strong_augment(x: &ImagePatch, rng: &mut ChaCha8Rng) -> Result<ImagePatch> {
    augment(x, &AugmentationSpec::strong(), rng)
}

/// Mirror an index into `[0, n)`, repeating the border pixel
/// (`…, x1, x0 | x0, x1, …`). Handles kernels wider than the image by
/// bouncing repeatedly.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with kernel half-width `ceil(3 sigma)` and
/// reflected borders.
pub fn gaussian_blur(x: &Array2<f64>, sigma: f64) -> Array2<f64> {
    assert!(sigma > 0.0, "blur sigma must be positive");
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * r + 1) as usize);
    for i in -r..=r {
        kernel.push((-(i * i) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let (h, w) = x.dim();
    let mut rows = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let jj = reflect(j as isize + ki as isize - r, w);
                acc += kv * x[[i, jj]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let ii = reflect(i as isize + ki as isize - r, h);
                acc += kv * rows[[ii, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, Stream};
    use proptest::prelude::*;

    fn random_patch(seed: u64, h: usize, w: usize) -> ImagePatch {
        let mut rng = derive_rng(seed, Stream::Generator, 51, 0);
        ImagePatch::new(Array2::from_shape_fn((h, w), |_| rng.random::<f64>())).unwrap()
    }

    /// Naive 2-D convolution with the same reflected border; the blur
    /// oracle.
    fn blur_oracle(x: &Array2<f64>, sigma: f64) -> Array2<f64> {
        let r = (3.0 * sigma).ceil() as isize;
        let mut k1 = Vec::new();
        for i in -r..=r {
            k1.push((-(i * i) as f64 / (2.0 * sigma * sigma)).exp());
        }
        let norm: f64 = k1.iter().sum();
        let (h, w) = x.dim();
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut acc = 0.0;
            for (a, &ka) in k1.iter().enumerate() {
                for (b, &kb) in k1.iter().enumerate() {
                    let ii = reflect(i as isize + a as isize - r, h);
                    let jj = reflect(j as isize + b as isize - r, w);
                    acc += ka * kb * x[[ii, jj]] / (norm * norm);
                }
            }
            acc
        })
    }

    #[test]
    fn separable_blur_matches_full_convolution() {
        let x = random_patch(1, 9, 7).into_pixels();
        for sigma in [0.5, 1.0, 2.3] {
            let fast = gaussian_blur(&x, sigma);
            let slow = blur_oracle(&x, sigma);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12, "sigma {sigma}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let x = Array2::from_elem((6, 6), 0.37);
        let y = gaussian_blur(&x, 4.0); // kernel wider than the image
        for v in y.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_reduces_total_variation() {
        let x = random_patch(2, 16, 16).into_pixels();
        let y = gaussian_blur(&x, 1.0);
        let tv = |m: &Array2<f64>| -> f64 {
            let (h, w) = m.dim();
            let mut s = 0.0;
            for i in 0..h {
                for j in 1..w {
                    s += (m[[i, j]] - m[[i, j - 1]]).abs();
                }
            }
            for i in 1..h {
                for j in 0..w {
                    s += (m[[i, j]] - m[[i - 1, j]]).abs();
                }
            }
            s
        };
        assert!(tv(&y) < tv(&x));
    }

    #[test]
    fn identity_spec_returns_input_unchanged() {
        let x = random_patch(3, 8, 8);
        let mut rng = derive_rng(3, Stream::StudentAugment, 0, 0);
        let y = augment(&x, &AugmentationSpec::identity(), &mut rng).unwrap();
        assert_eq!(x.pixels(), y.pixels());
    }

    #[test]
    fn augment_is_deterministic_per_stream() {
        let x = random_patch(4, 8, 8);
        let a = strong_augment(&x, &mut derive_rng(4, Stream::StudentAugment, 9, 9)).unwrap();
        let b = strong_augment(&x, &mut derive_rng(4, Stream::StudentAugment, 9, 9)).unwrap();
        assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn fixed_contrast_matches_formula() {
        let x = random_patch(5, 6, 6);
        let spec = AugmentationSpec {
            blur_prob: 0.0,
            blur_sigma: (1.0, 1.0),
            noise_prob: 0.0,
            noise_sigma: (0.0, 0.0),
            contrast_prob: 1.0,
            contrast_gamma: (0.6, 0.6),
        };
        let mut rng = derive_rng(5, Stream::StudentAugment, 0, 0);
        let y = augment(&x, &spec, &mut rng).unwrap();
        for (&a, &b) in x.pixels().iter().zip(y.pixels().iter()) {
            let expect = (0.6 * (a - 0.5) + 0.5).clamp(0.0, 1.0);
            assert!((b - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn strong_distorts_more_than_weak_on_average() {
        let x = random_patch(6, 16, 16);
        let l1 = |a: &ImagePatch, b: &ImagePatch| -> f64 {
            a.pixels()
                .iter()
                .zip(b.pixels().iter())
                .map(|(p, q)| (p - q).abs())
                .sum()
        };
        let mut weak_sum = 0.0;
        let mut strong_sum = 0.0;
        for t in 0..300 {
            let w = weak_augment(&x, &mut derive_rng(6, Stream::TeacherAugment, t, 0)).unwrap();
            let s = strong_augment(&x, &mut derive_rng(6, Stream::StudentAugment, t, 0)).unwrap();
            weak_sum += l1(&x, &w);
            strong_sum += l1(&x, &s);
        }
        assert!(
            strong_sum > 1.5 * weak_sum,
            "strong {strong_sum:.2} vs weak {weak_sum:.2}"
        );
    }

    proptest! {
        #[test]
        fn outputs_stay_in_unit_interval(seed in 0u64..2_000) {
            let x = random_patch(seed, 8, 8);
            let y = strong_augment(&x, &mut derive_rng(seed, Stream::StudentAugment, 1, 1)).unwrap();
            for &v in y.pixels().iter() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn reflect_stays_in_bounds(i in -100isize..100, n in 1usize..12) {
            let r = reflect(i, n);
            prop_assert!(r < n);
        }
    }
}
