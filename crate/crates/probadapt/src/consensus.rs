//! Consensus response: per-pixel agreement across latent samples, used to
//! filter teacher pseudo-labels.
//!
//! A sample *responds* at a pixel when any class probability there reaches
//! the threshold. The consensus response is the fraction of samples that
//! respond. Fully agreeing pixels (consensus exactly 1) are the ones a
//! hard mask keeps; a soft variant uses the fraction itself as the loss
//! weight.

use crate::error::{Error, Result};
use crate::image::SegmentationOutput;
use ndarray::Array2;

/// How consensus turns into per-pixel loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Keep only pixels where every sample responds: `w = [c == 1]`.
    Mask,
    /// Weight each pixel by its consensus: `w = c`.
    Weight,
    /// No filtering: `w = 1` everywhere.
    NoFilter,
}

/// Fraction of samples whose prediction responds at each pixel, i.e. has
/// any class probability `>= threshold` there. Output values are multiples
/// of `1 / samples.len()` in `[0, 1]`.
pub fn consensus_response(samples: &[SegmentationOutput], threshold: f64) -> Result<Array2<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("consensus needs at least one sample".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidInput(format!(
            "consensus threshold must lie in [0, 1], got {threshold}"
        )));
    }
    let shape = samples[0].spatial_shape();
    let classes = samples[0].classes();
    for s in &samples[1..] {
        if s.spatial_shape() != shape || s.classes() != classes {
            return Err(Error::shape_mismatch(
                "consensus samples",
                (classes, shape.0, shape.1),
                (s.classes(), s.spatial_shape().0, s.spatial_shape().1),
            ));
        }
    }
    let n = samples.len() as f64;
    let mut counts = Array2::<f64>::zeros(shape);
    for s in samples {
        let probs = s.probabilities();
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let responds = (0..classes).any(|k| probs[[k, i, j]] >= threshold);
                if responds {
                    counts[[i, j]] += 1.0;
                }
            }
        }
    }
    counts /= n;
    Ok(counts)
}

/// Per-pixel loss weights from a consensus map.
pub fn filter_weights(consensus: &Array2<f64>, mode: FilterMode) -> Array2<f64> {
    match mode {
        // count == n makes the division exact, so comparing against 1.0 is safe
        FilterMode::Mask => consensus.map(|&c| if c == 1.0 { 1.0 } else { 0.0 }),
        FilterMode::Weight => consensus.clone(),
        FilterMode::NoFilter => Array2::ones(consensus.dim()),
    }
}

/// Fraction of pixels whose weight is exactly zero (excluded from the loss).
pub fn masked_fraction(weights: &Array2<f64>) -> f64 {
    let zeros = weights.iter().filter(|&&w| w == 0.0).count();
    zeros as f64 / weights.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, Stream};
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::Rng;

    /// Levels used to exercise every interesting ordering against the
    /// thresholds 0.3 / 0.5 / 0.7.
    const LEVELS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

    fn quantized_samples(seed: u64, n: usize, k: usize, h: usize, w: usize) -> Vec<SegmentationOutput> {
        let mut rng = derive_rng(seed, Stream::Generator, 31, 0);
        (0..n)
            .map(|_| {
                SegmentationOutput::new(Array3::from_shape_fn((k, h, w), |_| {
                    LEVELS[rng.random_range(0..LEVELS.len())]
                }))
                .unwrap()
            })
            .collect()
    }

    /// Literal transcription of the definition, recomputed per pixel.
    fn oracle(samples: &[SegmentationOutput], theta: f64) -> Array2<f64> {
        let (h, w) = samples[0].spatial_shape();
        let k = samples[0].classes();
        Array2::from_shape_fn((h, w), |(i, j)| {
            let hits = samples
                .iter()
                .filter(|s| (0..k).any(|c| s.probabilities()[[c, i, j]] >= theta))
                .count();
            hits as f64 / samples.len() as f64
        })
    }

    #[test]
    fn matches_per_pixel_oracle() {
        for seed in 0..30 {
            let n = 1 + (seed as usize % 3);
            let k = 1 + (seed as usize % 2);
            let samples = quantized_samples(seed, n, k, 4, 4);
            for theta in [0.3, 0.5, 0.7] {
                let got = consensus_response(&samples, theta).unwrap();
                assert_eq!(got, oracle(&samples, theta), "seed {seed} theta {theta}");
            }
        }
    }

    #[test]
    fn single_sample_mask_is_thresholding() {
        let mut rng = derive_rng(77, Stream::Generator, 32, 0);
        for _ in 0..200 {
            let probs = Array3::from_shape_fn((1, 5, 5), |_| rng.random::<f64>());
            let sample = SegmentationOutput::new(probs.clone()).unwrap();
            let theta = rng.random::<f64>();
            let c = consensus_response(std::slice::from_ref(&sample), theta).unwrap();
            let mask = filter_weights(&c, FilterMode::Mask);
            for i in 0..5 {
                for j in 0..5 {
                    let expect = if probs[[0, i, j]] >= theta { 1.0 } else { 0.0 };
                    assert_eq!(mask[[i, j]], expect);
                }
            }
        }
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(consensus_response(&[], 0.5).is_err());
        let a = SegmentationOutput::new(Array3::zeros((1, 4, 4))).unwrap();
        let b = SegmentationOutput::new(Array3::zeros((1, 2, 2))).unwrap();
        assert!(consensus_response(&[a, b], 0.5).is_err());
    }

    #[test]
    fn rejects_threshold_outside_unit_interval() {
        let s = SegmentationOutput::new(Array3::zeros((1, 2, 2))).unwrap();
        assert!(consensus_response(std::slice::from_ref(&s), 1.5).is_err());
        assert!(consensus_response(std::slice::from_ref(&s), -0.1).is_err());
    }

    #[test]
    fn no_filter_keeps_everything() {
        let samples = quantized_samples(5, 3, 1, 4, 4);
        let c = consensus_response(&samples, 0.5).unwrap();
        let w = filter_weights(&c, FilterMode::NoFilter);
        assert!(w.iter().all(|&v| v == 1.0));
        assert_eq!(masked_fraction(&w), 0.0);
    }

    #[test]
    fn masked_fraction_counts_exact_zeros() {
        let mut w = Array2::ones((2, 2));
        w[[0, 0]] = 0.0;
        w[[1, 1]] = 0.0;
        assert_eq!(masked_fraction(&w), 0.5);
    }

    proptest! {
        #[test]
        fn consensus_is_quantized_and_monotone(seed in 0u64..5_000, n in 1usize..6) {
            let samples = quantized_samples(seed, n, 1, 3, 3);
            let lo = consensus_response(&samples, 0.3).unwrap();
            let hi = consensus_response(&samples, 0.7).unwrap();
            for (&a, &b) in lo.iter().zip(hi.iter()) {
                // raising the threshold can only lose responders
                prop_assert!(a >= b);
            }
            for &c in lo.iter().chain(hi.iter()) {
                let scaled = c * n as f64;
                prop_assert!((scaled - scaled.round()).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&c));
            }
        }

        #[test]
        fn mask_weights_are_binary(seed in 0u64..5_000) {
            let samples = quantized_samples(seed, 4, 2, 3, 3);
            let c = consensus_response(&samples, 0.5).unwrap();
            let w = filter_weights(&c, FilterMode::Mask);
            for (&wi, &ci) in w.iter().zip(c.iter()) {
                prop_assert!(wi == 0.0 || wi == 1.0);
                prop_assert_eq!(wi == 1.0, ci == 1.0);
            }
        }
    }
}
