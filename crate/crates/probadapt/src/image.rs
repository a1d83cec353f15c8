//! Core grid types: intensity patches, binary label masks and per-class
//! probability maps. All images are single-channel with values in `[0, 1]`,
//! stored row-major as `(height, width)`.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};

/// A single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pixels: Array2<f64>,
}

impl ImagePatch {
    /// Validates that every value is finite and within `[0, 1]`.
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        for &v in pixels.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!(
                    "image value {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self { pixels })
    }

    /// Builds a patch from raw data, clamping into `[0, 1]`. Non-finite
    /// values are rejected.
    pub fn clamped(mut pixels: Array2<f64>) -> Result<Self> {
        for v in pixels.iter_mut() {
            if !v.is_finite() {
                return Err(Error::InvalidInput("non-finite image value".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }
}

/// A binary semantic mask, same shape as the image it annotates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pixels: Array2<u8>,
}

impl LabelMask {
    pub fn new(pixels: Array2<u8>) -> Result<Self> {
        if pixels.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput(
                "label mask values must be 0 or 1".into(),
            ));
        }
        Ok(Self { pixels })
    }

    /// Thresholds a probability grid: `p >= 0.5` becomes foreground.
    pub fn from_probabilities(probs: &Array2<f64>) -> Self {
        Self::from_probabilities_at(probs, 0.5).expect("0.5 is a valid threshold")
    }

    /// Binarize at an arbitrary threshold; ties (`p == threshold`) are
    /// foreground.
    pub fn from_probabilities_at(probs: &Array2<f64>, threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::InvalidInput(format!(
                "mask threshold must lie in [0, 1], got {threshold}"
            )));
        }
        Ok(Self {
            pixels: probs.map(|&p| u8::from(p >= threshold)),
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn pixels(&self) -> &Array2<u8> {
        &self.pixels
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v == 1).count()
    }

    /// The mask as one f64 plane per class; classes beyond the first are
    /// boundary channels derived by the caller.
    pub fn to_target(&self) -> Array3<f64> {
        let (h, w) = self.shape();
        let mut t = Array3::zeros((1, h, w));
        for ((r, c), &v) in self.pixels.indexed_iter() {
            t[[0, r, c]] = f64::from(v);
        }
        t
    }
}

/// Per-pixel, per-class probabilities after the final sigmoid,
/// stored as `(classes, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutput {
    probabilities: Array3<f64>,
}

impl SegmentationOutput {
    pub fn new(probabilities: Array3<f64>) -> Result<Self> {
        for &v in probabilities.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!(
                    "probability {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self { probabilities })
    }

    pub fn classes(&self) -> usize {
        self.probabilities.dim().0
    }

    pub fn height(&self) -> usize {
        self.probabilities.dim().1
    }

    pub fn width(&self) -> usize {
        self.probabilities.dim().2
    }

    pub fn spatial_shape(&self) -> (usize, usize) {
        let (_, h, w) = self.probabilities.dim();
        (h, w)
    }

    pub fn probabilities(&self) -> &Array3<f64> {
        &self.probabilities
    }

    /// First-class probability plane; the foreground channel for binary tasks.
    pub fn class_plane(&self, k: usize) -> Array2<f64> {
        self.probabilities.index_axis(ndarray::Axis(0), k).to_owned()
    }

    /// Elementwise mean of several outputs with identical shapes.
    pub fn mean_of(outputs: &[SegmentationOutput]) -> Result<SegmentationOutput> {
        let first = outputs
            .first()
            .ok_or_else(|| Error::InvalidInput("empty sample list".into()))?;
        let mut acc = first.probabilities.clone();
        for o in &outputs[1..] {
            if o.probabilities.dim() != first.probabilities.dim() {
                return Err(Error::shape_mismatch(
                    "mean of samples",
                    first.probabilities.dim(),
                    o.probabilities.dim(),
                ));
            }
            acc += &o.probabilities;
        }
        acc /= outputs.len() as f64;
        Ok(SegmentationOutput { probabilities: acc })
    }
}
